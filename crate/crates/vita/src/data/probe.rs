//! Basic-from-detailed determinism probe: a small GELU MLP trained to
//! reconstruct the 6 basic channels of a year (6 x 52) from the 25
//! detailed channels (25 x 52), reported as per-feature validation RMSE
//! and R^2. Near-perfect scores justify dropping the decoder term from the
//! fine-tuning objective.

use serde::{Deserialize, Serialize};

use super::synthetic::NUM_DETAILED;
use super::{detailed_channel_indices, WeatherGrid, BASIC_CHANNEL_INDICES};
use crate::encoder::NUM_BASIC;
use crate::error::{Result, VitaError};
use crate::numerics::rng;
use crate::numerics::{Tape, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::warmup_then_exp_decay;

const WEEKS: usize = 52;
const INPUT_DIM: usize = NUM_DETAILED * WEEKS; // 1300
const OUTPUT_DIM: usize = NUM_BASIC * WEEKS; // 312

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
    pub batch_size: usize,
    /// Fraction of grids held out for validation (at least one grid).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            hidden: 128,
            lr: 5e-4,
            warmup_epochs: 10,
            decay: 0.99,
            batch_size: 8,
            val_fraction: 0.25,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFeatureReport {
    pub feature: usize,
    pub rmse: f64,
    pub r2: f64,
}

/// One aligned yearly block: detailed `25 x 52` and basic `6 x 52`.
pub type ProbeSample = (Tensor, Tensor);

/// Extract aligned yearly blocks from grids; incomplete or invalid years
/// are skipped. Samples are tagged with their grid ordinal for splitting.
pub fn probe_samples(grids: &[WeatherGrid]) -> Vec<(usize, ProbeSample)> {
    let detail_idx = detailed_channel_indices();
    let mut out = Vec::new();
    for (gi, grid) in grids.iter().enumerate() {
        let mut rows_by_year: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
        for (r, &(year, _)) in grid.weeks.iter().enumerate() {
            rows_by_year.entry(year).or_default().push(r);
        }
        for rows in rows_by_year.values() {
            if rows.len() != WEEKS || rows.iter().any(|&r| !grid.valid[r]) {
                continue;
            }
            let mut u = Tensor::zeros(vec![NUM_DETAILED, WEEKS]);
            let mut x = Tensor::zeros(vec![NUM_BASIC, WEEKS]);
            for (w, &r) in rows.iter().enumerate() {
                for (i, &k) in detail_idx.iter().enumerate() {
                    u.set2(i, w, grid.values.at2(r, k));
                }
                for (j, &k) in BASIC_CHANNEL_INDICES.iter().enumerate() {
                    x.set2(j, w, grid.values.at2(r, k));
                }
            }
            out.push((gi, (u, x)));
        }
    }
    out
}

/// Run the probe on grids, splitting train/validation by grid.
pub fn determinism_probe(grids: &[WeatherGrid], cfg: &ProbeConfig) -> Result<Vec<ProbeFeatureReport>> {
    let tagged = probe_samples(grids);
    if tagged.is_empty() {
        return Err(VitaError::InvalidData("no complete years for the probe".into()));
    }
    let num_grids = grids.len();
    let val_grids = ((num_grids as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, num_grids.saturating_sub(1).max(1));
    let val_from = num_grids - val_grids;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (gi, sample) in tagged {
        if gi >= val_from {
            val.push(sample);
        } else {
            train.push(sample);
        }
    }
    probe_on_samples(&train, &val, cfg)
}

/// Core probe loop on explicit train/validation samples (exposed so the
/// shuffled-pairing control test can break the correspondence).
pub fn probe_on_samples(
    train: &[ProbeSample],
    val: &[ProbeSample],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeFeatureReport>> {
    if train.len() < 2 {
        return Err(VitaError::InvalidData(format!(
            "probe needs at least 2 training years, got {}",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(VitaError::InvalidData("probe needs a validation split".into()));
    }

    // Per-channel z-scoring statistics from the training split.
    let channel_stats = |take: &dyn Fn(&ProbeSample) -> &Tensor, channels: usize| {
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut n = 0usize;
        for s in train {
            let t = take(s);
            for c in 0..channels {
                for w in 0..WEEKS {
                    mean[c] += t.at2(c, w);
                    sq[c] += t.at2(c, w) * t.at2(c, w);
                }
            }
            n += WEEKS;
        }
        let n = n as f64;
        let mean: Vec<f64> = mean.into_iter().map(|m| m / n).collect();
        let std: Vec<f64> = sq
            .into_iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(1e-24).sqrt())
            .collect();
        (mean, std)
    };
    let (u_mean, u_std) = channel_stats(&|s| &s.0, NUM_DETAILED);
    let (x_mean, x_std) = channel_stats(&|s| &s.1, NUM_BASIC);

    let flatten_u = |u: &Tensor| {
        let mut row = Vec::with_capacity(INPUT_DIM);
        for c in 0..NUM_DETAILED {
            for w in 0..WEEKS {
                row.push((u.at2(c, w) - u_mean[c]) / u_std[c]);
            }
        }
        row
    };
    let flatten_x = |x: &Tensor| {
        let mut row = Vec::with_capacity(OUTPUT_DIM);
        for c in 0..NUM_BASIC {
            for w in 0..WEEKS {
                row.push((x.at2(c, w) - x_mean[c]) / x_std[c]);
            }
        }
        row
    };
    let train_u: Vec<Vec<f64>> = train.iter().map(|s| flatten_u(&s.0)).collect();
    let train_x: Vec<Vec<f64>> = train.iter().map(|s| flatten_x(&s.1)).collect();

    // 1300 -> hidden (GELU) -> 312
    let mut param_rng = rng::stream(cfg.seed, 0);
    let scale1 = 1.0 / (INPUT_DIM as f64).sqrt();
    let scale2 = 1.0 / (cfg.hidden as f64).sqrt();
    let mut w1 = Tensor::new(
        vec![INPUT_DIM, cfg.hidden],
        (0..INPUT_DIM * cfg.hidden).map(|_| rng::standard_normal(&mut param_rng) * scale1).collect(),
    );
    let mut b1 = Tensor::zeros(vec![cfg.hidden]);
    let mut w2 = Tensor::new(
        vec![cfg.hidden, OUTPUT_DIM],
        (0..cfg.hidden * OUTPUT_DIM).map(|_| rng::standard_normal(&mut param_rng) * scale2).collect(),
    );
    let mut b2 = Tensor::zeros(vec![OUTPUT_DIM]);

    let mut adam = Adam::new(AdamConfig { clip_norm: None, ..AdamConfig::default() });
    use rand::seq::SliceRandom as _;
    for epoch in 0..cfg.epochs {
        let lr = warmup_then_exp_decay(epoch, cfg.warmup_epochs, cfg.lr, cfg.decay);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let b = chunk.len();
            let mut xs = Vec::with_capacity(b * INPUT_DIM);
            let mut ys = Vec::with_capacity(b * OUTPUT_DIM);
            for &i in chunk {
                xs.extend_from_slice(&train_u[i]);
                ys.extend_from_slice(&train_x[i]);
            }
            let tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![b, INPUT_DIM], xs));
            let y = tape.leaf(Tensor::new(vec![b, OUTPUT_DIM], ys));
            let vw1 = tape.leaf(w1.clone());
            let vb1 = tape.leaf(b1.clone());
            let vw2 = tape.leaf(w2.clone());
            let vb2 = tape.leaf(b2.clone());
            let pred = x.matmul(&vw1).add_row(&vb1).gelu().matmul(&vw2).add_row(&vb2);
            let loss = pred.sub(&y).sqr().sum_all().mul_scalar(1.0 / (b * OUTPUT_DIM) as f64);
            let mut grads = loss.backward();
            let mut g = vec![
                grads.take(&vw1).unwrap(),
                grads.take(&vb1).unwrap(),
                grads.take(&vw2).unwrap(),
                grads.take(&vb2).unwrap(),
            ];
            adam.step(&mut [&mut w1, &mut b1, &mut w2, &mut b2], &mut g, lr);
        }
    }

    // Per-feature validation metrics in z-scored units.
    let mut ss_res = vec![0.0; NUM_BASIC];
    let mut se_count = 0usize;
    let mut truths: Vec<Vec<f64>> = vec![Vec::new(); NUM_BASIC];
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); NUM_BASIC];
    for sample in val {
        let xs = flatten_u(&sample.0);
        let ys = flatten_x(&sample.1);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, INPUT_DIM], xs));
        let pred = x
            .matmul(&tape.leaf(w1.clone()))
            .add_row(&tape.leaf(b1.clone()))
            .gelu()
            .matmul(&tape.leaf(w2.clone()))
            .add_row(&tape.leaf(b2.clone()));
        for c in 0..NUM_BASIC {
            for w in 0..WEEKS {
                let p = pred.value().at2(0, c * WEEKS + w);
                let t = ys[c * WEEKS + w];
                ss_res[c] += (p - t) * (p - t);
                truths[c].push(t);
                preds[c].push(p);
            }
        }
        se_count += WEEKS;
    }

    let mut reports = Vec::with_capacity(NUM_BASIC);
    for c in 0..NUM_BASIC {
        let n = truths[c].len() as f64;
        let mean = truths[c].iter().sum::<f64>() / n;
        let ss_tot: f64 = truths[c].iter().map(|t| (t - mean) * (t - mean)).sum();
        reports.push(ProbeFeatureReport {
            feature: c,
            rmse: (ss_res[c] / se_count as f64).sqrt(),
            r2: 1.0 - ss_res[c] / ss_tot,
        });
    }
    Ok(reports)
}
