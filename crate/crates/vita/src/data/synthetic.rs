//! Desk-scale synthetic oracle. The 25 detailed channels are smooth
//! seasonal signals with AR(1) noise; the 6 basic channels are an exactly
//! deterministic linear map of the detailed ones (so the decoder-free
//! modeling assumption holds by construction); yields are a linear
//! functional of growing-season latents plus a county effect and noise.

use serde::{Deserialize, Serialize};

use super::{detailed_channel_indices, CountyYields, Crop, WeatherGrid, BASIC_CHANNEL_INDICES};
use crate::encoder::{NUM_BASIC, NUM_CHANNELS};
use crate::error::{Result, VitaError};
use crate::numerics::rng::{self, Rng};
use crate::numerics::Tensor;

pub const NUM_DETAILED: usize = NUM_CHANNELS - NUM_BASIC;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_grids: usize,
    pub start_year: i32,
    pub num_years: usize,
    /// Seed of the fixed 6 x 25 mixing matrix (independent of the run seed
    /// so different datasets share the same physical map).
    pub mixing_seed: u64,
    pub ar_coeff: f64,
    pub ar_noise: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    pub crops: Vec<Crop>,
    pub yield_mean: f64,
    pub county_base_std: f64,
    pub yield_weather_scale: f64,
    pub yield_noise_std: f64,
    pub season_start_week: u32,
    pub season_end_week: u32,
    /// Indices into the 25 detailed positions whose growing-season means
    /// drive the yield.
    pub yield_detail_channels: Vec<usize>,
    pub yield_weights: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_grids: 26,
            start_year: 1997,
            num_years: 16,
            mixing_seed: 7,
            ar_coeff: 0.7,
            ar_noise: 0.35,
            amp_min: 0.5,
            amp_max: 1.5,
            crops: vec![Crop::Corn],
            yield_mean: 120.0,
            county_base_std: 8.0,
            yield_weather_scale: 14.0,
            yield_noise_std: 1.5,
            season_start_week: 18,
            season_end_week: 40,
            yield_detail_channels: vec![0, 5, 12],
            yield_weights: vec![1.0, -0.6, 0.8],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_grids == 0 || self.num_years == 0 {
            return Err(VitaError::InvalidConfig("num_grids and num_years must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) {
            return Err(VitaError::InvalidConfig("ar_coeff must be in (-1, 1)".into()));
        }
        if self.season_start_week == 0
            || self.season_end_week > 52
            || self.season_start_week > self.season_end_week
        {
            return Err(VitaError::InvalidConfig("bad growing-season window".into()));
        }
        if self.yield_detail_channels.len() != self.yield_weights.len()
            || self.yield_detail_channels.is_empty()
        {
            return Err(VitaError::InvalidConfig(
                "yield_detail_channels and yield_weights must match and be nonempty".into(),
            ));
        }
        if self.yield_detail_channels.iter().any(|&c| c >= NUM_DETAILED) {
            return Err(VitaError::InvalidConfig(format!(
                "yield_detail_channels must be < {}",
                NUM_DETAILED
            )));
        }
        if self.crops.is_empty() {
            return Err(VitaError::InvalidConfig("at least one crop required".into()));
        }
        Ok(())
    }
}

/// The fixed mixing matrix: 6 unit-norm rows over the 25 detailed channels.
pub fn mixing_matrix(mixing_seed: u64) -> Tensor {
    let mut rng = rng::seeded(mixing_seed);
    let mut m = Tensor::zeros(vec![NUM_BASIC, NUM_DETAILED]);
    for j in 0..NUM_BASIC {
        let mut row: Vec<f64> = (0..NUM_DETAILED).map(|_| rng::standard_normal(&mut rng)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut row {
            *x /= norm;
        }
        for (i, x) in row.into_iter().enumerate() {
            m.set2(j, i, x);
        }
    }
    m
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    rng.gen_range(lo..hi)
}

fn crop_scale(crop: Crop) -> f64 {
    match crop {
        Crop::Corn => 1.0,
        Crop::Soybean => 0.3,
    }
}

/// Growing-season mean of the driving latents for one county-year; this is
/// the deterministic part of the yield signal.
fn season_functional(spec: &SyntheticSpec, detailed_by_week: &[Vec<f64>], year_rows: &[usize]) -> f64 {
    let lo = (spec.season_start_week - 1) as usize;
    let hi = spec.season_end_week as usize;
    let mut total = 0.0;
    for (&chan, &w) in spec.yield_detail_channels.iter().zip(&spec.yield_weights) {
        let mut acc = 0.0;
        for &row in &year_rows[lo..hi] {
            acc += detailed_by_week[row][chan];
        }
        total += w * acc / (hi - lo) as f64;
    }
    total
}

/// Generate the full synthetic dataset. Fully reproducible given `seed`:
/// each grid and county consumes its own RNG stream.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<WeatherGrid>, Vec<CountyYields>)> {
    spec.validate()?;
    let mixing = mixing_matrix(spec.mixing_seed);
    let detail_idx = detailed_channel_indices();
    let total_weeks = spec.num_years * 52;

    let mut grids = Vec::with_capacity(spec.num_grids);
    let mut detailed_per_grid: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.num_grids);
    for g in 0..spec.num_grids {
        let mut grid_rng = rng::stream(seed, 1_000 + g as u64);
        let lat = 36.0 + 0.5 * (g / 8) as f64;
        let lon = -98.0 + 0.5 * (g % 8) as f64;

        let amps: Vec<f64> =
            (0..NUM_DETAILED).map(|_| uniform(&mut grid_rng, spec.amp_min, spec.amp_max)).collect();
        let phases: Vec<f64> =
            (0..NUM_DETAILED).map(|_| uniform(&mut grid_rng, 0.0, std::f64::consts::TAU)).collect();
        // stationary AR(1) start
        let stationary_std = spec.ar_noise / (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt();
        let mut ar: Vec<f64> = (0..NUM_DETAILED)
            .map(|_| stationary_std * rng::standard_normal(&mut grid_rng))
            .collect();

        let mut weeks = Vec::with_capacity(total_weeks);
        let mut detailed_by_week: Vec<Vec<f64>> = Vec::with_capacity(total_weeks);
        let mut values = Tensor::zeros(vec![total_weeks, NUM_CHANNELS]);
        let mut row = 0usize;
        for y in 0..spec.num_years {
            let year = spec.start_year + y as i32;
            for week in 1..=52u32 {
                weeks.push((year, week));
                let season = std::f64::consts::TAU * week as f64 / 52.0;
                let mut detailed = vec![0.0; NUM_DETAILED];
                for i in 0..NUM_DETAILED {
                    ar[i] = spec.ar_coeff * ar[i]
                        + spec.ar_noise * rng::standard_normal(&mut grid_rng);
                    detailed[i] = amps[i] * (season + phases[i]).sin() + ar[i];
                }
                // basic channels: exactly the fixed linear map of detailed
                for j in 0..NUM_BASIC {
                    let mut acc = 0.0;
                    for i in 0..NUM_DETAILED {
                        acc += mixing.at2(j, i) * detailed[i];
                    }
                    values.set2(row, BASIC_CHANNEL_INDICES[j], acc);
                }
                for (i, &k) in detail_idx.iter().enumerate() {
                    values.set2(row, k, detailed[i]);
                }
                detailed_by_week.push(detailed);
                row += 1;
            }
        }
        grids.push(WeatherGrid {
            grid_id: format!("G{:03}", g),
            lat,
            lon,
            weeks,
            values,
            valid: vec![true; total_weeks],
        });
        detailed_per_grid.push(detailed_by_week);
    }

    let mut counties = Vec::new();
    for g in 0..spec.num_grids {
        for (ci, &crop) in spec.crops.iter().enumerate() {
            let mut county_rng = rng::stream(seed, 500_000 + (g * 8 + ci) as u64);
            let f = crop_scale(crop);
            let base = spec.county_base_std * rng::standard_normal(&mut county_rng);
            let mut yields = Vec::with_capacity(spec.num_years);
            for y in 0..spec.num_years {
                let year = spec.start_year + y as i32;
                let year_rows: Vec<usize> = (y * 52..(y + 1) * 52).collect();
                let w = season_functional(spec, &detailed_per_grid[g], &year_rows);
                let noise = spec.yield_noise_std * rng::standard_normal(&mut county_rng);
                let value =
                    f * (spec.yield_mean + base + spec.yield_weather_scale * w + noise);
                yields.push((year, value.max(1.0)));
            }
            counties.push(CountyYields {
                county_id: format!("{:05}", 17_001 + 2 * (g * spec.crops.len() + ci)),
                crop,
                lat: grids[g].lat,
                lon: grids[g].lon,
                yields,
            });
        }
    }
    Ok((grids, counties))
}

/// Pearson correlation between yields and their designated growing-season
/// latent functional, per crop. Used as a generation-time sanity check.
pub fn yield_latent_correlation(
    spec: &SyntheticSpec,
    grids: &[WeatherGrid],
    counties: &[CountyYields],
) -> Vec<(Crop, f64)> {
    let detail_idx = detailed_channel_indices();
    let mut per_crop: Vec<(Crop, Vec<(f64, f64)>)> =
        spec.crops.iter().map(|&c| (c, Vec::new())).collect();

    for county in counties {
        let grid = grids
            .iter()
            .min_by(|a, b| {
                let da = (a.lat - county.lat).powi(2) + (a.lon - county.lon).powi(2);
                let db = (b.lat - county.lat).powi(2) + (b.lon - county.lon).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let detailed_by_week: Vec<Vec<f64>> = (0..grid.weeks.len())
            .map(|r| detail_idx.iter().map(|&k| grid.values.at2(r, k)).collect())
            .collect();
        for (yi, &(_, value)) in county.yields.iter().enumerate() {
            let year_rows: Vec<usize> = (yi * 52..(yi + 1) * 52).collect();
            let w = season_functional(spec, &detailed_by_week, &year_rows);
            if let Some(slot) = per_crop.iter_mut().find(|(c, _)| *c == county.crop) {
                slot.1.push((value, w));
            }
        }
    }

    per_crop
        .into_iter()
        .map(|(crop, pairs)| {
            let n = pairs.len() as f64;
            let my = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let mw = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let cov = pairs.iter().map(|p| (p.0 - my) * (p.1 - mw)).sum::<f64>() / n;
            let vy = pairs.iter().map(|p| (p.0 - my).powi(2)).sum::<f64>() / n;
            let vw = pairs.iter().map(|p| (p.1 - mw).powi(2)).sum::<f64>() / n;
            (crop, cov / (vy * vw).sqrt())
        })
        .collect()
}
