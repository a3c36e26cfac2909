//! Transformer encoder and heads: 34-channel input projection, pre-norm
//! encoder layers, a posterior head emitting per-week diagonal-Gaussian
//! parameters over the 31 weather channels, learnable attention aggregation
//! over time, and the yield head.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitaError};
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Tape, Tensor, Var};
use crate::priors::{DiagGaussian, DiagGaussianVar, SinusoidalPrior, SinusoidalVars};

/// Weather channels in the canonical layout.
pub const NUM_CHANNELS: usize = 31;
/// Basic channels available at fine-tuning time.
pub const NUM_BASIC: usize = 6;
/// Metadata columns appended to the weather block: year, latitude, longitude.
pub const META_COLUMNS: usize = 3;
/// Encoder input width.
pub const INPUT_DIM: usize = NUM_CHANNELS + META_COLUMNS;
/// Longest supported sequence: 7 years of 52 weeks.
pub const MAX_CONTEXT_WEEKS: usize = 364;

/// Log-variance clamp for the posterior head; sigma stays in [e^-5, e^5].
pub const LOGVAR_CLAMP: f64 = 10.0;

const LN_EPS: f64 = 1e-5;

/// Fixed-constant metadata normalization (the dataset stats are not used
/// for these columns).
pub fn normalize_year(year: i32) -> f64 {
    (year as f64 - 2000.0) / 50.0
}

pub fn normalize_coords(lat: f64, lon: f64) -> (f64, f64) {
    (lat / 90.0, lon / 180.0)
}

/// Model dimensions. Defaults follow the production architecture; tests use
/// smaller settings through the same struct.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_len: usize,
    pub scorer_hidden: usize,
    pub yield_hidden: usize,
    pub n_past_yields: usize,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 200,
            n_layers: 4,
            n_heads: 10,
            d_mlp: 800,
            max_len: MAX_CONTEXT_WEEKS,
            scorer_hidden: 16,
            yield_hidden: 120,
            n_past_yields: 6,
            dropout: 0.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return Err(VitaError::InvalidConfig("architecture dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(VitaError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 || self.max_len > MAX_CONTEXT_WEEKS {
            return Err(VitaError::InvalidConfig(format!(
                "max_len {} outside 1..={}",
                self.max_len, MAX_CONTEXT_WEEKS
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VitaError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if self.scorer_hidden == 0 || self.yield_hidden == 0 || self.n_past_yields == 0 {
            return Err(VitaError::InvalidConfig("head dims must be positive".into()));
        }
        Ok(())
    }

    /// Width of the yield-head input: aggregated latent plus past yields.
    pub fn yield_input_dim(&self) -> usize {
        NUM_CHANNELS + self.n_past_yields
    }
}

/// Encoder input for one window: z-scored weather channels with masked
/// entries zero-filled, metadata columns appended, and a per-entry mask.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    /// `T x 34`: 31 weather channels then year, lat, lon columns.
    pub channels: Tensor,
    /// `T x 31` row-major; true where the weather channel is hidden.
    pub mask: Vec<bool>,
    /// Week positions `1..=T`.
    pub positions: Vec<usize>,
}

impl EncoderInput {
    pub fn t_len(&self) -> usize {
        self.positions.len()
    }
}

/// Weather observation handed to `build_input`.
pub enum WeatherObservation<'a> {
    /// Full `T x 31` z-scored block (pretraining).
    Detailed(&'a Tensor),
    /// `T x 6` z-scored basic block plus the layout positions of its
    /// columns (fine-tuning).
    Basic { values: &'a Tensor, layout: &'a [usize; NUM_BASIC] },
}

/// Assemble an [`EncoderInput`]: place channels, zero-fill every channel in
/// `mask_set` (for basic observations the mask is the 25-channel
/// complement), and append normalized year/coordinate columns.
pub fn build_input(
    obs: WeatherObservation,
    mask_set: &[usize],
    year_per_week: &[i32],
    lat: f64,
    lon: f64,
) -> Result<EncoderInput> {
    let t_len = year_per_week.len();
    if t_len == 0 || t_len > MAX_CONTEXT_WEEKS {
        return Err(VitaError::InvalidArgument(format!(
            "sequence length {} outside 1..={}",
            t_len, MAX_CONTEXT_WEEKS
        )));
    }

    let mut masked = vec![false; NUM_CHANNELS];
    let mut note_masked = |idx: usize| -> Result<()> {
        if idx >= NUM_CHANNELS {
            return Err(VitaError::InvalidArgument(format!("unknown channel index {}", idx)));
        }
        if masked[idx] {
            return Err(VitaError::InvalidArgument(format!("duplicate channel index {}", idx)));
        }
        masked[idx] = true;
        Ok(())
    };

    let mut channels = Tensor::zeros(vec![t_len, INPUT_DIM]);
    match obs {
        WeatherObservation::Detailed(values) => {
            if values.shape() != [t_len, NUM_CHANNELS] {
                return Err(VitaError::InvalidArgument(format!(
                    "detailed block shape {:?}, want [{}, {}]",
                    values.shape(),
                    t_len,
                    NUM_CHANNELS
                )));
            }
            for &idx in mask_set {
                note_masked(idx)?;
            }
            for t in 0..t_len {
                for k in 0..NUM_CHANNELS {
                    if !masked[k] {
                        channels.set2(t, k, values.at2(t, k));
                    }
                }
            }
        }
        WeatherObservation::Basic { values, layout } => {
            if values.shape() != [t_len, NUM_BASIC] {
                return Err(VitaError::InvalidArgument(format!(
                    "basic block shape {:?}, want [{}, {}]",
                    values.shape(),
                    t_len,
                    NUM_BASIC
                )));
            }
            let mut placed = vec![false; NUM_CHANNELS];
            for &idx in layout.iter() {
                if idx >= NUM_CHANNELS || placed[idx] {
                    return Err(VitaError::InvalidArgument(format!(
                        "bad basic channel index {}",
                        idx
                    )));
                }
                placed[idx] = true;
            }
            for k in 0..NUM_CHANNELS {
                if !placed[k] {
                    note_masked(k)?;
                }
            }
            for t in 0..t_len {
                for (j, &idx) in layout.iter().enumerate() {
                    channels.set2(t, idx, values.at2(t, j));
                }
            }
        }
    }

    let (lat_n, lon_n) = normalize_coords(lat, lon);
    for (t, &year) in year_per_week.iter().enumerate() {
        channels.set2(t, NUM_CHANNELS, normalize_year(year));
        channels.set2(t, NUM_CHANNELS + 1, lat_n);
        channels.set2(t, NUM_CHANNELS + 2, lon_n);
    }

    let mut mask = vec![false; t_len * NUM_CHANNELS];
    for t in 0..t_len {
        for k in 0..NUM_CHANNELS {
            mask[t * NUM_CHANNELS + k] = masked[k];
        }
    }
    Ok(EncoderInput { channels, mask, positions: (1..=t_len).collect() })
}

/// One transformer layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// All named parameter tensors of the model, including the learnable
/// sinusoidal-prior parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub posterior_w: Tensor,
    pub posterior_b: Tensor,
    pub scorer_w1: Tensor,
    pub scorer_b1: Tensor,
    pub scorer_w2: Tensor,
    pub scorer_b2: Tensor,
    pub yield_w1: Tensor,
    pub yield_b1: Tensor,
    pub yield_w2: Tensor,
    pub yield_b2: Tensor,
    pub prior_amplitude: Tensor,
    pub prior_frequency: Tensor,
    pub prior_phase: Tensor,
    pub prior_log_sigma: Tensor,
}

fn dense_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng::standard_normal(rng) * scale).collect(),
    )
}

impl ModelParams {
    /// Seeded initialization: dense weights `N(0, 1/fan_in)`, zero biases,
    /// unit layer-norm gains, small positional embeddings, and the weekly
    /// seasonal prior init.
    pub fn init(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let d = arch.d_model;
        let layers = (0..arch.n_layers)
            .map(|_| LayerParams {
                w_q: dense_init(d, d, rng),
                b_q: Tensor::zeros(vec![d]),
                w_k: dense_init(d, d, rng),
                b_k: Tensor::zeros(vec![d]),
                w_v: dense_init(d, d, rng),
                b_v: Tensor::zeros(vec![d]),
                w_o: dense_init(d, d, rng),
                b_o: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::full(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                w_mlp1: dense_init(d, arch.d_mlp, rng),
                b_mlp1: Tensor::zeros(vec![arch.d_mlp]),
                w_mlp2: dense_init(arch.d_mlp, d, rng),
                b_mlp2: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::full(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();

        let prior = SinusoidalPrior::seasonal_init(NUM_CHANNELS);
        Ok(Self {
            input_w: dense_init(INPUT_DIM, d, rng),
            input_b: Tensor::zeros(vec![d]),
            pos_embed: Tensor::new(
                vec![arch.max_len, d],
                (0..arch.max_len * d).map(|_| rng::standard_normal(rng) * 0.02).collect(),
            ),
            layers,
            final_ln_gain: Tensor::full(vec![d], 1.0),
            final_ln_bias: Tensor::zeros(vec![d]),
            posterior_w: dense_init(d, 2 * NUM_CHANNELS, rng),
            posterior_b: Tensor::zeros(vec![2 * NUM_CHANNELS]),
            scorer_w1: dense_init(NUM_CHANNELS, arch.scorer_hidden, rng),
            scorer_b1: Tensor::zeros(vec![arch.scorer_hidden]),
            scorer_w2: dense_init(arch.scorer_hidden, 1, rng),
            scorer_b2: Tensor::zeros(vec![1]),
            yield_w1: dense_init(arch.yield_input_dim(), arch.yield_hidden, rng),
            yield_b1: Tensor::zeros(vec![arch.yield_hidden]),
            yield_w2: dense_init(arch.yield_hidden, 1, rng),
            yield_b2: Tensor::zeros(vec![1]),
            prior_amplitude: Tensor::from_vec(prior.amplitude),
            prior_frequency: Tensor::from_vec(prior.frequency),
            prior_phase: Tensor::from_vec(prior.phase),
            prior_log_sigma: Tensor::from_vec(
                prior.sigma.iter().map(|s| s.ln()).collect::<Vec<_>>(),
            ),
            arch,
        })
    }

    /// Named tensors in a fixed order (checkpoint and optimizer order).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input.w".into(), &self.input_w),
            ("input.b".into(), &self.input_b),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("attn.w_q", &l.w_q),
                ("attn.b_q", &l.b_q),
                ("attn.w_k", &l.w_k),
                ("attn.b_k", &l.b_k),
                ("attn.w_v", &l.w_v),
                ("attn.b_v", &l.b_v),
                ("attn.w_o", &l.w_o),
                ("attn.b_o", &l.b_o),
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("mlp.w1", &l.w_mlp1),
                ("mlp.b1", &l.b_mlp1),
                ("mlp.w2", &l.w_mlp2),
                ("mlp.b2", &l.b_mlp2),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
            ] {
                out.push((format!("layer{}.{}", i, suffix), t));
            }
        }
        out.extend([
            ("final_ln.gain".to_string(), &self.final_ln_gain),
            ("final_ln.bias".to_string(), &self.final_ln_bias),
            ("posterior.w".to_string(), &self.posterior_w),
            ("posterior.b".to_string(), &self.posterior_b),
            ("scorer.w1".to_string(), &self.scorer_w1),
            ("scorer.b1".to_string(), &self.scorer_b1),
            ("scorer.w2".to_string(), &self.scorer_w2),
            ("scorer.b2".to_string(), &self.scorer_b2),
            ("yield.w1".to_string(), &self.yield_w1),
            ("yield.b1".to_string(), &self.yield_b1),
            ("yield.w2".to_string(), &self.yield_w2),
            ("yield.b2".to_string(), &self.yield_b2),
            ("prior.amplitude".to_string(), &self.prior_amplitude),
            ("prior.frequency".to_string(), &self.prior_frequency),
            ("prior.phase".to_string(), &self.prior_phase),
            ("prior.log_sigma".to_string(), &self.prior_log_sigma),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.w".into(), &mut self.input_w),
            ("input.b".into(), &mut self.input_b),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("attn.w_q", &mut l.w_q),
                ("attn.b_q", &mut l.b_q),
                ("attn.w_k", &mut l.w_k),
                ("attn.b_k", &mut l.b_k),
                ("attn.w_v", &mut l.w_v),
                ("attn.b_v", &mut l.b_v),
                ("attn.w_o", &mut l.w_o),
                ("attn.b_o", &mut l.b_o),
                ("ln1.gain", &mut l.ln1_gain),
                ("ln1.bias", &mut l.ln1_bias),
                ("mlp.w1", &mut l.w_mlp1),
                ("mlp.b1", &mut l.b_mlp1),
                ("mlp.w2", &mut l.w_mlp2),
                ("mlp.b2", &mut l.b_mlp2),
                ("ln2.gain", &mut l.ln2_gain),
                ("ln2.bias", &mut l.ln2_bias),
            ] {
                out.push((format!("layer{}.{}", i, suffix), t));
            }
        }
        out.extend([
            ("final_ln.gain".to_string(), &mut self.final_ln_gain),
            ("final_ln.bias".to_string(), &mut self.final_ln_bias),
            ("posterior.w".to_string(), &mut self.posterior_w),
            ("posterior.b".to_string(), &mut self.posterior_b),
            ("scorer.w1".to_string(), &mut self.scorer_w1),
            ("scorer.b1".to_string(), &mut self.scorer_b1),
            ("scorer.w2".to_string(), &mut self.scorer_w2),
            ("scorer.b2".to_string(), &mut self.scorer_b2),
            ("yield.w1".to_string(), &mut self.yield_w1),
            ("yield.b1".to_string(), &mut self.yield_b1),
            ("yield.w2".to_string(), &mut self.yield_w2),
            ("yield.b2".to_string(), &mut self.yield_b2),
            ("prior.amplitude".to_string(), &mut self.prior_amplitude),
            ("prior.frequency".to_string(), &mut self.prior_frequency),
            ("prior.phase".to_string(), &mut self.prior_phase),
            ("prior.log_sigma".to_string(), &mut self.prior_log_sigma),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter count of a plain (non-variational) transformer with the
    /// same dimensions: identical trunk and heads, but a 31-wide output
    /// projection instead of 62 and no prior parameters.
    pub fn plain_transformer_param_count(&self) -> usize {
        let posterior_extra = self.arch.d_model * NUM_CHANNELS + NUM_CHANNELS;
        let prior_extra = self.prior_amplitude.len()
            + self.prior_frequency.len()
            + self.prior_phase.len()
            + self.prior_log_sigma.len();
        self.param_count() - posterior_extra - prior_extra
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Register every tensor as a tape leaf.
    pub fn vars(&self, tape: &Rc<Tape>) -> ModelVars {
        ModelVars {
            arch: self.arch.clone(),
            leaves: self
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Current sinusoidal prior parameters as a plain prior record.
    pub fn sinusoidal_prior(&self) -> SinusoidalPrior {
        SinusoidalPrior {
            amplitude: self.prior_amplitude.data().to_vec(),
            frequency: self.prior_frequency.data().to_vec(),
            phase: self.prior_phase.data().to_vec(),
            sigma: self.prior_log_sigma.data().iter().map(|v| v.exp()).collect(),
        }
    }
}

/// Tape-leaf mirror of [`ModelParams`], keyed by the same names.
pub struct ModelVars {
    pub arch: ArchConfig,
    leaves: Vec<(String, Var)>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> &Var {
        &self
            .leaves
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {}", name))
            .1
    }

    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }

    pub fn prior_vars(&self) -> SinusoidalVars {
        SinusoidalVars {
            amplitude: self.get("prior.amplitude").clone(),
            frequency: self.get("prior.frequency").clone(),
            phase: self.get("prior.phase").clone(),
            log_sigma: self.get("prior.log_sigma").clone(),
        }
    }
}

fn dense(x: &Var, vars: &ModelVars, w: &str, b: &str) -> Var {
    x.matmul(vars.get(w)).add_row(vars.get(b))
}

fn check_finite(v: &Var, context: &str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(VitaError::NonFinite { context: context.to_string() })
    }
}

fn dropout(x: Var, rate: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            use rand::Rng as _;
            let keep = 1.0 - rate;
            let mask = Tensor::new(
                x.shape().to_vec(),
                (0..x.value().len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect(),
            );
            x.mul_const(&mask)
        }
        _ => x,
    }
}

/// Forward pass over a batch of equal-length inputs, producing the
/// posterior over a stacked `(B*T) x 31` latent block.
///
/// Pass `dropout_rng` only during training; evaluation is deterministic.
pub fn encode_batch_graph(
    vars: &ModelVars,
    inputs: &[EncoderInput],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<DiagGaussianVar> {
    if inputs.is_empty() {
        return Err(VitaError::InvalidArgument("encode: empty batch".into()));
    }
    let t_len = inputs[0].t_len();
    if inputs.iter().any(|i| i.t_len() != t_len) {
        return Err(VitaError::InvalidArgument("encode: ragged batch lengths".into()));
    }
    if t_len > vars.arch.max_len {
        return Err(VitaError::InvalidArgument(format!(
            "sequence length {} exceeds max_len {}",
            t_len, vars.arch.max_len
        )));
    }
    let batch = inputs.len();
    let tape = vars.get("input.w").tape();

    let mut data = Vec::with_capacity(batch * t_len * INPUT_DIM);
    for input in inputs {
        assert_eq!(input.channels.shape(), &[t_len, INPUT_DIM]);
        data.extend_from_slice(input.channels.data());
    }
    let x = tape.leaf(Tensor::new(vec![batch * t_len, INPUT_DIM], data));

    let mut h = dense(&x, vars, "input.w", "input.b");
    let prefix = vars.get("pos_embed").slice_rows(0, t_len);
    let tiled = Var::concat_rows(&vec![prefix; batch]);
    h = h.add(&tiled);
    check_finite(&h, "input projection")?;

    let d = vars.arch.d_model;
    let heads = vars.arch.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    for layer in 0..vars.arch.n_layers {
        let name = |s: &str| format!("layer{}.{}", layer, s);

        // attention sublayer (pre-norm)
        let normed = h.layer_norm(&vars.get(&name("ln1.gain")), &vars.get(&name("ln1.bias")), LN_EPS);
        let q = dense(&normed, vars, &name("attn.w_q"), &name("attn.b_q"));
        let k = dense(&normed, vars, &name("attn.w_k"), &name("attn.b_k"));
        let v = dense(&normed, vars, &name("attn.w_v"), &name("attn.b_v"));

        let mut per_item = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = q.slice_rows(b * t_len, t_len);
            let kb = k.slice_rows(b * t_len, t_len);
            let vb = v.slice_rows(b * t_len, t_len);
            let mut head_outputs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = qb.slice_cols(hd * dh, dh);
                let kh = kb.slice_cols(hd * dh, dh);
                let vh = vb.slice_cols(hd * dh, dh);
                let scores = qh.matmul(&kh.transpose()).mul_scalar(scale);
                let probs = scores.softmax_rows();
                head_outputs.push(probs.matmul(&vh));
            }
            let mut ctx = head_outputs[0].clone();
            for part in &head_outputs[1..] {
                ctx = ctx.concat_cols(part);
            }
            per_item.push(ctx);
        }
        let ctx = Var::concat_rows(&per_item);
        let attn = dense(&ctx, vars, &name("attn.w_o"), &name("attn.b_o"));
        let attn = dropout(attn, vars.arch.dropout, dropout_rng.as_deref_mut());
        h = h.add(&attn);
        check_finite(&h, &format!("layer {} attention", layer))?;

        // MLP sublayer (pre-norm)
        let normed = h.layer_norm(&vars.get(&name("ln2.gain")), &vars.get(&name("ln2.bias")), LN_EPS);
        let mlp = dense(&normed, vars, &name("mlp.w1"), &name("mlp.b1")).gelu();
        let mlp = dense(&mlp, vars, &name("mlp.w2"), &name("mlp.b2"));
        let mlp = dropout(mlp, vars.arch.dropout, dropout_rng.as_deref_mut());
        h = h.add(&mlp);
        check_finite(&h, &format!("layer {} mlp", layer))?;
    }

    let h = h.layer_norm(&vars.get("final_ln.gain"), &vars.get("final_ln.bias"), LN_EPS);
    let out = dense(&h, vars, "posterior.w", "posterior.b");
    check_finite(&out, "posterior head")?;

    let mu = out.slice_cols(0, NUM_CHANNELS);
    let logvar = out.slice_cols(NUM_CHANNELS, NUM_CHANNELS).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
    let sigma = logvar.mul_scalar(0.5).exp();
    Ok(DiagGaussianVar { mu, sigma })
}

/// Single-input encode returning plain posterior tensors.
pub fn encode(input: &EncoderInput, params: &ModelParams) -> Result<DiagGaussian> {
    let tape = Tape::new();
    let vars = params.vars(&tape);
    let post = encode_batch_graph(&vars, std::slice::from_ref(input), None)?;
    DiagGaussian::new(post.mu.value().clone(), post.sigma.value().clone())
}

/// Attention aggregation over time for a batch: scores each latent row
/// through the 31 -> hidden -> 1 scorer, softmaxes the scores within each
/// item, and returns the weighted sums as a `B x 31` var.
pub fn attention_aggregate_graph(vars: &ModelVars, z: &Var, batch: usize, t_len: usize) -> Var {
    assert_eq!(z.value().nrows(), batch * t_len, "z rows != batch * t_len");
    let scores = dense(&dense(z, vars, "scorer.w1", "scorer.b1").gelu(), vars, "scorer.w2", "scorer.b2");
    let mut per_item = Vec::with_capacity(batch);
    for b in 0..batch {
        let zb = z.slice_rows(b * t_len, t_len);
        let sb = scores.slice_rows(b * t_len, t_len);
        let weights = sb.transpose().softmax_rows();
        per_item.push(weights.matmul(&zb));
    }
    Var::concat_rows(&per_item)
}

/// Aggregate a single `T x 31` latent block to 31 values.
pub fn attention_aggregate(z: &Tensor, params: &ModelParams) -> Tensor {
    let tape = Tape::new();
    let vars = params.vars(&tape);
    let zv = tape.leaf(z.clone());
    let out = attention_aggregate_graph(&vars, &zv, 1, z.nrows());
    out.value().reshape(vec![NUM_CHANNELS])
}

/// Yield head on a batch: concat aggregated latents with past yields and
/// run the GELU MLP. Returns a `B x 1` var in z-scored yield units.
pub fn predict_yield_graph(vars: &ModelVars, z_agg: &Var, y_past: &Tensor) -> Var {
    assert_eq!(y_past.nrows(), z_agg.value().nrows(), "batch mismatch");
    assert_eq!(y_past.ncols(), vars.arch.n_past_yields, "y_past width");
    let past = z_agg.tape().leaf(y_past.clone());
    let joint = z_agg.concat_cols(&past);
    dense(&dense(&joint, vars, "yield.w1", "yield.b1").gelu(), vars, "yield.w2", "yield.b2")
}

/// Scalar yield prediction from one aggregated latent and past-yield vector.
pub fn predict_yield(z_agg: &[f64], y_past: &[f64], params: &ModelParams) -> f64 {
    assert_eq!(z_agg.len(), NUM_CHANNELS);
    let tape = Tape::new();
    let vars = params.vars(&tape);
    let z = tape.leaf(Tensor::new(vec![1, NUM_CHANNELS], z_agg.to_vec()));
    let past = Tensor::new(vec![1, y_past.len()], y_past.to_vec());
    predict_yield_graph(&vars, &z, &past).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn toy_arch() -> ArchConfig {
        ArchConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_mlp: 64,
            max_len: 16,
            ..ArchConfig::default()
        }
    }

    fn toy_input(t_len: usize, seed: u64) -> EncoderInput {
        let mut rng = rng::seeded(seed);
        let detailed = crate::numerics::sample_standard_normal(vec![t_len, NUM_CHANNELS], &mut rng);
        build_input(
            WeatherObservation::Detailed(&detailed),
            &[3, 7, 11],
            &vec![2005; t_len],
            41.5,
            -93.6,
        )
        .unwrap()
    }

    #[test]
    fn build_input_masks_and_metadata() {
        let t_len = 4;
        let mut rng = rng::seeded(1);
        let detailed = crate::numerics::sample_standard_normal(vec![t_len, NUM_CHANNELS], &mut rng);

        // k = 10 masked channels
        let mask_set: Vec<usize> = (0..10).collect();
        let input = build_input(
            WeatherObservation::Detailed(&detailed),
            &mask_set,
            &vec![2001; t_len],
            45.0,
            -90.0,
        )
        .unwrap();
        let masked_cols =
            (0..NUM_CHANNELS).filter(|&k| input.mask[k]).count();
        assert_eq!(masked_cols, 10);
        for t in 0..t_len {
            for k in 0..10 {
                assert_eq!(input.channels.at2(t, k), 0.0);
            }
            assert_eq!(input.channels.at2(t, NUM_CHANNELS), normalize_year(2001));
            assert_eq!(input.channels.at2(t, NUM_CHANNELS + 1), 0.5);
            assert_eq!(input.channels.at2(t, NUM_CHANNELS + 2), -0.5);
        }

        // empty mask set keeps the block intact
        let input = build_input(
            WeatherObservation::Detailed(&detailed),
            &[],
            &vec![2001; t_len],
            45.0,
            -90.0,
        )
        .unwrap();
        assert!(input.mask.iter().all(|&m| !m));
        for t in 0..t_len {
            for k in 0..NUM_CHANNELS {
                assert_eq!(input.channels.at2(t, k), detailed.at2(t, k));
            }
        }
    }

    #[test]
    fn build_input_basic_masks_the_complement() {
        let t_len = 3;
        let layout = [1usize, 2, 8, 7, 11, 29];
        let mut rng = rng::seeded(2);
        let basic = crate::numerics::sample_standard_normal(vec![t_len, NUM_BASIC], &mut rng);
        let input = build_input(
            WeatherObservation::Basic { values: &basic, layout: &layout },
            &[],
            &vec![2010; t_len],
            40.0,
            -88.0,
        )
        .unwrap();
        let masked_cols = (0..NUM_CHANNELS).filter(|&k| input.mask[k]).count();
        assert_eq!(masked_cols, NUM_CHANNELS - NUM_BASIC);
        for t in 0..t_len {
            for (j, &idx) in layout.iter().enumerate() {
                assert_eq!(input.channels.at2(t, idx), basic.at2(t, j));
                assert!(!input.mask[t * NUM_CHANNELS + idx]);
            }
        }
    }

    #[test]
    fn build_input_rejects_bad_channels() {
        let detailed = Tensor::zeros(vec![2, NUM_CHANNELS]);
        assert!(build_input(
            WeatherObservation::Detailed(&detailed),
            &[31],
            &[2000, 2000],
            0.0,
            0.0
        )
        .is_err());
        assert!(build_input(
            WeatherObservation::Detailed(&detailed),
            &[1, 1],
            &[2000, 2000],
            0.0,
            0.0
        )
        .is_err());
        let long = vec![2000; MAX_CONTEXT_WEEKS + 1];
        let big = Tensor::zeros(vec![MAX_CONTEXT_WEEKS + 1, NUM_CHANNELS]);
        assert!(build_input(WeatherObservation::Detailed(&big), &[], &long, 0.0, 0.0).is_err());
    }

    #[test]
    fn encode_shapes_positivity_determinism() {
        let mut rng = rng::seeded(3);
        let params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        let input = toy_input(8, 4);

        let post = encode(&input, &params).unwrap();
        assert_eq!(post.mu.shape(), &[8, NUM_CHANNELS]);
        assert_eq!(post.sigma.shape(), &[8, NUM_CHANNELS]);
        let lo = (-5.0f64).exp();
        let hi = 5.0f64.exp();
        assert!(post.sigma.data().iter().all(|&s| s >= lo && s <= hi));

        let again = encode(&input, &params).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&post.mu), bits(&again.mu));
        assert_eq!(bits(&post.sigma), bits(&again.sigma));
    }

    #[test]
    fn encode_sigma_positive_for_random_inputs() {
        let mut rng = rng::seeded(5);
        let params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        for seed in 0..100 {
            let post = encode(&toy_input(4, 100 + seed), &params).unwrap();
            assert!(post.sigma.data().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn aggregate_single_timestep_is_identity() {
        let mut rng = rng::seeded(6);
        let params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        let z = crate::numerics::sample_standard_normal(vec![1, NUM_CHANNELS], &mut rng);
        let agg = attention_aggregate(&z, &params);
        for k in 0..NUM_CHANNELS {
            assert!((agg.data()[k] - z.at2(0, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_constant_scorer_is_time_mean() {
        let mut rng = rng::seeded(7);
        let mut params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        params.scorer_w1 = Tensor::zeros(vec![NUM_CHANNELS, params.arch.scorer_hidden]);
        params.scorer_w2 = Tensor::zeros(vec![params.arch.scorer_hidden, 1]);
        let t_len = 6;
        let z = crate::numerics::sample_standard_normal(vec![t_len, NUM_CHANNELS], &mut rng);
        let agg = attention_aggregate(&z, &params);
        for k in 0..NUM_CHANNELS {
            let mean: f64 = (0..t_len).map(|t| z.at2(t, k)).sum::<f64>() / t_len as f64;
            assert!((agg.data()[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_explicit_loop_oracle() {
        let mut rng = rng::seeded(8);
        let params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        let t_len = 5;
        let z = crate::numerics::sample_standard_normal(vec![t_len, NUM_CHANNELS], &mut rng);

        // oracle: explicit scorer + softmax + weighted sum, scalar loops only
        let mut scores = vec![0.0; t_len];
        for t in 0..t_len {
            let mut hidden = vec![0.0; params.arch.scorer_hidden];
            for j in 0..params.arch.scorer_hidden {
                let mut acc = params.scorer_b1.data()[j];
                for k in 0..NUM_CHANNELS {
                    acc += z.at2(t, k) * params.scorer_w1.at2(k, j);
                }
                hidden[j] = crate::numerics::gelu_scalar(acc);
            }
            let mut s = params.scorer_b2.data()[0];
            for j in 0..params.arch.scorer_hidden {
                s += hidden[j] * params.scorer_w2.at2(j, 0);
            }
            scores[t] = s;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let weights: Vec<f64> = exp.iter().map(|e| e / total).collect();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let agg = attention_aggregate(&z, &params);
        for k in 0..NUM_CHANNELS {
            let expect: f64 = (0..t_len).map(|t| weights[t] * z.at2(t, k)).sum();
            assert!((agg.data()[k] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn yield_head_zero_weights_returns_bias() {
        let mut rng = rng::seeded(9);
        let mut params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        params.yield_w1 = Tensor::zeros(vec![params.arch.yield_input_dim(), params.arch.yield_hidden]);
        params.yield_w2 = Tensor::zeros(vec![params.arch.yield_hidden, 1]);
        params.yield_b2 = Tensor::from_vec(vec![1.25]);
        let z = vec![0.3; NUM_CHANNELS];
        let past = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(predict_yield(&z, &past, &params), 1.25);
    }

    #[test]
    fn yield_head_is_order_sensitive_in_past_yields() {
        let mut rng = rng::seeded(10);
        let params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        let z = vec![0.2; NUM_CHANNELS];
        let past = vec![0.6, -0.3, 0.9, 0.1, -0.8, 0.4];
        let mut permuted = past.clone();
        permuted.swap(0, 5);
        let a = predict_yield(&z, &past, &params);
        let b = predict_yield(&z, &permuted, &params);
        assert!((a - b).abs() > 1e-9, "permuting y_past should change the output");
    }

    #[test]
    fn posterior_pathway_overhead_is_under_two_percent() {
        let mut rng = rng::seeded(11);
        let params = ModelParams::init(ArchConfig::default(), &mut rng).unwrap();
        let total = params.param_count() as f64;
        let plain = params.plain_transformer_param_count() as f64;
        let overhead = (total - plain) / plain;
        assert!(overhead < 0.02, "posterior pathway overhead {:.4}", overhead);
    }

    #[test]
    fn aggregate_weights_form_distribution_for_random_inputs() {
        let mut rng = rng::seeded(12);
        let params = ModelParams::init(toy_arch(), &mut rng).unwrap();
        for _ in 0..20 {
            let t_len = 1 + (rng::standard_normal(&mut rng).abs() * 4.0) as usize;
            let z = crate::numerics::sample_standard_normal(vec![t_len, NUM_CHANNELS], &mut rng);
            let tape = Tape::new();
            let vars = params.vars(&tape);
            let scores = dense(
                &dense(&tape.leaf(z.clone()), &vars, "scorer.w1", "scorer.b1").gelu(),
                &vars,
                "scorer.w2",
                "scorer.b2",
            );
            let weights = scores.transpose().softmax_rows();
            let sum: f64 = weights.value().data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(weights.value().data().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_half_scales() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![4, 8], 1.0));
        let y = dropout(x.clone(), 0.0, None);
        assert_eq!(y.value().data(), x.value().data());

        let mut rng = rng::seeded(13);
        let y = dropout(x, 0.5, Some(&mut rng));
        for &v in y.value().data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }
}
