//! Prior distributions over the latent weather state and the KL-divergence
//! computations used by both training objectives.
//!
//! Closed forms exist for the standard-normal and sinusoidal priors; the
//! Gaussian-mixture prior only has the Monte-Carlo estimator. Log arguments
//! are floored at `LOG_FLOOR` throughout.

use std::f64::consts::PI;

use crate::error::{Result, VitaError};
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;
const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian over a `T x C` latent block.
#[derive(Debug, Clone)]
pub struct DiagGaussian {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl DiagGaussian {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(VitaError::InvalidArgument(format!(
                "mu shape {:?} != sigma shape {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        if sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(VitaError::InvalidArgument("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn timesteps(&self) -> usize {
        self.mu.nrows()
    }

    pub fn channels(&self) -> usize {
        self.mu.ncols()
    }
}

/// Posterior handles on a tape, produced by the encoder.
#[derive(Clone)]
pub struct DiagGaussianVar {
    pub mu: Var,
    pub sigma: Var,
}

/// Per-channel sinusoidal prior: mean `A_k sin(theta_k * pos + theta0_k)`
/// with per-channel standard deviation `sigma_k`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SinusoidalPrior {
    pub amplitude: Vec<f64>,
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SinusoidalPrior {
    /// Weekly annual-cycle initialization: A=0.1, theta=2*pi/52, theta0=0,
    /// sigma=1 per channel.
    pub fn seasonal_init(channels: usize) -> Self {
        Self {
            amplitude: vec![0.1; channels],
            frequency: vec![2.0 * PI / 52.0; channels],
            phase: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.amplitude.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.amplitude.len();
        if self.frequency.len() != c || self.phase.len() != c || self.sigma.len() != c {
            return Err(VitaError::InvalidArgument("sinusoidal prior length mismatch".into()));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(VitaError::InvalidArgument("sinusoidal prior sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Prior over the latent block.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum PriorSpec {
    StandardNormal,
    Sinusoidal(SinusoidalPrior),
    Mixture { weights: Vec<f64>, components: Vec<SinusoidalPrior> },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::StandardNormal => Ok(()),
            PriorSpec::Sinusoidal(p) => p.validate(),
            PriorSpec::Mixture { weights, components } => {
                if weights.len() != components.len() || weights.is_empty() {
                    return Err(VitaError::InvalidArgument(
                        "mixture weights/components mismatch".into(),
                    ));
                }
                if weights.iter().any(|&w| w < 0.0) {
                    return Err(VitaError::InvalidArgument("mixture weights must be >= 0".into()));
                }
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return Err(VitaError::InvalidArgument("mixture has zero total weight".into()));
                }
                if (total - 1.0).abs() > 1e-6 {
                    return Err(VitaError::InvalidArgument(format!(
                        "mixture weights sum to {}, expected 1",
                        total
                    )));
                }
                for c in components {
                    c.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Mean/std tensors over `t_len` timesteps for priors that have them in
    /// closed form (standard normal and sinusoidal).
    pub fn moments(&self, t_len: usize) -> Option<(Tensor, Tensor)> {
        match self {
            PriorSpec::StandardNormal => None,
            PriorSpec::Sinusoidal(p) => {
                let mu = sinusoidal_mean(p, t_len);
                let c = p.channels();
                let mut sigma = Tensor::zeros(vec![t_len, c]);
                for t in 0..t_len {
                    for k in 0..c {
                        sigma.set2(t, k, p.sigma[k]);
                    }
                }
                Some((mu, sigma))
            }
            PriorSpec::Mixture { .. } => None,
        }
    }
}

/// KL divergence split by channel; `total` is the sum over channels of the
/// per-channel sums over time.
#[derive(Debug, Clone)]
pub struct KLResult {
    pub total: f64,
    pub per_channel: Vec<f64>,
}

/// Prior mean surface: entry `(t, k) = A_k sin(theta_k * (t+1) + theta0_k)`
/// with week positions starting at 1.
pub fn sinusoidal_mean(prior: &SinusoidalPrior, t_len: usize) -> Tensor {
    let c = prior.channels();
    let mut out = Tensor::zeros(vec![t_len, c]);
    for t in 0..t_len {
        let pos = (t + 1) as f64;
        for k in 0..c {
            out.set2(t, k, prior.amplitude[k] * (prior.frequency[k] * pos + prior.phase[k]).sin());
        }
    }
    out
}

/// Closed-form KL from a diagonal Gaussian to N(0, I), summed over all
/// entries: `1/2 sum[sigma^2 + mu^2 - 1 - log sigma^2]`.
pub fn kl_to_standard_normal(q: &DiagGaussian) -> Result<KLResult> {
    if q.sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(VitaError::InvalidArgument("kl: sigma must be > 0".into()));
    }
    let (t_len, c) = (q.timesteps(), q.channels());
    let mut per_channel = vec![0.0; c];
    for t in 0..t_len {
        for k in 0..c {
            let m = q.mu.at2(t, k);
            let s2 = q.sigma.at2(t, k) * q.sigma.at2(t, k);
            per_channel[k] += 0.5 * (s2 + m * m - 1.0 - s2.max(LOG_FLOOR).ln());
        }
    }
    Ok(KLResult { total: per_channel.iter().sum(), per_channel })
}

/// Closed-form KL between diagonal Gaussians:
/// `1/2 sum[sq^2/sp^2 + (mq - mp)^2/sp^2 - 1 - log(sq^2/sp^2)]`.
pub fn kl_diag_to_diag(q: &DiagGaussian, p_mu: &Tensor, p_sigma: &Tensor) -> Result<KLResult> {
    if q.mu.shape() != p_mu.shape() || q.mu.shape() != p_sigma.shape() {
        return Err(VitaError::InvalidArgument("kl: shape mismatch".into()));
    }
    if q.sigma.data().iter().any(|&s| !(s > 0.0))
        || p_sigma.data().iter().any(|&s| !(s > 0.0))
    {
        return Err(VitaError::InvalidArgument("kl: sigma must be > 0".into()));
    }
    let (t_len, c) = (q.timesteps(), q.channels());
    let mut per_channel = vec![0.0; c];
    for t in 0..t_len {
        for k in 0..c {
            let m = q.mu.at2(t, k) - p_mu.at2(t, k);
            let p2 = p_sigma.at2(t, k) * p_sigma.at2(t, k);
            let s2 = q.sigma.at2(t, k) * q.sigma.at2(t, k) / p2;
            per_channel[k] += 0.5 * (s2 + m * m / p2 - 1.0 - s2.max(LOG_FLOOR).ln());
        }
    }
    Ok(KLResult { total: per_channel.iter().sum(), per_channel })
}

/// Closed-form KL to a prior that has one (standard normal or sinusoidal).
pub fn kl_to_prior(q: &DiagGaussian, prior: &PriorSpec) -> Result<KLResult> {
    prior.validate()?;
    match prior.moments(q.timesteps()) {
        None => match prior {
            PriorSpec::StandardNormal => kl_to_standard_normal(q),
            _ => Err(VitaError::InvalidArgument("mixture prior has no closed-form KL".into())),
        },
        Some((p_mu, p_sigma)) => kl_diag_to_diag(q, &p_mu, &p_sigma),
    }
}

fn log_density_diag(z: &Tensor, mu: &Tensor, sigma: &Tensor) -> f64 {
    let mut acc = 0.0;
    for ((&z, &m), &s) in z.data().iter().zip(mu.data()).zip(sigma.data()) {
        let d = (z - m) / s;
        acc += -0.5 * LN_2PI - s.max(LOG_FLOOR).ln() - 0.5 * d * d;
    }
    acc
}

fn log_prior_density(z: &Tensor, prior: &PriorSpec, t_len: usize) -> f64 {
    match prior {
        PriorSpec::StandardNormal => {
            z.data().iter().map(|&v| -0.5 * LN_2PI - 0.5 * v * v).sum()
        }
        PriorSpec::Sinusoidal(p) => {
            let (p_mu, p_sigma) = PriorSpec::Sinusoidal(p.clone()).moments(t_len).unwrap();
            log_density_diag(z, &p_mu, &p_sigma)
        }
        PriorSpec::Mixture { weights, components } => {
            // log sum_j w_j N_j(z), evaluated with a log-sum-exp.
            let terms: Vec<f64> = weights
                .iter()
                .zip(components)
                .map(|(&w, comp)| {
                    let (p_mu, p_sigma) =
                        PriorSpec::Sinusoidal(comp.clone()).moments(t_len).unwrap();
                    w.max(LOG_FLOOR).ln() + log_density_diag(z, &p_mu, &p_sigma)
                })
                .collect();
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        }
    }
}

/// Monte-Carlo KL estimate `(1/L) sum[log q(z_l) - log p(z_l)]` with
/// reparameterized samples, returning the estimate and its standard error
/// (sample std over sqrt(L)).
pub fn kl_monte_carlo(
    q: &DiagGaussian,
    prior: &PriorSpec,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(VitaError::InvalidArgument("kl_monte_carlo needs L >= 2".into()));
    }
    prior.validate()?;
    if q.sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(VitaError::InvalidArgument("kl: sigma must be > 0".into()));
    }
    let t_len = q.timesteps();
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = crate::numerics::sample_standard_normal(q.mu.shape().to_vec(), rng);
        let z = q.mu.zip_map(&q.sigma.zip_map(&eps, |s, e| s * e), |m, se| m + se);
        let log_q = log_density_diag(&z, &q.mu, &q.sigma);
        values.push(log_q - log_prior_density(&z, prior, t_len));
    }
    let mean = values.iter().sum::<f64>() / samples as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (samples as f64 - 1.0);
    Ok((mean, (var / samples as f64).sqrt()))
}

// ---------------------------------------------------------------------------
// Tape-side KL terms for the training objectives.
// ---------------------------------------------------------------------------

/// Learnable sinusoidal-prior parameters as tape vars. Sigma is carried in
/// log space so gradient steps keep it positive.
#[derive(Clone)]
pub struct SinusoidalVars {
    pub amplitude: Var,
    pub frequency: Var,
    pub phase: Var,
    pub log_sigma: Var,
}

/// Differentiable KL(q || N(0, I)) summed over all entries of a batched
/// `N x C` posterior.
pub fn kl_standard_graph(post: &DiagGaussianVar) -> Var {
    let s2 = post.sigma.sqr();
    let log_s2 = s2.max_scalar(LOG_FLOOR).ln();
    s2.add(&post.mu.sqr()).sub(&log_s2).add_scalar(-1.0).sum_all().mul_scalar(0.5)
}

/// Differentiable KL(q || sinusoidal prior) with gradients into the prior
/// parameters. `positions` is an `N x 1` constant of week positions aligned
/// with the posterior rows.
pub fn kl_sinusoidal_graph(
    post: &DiagGaussianVar,
    prior: &SinusoidalVars,
    positions: &Tensor,
) -> Var {
    let n = post.mu.value().nrows();
    let c = post.mu.value().ncols();
    assert_eq!(positions.shape(), &[n, 1], "positions must be N x 1");

    let pos = post.mu.tape().leaf(positions.clone());
    let p_mu = pos
        .matmul(&prior.frequency.reshape(vec![1, c]))
        .add_row(&prior.phase)
        .sin()
        .mul_row(&prior.amplitude);
    let inv_var_p = prior.log_sigma.mul_scalar(-2.0).exp();

    let ratio = post.sigma.sqr().mul_row(&inv_var_p);
    let diff = post.mu.sub(&p_mu).sqr().mul_row(&inv_var_p);
    let log_ratio = ratio.max_scalar(LOG_FLOOR).ln();
    ratio.add(&diff).sub(&log_ratio).add_scalar(-1.0).sum_all().mul_scalar(0.5)
}
