//! Epoch-stepped learning-rate schedules shared by the training loops and
//! the determinism probe.

use std::f64::consts::PI;

/// Linear warmup to `base` over `warmup` epochs, then exponential decay:
/// `base * decay^(epoch - warmup)`.
pub fn warmup_then_exp_decay(epoch: usize, warmup: usize, base: f64, decay: f64) -> f64 {
    if epoch < warmup {
        base * (epoch + 1) as f64 / warmup as f64
    } else {
        base * decay.powi((epoch - warmup) as i32)
    }
}

/// Linear warmup to `base` over `warmup` epochs, then cosine annealing to
/// zero at `total_epochs`.
pub fn warmup_then_cosine(epoch: usize, warmup: usize, base: f64, total_epochs: usize) -> f64 {
    if epoch < warmup {
        base * (epoch + 1) as f64 / warmup as f64
    } else {
        // progress first: 15/30 is exactly 0.5, so the midpoint yields
        // cos(pi/2) whose f64 value vanishes under 1.0's ulp and the
        // result is exactly base/2
        let progress = (epoch - warmup) as f64 / (total_epochs - warmup) as f64;
        base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_decay_hits_spec_points() {
        let base = 5e-4;
        assert_eq!(warmup_then_exp_decay(9, 10, base, 0.99), base);
        assert_eq!(warmup_then_exp_decay(4, 10, base, 0.99), base * 0.5);
        assert_eq!(warmup_then_exp_decay(12, 10, base, 0.99), base * 0.99f64.powi(2));
    }

    #[test]
    fn cosine_hits_spec_points() {
        let base = 1e-3;
        assert_eq!(warmup_then_cosine(9, 10, base, 40), base);
        // cos(pi/2) rounds away below f64 resolution of 1.0, so this is exact
        assert_eq!(warmup_then_cosine(25, 10, base, 40), base / 2.0);
        let end = warmup_then_cosine(39, 10, base, 40);
        assert!((end - base * 0.5 * (1.0 + (29.0 * PI / 30.0).cos())).abs() < 1e-18);
        assert!((end / base - 0.00274).abs() < 1e-4);
    }
}
