use vita::data::synthetic::{generate_synthetic, SyntheticSpec};
use vita::data::{determinism_probe, ProbeConfig};

#[test]
fn probe_calibration() {
    for (grids, years, batch) in [(60usize, 16usize, 4usize), (120, 16, 4), (120, 16, 8)] {
        let spec = SyntheticSpec { num_grids: grids, num_years: years, ..SyntheticSpec::default() };
        let (g, _) = generate_synthetic(&spec, 11).unwrap();
        let cfg = ProbeConfig { batch_size: batch, ..ProbeConfig::default() };
        let start = std::time::Instant::now();
        let reports = determinism_probe(&g, &cfg).unwrap();
        let min_r2 = reports.iter().map(|r| r.r2).fold(f64::INFINITY, f64::min);
        let max_rmse = reports.iter().map(|r| r.rmse).fold(0.0f64, f64::max);
        println!("grids={} years={} batch={} -> min_r2={:.6} max_rmse={:.5} elapsed={:.1?}", grids, years, batch, min_r2, max_rmse, start.elapsed());
    }
}
