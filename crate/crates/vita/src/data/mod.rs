//! Ingestion, normalization, windowing, county/grid pairing, and the
//! dataset transforms. The synthetic oracle lives in [`synthetic`], the
//! basic-from-detailed determinism probe in [`probe`].

pub mod probe;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{MAX_CONTEXT_WEEKS, NUM_BASIC, NUM_CHANNELS};
use crate::error::{Result, VitaError};
use crate::numerics::rng;
use crate::numerics::Tensor;

pub use synthetic::{generate_synthetic, yield_latent_correlation, SyntheticSpec};
pub use probe::{determinism_probe, ProbeConfig, ProbeFeatureReport};

/// The 31 weather channels in canonical column order.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "T2M",
    "T2M_MAX",
    "T2M_MIN",
    "WD2M",
    "WS2M",
    "PS",
    "QV2M",
    "PRECTOTCORR",
    "ALLSKY_SFC_SW_DWN",
    "EVPTRNS",
    "GWETPROF",
    "SNODP",
    "T2MDEW",
    "CLOUD_AMT",
    "EVLAND",
    "T2MWET",
    "FRSNO",
    "ALLSKY_SFC_LW_DWN",
    "ALLSKY_SFC_PAR_TOT",
    "ALLSKY_SRF_ALB",
    "PW",
    "Z0M",
    "RHOA",
    "RH2M",
    "CDD18_3",
    "HDD18_3",
    "TO3",
    "AOD_55",
    "ET0",
    "VAP",
    "VAD",
];

/// Default layout positions of the six basic channels (max/min temperature,
/// solar radiation, precipitation, snow depth, vapor pressure).
pub const BASIC_CHANNEL_INDICES: [usize; NUM_BASIC] = [1, 2, 8, 7, 11, 29];

/// The 25 detailed (non-basic) channel positions, ascending.
pub fn detailed_channel_indices() -> Vec<usize> {
    (0..NUM_CHANNELS).filter(|k| !BASIC_CHANNEL_INDICES.contains(k)).collect()
}

/// Weekly series for one spatial grid cell. `valid[i]` is false where a
/// gap longer than the interpolation limit could not be repaired.
#[derive(Debug, Clone)]
pub struct WeatherGrid {
    pub grid_id: String,
    pub lat: f64,
    pub lon: f64,
    /// (year, week 1..=52) per row, contiguous.
    pub weeks: Vec<(i32, u32)>,
    /// `num_weeks x 31`, raw units.
    pub values: Tensor,
    pub valid: Vec<bool>,
}

/// One pretraining window: up to 364 contiguous weeks of all 31 channels.
#[derive(Debug, Clone)]
pub struct WeatherWindow {
    pub grid_id: String,
    pub lat: f64,
    pub lon: f64,
    /// Calendar year of each week.
    pub years: Vec<i32>,
    /// `T x 31`, raw units.
    pub channels: Tensor,
}

impl WeatherWindow {
    pub fn t_len(&self) -> usize {
        self.years.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    Corn,
    Soybean,
}

impl std::str::FromStr for Crop {
    type Err = VitaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "corn" => Ok(Crop::Corn),
            "soybean" => Ok(Crop::Soybean),
            other => Err(VitaError::InvalidData(format!("unknown crop '{}'", other))),
        }
    }
}

impl std::fmt::Display for Crop {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Crop::Corn => write!(f, "corn"),
            Crop::Soybean => write!(f, "soybean"),
        }
    }
}

/// Yearly yields for one county and crop.
#[derive(Debug, Clone)]
pub struct CountyYields {
    pub county_id: String,
    pub crop: Crop,
    pub lat: f64,
    pub lon: f64,
    /// (year, bushels/acre), years strictly increasing.
    pub yields: Vec<(i32, f64)>,
}

/// Joined per-county series: yearly yields plus that county's weekly basic
/// weather by year, ready for sequence construction.
#[derive(Debug, Clone)]
pub struct CountySeries {
    pub county_id: String,
    pub crop: Crop,
    pub lat: f64,
    pub lon: f64,
    pub yields: BTreeMap<i32, f64>,
    /// `52 x 6` basic block per complete year.
    pub weather_by_year: BTreeMap<i32, Tensor>,
}

/// Ingestion side effects worth reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    pub week53_dropped: usize,
    pub interpolated_weeks: usize,
    pub unrepaired_weeks: usize,
}

fn week_successor(year: i32, week: u32) -> (i32, u32) {
    if week >= 52 {
        (year + 1, 1)
    } else {
        (year, week + 1)
    }
}

/// Parse the weather CSV (`grid_id,lat,lon,year,week,<31 channels>`).
/// Week-53 rows are dropped; interior gaps of at most two weeks are
/// linearly interpolated; longer gaps stay flagged invalid so downstream
/// windowing can reject them.
pub fn load_weather_csv(path: &Path) -> Result<(Vec<WeatherGrid>, LoadReport)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let expected = 5 + NUM_CHANNELS;
    if header.len() != expected {
        return Err(VitaError::InvalidData(format!(
            "weather csv has {} columns, expected {}",
            header.len(),
            expected
        )));
    }
    for (i, name) in CHANNEL_NAMES.iter().enumerate() {
        if &header[5 + i] != *name {
            return Err(VitaError::InvalidData(format!(
                "weather csv column {} is '{}', expected '{}'",
                5 + i,
                &header[5 + i],
                name
            )));
        }
    }

    struct Row {
        lat: f64,
        lon: f64,
        values: Vec<f64>,
    }
    let mut report = LoadReport::default();
    let mut by_grid: BTreeMap<String, BTreeMap<(i32, u32), Row>> = BTreeMap::new();

    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse_num = |idx: usize| -> Result<f64> {
            record[idx].trim().parse::<f64>().map_err(|_| {
                VitaError::InvalidData(format!(
                    "non-numeric cell '{}' in column {} at data row {}",
                    &record[idx],
                    &header[idx],
                    line + 1
                ))
            })
        };
        let grid_id = record[0].to_string();
        let lat = parse_num(1)?;
        let lon = parse_num(2)?;
        let year = parse_num(3)? as i32;
        let week = parse_num(4)? as u32;
        if week == 53 {
            report.week53_dropped += 1;
            continue;
        }
        if week == 0 || week > 52 {
            return Err(VitaError::InvalidData(format!(
                "week {} out of range at data row {}",
                week,
                line + 1
            )));
        }
        let mut values = Vec::with_capacity(NUM_CHANNELS);
        for i in 0..NUM_CHANNELS {
            values.push(parse_num(5 + i)?);
        }
        report.rows += 1;
        let entry = by_grid.entry(grid_id.clone()).or_default();
        if entry.insert((year, week), Row { lat, lon, values }).is_some() {
            return Err(VitaError::InvalidData(format!(
                "duplicate weather row for (grid {}, year {}, week {})",
                grid_id, year, week
            )));
        }
    }

    let mut grids = Vec::with_capacity(by_grid.len());
    for (grid_id, rows) in by_grid {
        let first = *rows.keys().next().unwrap();
        let last = *rows.keys().last().unwrap();
        let (lat, lon) = {
            let any = rows.values().next().unwrap();
            (any.lat, any.lon)
        };

        let mut weeks = Vec::new();
        let mut data: Vec<Option<Vec<f64>>> = Vec::new();
        let mut cursor = first;
        loop {
            weeks.push(cursor);
            data.push(rows.get(&cursor).map(|r| r.values.clone()));
            if cursor == last {
                break;
            }
            cursor = week_successor(cursor.0, cursor.1);
        }

        // Repair short interior gaps by linear interpolation.
        let n = data.len();
        let mut valid = vec![true; n];
        let mut i = 0;
        while i < n {
            if data[i].is_some() {
                i += 1;
                continue;
            }
            let gap_start = i;
            while i < n && data[i].is_none() {
                i += 1;
            }
            let gap_len = i - gap_start;
            let before = gap_start.checked_sub(1).and_then(|j| data[j].clone());
            let after = if i < n { data[i].clone() } else { None };
            match (before, after) {
                (Some(a), Some(b)) if gap_len <= 2 => {
                    for (step, slot) in (gap_start..i).enumerate() {
                        let frac = (step + 1) as f64 / (gap_len + 1) as f64;
                        data[slot] = Some(
                            a.iter().zip(&b).map(|(x, y)| x + frac * (y - x)).collect(),
                        );
                        report.interpolated_weeks += 1;
                    }
                }
                _ => {
                    for slot in gap_start..i {
                        valid[slot] = false;
                        report.unrepaired_weeks += 1;
                    }
                }
            }
        }

        let mut flat = Vec::with_capacity(n * NUM_CHANNELS);
        for row in &data {
            match row {
                Some(values) => flat.extend_from_slice(values),
                None => flat.extend(std::iter::repeat(f64::NAN).take(NUM_CHANNELS)),
            }
        }
        grids.push(WeatherGrid {
            grid_id,
            lat,
            lon,
            weeks,
            values: Tensor::new(vec![n, NUM_CHANNELS], flat),
            valid,
        });
    }
    log::info!(
        "weather csv: {} rows across {} grids ({} week-53 dropped, {} interpolated, {} unrepaired)",
        report.rows,
        grids.len(),
        report.week53_dropped,
        report.interpolated_weeks,
        report.unrepaired_weeks
    );
    Ok((grids, report))
}

/// Parse the yields CSV (`county_id,crop,year,yield_bu_acre,lat,lon`).
pub fn load_yields_csv(path: &Path) -> Result<Vec<CountyYields>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let want = ["county_id", "crop", "year", "yield_bu_acre", "lat", "lon"];
    if header.len() != want.len() || header.iter().zip(want).any(|(a, b)| a != b) {
        return Err(VitaError::InvalidData(format!(
            "yields csv header {:?}, expected {:?}",
            header, want
        )));
    }
    let mut by_key: BTreeMap<(String, Crop), CountyYields> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let county_id = record[0].to_string();
        let crop: Crop = record[1].parse()?;
        let year: i32 = record[2].trim().parse().map_err(|_| {
            VitaError::InvalidData(format!("bad year '{}' at data row {}", &record[2], line + 1))
        })?;
        let value: f64 = record[3].trim().parse().map_err(|_| {
            VitaError::InvalidData(format!("bad yield '{}' at data row {}", &record[3], line + 1))
        })?;
        if !(value > 0.0) {
            return Err(VitaError::InvalidData(format!(
                "non-positive yield {} for {} {} {}",
                value, county_id, crop, year
            )));
        }
        let lat: f64 = record[4].trim().parse().map_err(|_| {
            VitaError::InvalidData(format!("bad lat at data row {}", line + 1))
        })?;
        let lon: f64 = record[5].trim().parse().map_err(|_| {
            VitaError::InvalidData(format!("bad lon at data row {}", line + 1))
        })?;
        let entry = by_key.entry((county_id.clone(), crop)).or_insert_with(|| CountyYields {
            county_id,
            crop,
            lat,
            lon,
            yields: Vec::new(),
        });
        if let Some(&(prev_year, _)) = entry.yields.last() {
            if year <= prev_year {
                return Err(VitaError::InvalidData(format!(
                    "years not strictly increasing for county {} {} (year {})",
                    entry.county_id, crop, year
                )));
            }
        }
        entry.yields.push((year, value));
    }
    Ok(by_key.into_values().collect())
}

/// Cut a grid series into non-overlapping windows of exactly
/// `MAX_CONTEXT_WEEKS` weeks, earliest first; the remainder tail is
/// discarded and windows containing unrepaired weeks are skipped.
pub fn window_pretraining(grid: &WeatherGrid) -> Vec<WeatherWindow> {
    let total = grid.weeks.len();
    let count = total / MAX_CONTEXT_WEEKS;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * MAX_CONTEXT_WEEKS;
        let end = start + MAX_CONTEXT_WEEKS;
        if grid.valid[start..end].iter().any(|v| !v) {
            log::warn!("grid {}: window {} skipped (unrepaired weeks)", grid.grid_id, w);
            continue;
        }
        out.push(WeatherWindow {
            grid_id: grid.grid_id.clone(),
            lat: grid.lat,
            lon: grid.lon,
            years: grid.weeks[start..end].iter().map(|&(y, _)| y).collect(),
            channels: grid.values.slice_rows(start, MAX_CONTEXT_WEEKS),
        });
    }
    out
}

/// Train/validation windows with split provenance; normalization statistics
/// may only be computed from the `train` field.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: Vec<WeatherWindow>,
    pub validation: Vec<WeatherWindow>,
}

/// Split windows by grid membership in `validation_grids`.
pub fn split_by_grid(windows: Vec<WeatherWindow>, validation_grids: &HashSet<String>) -> SplitWindows {
    let (validation, train) =
        windows.into_iter().partition(|w| validation_grids.contains(&w.grid_id));
    SplitWindows { train, validation }
}

/// Per-channel z-scoring statistics (population standard deviation).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

/// Per-crop yield z-scoring statistics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct YieldStats {
    pub mean: f64,
    pub std: f64,
}

/// Channel statistics over training windows only.
pub fn compute_norm_stats(train: &[WeatherWindow]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(VitaError::InvalidData("cannot compute stats on empty split".into()));
    }
    let mut sum = vec![0.0; NUM_CHANNELS];
    let mut sum_sq = vec![0.0; NUM_CHANNELS];
    let mut count = 0usize;
    for w in train {
        for t in 0..w.t_len() {
            for k in 0..NUM_CHANNELS {
                let v = w.channels.at2(t, k);
                sum[k] += v;
                sum_sq[k] += v * v;
            }
        }
        count += w.t_len();
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
        .collect();
    if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(VitaError::InvalidData(format!(
            "channel {} ({}) has zero variance",
            k, CHANNEL_NAMES[k]
        )));
    }
    Ok(NormStats { channel_mean: mean, channel_std: std })
}

/// Z-score a `T x C` block of channels (C = 31, or a subset given the
/// matching slices of the stats).
pub fn apply_norm(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let (t_len, c) = (x.nrows(), x.ncols());
    assert_eq!(mean.len(), c, "stats width mismatch");
    let mut out = Tensor::zeros(vec![t_len, c]);
    for t in 0..t_len {
        for k in 0..c {
            out.set2(t, k, (x.at2(t, k) - mean[k]) / std[k]);
        }
    }
    out
}

/// Inverse of [`apply_norm`].
pub fn invert_norm(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let (t_len, c) = (x.nrows(), x.ncols());
    assert_eq!(mean.len(), c, "stats width mismatch");
    let mut out = Tensor::zeros(vec![t_len, c]);
    for t in 0..t_len {
        for k in 0..c {
            out.set2(t, k, x.at2(t, k) * std[k] + mean[k]);
        }
    }
    out
}

/// Yield statistics over a training split (population standard deviation).
pub fn compute_yield_stats(values: &[f64]) -> Result<YieldStats> {
    if values.is_empty() {
        return Err(VitaError::InvalidData("cannot compute yield stats on empty split".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(VitaError::InvalidData("yield split has zero variance".into()));
    }
    Ok(YieldStats { mean, std: var.sqrt() })
}

/// Uniformly permute the calendar-year labels of a pretraining dataset.
/// Weather values are untouched; only the year metadata moves.
pub fn permute_years(mut grids: Vec<WeatherGrid>, seed: u64) -> Vec<WeatherGrid> {
    let mut years: Vec<i32> = grids
        .iter()
        .flat_map(|g| g.weeks.iter().map(|&(y, _)| y))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let original = years.clone();
    use rand::seq::SliceRandom as _;
    years.shuffle(&mut rng::seeded(seed));
    let mapping: HashMap<i32, i32> = original.into_iter().zip(years).collect();
    for grid in &mut grids {
        for week in &mut grid.weeks {
            week.0 = mapping[&week.0];
        }
    }
    grids
}

/// Join county yields with the nearest weather grid (squared-degree
/// distance between centroids) and extract per-year `52 x 6` basic blocks.
pub fn pair_counties_with_grids(
    counties: &[CountyYields],
    grids: &[WeatherGrid],
) -> Result<Vec<CountySeries>> {
    if grids.is_empty() {
        return Err(VitaError::InvalidData("no weather grids to pair with".into()));
    }
    let mut out = Vec::with_capacity(counties.len());
    for county in counties {
        let nearest = grids
            .iter()
            .min_by(|a, b| {
                let da = (a.lat - county.lat).powi(2) + (a.lon - county.lon).powi(2);
                let db = (b.lat - county.lat).powi(2) + (b.lon - county.lon).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();

        let mut weather_by_year: BTreeMap<i32, Tensor> = BTreeMap::new();
        let mut year_rows: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &(year, _)) in nearest.weeks.iter().enumerate() {
            year_rows.entry(year).or_default().push(i);
        }
        for (year, rows) in year_rows {
            if rows.len() != 52 || rows.iter().any(|&i| !nearest.valid[i]) {
                continue;
            }
            let mut block = Tensor::zeros(vec![52, NUM_BASIC]);
            for (w, &row) in rows.iter().enumerate() {
                for (j, &k) in BASIC_CHANNEL_INDICES.iter().enumerate() {
                    block.set2(w, j, nearest.values.at2(row, k));
                }
            }
            weather_by_year.insert(year, block);
        }
        out.push(CountySeries {
            county_id: county.county_id.clone(),
            crop: county.crop,
            lat: county.lat,
            lon: county.lon,
            yields: county.yields.iter().cloned().collect(),
            weather_by_year,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn weather_csv(rows: &[(&str, f64, f64, i32, u32)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "grid_id,lat,lon,year,week").unwrap();
        for name in CHANNEL_NAMES {
            write!(f, ",{}", name).unwrap();
        }
        writeln!(f).unwrap();
        for &(grid, lat, lon, year, week) in rows {
            write!(f, "{},{},{},{},{}", grid, lat, lon, year, week).unwrap();
            for k in 0..NUM_CHANNELS {
                write!(f, ",{}", (k as f64) + (week as f64) * 0.1).unwrap();
            }
            writeln!(f).unwrap();
        }
        f
    }

    #[test]
    fn loads_two_years_of_one_grid() {
        let mut rows = Vec::new();
        for year in [2000, 2001] {
            for week in 1..=52 {
                rows.push(("g1", 40.0, -90.0, year, week));
            }
        }
        let f = weather_csv(&rows);
        let (grids, report) = load_weather_csv(f.path()).unwrap();
        assert_eq!(report.rows, 104);
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].weeks.len(), 104);
        assert!(grids[0].valid.iter().all(|&v| v));
    }

    #[test]
    fn duplicate_row_is_an_error_naming_the_key() {
        let f = weather_csv(&[("g1", 40.0, -90.0, 2000, 1), ("g1", 40.0, -90.0, 2000, 1)]);
        let err = load_weather_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("g1") && err.contains("2000") && err.contains("week 1"), "{}", err);
    }

    #[test]
    fn week_53_rows_are_dropped_and_counted() {
        let mut rows = vec![("g1", 40.0, -90.0, 2000, 53)];
        for week in 1..=52 {
            rows.push(("g1", 40.0, -90.0, 2000, week));
        }
        let f = weather_csv(&rows);
        let (grids, report) = load_weather_csv(f.path()).unwrap();
        assert_eq!(report.week53_dropped, 1);
        assert_eq!(grids[0].weeks.len(), 52);
    }

    #[test]
    fn short_gaps_interpolate_longer_gaps_invalidate() {
        // weeks 1..=10 with weeks 4,5 missing (gap of 2 -> interpolated)
        let mut rows = Vec::new();
        for week in [1u32, 2, 3, 6, 7, 8, 9, 10] {
            rows.push(("g1", 40.0, -90.0, 2000, week));
        }
        let f = weather_csv(&rows);
        let (grids, report) = load_weather_csv(f.path()).unwrap();
        assert_eq!(report.interpolated_weeks, 2);
        assert_eq!(report.unrepaired_weeks, 0);
        assert!(grids[0].valid.iter().all(|&v| v));
        // interpolation is linear between week 3 and week 6 values
        let v3 = grids[0].values.at2(2, 0);
        let v6 = grids[0].values.at2(5, 0);
        let v4 = grids[0].values.at2(3, 0);
        assert!((v4 - (v3 + (v6 - v3) / 3.0)).abs() < 1e-12);

        // weeks 1..=10 with weeks 4,5,6 missing (gap of 3 -> invalid)
        let mut rows = Vec::new();
        for week in [1u32, 2, 3, 7, 8, 9, 10] {
            rows.push(("g1", 40.0, -90.0, 2000, week));
        }
        let f = weather_csv(&rows);
        let (grids, report) = load_weather_csv(f.path()).unwrap();
        assert_eq!(report.unrepaired_weeks, 3);
        assert_eq!(grids[0].valid.iter().filter(|&&v| !v).count(), 3);
    }

    fn synthetic_grid(total_weeks: usize) -> WeatherGrid {
        let mut weeks = Vec::new();
        let (mut year, mut week) = (2000, 1);
        for _ in 0..total_weeks {
            weeks.push((year, week));
            let next = week_successor(year, week);
            year = next.0;
            week = next.1;
        }
        WeatherGrid {
            grid_id: "g".into(),
            lat: 40.0,
            lon: -90.0,
            values: Tensor::zeros(vec![total_weeks, NUM_CHANNELS]),
            valid: vec![true; total_weeks],
            weeks,
        }
    }

    #[test]
    fn windowing_counts() {
        assert_eq!(window_pretraining(&synthetic_grid(2028)).len(), 5);
        assert_eq!(window_pretraining(&synthetic_grid(364)).len(), 1);
        assert_eq!(window_pretraining(&synthetic_grid(363)).len(), 0);
    }

    #[test]
    fn windowing_conserves_weeks() {
        for total in [0, 100, 364, 500, 728, 1000, 2028] {
            let windows = window_pretraining(&synthetic_grid(total));
            let used: usize = windows.iter().map(|w| w.t_len()).sum();
            let tail = total % MAX_CONTEXT_WEEKS;
            assert_eq!(used + tail, total);
        }
    }

    #[test]
    fn norm_stats_hand_example_and_roundtrip() {
        // population stats of [1,2,3]: mean 2, std sqrt(2/3)
        let mut window = WeatherWindow {
            grid_id: "g".into(),
            lat: 0.0,
            lon: 0.0,
            years: vec![2000, 2000, 2000],
            channels: Tensor::zeros(vec![3, NUM_CHANNELS]),
        };
        for t in 0..3 {
            for k in 0..NUM_CHANNELS {
                window.channels.set2(t, k, (t + 1) as f64 + k as f64);
            }
        }
        let stats = compute_norm_stats(std::slice::from_ref(&window)).unwrap();
        assert!((stats.channel_mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.channel_std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((stats.channel_std[0] - 0.8165).abs() < 1e-4);

        let normed = apply_norm(&window.channels, &stats.channel_mean, &stats.channel_std);
        let mean0: f64 = (0..3).map(|t| normed.at2(t, 0)).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12);
        let back = invert_norm(&normed, &stats.channel_mean, &stats.channel_std);
        for (a, b) in back.data().iter().zip(window.channels.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_channel_rejected() {
        let window = WeatherWindow {
            grid_id: "g".into(),
            lat: 0.0,
            lon: 0.0,
            years: vec![2000, 2000],
            channels: Tensor::zeros(vec![2, NUM_CHANNELS]),
        };
        assert!(compute_norm_stats(&[window]).is_err());
    }

    #[test]
    fn stats_never_read_validation_rows() {
        let make = |fill: f64| WeatherWindow {
            grid_id: "g".into(),
            lat: 0.0,
            lon: 0.0,
            years: vec![2000, 2000],
            channels: Tensor::new(
                vec![2, NUM_CHANNELS],
                (0..2 * NUM_CHANNELS).map(|i| fill + (i % 7) as f64).collect(),
            ),
        };
        let split_a =
            SplitWindows { train: vec![make(1.0)], validation: vec![make(100.0)] };
        let split_b =
            SplitWindows { train: vec![make(1.0)], validation: vec![make(-55.0)] };
        let a = compute_norm_stats(&split_a.train).unwrap();
        let b = compute_norm_stats(&split_b.train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permute_years_contract() {
        let grid = synthetic_grid(208);
        let grids = vec![grid];
        let permuted = permute_years(grids.clone(), 5);
        // weather bitwise unchanged
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&permuted[0].values), bits(&grids[0].values));
        // the year set is preserved
        let years = |g: &WeatherGrid| {
            g.weeks.iter().map(|&(y, _)| y).collect::<std::collections::BTreeSet<_>>()
        };
        assert_eq!(years(&permuted[0]), years(&grids[0]));
        // distinct seeds give distinct permutations (4 years -> 1/24 collision)
        let p1 = permute_years(grids.clone(), 1);
        let mut found_diff = false;
        for seed in 2..12 {
            let p2 = permute_years(grids.clone(), seed);
            if p1[0].weeks != p2[0].weeks {
                found_diff = true;
                break;
            }
        }
        assert!(found_diff);
    }

    #[test]
    fn crop_parsing() {
        assert_eq!("corn".parse::<Crop>().unwrap(), Crop::Corn);
        assert_eq!("Soybean".parse::<Crop>().unwrap(), Crop::Soybean);
        assert!("rice".parse::<Crop>().is_err());
    }
}
