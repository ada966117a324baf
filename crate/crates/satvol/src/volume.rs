//! Volume tracking over a time series of aligned DSMs: terrain plane
//! estimation, dynamic-area masking, normalized DSM computation, volume
//! integration, and the weight-from-volume regression.

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raster::{DsmGrid, GridFrame, RasterError};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("too few valid cells: {got}, need {required}")]
    TooFewCells { got: usize, required: usize },
    #[error("need at least {required} dates, got {got}")]
    TooFewDates { required: usize, got: usize },
    #[error("need at least {required} overlapping samples, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("bad date {0:?}: expected YYYY-MM-DD")]
    BadDate(String),
    #[error("raster: {0}")]
    Raster(#[from] RasterError),
}

/// Quantile with linear interpolation of the empirical distribution
/// function (Hyndman-Fan type 4): at h = p*n the quantile sits exactly on
/// the order statistic, so a p-sized block at the low end maps to that
/// block's value.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty set");
    let n = sorted.len() as f64;
    let h = p * n;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n {
        return sorted[sorted.len() - 1];
    }
    let pos = h - 1.0;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Terrain model for flat sites: a constant plane at the 25th percentile of
/// the DSM heights.
pub fn estimate_dtm(dsm: &DsmGrid) -> Result<DsmGrid, VolumeError> {
    const MIN_CELLS: usize = 100;
    let mut heights: Vec<f64> = dsm.values().iter().copied().filter(|v| !v.is_nan()).collect();
    if heights.len() < MIN_CELLS {
        return Err(VolumeError::TooFewCells { got: heights.len(), required: MIN_CELLS });
    }
    heights.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let plane = quantile(&heights, 0.25);
    Ok(DsmGrid::filled(dsm.frame, plane))
}

/// Boolean mask of the dynamic cells of a series, on the shared frame.
#[derive(Debug, Clone)]
pub struct DynamicMask {
    pub frame: GridFrame,
    mask: Vec<bool>,
}

impl DynamicMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.frame.width + col]
    }

    pub fn dynamic_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Cells whose temporal population standard deviation (over at least three
/// valid dates) exceeds `tau`, cleaned by a morphological opening with a
/// 3x3 structuring element.
pub fn compute_dynamic_mask(series: &[DsmGrid], tau: f64) -> Result<DynamicMask, VolumeError> {
    if series.len() < 3 {
        return Err(VolumeError::TooFewDates { required: 3, got: series.len() });
    }
    let frame = series[0].frame;
    for d in &series[1..] {
        if d.frame != frame {
            return Err(RasterError::FrameMismatch(format!("{:?} vs {:?}", frame, d.frame)).into());
        }
    }

    let cells = frame.width * frame.height;
    let mut raw = vec![false; cells];
    for (i, flag) in raw.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for d in series {
            let v = d.values()[i];
            if !v.is_nan() {
                sum += v;
                count += 1;
            }
        }
        if count < 3 {
            continue;
        }
        let mean = sum / count as f64;
        let var = series
            .iter()
            .filter_map(|d| {
                let v = d.values()[i];
                (!v.is_nan()).then(|| (v - mean) * (v - mean))
            })
            .sum::<f64>()
            / count as f64;
        *flag = var.sqrt() > tau;
    }

    // Opening: erosion followed by dilation, both 3x3; outside counts as
    // static.
    let at = |m: &[bool], r: i64, c: i64| -> bool {
        if r < 0 || c < 0 || r >= frame.height as i64 || c >= frame.width as i64 {
            false
        } else {
            m[r as usize * frame.width + c as usize]
        }
    };
    let mut eroded = vec![false; cells];
    for r in 0..frame.height as i64 {
        for c in 0..frame.width as i64 {
            let mut all = true;
            'win: for dr in -1..=1 {
                for dc in -1..=1 {
                    if !at(&raw, r + dr, c + dc) {
                        all = false;
                        break 'win;
                    }
                }
            }
            eroded[r as usize * frame.width + c as usize] = all;
        }
    }
    let mut opened = vec![false; cells];
    for r in 0..frame.height as i64 {
        for c in 0..frame.width as i64 {
            let mut any = false;
            'win: for dr in -1..=1 {
                for dc in -1..=1 {
                    if at(&eroded, r + dr, c + dc) {
                        any = true;
                        break 'win;
                    }
                }
            }
            opened[r as usize * frame.width + c as usize] = any;
        }
    }

    Ok(DynamicMask { frame, mask: opened })
}

/// A normalized DSM plus the fraction of mask cells that had no data.
#[derive(Debug, Clone)]
pub struct Ndsm {
    pub grid: DsmGrid,
    /// Fraction of dynamic-mask cells where the DSM had no data (those
    /// cells contribute zero volume).
    pub nodata_fraction: f64,
}

/// Masked, thresholded height above ground: DSM - DTM inside the dynamic
/// mask where the difference lies in [hmin, hmax], zero everywhere else.
pub fn compute_ndsm(
    dsm: &DsmGrid,
    dtm: &DsmGrid,
    mask: &DynamicMask,
    hmin: f64,
    hmax: f64,
) -> Result<Ndsm, VolumeError> {
    if dsm.frame != dtm.frame || dsm.frame != mask.frame {
        return Err(RasterError::FrameMismatch("ndsm inputs".into()).into());
    }
    let frame = dsm.frame;
    let mut out = DsmGrid::filled(frame, 0.0);
    let mut masked_cells = 0usize;
    let mut masked_nodata = 0usize;
    for row in 0..frame.height {
        for col in 0..frame.width {
            if !mask.get(row, col) {
                continue;
            }
            masked_cells += 1;
            let v = dsm.get(row, col);
            let t = dtm.get(row, col);
            if v.is_nan() || t.is_nan() {
                masked_nodata += 1;
                continue;
            }
            let diff = v - t;
            if diff >= hmin && diff <= hmax {
                out.set(row, col, diff);
            }
        }
    }
    let nodata_fraction = if masked_cells == 0 {
        0.0
    } else {
        masked_nodata as f64 / masked_cells as f64
    };
    Ok(Ndsm { grid: out, nodata_fraction })
}

/// Total volume of an nDSM in cubic meters: the sum of cell volumes
/// gsd * gsd * height.
pub fn integrate_volume(ndsm: &DsmGrid) -> f64 {
    let cell_area = ndsm.frame.gsd * ndsm.frame.gsd;
    ndsm.values().iter().filter(|v| !v.is_nan()).sum::<f64>() * cell_area
}

/// One date's volume measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEntry {
    /// Calendar date, YYYY-MM-DD.
    pub date: String,
    pub volume_m3: f64,
    pub nodata_fraction: f64,
}

/// A dated volume series with its provenance.
#[derive(Debug, Clone)]
pub struct VolumeSeries {
    pub entries: Vec<VolumeEntry>,
    pub gsd: f64,
    pub hmin: f64,
    pub hmax: f64,
    pub mask_tau: f64,
}

/// Affine weight-from-volume model S = a * V + b with V in millions of
/// cubic meters and S in megatonnes.
#[derive(Debug, Clone)]
pub struct WeightRegression {
    /// Megatonnes per million cubic meters (a bulk density).
    pub a: f64,
    /// Megatonnes.
    pub b: f64,
    pub rms_train: f64,
    pub rms_test: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Interpolated (date, volume Mm3, weight Mt, used_for_training) rows.
    pub samples: Vec<(String, f64, f64, bool)>,
}

pub fn parse_date(s: &str) -> Result<NaiveDate, VolumeError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| VolumeError::BadDate(s.to_string()))
}

fn interpolate_at(series: &[(f64, f64)], t: f64) -> Option<f64> {
    if series.is_empty() || t < series[0].0 || t > series[series.len() - 1].0 {
        return None;
    }
    let i = series.partition_point(|(x, _)| *x <= t);
    if i == 0 {
        return Some(series[0].1);
    }
    if i >= series.len() {
        return Some(series[series.len() - 1].1);
    }
    let (x0, y0) = series[i - 1];
    let (x1, y1) = series[i];
    if x1 == x0 {
        return Some(y0);
    }
    Some(y0 + (y1 - y0) * (t - x0) / (x1 - x0))
}

/// Fit S(t) = a V(t) + b: both series linearly interpolated to the union of
/// their dates within the common span, a seeded random `train_fraction`
/// subset fit by ordinary least squares, the rest held out.
pub fn fit_weight_regression(
    volumes: &[(String, f64)],
    weights: &[(String, f64)],
    train_fraction: f64,
    seed: u64,
) -> Result<WeightRegression, VolumeError> {
    const MIN_SAMPLES: usize = 4;

    let mut vol: Vec<(f64, f64)> = Vec::with_capacity(volumes.len());
    for (d, v) in volumes {
        vol.push((parse_date(d)?.num_days_from_ce() as f64, v / 1e6));
    }
    let mut wts: Vec<(f64, f64)> = Vec::with_capacity(weights.len());
    for (d, s) in weights {
        wts.push((parse_date(d)?.num_days_from_ce() as f64, *s));
    }
    vol.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    wts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    // Union of dates within the common span.
    let mut days: Vec<f64> = vol.iter().chain(wts.iter()).map(|(d, _)| *d).collect();
    days.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    days.dedup();
    let mut samples: Vec<(f64, f64, f64)> = Vec::new();
    for t in days {
        let (Some(v), Some(s)) = (interpolate_at(&vol, t), interpolate_at(&wts, t)) else {
            continue;
        };
        samples.push((t, v, s));
    }
    if samples.len() < MIN_SAMPLES {
        return Err(VolumeError::TooFewSamples { got: samples.len(), required: MIN_SAMPLES });
    }

    let v_mean = samples.iter().map(|(_, v, _)| v).sum::<f64>() / samples.len() as f64;
    let v_var = samples.iter().map(|(_, v, _)| (v - v_mean) * (v - v_mean)).sum::<f64>();
    if v_var <= 1e-18 {
        return Err(VolumeError::DegenerateFit("zero volume variance".into()));
    }

    // Seeded uniform train subset.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((samples.len() as f64 * train_fraction).round() as usize)
        .clamp(2, samples.len());
    let mut is_train = vec![false; samples.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }

    // Ordinary least squares on the training subset.
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, (_, v, s)) in samples.iter().enumerate() {
        if is_train[i] {
            sx += v;
            sy += s;
            sxx += v * v;
            sxy += v * s;
        }
    }
    let n = n_train as f64;
    let den = n * sxx - sx * sx;
    if den.abs() <= 1e-18 {
        return Err(VolumeError::DegenerateFit("training volumes are collinear".into()));
    }
    let a = (n * sxy - sx * sy) / den;
    let b = (sy - a * sx) / n;

    let mut sq_train = 0.0;
    let mut sq_test = 0.0;
    let mut n_test = 0usize;
    for (i, (_, v, s)) in samples.iter().enumerate() {
        let r = s - (a * v + b);
        if is_train[i] {
            sq_train += r * r;
        } else {
            sq_test += r * r;
            n_test += 1;
        }
    }
    let rms_train = (sq_train / n_train as f64).sqrt();
    let rms_test = if n_test > 0 { (sq_test / n_test as f64).sqrt() } else { 0.0 };

    let date_of = |day: f64| -> String {
        NaiveDate::from_num_days_from_ce_opt(day as i32)
            .map(|d| d.format("%Y-%m-%d").to_string())
            .unwrap_or_else(|| format!("day{day}"))
    };
    let rows = samples
        .iter()
        .enumerate()
        .map(|(i, (t, v, s))| (date_of(*t), *v, *s, is_train[i]))
        .collect();

    Ok(WeightRegression { a, b, rms_train, rms_test, train_fraction, seed, samples: rows })
}

/// Predicted weight in megatonnes for a volume in cubic meters.
pub fn predict_weight(reg: &WeightRegression, volume_m3: f64) -> f64 {
    reg.a * (volume_m3 / 1e6) + reg.b
}
