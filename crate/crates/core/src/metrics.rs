//! Evaluation: KITTI-style odometry drift, localization RMSE, error
//! histograms and a trend test for error growth.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::wrap_angle;
use crate::localization::LocalizationError;
use crate::trajectory::{arc_lengths, read_numeric_csv, CsvError, TimedPose};

/// Segment lengths evaluated by [`kitti_drift`], meters.
pub const DRIFT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Timestamps of matched trajectories may differ by at most this much.
pub const TIME_MATCH_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectories differ in length ({est} estimated vs {gt} ground truth poses)")]
    LengthMismatch { est: usize, gt: usize },
    #[error("timestamps differ at pose {index}: {est} vs {gt}")]
    TimeMismatch { index: usize, est: f64, gt: f64 },
    #[error("no errors to evaluate")]
    Empty,
    #[error("bin width must be positive, got {0}")]
    BadBinWidth(f64),
    #[error(transparent)]
    Csv(#[from] CsvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDrift {
    pub length: f64,
    pub n_segments: usize,
    /// Percent.
    pub translation_drift: f64,
    /// Degrees per 100 m.
    pub rotation_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Percent, averaged over every segment of every length.
    pub translation_drift: f64,
    /// Degrees per 100 m, averaged like `translation_drift`.
    pub rotation_drift: f64,
    /// Lengths with at least one segment, shortest first.
    pub per_length: Vec<LengthDrift>,
}

impl DriftReport {
    pub fn n_segments(&self) -> usize {
        self.per_length.iter().map(|l| l.n_segments).sum()
    }
}

fn check_matched(est: &[TimedPose], gt: &[TimedPose]) -> Result<(), MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    for (index, (e, g)) in est.iter().zip(gt).enumerate() {
        if (e.time - g.time).abs() > TIME_MATCH_TOL {
            return Err(MetricsError::TimeMismatch {
                index,
                est: e.time,
                gt: g.time,
            });
        }
    }
    Ok(())
}

/// Relative-pose drift over segments of 100..800 m starting at every frame.
///
/// A segment of length `L` starting at frame `i` ends at the first frame whose
/// ground-truth arc length is at least `L` further along. Its error is the
/// difference between the estimated and true motion over the segment,
/// normalized by `L`.
pub fn kitti_drift(est: &[TimedPose], gt: &[TimedPose]) -> Result<DriftReport, MetricsError> {
    check_matched(est, gt)?;
    let dist = arc_lengths(gt);
    let mut per_length = Vec::new();
    let (mut t_sum, mut r_sum, mut n_total) = (0.0, 0.0, 0usize);
    for &length in &DRIFT_LENGTHS {
        let (mut t_acc, mut r_acc, mut n) = (0.0, 0.0, 0usize);
        for i in 0..gt.len() {
            let j = i + dist[i..].partition_point(|&d| d < dist[i] + length);
            if j >= gt.len() {
                break;
            }
            let truth = gt[i].pose.between(&gt[j].pose);
            let moved = est[i].pose.between(&est[j].pose);
            let err = truth.between(&moved);
            t_acc += err.translation().norm() / length;
            r_acc += wrap_angle(err.theta).abs() / length;
            n += 1;
        }
        if n == 0 {
            continue;
        }
        per_length.push(LengthDrift {
            length,
            n_segments: n,
            translation_drift: 100.0 * t_acc / n as f64,
            rotation_drift: (r_acc / n as f64).to_degrees() * 100.0,
        });
        t_sum += t_acc;
        r_sum += r_acc;
        n_total += n;
    }
    let (translation_drift, rotation_drift) = if n_total == 0 {
        (0.0, 0.0)
    } else {
        (100.0 * t_sum / n_total as f64, (r_sum / n_total as f64).to_degrees() * 100.0)
    };
    Ok(DriftReport {
        translation_drift,
        rotation_drift,
        per_length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub longitudinal_rmse: f64,
    pub lateral_rmse: f64,
    /// Degrees.
    pub heading_rmse: f64,
    /// `sqrt(longitudinal_rmse² + lateral_rmse²)`.
    pub overall: f64,
    pub n_frames: usize,
}

pub fn localization_rmse(errors: &[LocalizationError]) -> Result<RmseReport, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = errors.len() as f64;
    let rms = |f: &dyn Fn(&LocalizationError) -> f64| (errors.iter().map(|e| f(e).powi(2)).sum::<f64>() / n).sqrt();
    let longitudinal_rmse = rms(&|e| e.longitudinal);
    let lateral_rmse = rms(&|e| e.lateral);
    Ok(RmseReport {
        longitudinal_rmse,
        lateral_rmse,
        heading_rmse: rms(&|e| e.heading).to_degrees(),
        overall: longitudinal_rmse.hypot(lateral_rmse),
        n_frames: errors.len(),
    })
}

/// Counts of one error component in bins `[k·w, (k+1)·w)` for `k` from `first_bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentHistogram {
    pub component: String,
    pub first_bin: i64,
    pub counts: Vec<usize>,
}

impl ComponentHistogram {
    fn build(component: &str, values: &[f64], bin_width: f64) -> Self {
        let bins: Vec<i64> = values.iter().map(|v| (v / bin_width).floor() as i64).collect();
        let first_bin = bins.iter().copied().min().unwrap_or(0);
        let last = bins.iter().copied().max().unwrap_or(-1);
        let mut counts = vec![0; (last - first_bin + 1).max(0) as usize];
        for b in bins {
            counts[(b - first_bin) as usize] += 1;
        }
        Self {
            component: component.to_string(),
            first_bin,
            counts,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Mean of the values represented by bin centres.
    pub fn mean(&self, bin_width: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * (self.first_bin as f64 + i as f64 + 0.5) * bin_width)
            .sum();
        sum / total as f64
    }
}

/// Longitudinal and lateral errors binned in meters, heading in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub bin_width: f64,
    pub longitudinal: ComponentHistogram,
    pub lateral: ComponentHistogram,
    pub heading: ComponentHistogram,
}

pub const HISTOGRAM_CSV_HEADER: &str = "component,bin_start,bin_end,count";

impl ErrorHistogram {
    pub fn components(&self) -> [&ComponentHistogram; 3] {
        [&self.longitudinal, &self.lateral, &self.heading]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{HISTOGRAM_CSV_HEADER}")?;
        for h in self.components() {
            for (i, count) in h.counts.iter().enumerate() {
                let k = h.first_bin + i as i64;
                writeln!(
                    out,
                    "{},{},{},{}",
                    h.component,
                    k as f64 * self.bin_width,
                    (k + 1) as f64 * self.bin_width,
                    count
                )?;
            }
        }
        out.flush()
    }
}

pub fn error_histogram(errors: &[LocalizationError], bin_width: f64) -> Result<ErrorHistogram, MetricsError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(MetricsError::BadBinWidth(bin_width));
    }
    let pick = |f: fn(&LocalizationError) -> f64| errors.iter().map(f).collect::<Vec<f64>>();
    Ok(ErrorHistogram {
        bin_width,
        longitudinal: ComponentHistogram::build("longitudinal", &pick(|e| e.longitudinal), bin_width),
        lateral: ComponentHistogram::build("lateral", &pick(|e| e.lateral), bin_width),
        heading: ComponentHistogram::build("heading", &pick(|e| e.heading.to_degrees()), bin_width),
    })
}

/// Least-squares line through `(x, y)` with the standard error of its slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    pub n: usize,
}

impl TrendFit {
    /// No significant growth: the slope is not above zero by two standard errors.
    pub fn is_bounded(&self) -> bool {
        self.slope - 2.0 * self.slope_std_error <= 0.0
    }
}

/// Ordinary least squares of `y` on `x`; needs three points and spread in `x`.
pub fn error_trend(x: &[f64], y: &[f64]) -> Option<TrendFit> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Some(TrendFit {
        slope,
        intercept,
        slope_std_error: (rss / (nf - 2.0) / sxx).sqrt(),
        n,
    })
}

pub const DRIFT_CSV_HEADER: &str = "length,n_segments,translation_drift_percent,rotation_drift_deg_per_100m";
pub const RMSE_CSV_HEADER: &str = "n_frames,longitudinal_rmse,lateral_rmse,overall,heading_rmse_deg";

/// Per-length rows followed by an `all` row with the weighted averages.
pub fn write_drift_csv<W: Write>(report: &DriftReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{DRIFT_CSV_HEADER}")?;
    for l in &report.per_length {
        writeln!(out, "{},{},{},{}", l.length, l.n_segments, l.translation_drift, l.rotation_drift)?;
    }
    writeln!(
        out,
        "all,{},{},{}",
        report.n_segments(),
        report.translation_drift,
        report.rotation_drift
    )?;
    out.flush()
}

pub fn write_rmse_csv<W: Write>(report: &RmseReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RMSE_CSV_HEADER}")?;
    writeln!(
        out,
        "{},{},{},{},{}",
        report.n_frames, report.longitudinal_rmse, report.lateral_rmse, report.overall, report.heading_rmse
    )?;
    out.flush()
}

/// Reads `longitudinal,lateral,heading` columns (meters, meters, degrees).
///
/// This is the layout of published per-frame error tables; the heading is
/// converted to radians.
pub fn read_error_table<R: Read>(reader: R) -> Result<Vec<LocalizationError>, MetricsError> {
    let rows = read_numeric_csv(reader, &["longitudinal", "lateral", "heading"])?;
    Ok(rows
        .iter()
        .map(|r| LocalizationError::new(r[0], r[1], r[2].to_radians()))
        .collect())
}

impl fmt::Display for DriftReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8}  {:>8}  {:>12}  {:>14}", "length", "segments", "trans [%]", "rot [deg/100m]")?;
        for l in &self.per_length {
            writeln!(
                f,
                "{:>8.0}  {:>8}  {:>12.4}  {:>14.4}",
                l.length, l.n_segments, l.translation_drift, l.rotation_drift
            )?;
        }
        write!(
            f,
            "{:>8}  {:>8}  {:>12.4}  {:>14.4}",
            "all",
            self.n_segments(),
            self.translation_drift,
            self.rotation_drift
        )
    }
}

impl fmt::Display for RmseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames        {:>10}", self.n_frames)?;
        writeln!(f, "longitudinal  {:>10.4} m", self.longitudinal_rmse)?;
        writeln!(f, "lateral       {:>10.4} m", self.lateral_rmse)?;
        writeln!(f, "overall       {:>10.4} m", self.overall)?;
        write!(f, "heading       {:>10.4} deg", self.heading_rmse)
    }
}
