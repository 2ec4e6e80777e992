//! Population summary of per-subject volumes and histogram export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::VolumeReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SummaryOptions {
    /// Include margin-flagged (zero-volume) subjects in mean/SD.
    #[serde(default)]
    pub include_flagged: bool,
    /// Count values exactly on mean ± 2 SD as outliers.
    #[serde(default)]
    pub inclusive_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub n: usize,
    pub n_zero_flagged: usize,
    pub mean_ml: f64,
    pub sd_ml: f64,
    pub frac_above_2sd: f64,
    pub frac_below_2sd: f64,
    pub frac_outside_2sd: f64,
    pub bounds: (f64, f64),
    pub include_flagged: bool,
    pub inclusive_bounds: bool,
    /// Always "population" (divisor n).
    pub sd_kind: String,
}

/// Mean, population SD and ±2 SD outlier fractions.
pub fn summarize(reports: &[VolumeReport], options: SummaryOptions) -> Result<PopulationSummary> {
    let n_zero_flagged = reports.iter().filter(|r| r.margin_flagged).count();
    let volumes: Vec<f64> = reports
        .iter()
        .filter(|r| options.include_flagged || !r.margin_flagged)
        .map(|r| r.volume_ml)
        .collect();
    summarize_values(&volumes, n_zero_flagged, options)
}

pub(crate) fn summarize_values(
    volumes: &[f64],
    n_zero_flagged: usize,
    options: SummaryOptions,
) -> Result<PopulationSummary> {
    let n = volumes.len();
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    let mean = volumes.iter().sum::<f64>() / n as f64;
    let var = volumes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    let (lo, hi) = (mean - 2.0 * sd, mean + 2.0 * sd);
    let (above, below) = volumes.iter().fold((0usize, 0usize), |(a, b), &v| {
        if options.inclusive_bounds {
            (a + (v >= hi) as usize, b + (v <= lo) as usize)
        } else {
            (a + (v > hi) as usize, b + (v < lo) as usize)
        }
    });
    // inclusive bounds with sd = 0 would count every value twice
    let (above, below) = if sd == 0.0 { (0, 0) } else { (above, below) };
    let frac_above = above as f64 / n as f64;
    let frac_below = below as f64 / n as f64;
    Ok(PopulationSummary {
        n,
        n_zero_flagged,
        mean_ml: mean,
        sd_ml: sd,
        frac_above_2sd: frac_above,
        frac_below_2sd: frac_below,
        frac_outside_2sd: (above + below) as f64 / n as f64,
        bounds: (lo, hi),
        include_flagged: options.include_flagged,
        inclusive_bounds: options.inclusive_bounds,
        sd_kind: "population".into(),
    })
}

impl PopulationSummary {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "n",
            "n_zero_flagged",
            "mean_ml",
            "sd_ml",
            "frac_above_2sd",
            "frac_below_2sd",
            "frac_outside_2sd",
            "lower_bound_ml",
            "upper_bound_ml",
            "include_flagged",
            "inclusive_bounds",
            "sd_kind",
        ])?;
        w.write_record([
            self.n.to_string(),
            self.n_zero_flagged.to_string(),
            self.mean_ml.to_string(),
            self.sd_ml.to_string(),
            self.frac_above_2sd.to_string(),
            self.frac_below_2sd.to_string(),
            self.frac_outside_2sd.to_string(),
            self.bounds.0.to_string(),
            self.bounds.1.to_string(),
            self.include_flagged.to_string(),
            self.inclusive_bounds.to_string(),
            self.sd_kind.clone(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

/// `[k w, (k+1) w)` bins from 0 up to the bin holding the largest volume.
pub fn histogram_csv(reports: &[VolumeReport], bin_width_ml: f64) -> Result<Vec<HistogramBin>> {
    let volumes: Vec<f64> = reports.iter().map(|r| r.volume_ml).collect();
    histogram(&volumes, bin_width_ml)
}

pub fn histogram(volumes: &[f64], bin_width_ml: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_width_ml.is_finite() && bin_width_ml > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bin width must be > 0, got {bin_width_ml}"
        )));
    }
    if let Some(v) = volumes.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("volume {v} cannot be binned")));
    }
    let bin_of = |v: f64| {
        let mut k = (v / bin_width_ml).floor() as usize;
        // keep bins left-closed even when the division rounds
        if v < k as f64 * bin_width_ml {
            k -= 1;
        } else if v >= (k + 1) as f64 * bin_width_ml {
            k += 1;
        }
        k
    };
    let Some(last) = volumes.iter().map(|&v| bin_of(v)).max() else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0u64; last + 1];
    for &v in volumes {
        counts[bin_of(v)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            bin_left: k as f64 * bin_width_ml,
            bin_right: (k + 1) as f64 * bin_width_ml,
            count,
        })
        .collect())
}

pub fn write_histogram_csv(bins: &[HistogramBin], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["bin_left", "bin_right", "count"])?;
    for b in bins {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
