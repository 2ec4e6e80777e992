//! Dice overlap, voxel volumetry and rater agreement.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::SegmentationMask;
use crate::postprocess::{format_faces, FlaggedMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub value: f64,
    pub n_a: u64,
    pub n_b: u64,
    pub n_intersection: u64,
}

/// `2 |A ∩ B| / (|A| + |B|)`. Both-empty is an error rather than a guess.
pub fn dice(a: &SegmentationMask, b: &SegmentationMask) -> Result<DiceResult> {
    if a.geometry().dims() != b.geometry().dims() {
        return Err(Error::GeometryMismatch(format!(
            "dice between dims {:?} and {:?}",
            a.geometry().dims(),
            b.geometry().dims()
        )));
    }
    let (mut n_a, mut n_b, mut n_intersection) = (0u64, 0u64, 0u64);
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        n_a += va as u64;
        n_b += vb as u64;
        n_intersection += (va & vb) as u64;
    }
    if n_a + n_b == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(DiceResult {
        value: 2.0 * n_intersection as f64 / (n_a + n_b) as f64,
        n_a,
        n_b,
        n_intersection,
    })
}

/// Per-subject volume. `volume_ml = voxel_count * voxel_volume_mm3 / 1000`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub subject_id: String,
    pub volume_ml: f64,
    pub voxel_count: u64,
    pub voxel_volume_mm3: f64,
    pub margin_flagged: bool,
    pub model_id: String,
}

pub fn mm3_to_ml(voxel_count: u64, voxel_volume_mm3: f64) -> f64 {
    voxel_count as f64 * voxel_volume_mm3 / 1000.0
}

/// Volume of the foreground of `mask`; identifiers are left blank.
pub fn volume_ml(mask: &SegmentationMask) -> VolumeReport {
    let voxel_count = mask.count() as u64;
    let voxel_volume_mm3 = mask.geometry().voxel_volume_mm3();
    VolumeReport {
        subject_id: String::new(),
        volume_ml: mm3_to_ml(voxel_count, voxel_volume_mm3),
        voxel_count,
        voxel_volume_mm3,
        margin_flagged: false,
        model_id: String::new(),
    }
}

impl VolumeReport {
    pub fn from_flagged(subject_id: &str, model_id: &str, flagged: &FlaggedMask) -> Self {
        VolumeReport {
            subject_id: subject_id.to_owned(),
            model_id: model_id.to_owned(),
            margin_flagged: flagged.margin_flagged,
            ..volume_ml(&flagged.mask)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// One line of the volumes CSV. Failed subjects keep their row with the
/// numeric columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub subject_id: String,
    pub volume_ml: Option<f64>,
    pub voxel_count: Option<u64>,
    pub voxel_volume_mm3: Option<f64>,
    pub margin_flagged: Option<bool>,
    pub model_id: String,
    pub touched_faces: String,
    pub normalization_hash: String,
    pub status: RowStatus,
    pub error: String,
}

impl VolumeRow {
    pub fn ok(report: &VolumeReport, flagged: &FlaggedMask, normalization_hash: &str) -> Self {
        Self {
            subject_id: report.subject_id.clone(),
            volume_ml: Some(report.volume_ml),
            voxel_count: Some(report.voxel_count),
            voxel_volume_mm3: Some(report.voxel_volume_mm3),
            margin_flagged: Some(report.margin_flagged),
            model_id: report.model_id.clone(),
            touched_faces: format_faces(&flagged.touched_faces),
            normalization_hash: normalization_hash.to_owned(),
            status: RowStatus::Ok,
            error: String::new(),
        }
    }

    pub fn failed(subject_id: &str, model_id: &str, normalization_hash: &str, error: &Error) -> Self {
        Self {
            subject_id: subject_id.to_owned(),
            volume_ml: None,
            voxel_count: None,
            voxel_volume_mm3: None,
            margin_flagged: None,
            model_id: model_id.to_owned(),
            touched_faces: String::new(),
            normalization_hash: normalization_hash.to_owned(),
            status: RowStatus::Failed,
            error: error.to_string(),
        }
    }

    pub fn report(&self) -> Option<VolumeReport> {
        match (self.status, self.volume_ml, self.voxel_count, self.voxel_volume_mm3, self.margin_flagged) {
            (RowStatus::Ok, Some(volume_ml), Some(voxel_count), Some(voxel_volume_mm3), Some(margin_flagged)) => {
                Some(VolumeReport {
                    subject_id: self.subject_id.clone(),
                    volume_ml,
                    voxel_count,
                    voxel_volume_mm3,
                    margin_flagged,
                    model_id: self.model_id.clone(),
                })
            }
            _ => None,
        }
    }
}

pub fn write_volumes_csv(rows: &[VolumeRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_volumes_csv(path: impl AsRef<Path>) -> Result<Vec<VolumeRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    /// Scored pairs sorted by subject id.
    pub pairs: Vec<(String, DiceResult)>,
    /// Pairs that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
    pub median: f64,
    pub mean: f64,
}

/// Median; even-length input averages the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Dice per subject pair plus median and mean. Unscorable pairs are kept in
/// `skipped` instead of aborting the report.
pub fn agreement<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a SegmentationMask, &'a SegmentationMask)>,
) -> Result<AgreementReport> {
    let mut pairs: Vec<_> = pairs.into_iter().collect();
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for (id, a, b) in pairs {
        match dice(a, b) {
            Ok(d) => scored.push((id.to_owned(), d)),
            Err(e) => skipped.push((id.to_owned(), e.to_string())),
        }
    }
    agreement_from_scores(scored, skipped)
}

pub fn agreement_from_scores(
    pairs: Vec<(String, DiceResult)>,
    skipped: Vec<(String, String)>,
) -> Result<AgreementReport> {
    let values: Vec<f64> = pairs.iter().map(|(_, d)| d.value).collect();
    let (Some(median), Some(mean)) = (median(&values), mean(&values)) else {
        return Err(Error::NoScorablePairs);
    };
    Ok(AgreementReport {
        pairs,
        skipped,
        median,
        mean,
    })
}

#[derive(Debug, Serialize)]
struct AgreementRow<'a> {
    subject_id: &'a str,
    dice: Option<f64>,
    n_a: Option<u64>,
    n_b: Option<u64>,
    n_intersection: Option<u64>,
    note: &'a str,
}

/// Per-pair rows, skipped pairs, then `median` and `mean` summary rows.
pub fn write_agreement_csv(report: &AgreementReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (id, d) in &report.pairs {
        w.serialize(AgreementRow {
            subject_id: id,
            dice: Some(d.value),
            n_a: Some(d.n_a),
            n_b: Some(d.n_b),
            n_intersection: Some(d.n_intersection),
            note: "",
        })?;
    }
    for (id, reason) in &report.skipped {
        w.serialize(AgreementRow {
            subject_id: id,
            dice: None,
            n_a: None,
            n_b: None,
            n_intersection: None,
            note: reason,
        })?;
    }
    for (label, value) in [("median", report.median), ("mean", report.mean)] {
        let note = format!("summary over {} pairs", report.pairs.len());
        w.serialize(AgreementRow {
            subject_id: label,
            dice: Some(value),
            n_a: None,
            n_b: None,
            n_intersection: None,
            note: &note,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
