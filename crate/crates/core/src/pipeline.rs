//! Config-driven pipeline steps behind the command-line subcommands.
//!
//! `infer` is resumable: each subject leaves a mask and a JSON record in the
//! output directory, written atomically, and a rerun skips subjects whose
//! record and mask already exist. The volumes CSV is always rebuilt from the
//! records in subject-id order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    load_stack, make_splits, scan_catalog, write_catalog_csv, CatalogSummary, ChannelPatterns,
    ScanOptions, SplitManifest, SplitSizes, SubjectRecord, WINDOW_DIMS,
};
use crate::error::{Error, Result};
use crate::inference::{
    load_model, predict_stack, stub_threshold_model, to_mask, Decision, ModelHandle,
    DEFAULT_BATCH_SIZE,
};
use crate::metrics::{
    agreement, read_volumes_csv, write_agreement_csv, write_volumes_csv, AgreementReport,
    RowStatus, VolumeReport, VolumeRow,
};
use crate::nifti::{read_mask, write_nifti};
use crate::phantom::mask_file_name;
use crate::popstats::{
    histogram_csv, summarize, write_histogram_csv, PopulationSummary, SummaryOptions,
};
use crate::postprocess::{apply_margin_rule, Face, MarginPolicy};
use crate::preprocess::{normalize, Axis, NormalizationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// Built-in water-threshold model (threshold in normalized units).
    Stub { threshold: f32 },
    Onnx { path: PathBuf },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Stub {
            threshold: crate::phantom::STUB_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// One id per line; defaults to the valid subjects of the catalog.
    pub annotated_ids: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
    pub rt: usize,
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            annotated_ids: None,
            train: 313,
            test: 37,
            rt: 12,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub ground_truth_dir: Option<PathBuf>,
    /// Score the final (margin-ruled) masks instead of the raw predictions.
    pub use_final_masks: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementConfig {
    pub rater_a_dir: Option<PathBuf>,
    pub rater_b_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Defaults to `<output_dir>/volumes.csv`.
    pub volumes_csv: Option<PathBuf>,
    pub bin_width_ml: f64,
    pub include_flagged: bool,
    pub inclusive_bounds: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            volumes_csv: None,
            bin_width_ml: 2.0,
            include_flagged: false,
            inclusive_bounds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub catalog_root: PathBuf,
    pub expected_dims: [usize; 3],
    pub channel_patterns: ChannelPatterns,
    /// Optional id allowlist (one per line), e.g. the male subjects.
    pub subject_allowlist: Option<PathBuf>,
    pub normalization: NormalizationSpec,
    pub model: ModelSource,
    /// Overrides the model metadata when set.
    pub slice_axis: Option<Axis>,
    /// Overrides the model metadata when set.
    pub decision: Option<Decision>,
    pub inference_batch_size: usize,
    pub margin_faces: Vec<Face>,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub split: SplitConfig,
    pub evaluate: EvaluateConfig,
    pub agreement: AgreementConfig,
    pub stats: StatsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            catalog_root: PathBuf::from("catalog"),
            expected_dims: WINDOW_DIMS,
            channel_patterns: ChannelPatterns::default(),
            subject_allowlist: None,
            normalization: NormalizationSpec::default(),
            model: ModelSource::default(),
            slice_axis: None,
            decision: None,
            inference_batch_size: DEFAULT_BATCH_SIZE,
            margin_faces: Face::ALL.to_vec(),
            workers: 1,
            output_dir: PathBuf::from("out"),
            seed: 42,
            split: SplitConfig::default(),
            evaluate: EvaluateConfig::default(),
            agreement: AgreementConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Scan,
    Split,
    Infer,
    Evaluate,
    Agreement,
    Stats,
}

impl PipelineConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.catalog_root);
        fix(&mut self.output_dir);
        if let ModelSource::Onnx { path } = &mut self.model {
            fix(path);
        }
        for p in [
            &mut self.subject_allowlist,
            &mut self.split.annotated_ids,
            &mut self.evaluate.ground_truth_dir,
            &mut self.agreement.rater_a_dir,
            &mut self.agreement.rater_b_dir,
            &mut self.stats.volumes_csv,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn margin_policy(&self) -> Result<MarginPolicy> {
        MarginPolicy::new(self.margin_faces.iter().copied())
    }

    /// Checks the fields `step` relies on, including that referenced paths exist.
    pub fn validate_for(&self, step: Step) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let exists = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        let required = |what: &str, p: &Option<PathBuf>| match p {
            Some(p) => exists(what, p),
            None => Err(Error::Config(format!("{what} is not set"))),
        };
        if let Some(p) = &self.subject_allowlist {
            exists("subject_allowlist", p)?;
        }
        match step {
            Step::Scan => exists("catalog_root", &self.catalog_root),
            Step::Split => {
                if self.split.annotated_ids.is_none() {
                    exists("catalog_root", &self.catalog_root)?;
                }
                if let Some(p) = &self.split.annotated_ids {
                    exists("split.annotated_ids", p)?;
                }
                Ok(())
            }
            Step::Infer => {
                exists("catalog_root", &self.catalog_root)?;
                self.normalization.validate()?;
                self.margin_policy()?;
                if self.inference_batch_size == 0 {
                    return Err(Error::Config("inference_batch_size must be >= 1".into()));
                }
                if let ModelSource::Onnx { path } = &self.model {
                    exists("model path", path)?;
                }
                Ok(())
            }
            Step::Evaluate => required("evaluate.ground_truth_dir", &self.evaluate.ground_truth_dir),
            Step::Agreement => {
                required("agreement.rater_a_dir", &self.agreement.rater_a_dir)?;
                required("agreement.rater_b_dir", &self.agreement.rater_b_dir)
            }
            Step::Stats => {
                if !(self.stats.bin_width_ml > 0.0) {
                    return Err(Error::Config("stats.bin_width_ml must be > 0".into()));
                }
                exists("volumes csv", &self.volumes_csv_path())
            }
        }
    }

    pub fn volumes_csv_path(&self) -> PathBuf {
        self.stats
            .volumes_csv
            .clone()
            .unwrap_or_else(|| self.output_dir.join(VOLUMES_CSV))
    }

    fn scan_options(&self) -> Result<ScanOptions> {
        let allowlist = match &self.subject_allowlist {
            Some(p) => Some(read_id_list(p)?.into_iter().collect()),
            None => None,
        };
        Ok(ScanOptions {
            expected_dims: self.expected_dims,
            patterns: self.channel_patterns.clone(),
            allowlist,
        })
    }
}

pub const VOLUMES_CSV: &str = "volumes.csv";
pub const MASK_DIR: &str = "masks";
pub const RECORD_DIR: &str = "records";

/// Reads one id per line, ignoring blanks and `#` comments.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, text)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| Error::io(path, e))
}

pub struct ScanOutcome {
    pub records: Vec<SubjectRecord>,
    pub summary: CatalogSummary,
}

/// Writes `catalog.csv` and `catalog_summary.json`.
pub fn run_scan(cfg: &PipelineConfig) -> Result<ScanOutcome> {
    cfg.validate_for(Step::Scan)?;
    let records = scan_catalog(&cfg.catalog_root, &cfg.scan_options()?)?;
    let summary = CatalogSummary::from_records(&records);
    create_dir(&cfg.output_dir)?;
    write_catalog_csv(&records, cfg.output_dir.join("catalog.csv"))?;
    write_text_atomic(
        &cfg.output_dir.join("catalog_summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(ScanOutcome { records, summary })
}

/// Writes `split_manifest.json`.
pub fn run_split(cfg: &PipelineConfig) -> Result<SplitManifest> {
    cfg.validate_for(Step::Split)?;
    let ids = match &cfg.split.annotated_ids {
        Some(p) => read_id_list(p)?,
        None => scan_catalog(&cfg.catalog_root, &cfg.scan_options()?)?
            .into_iter()
            .filter(SubjectRecord::is_valid)
            .map(|r| r.subject_id)
            .collect(),
    };
    let sizes = SplitSizes {
        train: cfg.split.train,
        test: cfg.split.test,
        rt: cfg.split.rt,
    };
    let manifest = make_splits(&ids, sizes, cfg.split.folds, cfg.seed)?;
    create_dir(&cfg.output_dir)?;
    write_text_atomic(&cfg.output_dir.join("split_manifest.json"), &manifest.to_json()?)?;
    Ok(manifest)
}

/// Loads the configured model and applies config overrides.
pub fn resolve_model(cfg: &PipelineConfig) -> Result<ModelHandle> {
    let mut model = match &cfg.model {
        ModelSource::Stub { threshold } => stub_threshold_model(*threshold),
        ModelSource::Onnx { path } => load_model(path)?,
    };
    let hash = cfg.normalization.hash();
    if let Some(h) = &model.metadata.normalization_hash {
        if *h != hash {
            return Err(Error::Config(format!(
                "model {} expects normalization {h}, config gives {hash}",
                model.model_id()
            )));
        }
    }
    if let Some(axis) = cfg.slice_axis {
        if axis != model.metadata.slice_axis {
            log::warn!(
                "slice axis {axis} from config overrides model metadata axis {}",
                model.metadata.slice_axis
            );
        }
        model.metadata.slice_axis = axis;
    }
    if let Some(decision) = cfg.decision {
        if decision.classes() != model.output_classes {
            return Err(Error::DecisionMismatch {
                decision: decision.to_string(),
                classes: model.output_classes,
            });
        }
        model.metadata.decision = Some(decision);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InferOptions {
    /// Recompute subjects that already have outputs.
    pub force: bool,
    /// Process at most this many pending subjects, then stop.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct InferOutcome {
    /// Rows for every valid subject that has a record, sorted by id.
    pub rows: Vec<VolumeRow>,
    pub processed: usize,
    pub reused: usize,
    pub failed: usize,
    /// Valid subjects still without a record.
    pub pending: usize,
}

/// Provenance written next to the volumes CSV.
#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    model_id: &'a str,
    decision: String,
    slice_axis: Axis,
    normalization: &'a NormalizationSpec,
    normalization_hash: String,
    margin_faces: &'a [Face],
    expected_dims: [usize; 3],
}

/// Segments every valid subject and writes masks, records and `volumes.csv`.
pub fn run_infer(cfg: &PipelineConfig, model: &ModelHandle, opts: InferOptions) -> Result<InferOutcome> {
    cfg.validate_for(Step::Infer)?;
    let policy = cfg.margin_policy()?;
    let records = scan_catalog(&cfg.catalog_root, &cfg.scan_options()?)?;
    let valid: Vec<&SubjectRecord> = records.iter().filter(|r| r.is_valid()).collect();

    let mask_dir = cfg.output_dir.join(MASK_DIR);
    let record_dir = cfg.output_dir.join(RECORD_DIR);
    create_dir(&mask_dir)?;
    create_dir(&record_dir)?;
    let norm_hash = cfg.normalization.hash();

    let record_path = |id: &str| record_dir.join(format!("{id}.json"));
    let done = |id: &str| -> bool {
        let Ok(text) = std::fs::read_to_string(record_path(id)) else {
            return false;
        };
        match serde_json::from_str::<VolumeRow>(&text) {
            Ok(row) => {
                row.status == RowStatus::Ok
                    && row.model_id == model.model_id()
                    && row.normalization_hash == norm_hash
                    && mask_dir.join(mask_file_name(id)).exists()
                    && mask_dir.join(raw_mask_file_name(id)).exists()
            }
            Err(_) => false,
        }
    };

    let mut pending: Vec<&SubjectRecord> = valid
        .iter()
        .copied()
        .filter(|r| opts.force || !done(&r.subject_id))
        .collect();
    let reused = valid.len() - pending.len();
    if let Some(limit) = opts.limit {
        pending.truncate(limit);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let rows: Vec<VolumeRow> = pool.install(|| {
        pending
            .par_iter()
            .map(|record| {
                let id = record.subject_id.as_str();
                let row = process_subject(cfg, model, &policy, record, &mask_dir, &norm_hash)
                    .unwrap_or_else(|e| {
                        log::error!("{id}: {e}");
                        VolumeRow::failed(id, model.model_id(), &norm_hash, &e)
                    });
                let text = serde_json::to_string_pretty(&row)? + "\n";
                write_text_atomic(&record_path(id), &text)?;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let processed = rows.len();
    let failed = rows.iter().filter(|r| r.status == RowStatus::Failed).count();

    // rebuild the table from records so resumed and fresh runs agree byte for byte
    let mut all_rows = Vec::with_capacity(valid.len());
    for r in &valid {
        let path = record_path(&r.subject_id);
        if let Ok(text) = std::fs::read_to_string(&path) {
            all_rows.push(serde_json::from_str::<VolumeRow>(&text)?);
        }
    }
    let pending_left = valid.len() - all_rows.len();
    write_volumes_csv(&all_rows, cfg.output_dir.join(VOLUMES_CSV))?;
    write_error_log(&all_rows, &cfg.output_dir.join("errors.jsonl"))?;
    let info = RunInfo {
        model_id: model.model_id(),
        decision: model.decision().to_string(),
        slice_axis: model.slice_axis(),
        normalization: &cfg.normalization,
        normalization_hash: norm_hash.clone(),
        margin_faces: &cfg.margin_faces,
        expected_dims: cfg.expected_dims,
    };
    write_text_atomic(
        &cfg.output_dir.join("run.json"),
        &(serde_json::to_string_pretty(&info)? + "\n"),
    )?;

    Ok(InferOutcome {
        rows: all_rows,
        processed,
        reused,
        failed,
        pending: pending_left,
    })
}

pub fn raw_mask_file_name(subject_id: &str) -> String {
    format!("{subject_id}_raw_mask.nii.gz")
}

fn process_subject(
    cfg: &PipelineConfig,
    model: &ModelHandle,
    policy: &MarginPolicy,
    record: &SubjectRecord,
    mask_dir: &Path,
    norm_hash: &str,
) -> Result<VolumeRow> {
    let id = &record.subject_id;
    let stack = load_stack(record)?;
    let stack = normalize(&stack, &cfg.normalization)?;
    let pred = predict_stack(model, &stack, cfg.inference_batch_size)?;
    let raw = to_mask(&pred, model.decision())?;
    let flagged = apply_margin_rule(&raw, policy);
    write_nifti(&raw, mask_dir.join(raw_mask_file_name(id)), true)?;
    write_nifti(&flagged.mask, mask_dir.join(mask_file_name(id)), true)?;
    let report = VolumeReport::from_flagged(id, model.model_id(), &flagged);
    Ok(VolumeRow::ok(&report, &flagged, norm_hash))
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    subject_id: &'a str,
    error: &'a str,
}

fn write_error_log(rows: &[VolumeRow], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in rows.iter().filter(|r| r.status == RowStatus::Failed) {
        text += &serde_json::to_string(&ErrorLine {
            subject_id: &r.subject_id,
            error: &r.error,
        })?;
        text.push('\n');
    }
    write_text_atomic(path, &text)
}

/// Masks in `dir`, keyed by subject id (`<id>_mask.nii.gz`, `<id>.nii[.gz]`).
pub fn list_masks(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.ends_with("_raw_mask.nii.gz") {
            continue;
        }
        let id = ["_mask.nii.gz", "_mask.nii", ".nii.gz", ".nii"]
            .iter()
            .find_map(|suffix| name.strip_suffix(suffix));
        if let Some(id) = id {
            out.insert(id.to_owned(), path);
        }
    }
    Ok(out)
}

/// Scores mask pairs matched by subject id; ids present on one side only
/// are reported as skipped.
pub fn compare_mask_dirs(dir_a: &Path, dir_b: &Path, b_name: impl Fn(&str) -> PathBuf) -> Result<AgreementReport> {
    let a = list_masks(dir_a)?;
    let b_listed = list_masks(dir_b)?;
    let ids: BTreeSet<&String> = a.keys().chain(b_listed.keys()).collect();

    let mut loaded = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        let Some(pa) = a.get(id) else {
            skipped.push((id.clone(), format!("no mask in {}", dir_a.display())));
            continue;
        };
        let pb = b_name(id);
        if !pb.exists() {
            skipped.push((id.clone(), format!("no mask in {}", dir_b.display())));
            continue;
        }
        match (read_mask(pa), read_mask(&pb)) {
            (Ok(ma), Ok(mb)) => loaded.push((id.clone(), ma, mb)),
            (Err(e), _) | (_, Err(e)) => skipped.push((id.clone(), e.to_string())),
        }
    }
    let mut report = agreement(loaded.iter().map(|(id, a, b)| (id.as_str(), a, b)))?;
    report.skipped.extend(skipped);
    report.skipped.sort();
    Ok(report)
}

/// Dice of predicted masks against ground truth, written to `dice.csv`.
pub fn run_evaluate(cfg: &PipelineConfig) -> Result<AgreementReport> {
    cfg.validate_for(Step::Evaluate)?;
    let gt = cfg.evaluate.ground_truth_dir.as_ref().unwrap();
    let mask_dir = cfg.output_dir.join(MASK_DIR);
    let use_final = cfg.evaluate.use_final_masks;
    let report = compare_mask_dirs(gt, &mask_dir, |id| {
        mask_dir.join(if use_final {
            mask_file_name(id)
        } else {
            raw_mask_file_name(id)
        })
    })?;
    write_agreement_csv(&report, cfg.output_dir.join("dice.csv"))?;
    Ok(report)
}

/// Dice between two raters' masks, written to `agreement.csv`.
pub fn run_agreement(cfg: &PipelineConfig) -> Result<AgreementReport> {
    cfg.validate_for(Step::Agreement)?;
    let a = cfg.agreement.rater_a_dir.as_ref().unwrap();
    let b = cfg.agreement.rater_b_dir.as_ref().unwrap();
    let b_masks = list_masks(b)?;
    let report = compare_mask_dirs(a, b, |id| {
        b_masks.get(id).cloned().unwrap_or_else(|| b.join(mask_file_name(id)))
    })?;
    create_dir(&cfg.output_dir)?;
    write_agreement_csv(&report, cfg.output_dir.join("agreement.csv"))?;
    Ok(report)
}

/// Population summary and histograms from the volumes CSV.
pub fn run_stats(cfg: &PipelineConfig) -> Result<PopulationSummary> {
    cfg.validate_for(Step::Stats)?;
    let rows = read_volumes_csv(cfg.volumes_csv_path())?;
    let reports: Vec<VolumeReport> = rows.iter().filter_map(VolumeRow::report).collect();
    let options = SummaryOptions {
        include_flagged: cfg.stats.include_flagged,
        inclusive_bounds: cfg.stats.inclusive_bounds,
    };
    let summary = summarize(&reports, options)?;
    create_dir(&cfg.output_dir)?;
    summary.write_json(cfg.output_dir.join("summary.json"))?;
    summary.write_csv(cfg.output_dir.join("summary.csv"))?;

    let unflagged: Vec<VolumeReport> = reports.iter().filter(|r| !r.margin_flagged).cloned().collect();
    let width = cfg.stats.bin_width_ml;
    write_histogram_csv(&histogram_csv(&unflagged, width)?, cfg.output_dir.join("histogram.csv"))?;
    write_histogram_csv(
        &histogram_csv(&reports, width)?,
        cfg.output_dir.join("histogram_with_flagged.csv"),
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_relative_paths() {
        let cfg = PipelineConfig::from_toml(
            r#"
            catalog_root = "data/catalog"
            output_dir = "/abs/out"
            workers = 4
            margin_faces = ["z-min", "z-max"]

            [model]
            kind = "onnx"
            path = "models/unet.onnx"

            [stats]
            bin_width_ml = 5.0
            "#,
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(cfg.catalog_root, PathBuf::from("/cfg/data/catalog"));
        assert_eq!(cfg.output_dir, PathBuf::from("/abs/out"));
        assert_eq!(
            cfg.model,
            ModelSource::Onnx {
                path: "/cfg/models/unet.onnx".into()
            }
        );
        assert_eq!(cfg.expected_dims, WINDOW_DIMS);
        assert_eq!(cfg.inference_batch_size, 128);
        assert_eq!(cfg.margin_policy().unwrap().faces().count(), 2);
        assert_eq!(cfg.stats.bin_width_ml, 5.0);
        assert_eq!(cfg.split.train, 313);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_faces() {
        assert!(PipelineConfig::from_toml("wrokers = 3", Path::new("/")).is_err());
        assert!(PipelineConfig::from_toml("margin_faces = [\"top\"]", Path::new("/")).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = PipelineConfig::default();
        cfg.catalog_root = "/data/catalog".into();
        cfg.output_dir = "/data/out".into();
        cfg.decision = Some(Decision::SigmoidThreshold { threshold: 0.7 });
        cfg.slice_axis = Some(Axis::Y);
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text, Path::new("/")).unwrap(), cfg);
    }

    #[test]
    fn validation_checks_paths_and_workers() {
        let mut cfg = PipelineConfig::default();
        cfg.catalog_root = "/definitely/not/here".into();
        assert!(matches!(cfg.validate_for(Step::Scan), Err(Error::Config(_))));
        cfg.catalog_root = std::env::temp_dir();
        cfg.workers = 0;
        assert!(cfg.validate_for(Step::Scan).is_err());
        cfg.workers = 2;
        assert!(cfg.validate_for(Step::Scan).is_ok());
        assert!(cfg.validate_for(Step::Evaluate).is_err());
    }

    #[test]
    fn decision_override_must_fit_model() {
        let mut cfg = PipelineConfig::default();
        cfg.decision = Some(Decision::ArgmaxTwoClass);
        assert!(matches!(resolve_model(&cfg), Err(Error::DecisionMismatch { .. })));
        cfg.decision = Some(Decision::SigmoidThreshold { threshold: 0.9 });
        assert_eq!(
            resolve_model(&cfg).unwrap().decision(),
            Decision::SigmoidThreshold { threshold: 0.9 }
        );
    }
}
