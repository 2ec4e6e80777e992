//! Subject catalog scanning, data-cleaning exclusions, channel stacking and
//! train/test/RT/fold split generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use glob::Pattern;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{read_header, read_nifti, VolumeGeometry, VoxelVolume};

/// Shape of the fifth DIXON imaging window.
pub const WINDOW_DIMS: [usize; 3] = [224, 162, 72];

/// DIXON channels used by the pipeline. The declaration order is the fixed
/// model plane order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Water,
    Fat,
    InPhase,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Water, Channel::Fat, Channel::InPhase];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Water => "water",
            Channel::Fat => "fat",
            Channel::InPhase => "in_phase",
        }
    }

    /// Model input plane for this channel.
    pub fn plane(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// File-name globs identifying each channel inside a subject directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelPatterns {
    pub water: String,
    pub fat: String,
    pub in_phase: String,
}

impl Default for ChannelPatterns {
    fn default() -> Self {
        Self {
            water: "*_water.nii*".into(),
            fat: "*_fat.nii*".into(),
            in_phase: "*_in_phase.nii*".into(),
        }
    }
}

impl ChannelPatterns {
    pub fn get(&self, channel: Channel) -> &str {
        match channel {
            Channel::Water => &self.water,
            Channel::Fat => &self.fat,
            Channel::InPhase => &self.in_phase,
        }
    }

    fn compile(&self) -> Result<[(Channel, Pattern); 3]> {
        let compile = |c: Channel| {
            Pattern::new(self.get(c))
                .map(|p| (c, p))
                .map_err(|e| Error::Config(format!("bad {c} pattern {:?}: {e}", self.get(c))))
        };
        Ok([
            compile(Channel::Water)?,
            compile(Channel::Fat)?,
            compile(Channel::InPhase)?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionKind {
    /// No image data at all for the subject.
    MissingAllData,
    /// At least one channel file of the window is absent.
    MissingWindowFile,
    /// An image does not have the expected window shape.
    DimensionMismatch,
}

impl ExclusionKind {
    pub const ALL: [ExclusionKind; 3] = [
        ExclusionKind::MissingAllData,
        ExclusionKind::MissingWindowFile,
        ExclusionKind::DimensionMismatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExclusionKind::MissingAllData => "missing_all_data",
            ExclusionKind::MissingWindowFile => "missing_window_file",
            ExclusionKind::DimensionMismatch => "dimension_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReason {
    pub kind: ExclusionKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubjectStatus {
    Valid,
    Excluded(ExclusionReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub channel_paths: BTreeMap<Channel, PathBuf>,
    pub status: SubjectStatus,
}

impl SubjectRecord {
    pub fn is_valid(&self) -> bool {
        self.status == SubjectStatus::Valid
    }

    pub fn exclusion(&self) -> Option<&ExclusionReason> {
        match &self.status {
            SubjectStatus::Valid => None,
            SubjectStatus::Excluded(reason) => Some(reason),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub expected_dims: [usize; 3],
    pub patterns: ChannelPatterns,
    /// Upstream subject filter (e.g. male subjects); `None` keeps everyone.
    pub allowlist: Option<BTreeSet<String>>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            expected_dims: WINDOW_DIMS,
            patterns: ChannelPatterns::default(),
            allowlist: None,
        }
    }
}

/// Exclusion counts for a scanned catalog.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub total: usize,
    pub valid: usize,
    pub missing_all_data: usize,
    pub missing_window_file: usize,
    pub dimension_mismatch: usize,
}

impl CatalogSummary {
    pub fn from_records(records: &[SubjectRecord]) -> Self {
        let mut s = CatalogSummary {
            total: records.len(),
            ..Default::default()
        };
        for r in records {
            match r.exclusion().map(|e| e.kind) {
                None => s.valid += 1,
                Some(ExclusionKind::MissingAllData) => s.missing_all_data += 1,
                Some(ExclusionKind::MissingWindowFile) => s.missing_window_file += 1,
                Some(ExclusionKind::DimensionMismatch) => s.dimension_mismatch += 1,
            }
        }
        s
    }

    pub fn excluded(&self) -> usize {
        self.missing_all_data + self.missing_window_file + self.dimension_mismatch
    }
}

/// Classifies every subject directory under `root`. Problems with individual
/// subjects become exclusions; only an unreadable root is an error.
pub fn scan_catalog(root: impl AsRef<Path>, options: &ScanOptions) -> Result<Vec<SubjectRecord>> {
    let root = root.as_ref();
    let patterns = options.patterns.compile()?;
    let mut subjects = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(id) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
            log::warn!("skipping non UTF-8 subject directory {}", path.display());
            continue;
        };
        if let Some(allow) = &options.allowlist {
            if !allow.contains(&id) {
                continue;
            }
        }
        subjects.push((id, path));
    }

    let mut records: Vec<SubjectRecord> = subjects
        .par_iter()
        .map(|(id, dir)| classify_subject(id, dir, &patterns, options.expected_dims))
        .collect();
    records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(records)
}

fn classify_subject(
    id: &str,
    dir: &Path,
    patterns: &[(Channel, Pattern); 3],
    expected_dims: [usize; 3],
) -> SubjectRecord {
    let excluded = |paths, kind, detail: String| SubjectRecord {
        subject_id: id.to_owned(),
        channel_paths: paths,
        status: SubjectStatus::Excluded(ExclusionReason { kind, detail }),
    };

    let mut files: Vec<(String, PathBuf)> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .filter_map(|p| Some((p.file_name()?.to_str()?.to_owned(), p)))
            .collect(),
        Err(e) => {
            return excluded(
                BTreeMap::new(),
                ExclusionKind::MissingAllData,
                format!("unreadable subject directory: {e}"),
            )
        }
    };
    files.sort();

    let mut paths = BTreeMap::new();
    for (channel, pattern) in patterns {
        let mut matches = files.iter().filter(|(name, _)| pattern.matches(name));
        if let Some((_, path)) = matches.next() {
            if let Some((extra, _)) = matches.next() {
                log::warn!("{id}: several {channel} files match, using the first (also {extra})");
            }
            paths.insert(*channel, path.clone());
        }
    }

    if paths.is_empty() {
        let detail = if files.is_empty() {
            "subject directory is empty".to_owned()
        } else {
            format!("no channel file among {} entries", files.len())
        };
        return excluded(paths, ExclusionKind::MissingAllData, detail);
    }
    let missing: Vec<&str> = Channel::ALL
        .iter()
        .filter(|c| !paths.contains_key(c))
        .map(|c| c.name())
        .collect();
    if !missing.is_empty() {
        return excluded(
            paths,
            ExclusionKind::MissingWindowFile,
            format!("missing {}", missing.join(", ")),
        );
    }

    for (channel, path) in &paths {
        let dims = read_header(path).and_then(|h| h.dims());
        match dims {
            Ok(dims) if dims == expected_dims => {}
            Ok(dims) => {
                return excluded(
                    paths.clone(),
                    ExclusionKind::DimensionMismatch,
                    format!("{channel} has dims {dims:?}, expected {expected_dims:?}"),
                )
            }
            Err(e) => {
                return excluded(
                    paths.clone(),
                    ExclusionKind::DimensionMismatch,
                    format!("{channel} header unreadable: {e}"),
                )
            }
        }
    }

    SubjectRecord {
        subject_id: id.to_owned(),
        channel_paths: paths,
        status: SubjectStatus::Valid,
    }
}

/// Writes one row per subject: id, status, reason, detail and channel paths.
pub fn write_catalog_csv(records: &[SubjectRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "status", "reason", "detail", "water", "fat", "in_phase"])?;
    for r in records {
        let (status, reason, detail) = match r.exclusion() {
            None => ("valid", "", ""),
            Some(e) => ("excluded", e.kind.name(), e.detail.as_str()),
        };
        let channel = |c: Channel| {
            r.channel_paths
                .get(&c)
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        w.write_record([
            r.subject_id.as_str(),
            status,
            reason,
            detail,
            &channel(Channel::Water),
            &channel(Channel::Fat),
            &channel(Channel::InPhase),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// The three DIXON channels of one subject on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub subject_id: String,
    channels: [VoxelVolume; 3],
}

impl ChannelStack {
    /// Channels in plane order (water, fat, in-phase).
    pub fn new(subject_id: impl Into<String>, channels: [VoxelVolume; 3]) -> Result<Self> {
        let subject_id = subject_id.into();
        let reference = channels[0].geometry();
        for (c, v) in Channel::ALL.iter().zip(channels.iter()).skip(1) {
            if !v.geometry().same_grid(reference) {
                return Err(Error::GeometryMismatch(format!(
                    "{subject_id}: {c} has dims {:?} spacing {:?}, water has dims {:?} spacing {:?}",
                    v.geometry().dims(),
                    v.geometry().spacing(),
                    reference.dims(),
                    reference.spacing()
                )));
            }
        }
        Ok(Self {
            subject_id,
            channels,
        })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        self.channels[0].geometry()
    }

    pub fn channel(&self, channel: Channel) -> &VoxelVolume {
        &self.channels[channel.plane()]
    }

    pub fn channels(&self) -> &[VoxelVolume; 3] {
        &self.channels
    }

    pub fn into_channels(self) -> [VoxelVolume; 3] {
        self.channels
    }
}

/// Loads the three channels of a valid subject.
pub fn load_stack(record: &SubjectRecord) -> Result<ChannelStack> {
    if !record.is_valid() {
        return Err(Error::ExcludedSubject(record.subject_id.clone()));
    }
    let load = |c: Channel| -> Result<VoxelVolume> {
        let path = record.channel_paths.get(&c).ok_or_else(|| {
            Error::ExcludedSubject(format!("{} has no {c} channel", record.subject_id))
        })?;
        read_nifti(path)
    };
    ChannelStack::new(
        record.subject_id.clone(),
        [load(Channel::Water)?, load(Channel::Fat)?, load(Channel::InPhase)?],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
    pub rt: usize,
}

/// Train/test split, repeated-annotation subset and CV folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub rt: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

/// Deterministic split of `annotated_ids`.
///
/// Ids are sorted first, so only the id *set* matters. A seeded shuffle puts
/// the first `sizes.train` ids into training; folds are dealt round-robin
/// over the shuffled training ids and the RT subset is sampled from test.
pub fn make_splits(
    annotated_ids: &[String],
    sizes: SplitSizes,
    n_folds: usize,
    seed: u64,
) -> Result<SplitManifest> {
    let mut ids = annotated_ids.to_vec();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("duplicate subject id {}", w[0])));
    }
    if sizes.train + sizes.test != ids.len() {
        return Err(Error::SizeMismatch(format!(
            "train {} + test {} != {} annotated ids",
            sizes.train,
            sizes.test,
            ids.len()
        )));
    }
    if sizes.rt > sizes.test {
        return Err(Error::SizeMismatch(format!(
            "rt {} exceeds test {}",
            sizes.rt, sizes.test
        )));
    }
    if n_folds < 2 || n_folds > sizes.train {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= folds <= train size, got {n_folds} folds for {} training ids",
            sizes.train
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(sizes.train);
    let train = ids;

    let mut rt_idx = rand::seq::index::sample(&mut rng, test.len(), sizes.rt).into_vec();
    rt_idx.sort_unstable();
    let rt = rt_idx.into_iter().map(|i| test[i].clone()).collect();

    let mut folds = vec![Vec::new(); n_folds];
    for (i, id) in train.iter().enumerate() {
        folds[i % n_folds].push(id.clone());
    }

    Ok(SplitManifest {
        seed,
        train,
        test,
        rt,
        folds,
    })
}

impl SplitManifest {
    /// Checks disjointness, rt ⊆ test and that the folds partition train.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train.iter().collect();
        let test: BTreeSet<&String> = self.test.iter().collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err(Error::InvalidArgument("duplicate ids in manifest".into()));
        }
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::InvalidArgument(format!("{id} is in both train and test")));
        }
        if let Some(id) = self.rt.iter().find(|id| !test.contains(id)) {
            return Err(Error::InvalidArgument(format!("rt id {id} is not a test id")));
        }
        let mut fold_ids: Vec<&String> = self.folds.iter().flatten().collect();
        fold_ids.sort();
        let mut train_sorted: Vec<&String> = self.train.iter().collect();
        train_sorted.sort();
        if fold_ids != train_sorted {
            return Err(Error::InvalidArgument("folds do not partition train".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: SplitManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}
