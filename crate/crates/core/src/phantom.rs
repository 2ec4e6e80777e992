//! Synthetic DIXON-like cohorts with analytically known testis masks.
//!
//! Each phantom holds two ellipsoids ("left" and "right" testis, at
//! different heights) in a noisy background. Every ground-truth voxel is
//! enumerated directly from the ellipsoid equations, so the voxel lists
//! double as test oracles.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Channel, ExclusionKind};
use crate::error::{Error, Result};
use crate::metrics::mm3_to_ml;
use crate::nifti::{
    write_nifti, Datatype, Scaling, SegmentationMask, VolumeGeometry, VoxelVolume,
};
use crate::postprocess::Face;

/// Smallest axis length the placement rules support.
pub const MIN_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]) / self.radii[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    /// Voxels inside the ellipsoid and the grid, found by scanning the
    /// bounding box.
    pub fn voxels(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let range = |a: usize| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize).min(dims[a] - 1);
            lo..=hi
        };
        let mut out = Vec::new();
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    if self.contains(x, y, z) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    fn shrunk(&self, by: f64) -> Self {
        Self {
            center: self.center,
            radii: self.radii.map(|r| (r - by).max(1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub ellipsoids: Vec<Ellipsoid>,
    pub seed: u64,
}

/// Channel intensities, before noise.
const WATER: (f32, f32) = (100.0, 400.0);
const FAT: (f32, f32) = (300.0, 60.0);
const IN_PHASE: (f32, f32) = (350.0, 420.0);
const NOISE: f32 = 20.0;

impl PhantomSpec {
    /// Random interior placement of two disjoint ellipsoids; `touch` moves one
    /// of them onto the given face.
    pub fn random(
        subject_id: impl Into<String>,
        dims: [usize; 3],
        spacing: [f64; 3],
        touch: Option<Face>,
        seed: u64,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::InvalidArgument(format!(
                "phantom dims must be >= {MIN_DIM} per axis, got {dims:?}"
            )));
        }
        // the header stores spacing as f32; keep the oracle on the same grid
        let spacing = spacing.map(|s| s as f32 as f64);
        VolumeGeometry::new(dims, spacing)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.map(|v| v as f64);
        let mut place = |x_frac: f64| Ellipsoid {
            center: [
                (x_frac + rng.random_range(-0.03..0.03)) * d[0],
                rng.random_range(0.4..0.6) * d[1],
                rng.random_range(0.4..0.6) * d[2],
            ],
            radii: [
                (rng.random_range(0.08..0.12) * d[0]).max(1.5),
                (rng.random_range(0.12..0.2) * d[1]).max(1.5),
                (rng.random_range(0.15..0.25) * d[2]).max(1.5),
            ],
        };
        let mut left = place(0.33);
        let mut right = place(0.67);
        if let Some(face) = touch {
            let target = if face == Face::XMax { &mut right } else { &mut left };
            let a = face.axis();
            target.center[a] = if face.is_max() { d[a] - 1.0 } else { 0.0 };
        }
        Ok(Self {
            subject_id: subject_id.into(),
            dims,
            spacing,
            ellipsoids: vec![left, right],
            seed,
        })
    }

    pub fn geometry(&self) -> Result<VolumeGeometry> {
        VolumeGeometry::new(self.dims, self.spacing)
    }

    /// Union of the ellipsoid voxel lists.
    pub fn truth_voxels(&self) -> BTreeSet<[usize; 3]> {
        self.ellipsoids
            .iter()
            .flat_map(|e| e.voxels(self.dims))
            .collect()
    }

    pub fn truth_mask(&self) -> Result<SegmentationMask> {
        let mut mask = SegmentationMask::empty(self.geometry()?);
        for [x, y, z] in self.truth_voxels() {
            mask.set(x, y, z, true);
        }
        Ok(mask)
    }

    /// Mask a second rater would draw: every ellipsoid one voxel smaller.
    pub fn rater_mask(&self) -> Result<SegmentationMask> {
        let mut mask = SegmentationMask::empty(self.geometry()?);
        for e in &self.ellipsoids {
            for [x, y, z] in e.shrunk(1.0).voxels(self.dims) {
                mask.set(x, y, z, true);
            }
        }
        Ok(mask)
    }

    /// Faces of the grid that the ground truth reaches.
    pub fn touched_faces(&self) -> Vec<Face> {
        let voxels = self.truth_voxels();
        Face::ALL
            .into_iter()
            .filter(|f| {
                let a = f.axis();
                let boundary = if f.is_max() { self.dims[a] - 1 } else { 0 };
                voxels.iter().any(|v| v[a] == boundary)
            })
            .collect()
    }

    /// Water, fat and in-phase volumes, integer-valued so they store as int16.
    pub fn channels(&self) -> Result<[VoxelVolume; 3]> {
        let g = self.geometry()?;
        let truth = self.truth_mask()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c0de);
        let mut make = |(bg, fg): (f32, f32)| {
            let data = truth
                .data()
                .iter()
                .map(|&t| {
                    let base = if t == 1 { fg } else { bg };
                    (base + rng.random_range(0.0..NOISE)).floor()
                })
                .collect();
            VoxelVolume::new(g.clone(), data)
                .map(|v| v.with_storage(Datatype::I16, Scaling::IDENTITY))
        };
        Ok([make(WATER)?, make(FAT)?, make(IN_PHASE)?])
    }
}

/// Normalized-space threshold separating phantom background from testis in
/// the water channel under the default normalization.
pub const STUB_THRESHOLD: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub subject_id: String,
    pub voxel_count: u64,
    pub voxel_volume_mm3: f64,
    /// Volume of the full ground truth.
    pub truth_volume_ml: f64,
    pub touched_faces: Vec<Face>,
    pub margin_flagged: bool,
    /// What the pipeline should report after the margin rule.
    pub expected_volume_ml: f64,
    pub spec: PhantomSpec,
}

impl PhantomTruth {
    pub fn from_spec(spec: &PhantomSpec) -> Self {
        let voxel_count = spec.truth_voxels().len() as u64;
        let voxel_volume_mm3 = spec.spacing.iter().product();
        let truth_volume_ml = mm3_to_ml(voxel_count, voxel_volume_mm3);
        let touched_faces = spec.touched_faces();
        let margin_flagged = !touched_faces.is_empty();
        Self {
            subject_id: spec.subject_id.clone(),
            voxel_count,
            voxel_volume_mm3,
            truth_volume_ml,
            margin_flagged,
            expected_volume_ml: if margin_flagged { 0.0 } else { truth_volume_ml },
            touched_faces,
            spec: spec.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionInjection {
    /// Subject directories with no files.
    pub missing_all: usize,
    /// Subjects lacking the fat channel.
    pub missing_channel: usize,
    /// Subjects whose in-phase image is one slice short.
    pub bad_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDesign {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Every k-th subject (k > 0) touches a face, cycling through all six.
    pub margin_every: Option<usize>,
    pub exclusions: ExclusionInjection,
    /// Also write second-rater masks.
    pub rater_masks: bool,
}

impl Default for CohortDesign {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            dims: crate::cohort::WINDOW_DIMS,
            spacing: [2.232, 2.232, 3.0],
            seed: 42,
            margin_every: Some(3),
            exclusions: ExclusionInjection::default(),
            rater_masks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedPhantom {
    pub subject_id: String,
    pub kind: ExclusionKind,
}

/// Written as `phantom_manifest.json` next to the generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub design: CohortDesign,
    pub stub_threshold: f32,
    pub subjects: Vec<PhantomTruth>,
    pub excluded: Vec<ExcludedPhantom>,
}

pub const MANIFEST_FILE: &str = "phantom_manifest.json";

#[derive(Debug, Clone)]
pub struct CohortLayout {
    pub root: PathBuf,
}

impl CohortLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn catalog(&self) -> PathBuf {
        self.root.join("catalog")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth")
    }
    pub fn rater_b(&self) -> PathBuf {
        self.root.join("rater_b")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
    pub fn channel_file(&self, id: &str, channel: Channel) -> PathBuf {
        self.catalog().join(id).join(format!("{id}_{channel}.nii.gz"))
    }
}

/// File name used for every per-subject mask.
pub fn mask_file_name(subject_id: &str) -> String {
    format!("{subject_id}_mask.nii.gz")
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a full phantom cohort under `root`.
pub fn generate_cohort(root: impl AsRef<Path>, design: &CohortDesign) -> Result<CohortManifest> {
    let layout = CohortLayout::new(root.as_ref());
    create_dir(&layout.catalog())?;
    create_dir(&layout.ground_truth())?;
    if design.rater_masks {
        create_dir(&layout.rater_b())?;
    }

    let id = |i: usize| format!("sub-{:04}", i + 1);
    let mut subjects = Vec::with_capacity(design.n_subjects);
    for i in 0..design.n_subjects {
        let touch = match design.margin_every {
            Some(k) if k > 0 && (i + 1) % k == 0 => Some(Face::ALL[((i + 1) / k - 1) % 6]),
            _ => None,
        };
        let spec = PhantomSpec::random(
            id(i),
            design.dims,
            design.spacing,
            touch,
            design.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        )?;
        write_subject(&layout, &spec, design.rater_masks)?;
        subjects.push(PhantomTruth::from_spec(&spec));
    }

    let mut excluded = Vec::new();
    let mut next = design.n_subjects;
    let inject = [
        (ExclusionKind::MissingAllData, design.exclusions.missing_all),
        (ExclusionKind::MissingWindowFile, design.exclusions.missing_channel),
        (ExclusionKind::DimensionMismatch, design.exclusions.bad_dims),
    ];
    for (kind, count) in inject {
        for _ in 0..count {
            let subject_id = id(next);
            next += 1;
            write_excluded(&layout, &subject_id, kind, design)?;
            excluded.push(ExcludedPhantom { subject_id, kind });
        }
    }

    let manifest = CohortManifest {
        design: design.clone(),
        stub_threshold: STUB_THRESHOLD,
        subjects,
        excluded,
    };
    let path = layout.manifest();
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_subject(layout: &CohortLayout, spec: &PhantomSpec, rater: bool) -> Result<()> {
    let id = &spec.subject_id;
    create_dir(&layout.catalog().join(id))?;
    for (channel, volume) in Channel::ALL.iter().zip(spec.channels()?.iter()) {
        write_nifti(volume, layout.channel_file(id, *channel), true)?;
    }
    write_nifti(&spec.truth_mask()?, layout.ground_truth().join(mask_file_name(id)), true)?;
    if rater {
        write_nifti(&spec.rater_mask()?, layout.rater_b().join(mask_file_name(id)), true)?;
    }
    Ok(())
}

fn write_excluded(
    layout: &CohortLayout,
    id: &str,
    kind: ExclusionKind,
    design: &CohortDesign,
) -> Result<()> {
    create_dir(&layout.catalog().join(id))?;
    let seed = design.seed.wrapping_add(0xe8c1_0000 + id.len() as u64);
    match kind {
        ExclusionKind::MissingAllData => Ok(()),
        ExclusionKind::MissingWindowFile => {
            let spec = PhantomSpec::random(id, design.dims, design.spacing, None, seed)?;
            let [water, _, in_phase] = spec.channels()?;
            write_nifti(&water, layout.channel_file(id, Channel::Water), true)?;
            write_nifti(&in_phase, layout.channel_file(id, Channel::InPhase), true)
        }
        ExclusionKind::DimensionMismatch => {
            let spec = PhantomSpec::random(id, design.dims, design.spacing, None, seed)?;
            let [water, fat, _] = spec.channels()?;
            write_nifti(&water, layout.channel_file(id, Channel::Water), true)?;
            write_nifti(&fat, layout.channel_file(id, Channel::Fat), true)?;
            let [nx, ny, nz] = design.dims;
            let short = VolumeGeometry::new([nx, ny, nz - 1], design.spacing)?;
            let in_phase = VoxelVolume::from_fn(short, |x, y, _| ((x + y) % 7) as f32)?
                .with_storage(Datatype::I16, Scaling::IDENTITY);
            write_nifti(&in_phase, layout.channel_file(id, Channel::InPhase), true)
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [usize; 3] = [32, 24, 16];

    #[test]
    fn ellipsoid_voxels_match_brute_force() {
        let e = Ellipsoid {
            center: [10.3, 7.7, 5.1],
            radii: [4.2, 3.1, 2.6],
        };
        let fast: BTreeSet<_> = e.voxels(DIMS).into_iter().collect();
        let mut brute = BTreeSet::new();
        for z in 0..DIMS[2] {
            for y in 0..DIMS[1] {
                for x in 0..DIMS[0] {
                    if e.contains(x, y, z) {
                        brute.insert([x, y, z]);
                    }
                }
            }
        }
        assert_eq!(fast, brute);
        assert!(!fast.is_empty());
    }

    #[test]
    fn interior_phantoms_do_not_touch() {
        for seed in 0..50 {
            let spec = PhantomSpec::random("s", DIMS, [1.0; 3], None, seed).unwrap();
            assert!(spec.touched_faces().is_empty(), "seed {seed}");
            let v: Vec<_> = spec.ellipsoids.iter().map(|e| e.voxels(DIMS)).collect();
            let a: BTreeSet<_> = v[0].iter().collect();
            assert!(v[1].iter().all(|p| !a.contains(p)), "testes overlap, seed {seed}");
        }
    }

    #[test]
    fn touching_phantoms_touch_exactly_their_face() {
        for (i, face) in Face::ALL.into_iter().enumerate() {
            let spec = PhantomSpec::random("s", DIMS, [1.0; 3], Some(face), i as u64).unwrap();
            assert_eq!(spec.touched_faces(), vec![face]);
        }
    }

    #[test]
    fn channels_separate_under_threshold() {
        let spec = PhantomSpec::random("s", DIMS, [1.0; 3], None, 3).unwrap();
        let [water, ..] = spec.channels().unwrap();
        let truth = spec.truth_mask().unwrap();
        for (w, t) in water.data().iter().zip(truth.data()) {
            assert_eq!(*w >= WATER.1, *t == 1);
        }
    }

    #[test]
    fn too_small_dims_rejected() {
        assert!(PhantomSpec::random("s", [8, 24, 16], [1.0; 3], None, 0).is_err());
    }
}
