//! Intensity normalization and 2D slice extraction.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::ChannelStack;
use crate::error::{Error, Result};
use crate::nifti::{VolumeGeometry, VoxelVolume};

/// Volume axis, 0 = x (fastest on disk).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The two in-plane axes (rows, columns) of a slice normal to `self`.
    pub fn plane_axes(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl TryFrom<usize> for Axis {
    type Error = Error;
    fn try_from(v: usize) -> Result<Self> {
        match v {
            0 => Ok(Axis::X),
            1 => Ok(Axis::Y),
            2 => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("axis must be 0, 1 or 2, got {other}"))),
        }
    }
}

impl From<Axis> for usize {
    fn from(a: Axis) -> usize {
        a.index()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// `(height, width)` of slices normal to `axis`.
pub fn slice_shape(geometry: &VolumeGeometry, axis: Axis) -> (usize, usize) {
    let dims = geometry.dims();
    let (u, v) = axis.plane_axes();
    (dims[u], dims[v])
}

/// Linear voxel offset of pixel `(row, col)` of slice `position` along `axis`.
#[inline]
pub fn voxel_offset(
    geometry: &VolumeGeometry,
    axis: Axis,
    position: usize,
    row: usize,
    col: usize,
) -> usize {
    let (u, v) = axis.plane_axes();
    let mut c = [0usize; 3];
    c[axis.index()] = position;
    c[u] = row;
    c[v] = col;
    geometry.index(c[0], c[1], c[2])
}

/// Per-channel standardization constants applied after a per-volume
/// min-max rescale to [0, 1]. Defaults are the ImageNet statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl NormalizationSpec {
    /// Rescale only.
    pub const UNIT: NormalizationSpec = NormalizationSpec {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    /// Short stable fingerprint, recorded in model metadata and reports.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "rescale=minmax-volume;mean={:?};std={:?}",
            self.mean, self.std
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `((x - min) / (max - min) - mean[c]) / std[c]` per channel; a constant
/// channel rescales to 0.
pub fn normalize(stack: &ChannelStack, spec: &NormalizationSpec) -> Result<ChannelStack> {
    spec.validate()?;
    let [w, f, i] = stack.channels();
    let channels = [
        normalize_channel(w, spec.mean[0], spec.std[0])?,
        normalize_channel(f, spec.mean[1], spec.std[1])?,
        normalize_channel(i, spec.mean[2], spec.std[2])?,
    ];
    ChannelStack::new(stack.subject_id.clone(), channels)
}

fn normalize_channel(volume: &VoxelVolume, mean: f32, std: f32) -> Result<VoxelVolume> {
    let (lo, hi) = volume.min_max();
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    let (mean, std) = (mean as f64, std as f64);
    let data = volume
        .data()
        .iter()
        .map(|&x| {
            let unit = if range > 0.0 { (x as f64 - lo) / range } else { 0.0 };
            ((unit - mean) / std) as f32
        })
        .collect();
    VoxelVolume::new(volume.geometry().clone(), data)
}

/// One 2D slice, `height x width x 3` with channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Slice {
    pub const CHANNELS: usize = 3;

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * Self::CHANNELS + channel]
    }
}

/// All slices of a subject along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    pub subject_id: String,
    pub axis: Axis,
    pub geometry: VolumeGeometry,
    /// Original position of each slice along `axis`.
    pub slice_indices: Vec<usize>,
    pub slices: Vec<Slice>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Rebuilds the channel stack. Inverse of [`extract_slices`].
    pub fn restack(&self) -> Result<ChannelStack> {
        let planes = restack_planes(
            &self.geometry,
            self.axis,
            Slice::CHANNELS,
            self.slice_indices
                .iter()
                .zip(&self.slices)
                .map(|(&i, s)| (i, s.height, s.width)),
            |k, row, col, c| self.slices[k].get(row, col, c),
        )?;
        let mut planes = planes.into_iter();
        let mut next = || VoxelVolume::new(self.geometry.clone(), planes.next().unwrap());
        ChannelStack::new(self.subject_id.clone(), [next()?, next()?, next()?])
    }
}

pub fn extract_slices(stack: &ChannelStack, axis: Axis) -> SliceBatch {
    let geometry = stack.geometry().clone();
    let (height, width) = slice_shape(&geometry, axis);
    let count = geometry.dims()[axis.index()];
    let channels = stack.channels();
    let slices = (0..count)
        .map(|position| {
            let mut data = Vec::with_capacity(height * width * Slice::CHANNELS);
            for row in 0..height {
                for col in 0..width {
                    let idx = voxel_offset(&geometry, axis, position, row, col);
                    data.extend(channels.iter().map(|c| c.data()[idx]));
                }
            }
            Slice {
                height,
                width,
                data,
            }
        })
        .collect();
    SliceBatch {
        subject_id: stack.subject_id.clone(),
        axis,
        geometry,
        slice_indices: (0..count).collect(),
        slices,
    }
}

/// Scatters per-slice planes back into `n_planes` volume-shaped buffers.
///
/// `shapes` yields `(position, height, width)` for the k-th slice and
/// `value(k, row, col, plane)` reads it. Every position along `axis` must
/// occur exactly once.
pub(crate) fn restack_planes(
    geometry: &VolumeGeometry,
    axis: Axis,
    n_planes: usize,
    shapes: impl ExactSizeIterator<Item = (usize, usize, usize)>,
    value: impl Fn(usize, usize, usize, usize) -> f32,
) -> Result<Vec<Vec<f32>>> {
    let expected = geometry.dims()[axis.index()];
    if shapes.len() != expected {
        return Err(Error::CountMismatch {
            expected,
            got: shapes.len(),
        });
    }
    let (height, width) = slice_shape(geometry, axis);
    let n = geometry.voxel_count();
    let mut planes = vec![vec![0f32; n]; n_planes];
    let mut seen = vec![false; expected];
    for (k, (position, h, w)) in shapes.enumerate() {
        if (h, w) != (height, width) {
            return Err(Error::ShapeMismatch(format!(
                "slice {k} is {h}x{w}, expected {height}x{width}"
            )));
        }
        if position >= expected || std::mem::replace(&mut seen[position], true) {
            return Err(Error::InvalidArgument(format!(
                "slice position {position} is out of range or repeated"
            )));
        }
        for row in 0..height {
            for col in 0..width {
                let idx = voxel_offset(geometry, axis, position, row, col);
                for (p, plane) in planes.iter_mut().enumerate() {
                    plane[idx] = value(k, row, col, p);
                }
            }
        }
    }
    Ok(planes)
}
