//! Model loading, per-subject prediction, restacking of slice logits into
//! volumes, and binarization.

mod executor;
pub mod graph;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use executor::{DenseTensor, Executor, GraphSignature, OnnxExecutor, ThresholdExecutor};

use crate::cohort::{Channel, ChannelStack};
use crate::error::{Error, Result};
use crate::nifti::{SegmentationMask, VolumeGeometry};
use crate::preprocess::{extract_slices, restack_planes, Axis, SliceBatch};

/// Default inference micro-batch.
pub const DEFAULT_BATCH_SIZE: usize = 128;

/// How logits become a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Decision {
    /// Two planes (background, foreground); foreground wins only if strictly larger.
    ArgmaxTwoClass,
    /// One plane; foreground where `sigmoid(logit) > threshold`.
    SigmoidThreshold { threshold: f64 },
}

impl Decision {
    pub const DEFAULT_SIGMOID: Decision = Decision::SigmoidThreshold { threshold: 0.5 };

    pub fn classes(&self) -> usize {
        match self {
            Decision::ArgmaxTwoClass => 2,
            Decision::SigmoidThreshold { .. } => 1,
        }
    }

    pub fn default_for(classes: usize) -> Decision {
        if classes == 2 {
            Decision::ArgmaxTwoClass
        } else {
            Decision::DEFAULT_SIGMOID
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::ArgmaxTwoClass => f.write_str("argmax"),
            Decision::SigmoidThreshold { threshold } => write!(f, "sigmoid>{threshold}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `(N, 3, H, W)` slices.
    Slices,
    /// `(1, 3, X, Y, Z)` whole volume.
    Volume,
}

/// Contents of the `<model>.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub model_id: String,
    #[serde(default)]
    pub normalization_hash: Option<String>,
    #[serde(default = "default_channel_order")]
    pub channel_order: Vec<Channel>,
    #[serde(default = "default_axis")]
    pub slice_axis: Axis,
    #[serde(default)]
    pub decision: Option<Decision>,
    #[serde(default)]
    pub input_kind: Option<InputKind>,
}

fn default_channel_order() -> Vec<Channel> {
    Channel::ALL.to_vec()
}

fn default_axis() -> Axis {
    Axis::Z
}

impl ModelMetadata {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            normalization_hash: None,
            channel_order: default_channel_order(),
            slice_axis: default_axis(),
            decision: None,
            input_kind: None,
        }
    }

    /// `model.onnx` -> `model.meta.json`.
    pub fn sidecar_path(model_path: &Path) -> PathBuf {
        model_path.with_extension("meta.json")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Expected input, excluding the batch dimension. `None` = any size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub spatial: [Option<usize>; 3],
    pub kind: InputKind,
}

/// A validated, shareable model.
#[derive(Clone)]
pub struct ModelHandle {
    executor: Arc<dyn Executor>,
    pub input_shape: InputShape,
    pub output_classes: usize,
    pub metadata: ModelMetadata,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("input_shape", &self.input_shape)
            .field("output_classes", &self.output_classes)
            .field("metadata", &self.metadata)
            .finish_non_exhaustive()
    }
}

impl ModelHandle {
    pub fn model_id(&self) -> &str {
        &self.metadata.model_id
    }

    /// Decision rule declared by the model, or the default for its class count.
    pub fn decision(&self) -> Decision {
        self.metadata
            .decision
            .unwrap_or_else(|| Decision::default_for(self.output_classes))
    }

    pub fn slice_axis(&self) -> Axis {
        self.metadata.slice_axis
    }

    pub fn executor(&self) -> &dyn Executor {
        self.executor.as_ref()
    }
}

/// Loads an ONNX graph plus its metadata sidecar (defaults if absent).
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelHandle> {
    let path = path.as_ref();
    let (executor, signature) = OnnxExecutor::load(path)?;

    let sidecar = ModelMetadata::sidecar_path(path);
    let metadata = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str::<ModelMetadata>(&text)?
    } else {
        log::warn!(
            "{} has no metadata sidecar {}; using defaults",
            path.display(),
            sidecar.display()
        );
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_owned();
        ModelMetadata::new(id)
    };

    let input_shape = validate_input(&signature.input)?;
    if let Some(kind) = metadata.input_kind {
        if kind != input_shape.kind {
            return Err(Error::ShapeMismatch(format!(
                "metadata declares {kind:?} input, graph takes {:?}",
                input_shape.kind
            )));
        }
    }
    let output_classes = validate_output(&signature.output, signature.input.len())?;
    finish_handle(Arc::new(executor), input_shape, output_classes, metadata)
}

fn validate_input(dims: &[Option<usize>]) -> Result<InputShape> {
    let kind = match dims.len() {
        4 => InputKind::Slices,
        5 => InputKind::Volume,
        r => {
            return Err(Error::ShapeMismatch(format!(
                "image input must be rank 4 or 5, got rank {r}"
            )))
        }
    };
    if dims[1] != Some(3) {
        return Err(Error::ShapeMismatch(format!(
            "image input must have 3 channels, got {}",
            dims[1].map_or("a symbolic count".into(), |c| c.to_string())
        )));
    }
    let mut spatial = [None; 3];
    for (slot, d) in spatial.iter_mut().zip(&dims[2..]) {
        *slot = *d;
    }
    Ok(InputShape {
        channels: 3,
        spatial,
        kind,
    })
}

fn validate_output(dims: &[Option<usize>], input_rank: usize) -> Result<usize> {
    if dims.len() != input_rank {
        return Err(Error::ShapeMismatch(format!(
            "output rank {} differs from input rank {input_rank}",
            dims.len()
        )));
    }
    match dims[1] {
        Some(c @ (1 | 2)) => Ok(c),
        other => Err(Error::ShapeMismatch(format!(
            "output must have 1 or 2 classes, got {other:?}"
        ))),
    }
}

fn finish_handle(
    executor: Arc<dyn Executor>,
    input_shape: InputShape,
    output_classes: usize,
    metadata: ModelMetadata,
) -> Result<ModelHandle> {
    if metadata.channel_order != Channel::ALL {
        return Err(Error::InvalidGraph(format!(
            "channel order {:?} differs from the fixed (water, fat, in_phase) order",
            metadata.channel_order
        )));
    }
    if let Some(d) = metadata.decision {
        if d.classes() != output_classes {
            return Err(Error::DecisionMismatch {
                decision: d.to_string(),
                classes: output_classes,
            });
        }
    }
    Ok(ModelHandle {
        executor,
        input_shape,
        output_classes,
        metadata,
    })
}

/// Built-in single-class model: logit +1 where water > `intensity_threshold`,
/// -1 elsewhere. Accepts any slice size and either input kind.
pub fn stub_threshold_model(intensity_threshold: f32) -> ModelHandle {
    let mut metadata = ModelMetadata::new(format!("stub-threshold-{intensity_threshold}"));
    metadata.decision = Some(Decision::DEFAULT_SIGMOID);
    ModelHandle {
        executor: Arc::new(ThresholdExecutor {
            threshold: intensity_threshold,
        }),
        input_shape: InputShape {
            channels: 3,
            spatial: [None; 3],
            kind: InputKind::Slices,
        },
        output_classes: 1,
        metadata,
    }
}

impl ModelHandle {
    /// Same model, whole-volume input.
    pub fn into_volume_model(mut self) -> Self {
        self.input_shape.kind = InputKind::Volume;
        self.metadata.input_kind = Some(InputKind::Volume);
        self
    }
}

/// Per-voxel logits on a volume grid, stored plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVolume {
    geometry: VolumeGeometry,
    classes: usize,
    logits: Vec<f32>,
}

impl PredictionVolume {
    pub fn new(geometry: VolumeGeometry, classes: usize, logits: Vec<f32>) -> Result<Self> {
        if !(classes == 1 || classes == 2) {
            return Err(Error::ShapeMismatch(format!("classes must be 1 or 2, got {classes}")));
        }
        if logits.len() != classes * geometry.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {classes} planes of dims {:?}",
                logits.len(),
                geometry.dims()
            )));
        }
        Ok(Self {
            geometry,
            classes,
            logits,
        })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn plane(&self, class: usize) -> &[f32] {
        let n = self.geometry.voxel_count();
        &self.logits[class * n..(class + 1) * n]
    }
}

/// Logits of one slice, `classes x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceLogits {
    /// Position of the slice along the slicing axis.
    pub position: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Scatters slice logits back onto the volume grid.
pub fn restack(
    slice_logits: &[SliceLogits],
    axis: Axis,
    geometry: &VolumeGeometry,
) -> Result<PredictionVolume> {
    let classes = slice_logits.first().map_or(1, |s| s.classes);
    if let Some(s) = slice_logits.iter().find(|s| s.classes != classes) {
        return Err(Error::ShapeMismatch(format!(
            "slice {} has {} classes, expected {classes}",
            s.position, s.classes
        )));
    }
    let planes = restack_planes(
        geometry,
        axis,
        classes,
        slice_logits.iter().map(|s| (s.position, s.height, s.width)),
        |k, row, col, c| {
            let s = &slice_logits[k];
            s.data[(c * s.height + row) * s.width + col]
        },
    )?;
    PredictionVolume::new(geometry.clone(), classes, planes.concat())
}

/// Runs a 2D model over a slice batch in micro-batches and restacks.
pub fn predict_subject(
    model: &ModelHandle,
    batch: &SliceBatch,
    inference_batch_size: usize,
) -> Result<PredictionVolume> {
    if model.input_shape.kind != InputKind::Slices {
        return Err(Error::ShapeMismatch(
            "model takes whole volumes, not slices".into(),
        ));
    }
    let batch_size = inference_batch_size.max(1);
    let [want_h, want_w, _] = model.input_shape.spatial;
    for s in &batch.slices {
        if want_h.is_some_and(|h| h != s.height) || want_w.is_some_and(|w| w != s.width) {
            return Err(Error::ShapeMismatch(format!(
                "slice {}x{} does not fit model input {want_h:?}x{want_w:?}",
                s.height, s.width
            )));
        }
    }

    let mut logits = Vec::with_capacity(batch.len());
    for (chunk_no, chunk) in batch.slices.chunks(batch_size).enumerate() {
        let (h, w) = (chunk[0].height, chunk[0].width);
        let plane = h * w;
        let mut data = Vec::with_capacity(chunk.len() * 3 * plane);
        for s in chunk {
            for c in 0..3 {
                data.extend((0..plane).map(|p| s.data[p * 3 + c]));
            }
        }
        let input = DenseTensor::new(vec![chunk.len(), 3, h, w], data)?;
        let out = model.executor.run(&input)?;
        let classes = model.output_classes;
        if out.shape != [chunk.len(), classes, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "model returned {:?}, expected {:?}",
                out.shape,
                [chunk.len(), classes, h, w]
            )));
        }
        for (k, item) in out.data.chunks_exact(classes * plane).enumerate() {
            logits.push(SliceLogits {
                position: batch.slice_indices[chunk_no * batch_size + k],
                classes,
                height: h,
                width: w,
                data: item.to_vec(),
            });
        }
    }
    restack(&logits, batch.axis, &batch.geometry)
}

/// Runs a whole-volume model on a stack laid out as `(1, 3, X, Y, Z)`.
pub fn predict_volume(model: &ModelHandle, stack: &ChannelStack) -> Result<PredictionVolume> {
    if model.input_shape.kind != InputKind::Volume {
        return Err(Error::ShapeMismatch("model takes slices, not volumes".into()));
    }
    let geometry = stack.geometry();
    let [nx, ny, nz] = geometry.dims();
    for (want, got) in model.input_shape.spatial.iter().zip([nx, ny, nz]) {
        if want.is_some_and(|w| w != got) {
            return Err(Error::ShapeMismatch(format!(
                "volume {:?} does not fit model input {:?}",
                geometry.dims(),
                model.input_shape.spatial
            )));
        }
    }
    let n = geometry.voxel_count();
    let mut data = Vec::with_capacity(3 * n);
    for ch in stack.channels() {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data.push(ch.get(x, y, z));
                }
            }
        }
    }
    let out = model
        .executor
        .run(&DenseTensor::new(vec![1, 3, nx, ny, nz], data)?)?;
    let classes = model.output_classes;
    if out.shape != [1, classes, nx, ny, nz] {
        return Err(Error::ShapeMismatch(format!(
            "model returned {:?}, expected {:?}",
            out.shape,
            [1, classes, nx, ny, nz]
        )));
    }
    let mut logits = vec![0f32; classes * n];
    let mut it = out.data.into_iter();
    for c in 0..classes {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    logits[c * n + geometry.index(x, y, z)] = it.next().unwrap();
                }
            }
        }
    }
    PredictionVolume::new(geometry.clone(), classes, logits)
}

/// Slices or whole volume, as the model declares.
pub fn predict_stack(
    model: &ModelHandle,
    stack: &ChannelStack,
    inference_batch_size: usize,
) -> Result<PredictionVolume> {
    match model.input_shape.kind {
        InputKind::Slices => {
            let batch = extract_slices(stack, model.slice_axis());
            predict_subject(model, &batch, inference_batch_size)
        }
        InputKind::Volume => predict_volume(model, stack),
    }
}

/// Binarizes logits. Ties go to background.
pub fn to_mask(pred: &PredictionVolume, decision: Decision) -> Result<SegmentationMask> {
    if decision.classes() != pred.classes {
        return Err(Error::DecisionMismatch {
            decision: decision.to_string(),
            classes: pred.classes,
        });
    }
    let data = match decision {
        Decision::ArgmaxTwoClass => pred
            .plane(0)
            .iter()
            .zip(pred.plane(1))
            .map(|(bg, fg)| (fg > bg) as u8)
            .collect(),
        Decision::SigmoidThreshold { threshold } => {
            // sigmoid(l) > t  <=>  l > logit(t)
            let cut = if threshold <= 0.0 {
                f64::NEG_INFINITY
            } else if threshold >= 1.0 {
                f64::INFINITY
            } else {
                (threshold / (1.0 - threshold)).ln()
            };
            pred.plane(0)
                .iter()
                .map(|&l| ((l as f64) > cut) as u8)
                .collect()
        }
    };
    SegmentationMask::new(pred.geometry.clone(), data)
}
