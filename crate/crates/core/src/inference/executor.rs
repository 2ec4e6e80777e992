use std::path::Path;
use std::sync::Arc;

use tract_onnx::prelude::*;

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor exchanged with an executor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

/// Runs a graph: `(N, 3, ...)` in, `(N, classes, ...)` out.
pub trait Executor: Send + Sync {
    fn run(&self, input: &DenseTensor) -> Result<DenseTensor>;
}

/// Foreground logit +1 where the water plane exceeds the threshold, else -1.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdExecutor {
    pub threshold: f32,
}

impl Executor for ThresholdExecutor {
    fn run(&self, input: &DenseTensor) -> Result<DenseTensor> {
        if input.shape.len() < 3 || input.shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "threshold model expects (N, 3, ...), got {:?}",
                input.shape
            )));
        }
        let n = input.shape[0];
        let plane: usize = input.shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * plane);
        for item in 0..n {
            let water = &input.data[item * 3 * plane..item * 3 * plane + plane];
            data.extend(water.iter().map(|&v| if v > self.threshold { 1.0 } else { -1.0 }));
        }
        let mut shape = input.shape.clone();
        shape[1] = 1;
        DenseTensor::new(shape, data)
    }
}

/// ONNX graph executed by tract. The optimized plan is shared; each call
/// gets its own execution state.
pub struct OnnxExecutor {
    plan: Arc<TypedRunnableModel>,
}

/// Shapes read from an ONNX graph before optimization. `None` = symbolic.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSignature {
    pub input: Vec<Option<usize>>,
    pub output: Vec<Option<usize>>,
}

impl OnnxExecutor {
    pub fn load(path: &Path) -> Result<(Self, GraphSignature)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model = tract_onnx::onnx()
            .model_for_read(&mut bytes.as_slice())
            .map_err(|e| Error::InvalidGraph(format!("{}: {e}", path.display())))?;
        if model.inputs.len() != 1 {
            return Err(Error::InvalidGraph(format!(
                "expected exactly one image input, graph has {}",
                model.inputs.len()
            )));
        }
        if model.outputs.is_empty() {
            return Err(Error::InvalidGraph("graph has no outputs".into()));
        }
        let typed = model
            .into_typed()
            .map_err(|e| Error::InvalidGraph(format!("cannot type graph: {e}")))?;
        let dims = |shape: &ShapeFact| -> Vec<Option<usize>> {
            shape
                .iter()
                .map(|d| d.to_i64().ok().and_then(|v| usize::try_from(v).ok()))
                .collect()
        };
        let signature = GraphSignature {
            input: dims(&typed.input_fact(0).map_err(graph_err)?.shape),
            output: dims(&typed.output_fact(0).map_err(graph_err)?.shape),
        };
        let plan = typed
            .into_optimized()
            .and_then(|m| m.into_runnable())
            .map_err(|e| Error::InvalidGraph(format!("cannot optimize graph: {e}")))?;
        Ok((Self { plan }, signature))
    }
}

fn graph_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidGraph(e.to_string())
}

impl Executor for OnnxExecutor {
    fn run(&self, input: &DenseTensor) -> Result<DenseTensor> {
        let exec = |e: TractError| Error::ExecutorFailure(e.to_string());
        let tensor = Tensor::from_shape(&input.shape, &input.data).map_err(exec)?;
        let outputs = self.plan.run(tvec!(tensor.into())).map_err(exec)?;
        let out = outputs
            .first()
            .ok_or_else(|| Error::ExecutorFailure("graph produced no output".into()))?;
        let view = out.to_plain_array_view::<f32>().map_err(exec)?;
        DenseTensor::new(view.shape().to_vec(), view.iter().copied().collect())
    }
}
