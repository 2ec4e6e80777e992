//! Builds tiny ONNX graphs equivalent to the threshold model. They exercise
//! the portable-graph path without a trained network.

use std::path::Path;

use prost::Message;
use tract_onnx::pb;

use crate::error::{Error, Result};

fn dim(d: Option<usize>, name: &str) -> pb::tensor_shape_proto::Dimension {
    use pb::tensor_shape_proto::dimension::Value;
    pb::tensor_shape_proto::Dimension {
        denotation: String::new(),
        value: Some(match d {
            Some(v) => Value::DimValue(v as i64),
            None => Value::DimParam(name.to_owned()),
        }),
    }
}

fn value_info(name: &str, dims: Vec<pb::tensor_shape_proto::Dimension>) -> pb::ValueInfoProto {
    pb::ValueInfoProto {
        name: name.to_owned(),
        r#type: Some(pb::TypeProto {
            denotation: String::new(),
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: pb::tensor_proto::DataType::Float as i32,
                shape: Some(pb::TensorShapeProto { dim: dims }),
            })),
        }),
        doc_string: String::new(),
    }
}

fn float_tensor(name: &str, dims: Vec<i64>, values: Vec<f32>) -> pb::TensorProto {
    pb::TensorProto {
        name: name.to_owned(),
        dims,
        data_type: pb::tensor_proto::DataType::Float as i32,
        float_data: values,
        ..Default::default()
    }
}

/// A 1x1 convolution reading only the water plane.
///
/// With one class the output is `water - threshold`; with two classes it is
/// `(threshold - water, water - threshold)` for (background, foreground).
/// `input_channels` other than 3 is only useful for testing rejection.
pub fn threshold_graph(
    threshold: f32,
    classes: usize,
    height: Option<usize>,
    width: Option<usize>,
    input_channels: usize,
) -> Result<Vec<u8>> {
    if !(classes == 1 || classes == 2) {
        return Err(Error::InvalidArgument(format!("classes must be 1 or 2, got {classes}")));
    }
    let mut weights = vec![0f32; classes * input_channels];
    let mut bias = vec![0f32; classes];
    if classes == 1 {
        weights[0] = 1.0;
        bias[0] = -threshold;
    } else {
        weights[0] = -1.0;
        weights[input_channels] = 1.0;
        bias = vec![threshold, -threshold];
    }
    let conv = pb::NodeProto {
        name: "water_threshold".into(),
        op_type: "Conv".into(),
        input: vec!["image".into(), "weight".into(), "bias".into()],
        output: vec!["logits".into()],
        ..Default::default()
    };
    let graph = pb::GraphProto {
        name: "threshold".into(),
        node: vec![conv],
        initializer: vec![
            float_tensor("weight", vec![classes as i64, input_channels as i64, 1, 1], weights),
            float_tensor("bias", vec![classes as i64], bias),
        ],
        input: vec![value_info(
            "image",
            vec![
                dim(None, "N"),
                dim(Some(input_channels), ""),
                dim(height, "H"),
                dim(width, "W"),
            ],
        )],
        output: vec![value_info(
            "logits",
            vec![dim(None, "N"), dim(Some(classes), ""), dim(height, "H"), dim(width, "W")],
        )],
        ..Default::default()
    };
    let model = pb::ModelProto {
        ir_version: 7,
        producer_name: "testvol".into(),
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(graph),
        ..Default::default()
    };
    Ok(model.encode_to_vec())
}

pub fn write_threshold_graph(
    path: impl AsRef<Path>,
    threshold: f32,
    classes: usize,
    height: Option<usize>,
    width: Option<usize>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = threshold_graph(threshold, classes, height, width, 3)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
