use std::path::Path;

use prost::Message;
use tempfile::tempdir;
use testvol::cohort::ChannelStack;
use testvol::inference::graph::{threshold_graph, write_threshold_graph};
use testvol::inference::*;
use testvol::nifti::{VolumeGeometry, VoxelVolume};
use testvol::preprocess::{extract_slices, Axis};
use testvol::Error;
use tract_onnx::pb;

fn stack(dims: [usize; 3]) -> ChannelStack {
    let g = VolumeGeometry::new(dims, [1.0; 3]).unwrap();
    let w = VoxelVolume::from_fn(g.clone(), |x, y, z| ((x * 13 + y * 7 + z * 3) % 17) as f32 - 8.0).unwrap();
    let f = VoxelVolume::from_fn(g.clone(), |x, _, _| x as f32).unwrap();
    let i = VoxelVolume::from_fn(g, |_, y, _| y as f32).unwrap();
    ChannelStack::new("s", [w, f, i]).unwrap()
}

fn declared_input_dims(bytes: &[u8]) -> Vec<Option<i64>> {
    use pb::tensor_shape_proto::dimension::Value;
    let model = pb::ModelProto::decode(bytes).unwrap();
    let graph = model.graph.unwrap();
    let Some(pb::type_proto::Value::TensorType(t)) = graph.input[0].r#type.clone().unwrap().value else {
        panic!("input is not a tensor");
    };
    t.shape
        .unwrap()
        .dim
        .into_iter()
        .map(|d| match d.value {
            Some(Value::DimValue(v)) => Some(v),
            _ => None,
        })
        .collect()
}

fn write_graph(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn window_graph_has_expected_input() {
    let dir = tempdir().unwrap();
    let bytes = threshold_graph(0.0, 2, Some(224), Some(162), 3).unwrap();
    assert_eq!(declared_input_dims(&bytes), vec![None, Some(3), Some(224), Some(162)]);

    let path = write_graph(dir.path(), "unet.onnx", &bytes);
    let model = load_model(&path).unwrap();
    assert_eq!(model.input_shape.channels, 3);
    assert_eq!(model.input_shape.spatial[..2], [Some(224), Some(162)]);
    assert_eq!(model.input_shape.kind, InputKind::Slices);
    assert_eq!(model.output_classes, 2);
}

#[test]
fn four_channel_graph_is_rejected() {
    let dir = tempdir().unwrap();
    let path = write_graph(dir.path(), "four.onnx", &threshold_graph(0.0, 2, None, None, 4).unwrap());
    assert!(matches!(load_model(&path), Err(Error::ShapeMismatch(_))));
}

#[test]
fn missing_or_garbage_files() {
    let dir = tempdir().unwrap();
    assert!(matches!(
        load_model(dir.path().join("absent.onnx")),
        Err(Error::Io { .. } | Error::InvalidGraph(_))
    ));
    let path = write_graph(dir.path(), "junk.onnx", b"definitely not protobuf");
    assert!(matches!(load_model(&path), Err(Error::InvalidGraph(_))));
}

#[test]
fn missing_sidecar_falls_back_to_defaults() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("plain.onnx");
    write_threshold_graph(&path, 0.0, 1, None, None).unwrap();
    let model = load_model(&path).unwrap();
    assert_eq!(model.model_id(), "plain");
    assert_eq!(model.slice_axis(), Axis::Z);
    assert_eq!(model.decision(), Decision::DEFAULT_SIGMOID);
    assert_eq!(model.metadata.normalization_hash, None);
}

#[test]
fn sidecar_is_honoured() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.onnx");
    write_threshold_graph(&path, 0.0, 2, None, None).unwrap();
    let mut meta = ModelMetadata::new("unet-fold3");
    meta.slice_axis = Axis::Y;
    meta.normalization_hash = Some("abc".into());
    meta.write(ModelMetadata::sidecar_path(&path)).unwrap();
    let model = load_model(&path).unwrap();
    assert_eq!(model.model_id(), "unet-fold3");
    assert_eq!(model.slice_axis(), Axis::Y);
    assert_eq!(model.decision(), Decision::ArgmaxTwoClass);

    meta.decision = Some(Decision::DEFAULT_SIGMOID);
    meta.write(ModelMetadata::sidecar_path(&path)).unwrap();
    assert!(matches!(load_model(&path), Err(Error::DecisionMismatch { classes: 2, .. })));
}

#[test]
fn onnx_graph_matches_stub_model() {
    let dir = tempdir().unwrap();
    let s = stack([11, 9, 6]);
    let stub = stub_threshold_model(0.5);
    let expected = to_mask(&predict_stack(&stub, &s, 4).unwrap(), stub.decision()).unwrap();
    assert!(!expected.is_empty());

    for classes in [1, 2] {
        let path = dir.path().join(format!("t{classes}.onnx"));
        write_threshold_graph(&path, 0.5, classes, Some(11), Some(9)).unwrap();
        let model = load_model(&path).unwrap();
        let mask = to_mask(&predict_stack(&model, &s, 4).unwrap(), model.decision()).unwrap();
        assert_eq!(mask, expected, "{classes}-class graph");
    }
}

#[test]
fn onnx_batching_is_invariant() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("t.onnx");
    write_threshold_graph(&path, 0.0, 2, None, None).unwrap();
    let model = load_model(&path).unwrap();
    let batch = extract_slices(&stack([7, 5, 10]), Axis::Z);
    let a = predict_subject(&model, &batch, 1).unwrap();
    let b = predict_subject(&model, &batch, 128).unwrap();
    for c in 0..2 {
        for (x, y) in a.plane(c).iter().zip(b.plane(c)) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}

#[test]
fn fixed_size_graph_rejects_other_slices() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("fixed.onnx");
    write_threshold_graph(&path, 0.0, 2, Some(224), Some(162)).unwrap();
    let model = load_model(&path).unwrap();
    assert!(matches!(predict_stack(&model, &stack([8, 8, 3]), 4), Err(Error::ShapeMismatch(_))));
}
