//! Tiny ONNX graphs honoring the backend contracts, written with the
//! protobuf types tract parses.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prost::Message;
use tract_onnx::pb::{
    attribute_proto, tensor_proto, tensor_shape_proto, type_proto, AttributeProto, GraphProto,
    ModelProto, NodeProto, OperatorSetIdProto, TensorProto, TensorShapeProto, TypeProto,
    ValueInfoProto,
};

pub enum Dim {
    Fixed(i64),
    Named(&'static str),
}

fn value_info(name: &str, dims: &[Dim]) -> ValueInfoProto {
    let dim = dims
        .iter()
        .map(|d| tensor_shape_proto::Dimension {
            value: Some(match d {
                Dim::Fixed(v) => tensor_shape_proto::dimension::Value::DimValue(*v),
                Dim::Named(s) => tensor_shape_proto::dimension::Value::DimParam(s.to_string()),
            }),
            ..Default::default()
        })
        .collect();
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: tensor_proto::DataType::Float as i32,
                shape: Some(TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

pub fn init(name: &str, dims: &[i64], data: Vec<f32>) -> TensorProto {
    TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: tensor_proto::DataType::Float as i32,
        float_data: data,
        ..Default::default()
    }
}

pub fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        op_type: op.into(),
        name: format!("{op}_{output}"),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        attribute,
        ..Default::default()
    }
}

pub fn int_attr(name: &str, v: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: attribute_proto::AttributeType::Int as i32,
        i: v,
        ..Default::default()
    }
}

pub fn write_model(
    dir: &Path,
    file: &str,
    nodes: Vec<NodeProto>,
    initializer: Vec<TensorProto>,
    input: (&str, Vec<Dim>),
    output: (&str, Vec<Dim>),
) -> PathBuf {
    let model = ModelProto {
        ir_version: 8,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(GraphProto {
            name: "fixture".into(),
            node: nodes,
            initializer,
            input: vec![value_info(input.0, &input.1)],
            output: vec![value_info(output.0, &output.1)],
            ..Default::default()
        }),
        ..Default::default()
    };
    let path = dir.join(file);
    std::fs::write(&path, model.encode_to_vec()).unwrap();
    path
}

/// `[1, 3, 224, 224]` -> global average pool -> flatten -> gemm -> `[1, k]`.
/// Logit `j` is `sum_c weights[c][j] * mean_c + bias[j]`.
pub fn classifier(
    dir: &Path,
    file: &str,
    weights: [[f32; 5]; 3],
    bias: [f32; 5],
    k: usize,
) -> PathBuf {
    let w: Vec<f32> = weights.iter().flat_map(|r| r[..k].to_vec()).collect();
    write_model(
        dir,
        file,
        vec![
            node("GlobalAveragePool", &["image"], "pooled", vec![]),
            node("Flatten", &["pooled"], "flat", vec![int_attr("axis", 1)]),
            node("Gemm", &["flat", "w", "b"], "logits", vec![]),
        ],
        vec![
            init("w", &[3, k as i64], w),
            init("b", &[k as i64], bias[..k].to_vec()),
        ],
        (
            "image",
            vec![
                Dim::Fixed(1),
                Dim::Fixed(3),
                Dim::Fixed(224),
                Dim::Fixed(224),
            ],
        ),
        ("logits", vec![Dim::Fixed(1), Dim::Fixed(k as i64)]),
    )
}

/// Input of any size -> `[1, 1, H, W]` map with every cell equal to `cell`
/// (a 1x1 convolution with zero weights).
pub fn constant_density(dir: &Path, file: &str, cell: f32, fixed: Option<[i64; 2]>) -> PathBuf {
    let (h, w) = match fixed {
        Some([h, w]) => (Dim::Fixed(h), Dim::Fixed(w)),
        None => (Dim::Named("h"), Dim::Named("w")),
    };
    let (oh, ow) = match fixed {
        Some([h, w]) => (Dim::Fixed(h), Dim::Fixed(w)),
        None => (Dim::Named("h"), Dim::Named("w")),
    };
    write_model(
        dir,
        file,
        vec![node("Conv", &["image", "k", "c"], "density", vec![])],
        vec![
            init("k", &[1, 3, 1, 1], vec![0.0; 3]),
            init("c", &[1], vec![cell]),
        ],
        ("image", vec![Dim::Fixed(1), Dim::Fixed(3), h, w]),
        ("density", vec![Dim::Fixed(1), Dim::Fixed(1), oh, ow]),
    )
}

/// `[1, 3, size, size]` -> the given `[1, N, 6]` rows regardless of pixels.
pub fn constant_detector(dir: &Path, file: &str, size: i64, rows: &[[f32; 6]]) -> PathBuf {
    let data: Vec<f32> = rows.iter().flatten().copied().collect();
    let n = rows.len() as i64;
    write_model(
        dir,
        file,
        vec![
            node(
                "ReduceMean",
                &["image"],
                "mean",
                vec![int_attr("keepdims", 0)],
            ),
            node("Mul", &["mean", "zero"], "nothing", vec![]),
            node("Add", &["nothing", "rows"], "detections", vec![]),
        ],
        vec![init("zero", &[], vec![0.0]), init("rows", &[1, n, 6], data)],
        (
            "image",
            vec![
                Dim::Fixed(1),
                Dim::Fixed(3),
                Dim::Fixed(size),
                Dim::Fixed(size),
            ],
        ),
        (
            "detections",
            vec![Dim::Fixed(1), Dim::Fixed(n), Dim::Fixed(6)],
        ),
    )
}

/// A PNG of uniform color.
pub fn png(dir: &Path, file: &str, w: u32, h: u32, rgb: [u8; 3]) -> PathBuf {
    let path = dir.join(file);
    image::RgbImage::from_pixel(w, h, image::Rgb(rgb))
        .save(&path)
        .unwrap();
    path
}
