//! A small deterministic convolutional feature extractor written out as ONNX.
//!
//! Pretrained ImageNet weights are not always at hand (air-gapped runs, CI).
//! This net has the same input/output contract as a pooled ResNet trunk:
//! three strided convolutions with ReLU, global average pooling, flatten.
//! The first layer mixes color-averaging filters with zero-mean structure
//! filters; the rest are He-initialized from a seed.

use std::fs;
use std::path::{Path, PathBuf};

use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tract_onnx::pb;

use super::{BackboneSidecar, DEFAULT_MEANS, DEFAULT_STDS, INPUT_SIZE, SIDECAR};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch, in_ch, kernel, kernel]`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceNet {
    pub layers: Vec<ConvLayer>,
}

/// Number of first-layer filters that average color instead of detecting structure.
const COLOR_FILTERS: usize = 4;

impl ReferenceNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || rng.sample::<f32, _>(StandardNormal);

        let spec = [(3, 16, 7, 4, 3), (16, 32, 3, 2, 1), (32, 64, 3, 2, 1)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(li, &(in_ch, out_ch, kernel, stride, pad))| {
                let taps = kernel * kernel;
                let fan_in = (in_ch * taps) as f32;
                let he = (2.0 / fan_in).sqrt();
                let mut weights = Vec::with_capacity(out_ch * in_ch * taps);
                for o in 0..out_ch {
                    if li == 0 && o < COLOR_FILTERS {
                        // channel o (or overall luminance for the last one)
                        for c in 0..in_ch {
                            let w = if o == 3 || c == o { 1.0 / taps as f32 } else { 0.0 };
                            weights.extend(std::iter::repeat_n(w, taps));
                        }
                        continue;
                    }
                    for _ in 0..in_ch {
                        let mut k: Vec<f32> = (0..taps).map(|_| normal() * he).collect();
                        if li == 0 {
                            let mean = k.iter().sum::<f32>() / taps as f32;
                            k.iter_mut().for_each(|v| *v -= mean);
                        }
                        weights.extend(k);
                    }
                }
                ConvLayer {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    weights,
                    bias: vec![0.0; out_ch],
                }
            })
            .collect();
        ReferenceNet { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_ch)
    }

    pub fn to_onnx(&self) -> pb::ModelProto {
        let ints = |name: &str, v: Vec<i64>| pb::AttributeProto {
            name: name.into(),
            r#type: pb::attribute_proto::AttributeType::Ints as i32,
            ints: v,
            ..Default::default()
        };
        let tensor = |name: String, dims: Vec<i64>, data: &[f32]| pb::TensorProto {
            name,
            dims,
            data_type: pb::tensor_proto::DataType::Float as i32,
            float_data: data.to_vec(),
            ..Default::default()
        };
        let node = |op: &str, name: String, input: Vec<String>, output: String| pb::NodeProto {
            op_type: op.into(),
            name,
            input,
            output: vec![output],
            ..Default::default()
        };

        let mut nodes = Vec::new();
        let mut inits = Vec::new();
        let mut cur = "input".to_string();
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b, conv, relu) = (
                format!("conv{i}.weight"),
                format!("conv{i}.bias"),
                format!("conv{i}"),
                format!("relu{i}"),
            );
            let k = l.kernel as i64;
            inits.push(tensor(w.clone(), vec![l.out_ch as i64, l.in_ch as i64, k, k], &l.weights));
            inits.push(tensor(b.clone(), vec![l.out_ch as i64], &l.bias));
            let mut n = node("Conv", conv.clone(), vec![cur, w, b], conv.clone());
            n.attribute = vec![
                ints("kernel_shape", vec![k, k]),
                ints("strides", vec![l.stride as i64; 2]),
                ints("pads", vec![l.pad as i64; 4]),
                ints("dilations", vec![1, 1]),
            ];
            nodes.push(n);
            nodes.push(node("Relu", relu.clone(), vec![conv], relu.clone()));
            cur = relu;
        }
        nodes.push(node("GlobalAveragePool", "pool".into(), vec![cur], "pool".into()));
        let mut flatten = node("Flatten", "flatten".into(), vec!["pool".into()], "features".into());
        flatten.attribute = vec![pb::AttributeProto {
            name: "axis".into(),
            r#type: pb::attribute_proto::AttributeType::Int as i32,
            i: 1,
            ..Default::default()
        }];
        nodes.push(flatten);

        let value_info = |name: &str, dims: Vec<pb::tensor_shape_proto::dimension::Value>| {
            pb::ValueInfoProto {
                name: name.into(),
                r#type: Some(pb::TypeProto {
                    value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                        elem_type: pb::tensor_proto::DataType::Float as i32,
                        shape: Some(pb::TensorShapeProto {
                            dim: dims
                                .into_iter()
                                .map(|v| pb::tensor_shape_proto::Dimension {
                                    value: Some(v),
                                    ..Default::default()
                                })
                                .collect(),
                        }),
                    })),
                    ..Default::default()
                }),
                ..Default::default()
            }
        };
        use pb::tensor_shape_proto::dimension::Value::{DimParam, DimValue};
        let hw = INPUT_SIZE as i64;
        pb::ModelProto {
            ir_version: 7,
            producer_name: "palmscan".into(),
            opset_import: vec![pb::OperatorSetIdProto {
                domain: String::new(),
                version: 13,
            }],
            graph: Some(pb::GraphProto {
                name: "reference_cnn".into(),
                node: nodes,
                initializer: inits,
                input: vec![value_info(
                    "input",
                    vec![DimParam("N".into()), DimValue(3), DimValue(hw), DimValue(hw)],
                )],
                output: vec![value_info(
                    "features",
                    vec![DimParam("N".into()), DimValue(self.out_dim() as i64)],
                )],
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    pub fn to_onnx_bytes(&self) -> Vec<u8> {
        self.to_onnx().encode_to_vec()
    }
}

/// Write `reference_cnn.onnx` plus its `backbone.json` sidecar into `dir`.
pub fn write_reference_backbone(dir: impl AsRef<Path>, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let net = ReferenceNet::new(seed);
    let model = dir.join("reference_cnn.onnx");
    fs::write(&model, net.to_onnx_bytes())?;
    let sidecar = BackboneSidecar {
        channel_means: DEFAULT_MEANS,
        channel_stds: DEFAULT_STDS,
        out_dim: Some(net.out_dim()),
    };
    fs::write(dir.join(SIDECAR), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(model)
}
