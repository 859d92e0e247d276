//! Frozen CNN feature extraction through an ONNX graph.
//!
//! The graph must take `float32[N,3,224,224]` and return `float32[N,D]`. Patches
//! are resized bilinearly (half-pixel centers) to 224×224, scaled to `[0, 1]` and
//! normalized per channel with the constants from the `backbone.json` sidecar.

mod cache;
pub mod reference;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tract_onnx::pb;
use tract_onnx::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Patch;
use crate::util::sha256_hex;

pub use cache::EmbeddingCache;

pub const INPUT_SIZE: usize = 224;

/// ImageNet channel statistics.
pub const DEFAULT_MEANS: [f32; 3] = [0.485, 0.456, 0.406];
pub const DEFAULT_STDS: [f32; 3] = [0.229, 0.224, 0.225];

pub const SIDECAR: &str = "backbone.json";

/// Contents of `backbone.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSidecar {
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
    /// Declared embedding length; checked against the graph when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dim: Option<usize>,
}

impl Default for BackboneSidecar {
    fn default() -> Self {
        BackboneSidecar {
            channel_means: DEFAULT_MEANS,
            channel_stds: DEFAULT_STDS,
            out_dim: None,
        }
    }
}

/// One patch embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// A loaded, frozen feature extractor. Immutable and shareable across threads.
pub struct Backbone {
    plan: Arc<TypedRunnableModel>,
    channel_means: [f32; 3],
    channel_stds: [f32; 3],
    out_dim: usize,
    graph_hash: String,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("out_dim", &self.out_dim)
            .field("graph_hash", &self.graph_hash)
            .finish_non_exhaustive()
    }
}

fn tensor_dims(vi: &pb::ValueInfoProto) -> Option<Vec<Option<i64>>> {
    use pb::tensor_shape_proto::dimension::Value;
    use pb::type_proto::Value as TypeValue;
    let TypeValue::TensorType(t) = vi.r#type.as_ref()?.value.as_ref()?;
    Some(
        t.shape
            .as_ref()?
            .dim
            .iter()
            .map(|d| match d.value {
                Some(Value::DimValue(v)) => Some(v),
                _ => None,
            })
            .collect(),
    )
}

impl Backbone {
    /// Load a graph and its sidecar (`backbone.json` next to the model file).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let sidecar_path = path.with_file_name(SIDECAR);
        let sidecar = if sidecar_path.exists() {
            serde_json::from_slice(&fs::read(&sidecar_path)?)?
        } else {
            log::warn!(
                "{}: no {SIDECAR} sidecar, using ImageNet normalization",
                path.display()
            );
            BackboneSidecar::default()
        };
        Backbone::from_bytes(&fs::read(path)?, sidecar)
    }

    pub fn from_bytes(bytes: &[u8], sidecar: BackboneSidecar) -> Result<Self> {
        if sidecar.channel_stds.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::invalid("channel stds must be strictly positive"));
        }
        let graph_hash = sha256_hex(bytes);
        let onnx = tract_onnx::onnx();
        let proto = onnx
            .proto_model_for_read(&mut &*bytes)
            .map_err(|e| Error::Signature(format!("not an ONNX graph: {e}")))?;
        let graph = proto
            .graph
            .as_ref()
            .ok_or_else(|| Error::Signature("model has no graph".into()))?;

        let initializers: std::collections::HashSet<&str> =
            graph.initializer.iter().map(|t| t.name.as_str()).collect();
        let inputs: Vec<_> = graph
            .input
            .iter()
            .filter(|i| !initializers.contains(i.name.as_str()))
            .collect();
        if inputs.len() != 1 || graph.output.len() != 1 {
            return Err(Error::Signature(format!(
                "expected one image input and one output, found {} and {}",
                inputs.len(),
                graph.output.len()
            )));
        }
        let size = INPUT_SIZE as i64;
        match tensor_dims(inputs[0]).as_deref() {
            Some([_, Some(3), h, w])
                if h.is_none_or(|h| h == size) && w.is_none_or(|w| w == size) => {}
            other => {
                return Err(Error::Signature(format!(
                    "input must be [N,3,{size},{size}], found {other:?}"
                )))
            }
        }
        if let Some(dims) = tensor_dims(&graph.output[0]) {
            if dims.len() != 2 {
                return Err(Error::Signature(format!(
                    "output must be [N,D], found rank {}",
                    dims.len()
                )));
            }
        }

        let sig = |e: TractError| Error::Signature(e.to_string());
        let mut model = onnx.model_for_proto_model(&proto).map_err(sig)?;
        let batch = model.symbols.sym("N");
        model = model
            .with_input_fact(
                0,
                InferenceFact::dt_shape(
                    f32::datum_type(),
                    tvec![batch.to_dim(), 3.to_dim(), size.to_dim(), size.to_dim()],
                ),
            )
            .map_err(sig)?
            .with_output_fact(0, InferenceFact::default())
            .map_err(sig)?;
        let typed = model.into_optimized().map_err(sig)?;
        let out = typed.output_fact(0).map_err(sig)?;
        let dims: Vec<_> = out.shape.iter().collect();
        let out_dim = (dims.len() == 2)
            .then(|| dims[1].as_i64())
            .flatten()
            .and_then(|d| usize::try_from(d).ok())
            .ok_or_else(|| Error::Signature(format!("output shape {:?} is not [N,D]", out.shape)))?;
        if out_dim == 0 {
            return Err(Error::Signature("embedding length is zero".into()));
        }
        if let Some(declared) = sidecar.out_dim {
            if declared != out_dim {
                return Err(Error::Signature(format!(
                    "sidecar declares D = {declared}, graph produces {out_dim}"
                )));
            }
        }
        let plan = typed.into_runnable().map_err(sig)?;
        Ok(Backbone {
            plan,
            channel_means: sidecar.channel_means,
            channel_stds: sidecar.channel_stds,
            out_dim,
            graph_hash,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn input_size(&self) -> usize {
        INPUT_SIZE
    }

    pub fn channel_means(&self) -> [f32; 3] {
        self.channel_means
    }

    pub fn channel_stds(&self) -> [f32; 3] {
        self.channel_stds
    }

    /// SHA-256 of the model bytes, hex.
    pub fn graph_hash(&self) -> &str {
        &self.graph_hash
    }

    /// CHW tensor of one patch, `3 * 224 * 224` values.
    pub fn preprocess(&self, patch: &Patch) -> Vec<f32> {
        let mut out = vec![0.0; 3 * INPUT_SIZE * INPUT_SIZE];
        preprocess_into(patch, self.channel_means, self.channel_stds, &mut out);
        out
    }

    pub fn embed(&self, patch: &Patch) -> Result<FeatureVector> {
        Ok(self.embed_batch([patch])?.pop().expect("one row per input"))
    }

    pub fn embed_batch<'a>(
        &self,
        patches: impl IntoIterator<Item = &'a Patch>,
    ) -> Result<Vec<FeatureVector>> {
        let plane = 3 * INPUT_SIZE * INPUT_SIZE;
        let mut data = Vec::new();
        let mut n = 0;
        for p in patches {
            data.resize((n + 1) * plane, 0.0);
            preprocess_into(p, self.channel_means, self.channel_stds, &mut data[n * plane..]);
            n += 1;
        }
        self.run(data, n)
    }

    /// Run the graph on `n` already-preprocessed inputs laid out back to back.
    pub fn run(&self, data: Vec<f32>, n: usize) -> Result<Vec<FeatureVector>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let rt = |e: TractError| Error::Runtime(e.to_string());
        let input = Tensor::from_shape(&[n, 3, INPUT_SIZE, INPUT_SIZE], &data).map_err(rt)?;
        let result = self.plan.run(tvec![input.into()]).map_err(rt)?;
        let view = result[0].to_plain_array_view::<f32>().map_err(rt)?;
        let values = view
            .as_slice()
            .ok_or_else(|| Error::Runtime("graph output is not contiguous".into()))?;
        if values.len() != n * self.out_dim {
            return Err(Error::Runtime(format!(
                "graph returned {} values for {n} x {}",
                values.len(),
                self.out_dim
            )));
        }
        let out: Vec<FeatureVector> = values
            .chunks_exact(self.out_dim)
            .map(|c| FeatureVector(c.to_vec()))
            .collect();
        if out.iter().flat_map(|f| &f.0).any(|v| !v.is_finite()) {
            return Err(Error::Runtime("non-finite embedding value".into()));
        }
        Ok(out)
    }
}

/// Bilinear resize (half-pixel centers) to 224×224, scale to `[0, 1]`, normalize.
pub fn preprocess_into(patch: &Patch, means: [f32; 3], stds: [f32; 3], out: &mut [f32]) {
    let n_in = patch.size();
    let n_out = INPUT_SIZE;
    let scale = n_in as f32 / n_out as f32;
    // Per output coordinate: (low index, high index, weight of high).
    let taps: Vec<(usize, usize, f32)> = (0..n_out)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
            let lo = src.floor() as usize;
            (lo, (lo + 1).min(n_in - 1), src - lo as f32)
        })
        .collect();
    let plane = n_out * n_out;
    for (oy, &(y0, y1, ty)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in taps.iter().enumerate() {
            let (a, b, c, d) = (
                patch.rgb(x0, y0),
                patch.rgb(x1, y0),
                patch.rgb(x0, y1),
                patch.rgb(x1, y1),
            );
            for ch in 0..3 {
                let top = f32::from(a[ch]) + (f32::from(b[ch]) - f32::from(a[ch])) * tx;
                let bot = f32::from(c[ch]) + (f32::from(d[ch]) - f32::from(c[ch])) * tx;
                let v = (top + (bot - top) * ty) / 255.0;
                out[ch * plane + oy * n_out + ox] = (v - means[ch]) / stds[ch];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::PatchWindow;

    fn uniform(n: usize, v: u8) -> Patch {
        Patch::from_rgb(PatchWindow::new(0, 0, n), vec![v; n * n * 3], 0.0).unwrap()
    }

    #[test]
    fn constant_patch_normalizes_to_constants() {
        let mut out = vec![0.0; 3 * 224 * 224];
        preprocess_into(&uniform(40, 255), DEFAULT_MEANS, DEFAULT_STDS, &mut out);
        for ch in 0..3 {
            let want = (1.0 - DEFAULT_MEANS[ch]) / DEFAULT_STDS[ch];
            let plane = &out[ch * 224 * 224..(ch + 1) * 224 * 224];
            assert!(plane.iter().all(|&v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn native_size_resize_is_identity() {
        let n = 224;
        let pixels: Vec<u8> = (0..n * n * 3).map(|i| (i * 37 % 256) as u8).collect();
        let p = Patch::from_rgb(PatchWindow::new(0, 0, n), pixels, 0.0).unwrap();
        let mut out = vec![0.0; 3 * n * n];
        preprocess_into(&p, [0.0; 3], [1.0 / 255.0; 3], &mut out);
        for y in 0..n {
            for x in 0..n {
                let rgb = p.rgb(x, y);
                for ch in 0..3 {
                    let v = out[ch * n * n + y * n + x];
                    assert!((v - f32::from(rgb[ch])).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn both_scales_share_output_shape() {
        let mut out = vec![f32::NAN; 3 * 224 * 224];
        for n in [40, 100] {
            preprocess_into(&uniform(n, 9), DEFAULT_MEANS, DEFAULT_STDS, &mut out);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}
