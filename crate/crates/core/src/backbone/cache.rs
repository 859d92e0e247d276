//! On-disk embedding cache for a patch set, keyed by patch id and graph hash.
//!
//! Layout of a cache directory:
//! - `embeddings.json`: graph hash, D, view count, ids in row order, labels.
//! - `view{v}.bin`: magic `PEMB`, version, D, count (u32 LE), then
//!   `count * D` little-endian f32. View 0 holds the raw patches, views
//!   `1..` hold independently augmented copies.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::dataset::{augment, AugmentationConfig, Label, PatchSet};
use crate::error::{Error, Result};
use crate::util::read_u32;

const MAGIC: &[u8; 4] = b"PEMB";
const VERSION: u32 = 1;
const MANIFEST: &str = "embeddings.json";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub graph_hash: String,
    pub dim: usize,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    /// `views[v]` is row-major `ids.len() × dim`.
    pub views: Vec<Vec<f32>>,
    pub augmentation: Option<AugmentationConfig>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    graph_hash: String,
    dim: usize,
    views: usize,
    ids: Vec<String>,
    labels: Vec<Label>,
    augmentation: Option<AugmentationConfig>,
}

impl EmbeddingCache {
    /// Embed every patch once raw and `augmented_views` more times augmented.
    ///
    /// Work is spread over the current rayon pool in chunks of `batch_size`.
    pub fn build(
        backbone: &Backbone,
        set: &PatchSet,
        augmented_views: usize,
        aug: &AugmentationConfig,
        batch_size: usize,
    ) -> Result<Self> {
        aug.validate()?;
        let batch_size = batch_size.max(1);
        let items = set.items();
        let mut views = Vec::with_capacity(augmented_views + 1);
        for v in 0..=augmented_views {
            let chunks: Vec<Vec<f32>> = items
                .par_chunks(batch_size)
                .map(|chunk| {
                    let patches: Vec<_> = chunk
                        .iter()
                        .map(|it| {
                            if v == 0 {
                                it.patch.clone()
                            } else {
                                augment(&it.patch, aug, &mut aug.item_rng(v as u64, &it.id))
                            }
                        })
                        .collect();
                    let feats = backbone.embed_batch(&patches)?;
                    Ok(feats.into_iter().flat_map(|f| f.0).collect())
                })
                .collect::<Result<_>>()?;
            views.push(chunks.concat());
        }
        Ok(EmbeddingCache {
            graph_hash: backbone.graph_hash().to_string(),
            dim: backbone.out_dim(),
            ids: items.iter().map(|i| i.id.clone()).collect(),
            labels: items.iter().map(|i| i.label).collect(),
            views,
            augmentation: (augmented_views > 0).then(|| aug.clone()),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn row(&self, view: usize, i: usize) -> &[f32] {
        &self.views[view][i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (v, data) in self.views.iter().enumerate() {
            let mut buf = Vec::with_capacity(16 + data.len() * 4);
            buf.extend_from_slice(MAGIC);
            for h in [VERSION, self.dim as u32, self.len() as u32] {
                buf.extend_from_slice(&h.to_le_bytes());
            }
            for x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            fs::write(dir.join(format!("view{v}.bin")), buf)?;
        }
        let manifest = Manifest {
            version: VERSION,
            graph_hash: self.graph_hash.clone(),
            dim: self.dim,
            views: self.views.len(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            augmentation: self.augmentation.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Load a cache; with `expected_hash`, refuse one built from another graph.
    pub fn load(dir: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST);
        if !mpath.exists() {
            return Err(Error::MissingFile(mpath));
        }
        let m: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        if m.version != VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: VERSION,
            });
        }
        if let Some(h) = expected_hash.filter(|h| *h != m.graph_hash) {
            return Err(Error::invalid(format!(
                "embedding cache was built by graph {}, backbone is {h}",
                m.graph_hash
            )));
        }
        if m.labels.len() != m.ids.len() {
            return Err(Error::invalid("cache manifest ids and labels differ in length"));
        }
        let mut views = Vec::with_capacity(m.views);
        for v in 0..m.views {
            let name = format!("view{v}.bin");
            let buf = fs::read(dir.join(&name))?;
            if buf.len() < 16 || &buf[..4] != MAGIC {
                return Err(Error::Magic(name));
            }
            let version = read_u32(&buf, 4);
            if version != VERSION {
                return Err(Error::Version {
                    found: version,
                    expected: VERSION,
                });
            }
            let (dim, count) = (read_u32(&buf, 8) as usize, read_u32(&buf, 12) as usize);
            if dim != m.dim || count != m.ids.len() || buf.len() != 16 + dim * count * 4 {
                return Err(Error::CorruptContainer(format!(
                    "{name}: header {dim}x{count}, {} bytes",
                    buf.len()
                )));
            }
            views.push(
                buf[16..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
        Ok(EmbeddingCache {
            graph_hash: m.graph_hash,
            dim: m.dim,
            ids: m.ids,
            labels: m.labels,
            views,
            augmentation: m.augmentation,
        })
    }
}
