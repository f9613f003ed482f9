//! Trainable parameters, the inference model and its checkpoint format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle_encoder::{encode_bundles, BundleEncoderParams};
use crate::cf::xavier_uniform;
use crate::config::RunConfig;
use crate::corpus::FeatureTable;
use crate::error::ModelError;
use crate::item_encoder::{encode_items, AttentionWeights, ItemEncodeOptions, ItemEncoderNodes, ItemEncoderParams, ItemSources};
use crate::numerics::{dot, Graph, Matrix, NodeId, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLHE";
pub const CHECKPOINT_VERSION: u32 = 1;

const FROZEN_CF: &str = "frozen.cf_items";
const FROZEN_FEEDBACK: &str = "frozen.has_feedback";
const FROZEN_WARM: &str = "frozen.warm";

/// Every trainable matrix of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub item: ItemEncoderParams<T>,
    pub bundle: BundleEncoderParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// Xavier-uniform initialization of every matrix.
    pub fn init<R: Rng + ?Sized>(
        n_items: usize,
        content_dim: usize,
        cf_dim: usize,
        dim: usize,
        item_layers: usize,
        bundle_layers: usize,
        rng: &mut R,
    ) -> Self {
        let content_proj = xavier_uniform(content_dim, dim, rng);
        let feedback_proj = xavier_uniform(cf_dim, dim, rng);
        let id_table = xavier_uniform(n_items, dim, rng);
        let attention = |n: usize, rng: &mut R| -> Vec<AttentionWeights<T>> {
            (0..n)
                .map(|_| AttentionWeights {
                    key: xavier_uniform(dim, dim, rng),
                    query: xavier_uniform(dim, dim, rng),
                })
                .collect()
        };
        let item_att = attention(item_layers, rng);
        let bundle_att = attention(bundle_layers, rng);
        Self {
            item: ItemEncoderParams {
                content_proj,
                feedback_proj,
                id_table,
                layers: item_att,
            },
            bundle: BundleEncoderParams { layers: bundle_att },
        }
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "item.content_proj".to_owned(),
            "item.feedback_proj".to_owned(),
            "item.id_embedding".to_owned(),
        ];
        for l in 0..self.item.layers.len() {
            names.push(format!("item.layer{l}.key"));
            names.push(format!("item.layer{l}.query"));
        }
        for z in 0..self.bundle.layers.len() {
            names.push(format!("bundle.layer{z}.key"));
            names.push(format!("bundle.layer{z}.query"));
        }
        names
    }

    /// Matrices in the order of [`ModelParams::names`].
    pub fn matrices(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.item.content_proj, &self.item.feedback_proj, &self.item.id_table];
        for l in self.item.layers.iter().chain(&self.bundle.layers) {
            out.push(&l.key);
            out.push(&l.query);
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.item.content_proj, &mut self.item.feedback_proj, &mut self.item.id_table];
        for l in self.item.layers.iter_mut().chain(self.bundle.layers.iter_mut()) {
            out.push(&mut l.key);
            out.push(&mut l.query);
        }
        out
    }

    pub fn map(&self, mut f: impl FnMut(&Matrix<T>) -> Matrix<T>) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.matrices_mut().into_iter().zip(self.matrices()) {
            *dst = f(src);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let att = |ls: &[AttentionWeights<T>]| -> Vec<AttentionWeights<U>> {
            ls.iter()
                .map(|l| AttentionWeights {
                    key: l.key.cast(),
                    query: l.query.cast(),
                })
                .collect()
        };
        ModelParams {
            item: ItemEncoderParams {
                content_proj: self.item.content_proj.cast(),
                feedback_proj: self.item.feedback_proj.cast(),
                id_table: self.item.id_table.cast(),
                layers: att(&self.item.layers),
            },
            bundle: BundleEncoderParams {
                layers: att(&self.bundle.layers),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.item.dim()
    }

    pub fn n_items(&self) -> usize {
        self.item.id_table.rows()
    }
}

/// Parameters registered on a graph.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub item: ItemEncoderNodes,
    pub bundle: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn params<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>) -> Self {
        let item = ItemEncoderNodes::params(g, &p.item);
        let bundle = p.bundle.layers.iter().map(|l| (g.param(l.key.clone()), g.param(l.query.clone()))).collect();
        Self { item, bundle }
    }

    pub fn constants<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>) -> Self {
        let item = ItemEncoderNodes::constants(g, &p.item);
        let bundle = p
            .bundle
            .layers
            .iter()
            .map(|l| (g.constant(l.key.clone()), g.constant(l.query.clone())))
            .collect();
        Self { item, bundle }
    }

    /// Node ids in the order of [`ModelParams::names`].
    pub fn all(&self) -> Vec<NodeId> {
        let mut out = vec![self.item.content_proj, self.item.feedback_proj, self.item.id_table];
        for &(k, q) in self.item.layers.iter().chain(&self.bundle) {
            out.push(k);
            out.push(q);
        }
        out
    }
}

pub fn encode_options(config: &RunConfig) -> ItemEncodeOptions {
    ItemEncodeOptions {
        use_feedback: config.ablation.use_feedback,
        use_attention: config.ablation.use_item_attention,
        slot_fill: config.model.slot_fill,
    }
}

/// A trained model ready for scoring.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
    pub sources: ItemSources<f32>,
}

/// Item representations plus the last-layer feature rows behind them.
#[derive(Clone, Debug)]
pub struct ItemTable {
    /// N×d representations `f_i`.
    pub table: Matrix<f32>,
    /// 3N×d last-layer feature rows.
    pub rows: Matrix<f32>,
}

impl Model {
    pub fn n_items(&self) -> usize {
        self.params.n_items()
    }

    /// Encodes every item of the catalog.
    pub fn item_table(&self) -> Result<ItemTable, ModelError> {
        let mut g = Graph::new();
        let nodes = ItemEncoderNodes::constants(&mut g, &self.params.item);
        let enc = encode_items(&mut g, &nodes, &self.sources, encode_options(&self.config))?;
        Ok(ItemTable {
            table: g.value(enc.table).clone(),
            rows: g.value(enc.rows).clone(),
        })
    }

    /// Bundle vector of a seed set and the last-layer seed rows.
    pub fn encode_seeds(&self, table: &Matrix<f32>, seeds: &[usize]) -> Result<(Vec<f32>, Matrix<f32>), ModelError> {
        if let Some(&bad) = seeds.iter().find(|&&s| s >= table.rows()) {
            return Err(ModelError::Contract(format!("seed item {bad} is outside the catalog")));
        }
        let mut g = Graph::new();
        let items = g.constant(table.select_rows(seeds));
        let layers: Vec<_> = self
            .params
            .bundle
            .layers
            .iter()
            .map(|l| (g.constant(l.key.clone()), g.constant(l.query.clone())))
            .collect();
        let local = vec![(0..seeds.len()).collect::<Vec<_>>()];
        let (e, hidden) = encode_bundles(&mut g, items, &local, &layers, self.config.ablation.use_bundle_attention)?;
        Ok((g.value(e).row(0).to_vec(), g.value(hidden).clone()))
    }

    /// Inner-product scores of every catalog item against the seed set.
    pub fn scores(&self, table: &Matrix<f32>, seeds: &[usize]) -> Result<Vec<f32>, ModelError> {
        let (e, _) = self.encode_seeds(table, seeds)?;
        Ok(score(&e, table))
    }
}

/// `⟨e_b, f_i⟩` for every row of `table`.
pub fn score<T: Real>(bundle: &[T], table: &Matrix<T>) -> Vec<T> {
    table.iter_rows().map(|f| dot(bundle, f)).collect()
}

/// Checkpoint header metadata, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub epoch: usize,
    pub val_recall20: Option<f64>,
    pub val_ndcg20: Option<f64>,
}

/// Parameters plus the frozen inputs needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
    pub cf_items: Matrix<f32>,
    pub has_feedback: Vec<bool>,
    pub warm: Vec<bool>,
}

fn flags_to_row(flags: &[bool]) -> Matrix<f32> {
    Matrix::row_vector(flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect())
}

fn ckpt_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<Option<u32>, ModelError> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 { Ok(None) } else { Err(ckpt_err("truncated length field")) };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn need_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    read_u32(r)?.ok_or_else(|| ckpt_err("unexpected end of file"))
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| ckpt_err(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let names = self.params.names();
        let frozen = [
            (FROZEN_CF.to_owned(), self.cf_items.clone()),
            (FROZEN_FEEDBACK.to_owned(), flags_to_row(&self.has_feedback)),
            (FROZEN_WARM.to_owned(), flags_to_row(&self.warm)),
        ];
        let entries = names
            .iter()
            .zip(self.params.matrices())
            .map(|(n, m)| (n.as_str(), m))
            .chain(frozen.iter().map(|(n, m)| (n.as_str(), m)));
        for (name, m) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ckpt_err("bad magic bytes"));
        }
        let version = need_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let len = need_u32(&mut r)? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| ckpt_err(format!("header: {e}")))?;

        let mut tables = BTreeMap::new();
        while let Some(name_len) = read_u32(&mut r)? {
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| ckpt_err("parameter name is not UTF-8"))?;
            let rows = need_u32(&mut r)? as usize;
            let cols = need_u32(&mut r)? as usize;
            let mut bytes = vec![0u8; rows * cols * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tables.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        let mut take = |name: &str| tables.remove(name).ok_or_else(|| ckpt_err(format!("missing `{name}`")));
        let layers = |prefix: &str, n: usize, take: &mut dyn FnMut(&str) -> Result<Matrix<f32>, ModelError>| {
            (0..n)
                .map(|l| {
                    Ok(AttentionWeights {
                        key: take(&format!("{prefix}.layer{l}.key"))?,
                        query: take(&format!("{prefix}.layer{l}.query"))?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()
        };
        let model = &meta.config.model;
        let params = ModelParams {
            item: ItemEncoderParams {
                content_proj: take("item.content_proj")?,
                feedback_proj: take("item.feedback_proj")?,
                id_table: take("item.id_embedding")?,
                layers: layers("item", model.item_layers, &mut take)?,
            },
            bundle: BundleEncoderParams {
                layers: layers("bundle", model.bundle_layers, &mut take)?,
            },
        };
        let flags = |m: Matrix<f32>| m.data().iter().map(|&v| v != 0.0).collect::<Vec<_>>();
        let cf_items = take(FROZEN_CF)?;
        let has_feedback = flags(take(FROZEN_FEEDBACK)?);
        let warm = flags(take(FROZEN_WARM)?);
        if let Some(extra) = tables.keys().next() {
            return Err(ckpt_err(format!("unexpected entry `{extra}`")));
        }
        Ok(Self {
            meta,
            params,
            cf_items,
            has_feedback,
            warm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Rebuilds the model against the corpus content features.
    pub fn into_model(self, features: &FeatureTable) -> Result<Model, ModelError> {
        let sources = ItemSources::from_parts(features, self.cf_items, self.has_feedback, self.warm)?;
        if sources.n_items() != self.params.n_items() {
            return Err(ckpt_err(format!(
                "checkpoint covers {} items, corpus has {}",
                self.params.n_items(),
                sources.n_items()
            )));
        }
        if sources.content.cols() != self.params.item.content_proj.rows() {
            return Err(ckpt_err(format!(
                "checkpoint expects content width {}, corpus has {}",
                self.params.item.content_proj.rows(),
                sources.content.cols()
            )));
        }
        Ok(Model {
            config: self.meta.config,
            params: self.params,
            sources,
        })
    }
}
