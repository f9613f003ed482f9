//! Feature-level encoder producing one fused vector per item.
//!
//! Each item contributes a 3×d feature matrix: projected content, projected
//! CF embedding, and id embedding. Missing feedback or id rows are filled
//! from the content feature. `L` key/query self-attention layers mix the three
//! rows and their mean is the item representation.

use serde::{Deserialize, Serialize};

use crate::cf::CfEmbeddings;
use crate::corpus::{FeatureTable, InteractionGraph};
use crate::error::ModelError;
use crate::numerics::{Graph, Matrix, NodeId, Real, Segment};

/// Where a missing feedback slot is filled from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotFill {
    /// Copy the projected content row `c·W_c`.
    #[default]
    Projected,
    /// Copy raw content into the feedback input and project it with `W_p`
    /// (requires the CF width to equal the content width).
    Raw,
}

/// Key and query projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub key: Matrix<T>,
    pub query: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemEncoderParams<T> {
    /// `W_c`: content width × d.
    pub content_proj: Matrix<T>,
    /// `W_p`: CF width × d.
    pub feedback_proj: Matrix<T>,
    /// `V`: one id embedding row per item.
    pub id_table: Matrix<T>,
    pub layers: Vec<AttentionWeights<T>>,
}

impl<T: Real> ItemEncoderParams<T> {
    pub fn dim(&self) -> usize {
        self.content_proj.cols()
    }
}

/// Item-encoder parameters registered on a graph.
#[derive(Clone, Debug)]
pub struct ItemEncoderNodes {
    pub content_proj: NodeId,
    pub feedback_proj: NodeId,
    pub id_table: NodeId,
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ItemEncoderNodes {
    pub fn params<T: Real>(g: &mut Graph<T>, p: &ItemEncoderParams<T>) -> Self {
        Self::register(g, p, true)
    }

    pub fn constants<T: Real>(g: &mut Graph<T>, p: &ItemEncoderParams<T>) -> Self {
        Self::register(g, p, false)
    }

    fn register<T: Real>(g: &mut Graph<T>, p: &ItemEncoderParams<T>, trainable: bool) -> Self {
        let mut add = |m: &Matrix<T>| if trainable { g.param(m.clone()) } else { g.constant(m.clone()) };
        Self {
            content_proj: add(&p.content_proj),
            feedback_proj: add(&p.feedback_proj),
            id_table: add(&p.id_table),
            layers: p.layers.iter().map(|l| (add(&l.key), add(&l.query))).collect(),
        }
    }
}

/// Averages text and media when both are present, else returns the present one.
pub fn content_feature<T: Real>(text: Option<&[T]>, media: Option<&[T]>) -> Option<Vec<T>> {
    match (text, media) {
        (Some(t), Some(m)) => Some(t.iter().zip(m).map(|(&a, &b)| (a + b) / T::lit(2.0)).collect()),
        (Some(x), None) | (None, Some(x)) => Some(x.to_vec()),
        (None, None) => None,
    }
}

/// Raw per-item inputs of the encoder.
///
/// `has_feedback[i]` selects the CF row over the content fallback;
/// `use_id[i]` selects the id embedding over the content fallback;
/// `drop_content[i]` zeroes the content row (modality dropout).
#[derive(Clone, Debug, PartialEq)]
pub struct ItemSources<T> {
    pub content: Matrix<T>,
    pub feedback: Matrix<T>,
    pub has_feedback: Vec<bool>,
    pub use_id: Vec<bool>,
    pub drop_content: Vec<bool>,
    /// Added to the id table before use.
    pub id_noise: Option<Matrix<T>>,
    /// Multiplied into the id table before use.
    pub id_mask: Option<Matrix<T>>,
}

impl<T: Real> ItemSources<T> {
    /// Assembles content from the feature table and feedback from the CF table.
    ///
    /// `bundle_warm[i]` marks items seen in training bundles (id embedding usable).
    pub fn from_corpus(
        features: &FeatureTable,
        cf: &CfEmbeddings,
        interactions: &InteractionGraph,
        bundle_warm: &[bool],
    ) -> Result<Self, ModelError> {
        let has_feedback = (0..interactions.n_items).map(|i| interactions.has_feedback(i)).collect();
        Self::from_parts(features, cf.items.cast(), has_feedback, bundle_warm.to_vec())
    }

    pub fn from_parts(
        features: &FeatureTable,
        feedback: Matrix<T>,
        has_feedback: Vec<bool>,
        use_id: Vec<bool>,
    ) -> Result<Self, ModelError> {
        let content = content_matrix(features)?;
        let n = content.rows();
        if feedback.rows() != n || has_feedback.len() != n || use_id.len() != n {
            return Err(ModelError::Config(format!(
                "CF table has {} item rows (flags {} / {}), corpus has {n}",
                feedback.rows(),
                has_feedback.len(),
                use_id.len()
            )));
        }
        Ok(Self {
            content,
            feedback,
            has_feedback,
            use_id,
            drop_content: vec![false; n],
            id_noise: None,
            id_mask: None,
        })
    }

    pub fn n_items(&self) -> usize {
        self.content.rows()
    }

    /// Restricts the sources to a single item.
    pub fn single(&self, item: usize) -> Self {
        let idx = [item];
        Self {
            content: self.content.select_rows(&idx),
            feedback: self.feedback.select_rows(&idx),
            has_feedback: vec![self.has_feedback[item]],
            use_id: vec![self.use_id[item]],
            drop_content: vec![self.drop_content[item]],
            id_noise: self.id_noise.as_ref().map(|m| m.select_rows(&idx)),
            id_mask: self.id_mask.as_ref().map(|m| m.select_rows(&idx)),
        }
    }
}

/// Per-item content features `c_i` stacked into an N×F matrix.
pub fn content_matrix<T: Real>(features: &FeatureTable) -> Result<Matrix<T>, ModelError> {
    let n = features.rows();
    let mut content = Matrix::zeros(n, features.dim());
    for i in 0..n {
        let text: Option<Vec<T>> = features.text.get(i).map(cast_row);
        let media: Option<Vec<T>> = features.media.get(i).map(cast_row);
        let c = content_feature(text.as_deref(), media.as_deref()).ok_or(ModelError::MissingContent { item: i })?;
        content.row_mut(i).copy_from_slice(&c);
    }
    Ok(content)
}

fn cast_row<T: Real>(row: &[f32]) -> Vec<T> {
    row.iter().map(|&v| T::lit(v as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItemEncodeOptions {
    pub use_feedback: bool,
    pub use_attention: bool,
    pub slot_fill: SlotFill,
}

impl Default for ItemEncodeOptions {
    fn default() -> Self {
        Self {
            use_feedback: true,
            use_attention: true,
            slot_fill: SlotFill::Projected,
        }
    }
}

/// Output of [`encode_items`].
#[derive(Clone, Copy, Debug)]
pub struct ItemEncoding {
    /// N×d item representations.
    pub table: NodeId,
    /// 3N×d last-layer feature rows, item `i` at rows `3i..3i+3`.
    pub rows: NodeId,
}

pub fn item_segments(n_items: usize) -> Vec<Segment> {
    (0..n_items).map(|i| 3 * i..3 * i + 3).collect()
}

/// Stacks the three feature rows of every item (row-interleaved, 3N×d).
pub fn build_feature_rows<T: Real>(
    g: &mut Graph<T>,
    nodes: &ItemEncoderNodes,
    src: &ItemSources<T>,
    opts: ItemEncodeOptions,
) -> Result<NodeId, ModelError> {
    let n = src.n_items();
    let content = g.constant(src.content.clone());
    let projected = g.matmul(content, nodes.content_proj)?;

    let fallback = match opts.slot_fill {
        SlotFill::Projected => projected,
        SlotFill::Raw => {
            if src.content.cols() != src.feedback.cols() {
                return Err(ModelError::Config(format!(
                    "raw slot filling needs equal content ({}) and CF ({}) widths",
                    src.content.cols(),
                    src.feedback.cols()
                )));
            }
            g.matmul(content, nodes.feedback_proj)?
        }
    };
    let feedback_row = if opts.use_feedback && src.has_feedback.iter().any(|&f| f) {
        let feedback = g.constant(src.feedback.clone());
        let feedback = g.matmul(feedback, nodes.feedback_proj)?;
        g.blend_rows(feedback, fallback, &src.has_feedback)?
    } else {
        fallback
    };

    let mut ids = nodes.id_table;
    if let Some(mask) = &src.id_mask {
        let mask = g.constant(mask.clone());
        ids = g.mul(ids, mask)?;
    }
    if let Some(noise) = &src.id_noise {
        let noise = g.constant(noise.clone());
        ids = g.add(ids, noise)?;
    }
    let id_row = g.blend_rows(ids, projected, &src.use_id)?;

    let content_row = if src.drop_content.iter().any(|&d| d) {
        let zeros = g.constant(Matrix::zeros(n, g.value(projected).cols()));
        g.blend_rows(zeros, projected, &src.drop_content)?
    } else {
        projected
    };
    Ok(g.interleave_rows(&[content_row, feedback_row, id_row])?)
}

/// One self-attention layer over all rows of `hidden`.
pub fn attention_layer<T: Real>(g: &mut Graph<T>, hidden: NodeId, key: NodeId, query: NodeId) -> Result<NodeId, ModelError> {
    let rows = g.value(hidden).rows();
    Ok(g.segment_attention(hidden, key, query, &[0..rows])?)
}

/// Encodes every item in `src`.
pub fn encode_items<T: Real>(
    g: &mut Graph<T>,
    nodes: &ItemEncoderNodes,
    src: &ItemSources<T>,
    opts: ItemEncodeOptions,
) -> Result<ItemEncoding, ModelError> {
    let segments = item_segments(src.n_items());
    let mut hidden = build_feature_rows(g, nodes, src, opts)?;
    if opts.use_attention {
        for &(key, query) in &nodes.layers {
            hidden = g.segment_attention(hidden, key, query, &segments)?;
        }
    }
    let table = g.segment_mean(hidden, &segments)?;
    Ok(ItemEncoding { table, rows: hidden })
}

fn single_item_params<T: Real>(params: &ItemEncoderParams<T>, item: usize) -> ItemEncoderParams<T> {
    ItemEncoderParams {
        content_proj: params.content_proj.clone(),
        feedback_proj: params.feedback_proj.clone(),
        id_table: params.id_table.select_rows(&[item]),
        layers: params.layers.clone(),
    }
}

/// The 3×d feature matrix of one item before attention.
pub fn build_feature_matrix<T: Real>(
    item: usize,
    params: &ItemEncoderParams<T>,
    src: &ItemSources<T>,
    opts: ItemEncodeOptions,
) -> Result<Matrix<T>, ModelError> {
    let mut g = Graph::new();
    let nodes = ItemEncoderNodes::constants(&mut g, &single_item_params(params, item));
    let rows = build_feature_rows(&mut g, &nodes, &src.single(item), opts)?;
    Ok(g.value(rows).clone())
}

/// The fused representation `f_i` of one item.
pub fn encode_item<T: Real>(
    item: usize,
    params: &ItemEncoderParams<T>,
    src: &ItemSources<T>,
    opts: ItemEncodeOptions,
) -> Result<Vec<T>, ModelError> {
    let mut g = Graph::new();
    let nodes = ItemEncoderNodes::constants(&mut g, &single_item_params(params, item));
    let enc = encode_items(&mut g, &nodes, &src.single(item), opts)?;
    Ok(g.value(enc.table).row(0).to_vec())
}
