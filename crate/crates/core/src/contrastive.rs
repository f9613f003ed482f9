//! Augmented views and the InfoNCE objective used at item and bundle level.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::item_encoder::ItemSources;
use crate::numerics::{Graph, Matrix, NodeId, Real};

/// Item-level augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemAugMode {
    /// No augmentation: the view is the original representation.
    NA,
    /// Uniform noise in `[-w, w]` added to every raw input.
    FN,
    /// Each raw input coordinate zeroed with the dropout ratio.
    FD,
    /// Each item, with the dropout ratio, loses one uniformly chosen modality.
    #[default]
    MD,
}

/// Bundle-level augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BundleAugMode {
    /// Drop seeds.
    #[default]
    ID,
    /// Replace seeds with items from outside the bundle.
    IR,
}

/// Which items or bundles act as negatives in the contrastive losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Negatives {
    /// Items and bundles of the current batch.
    #[default]
    Batch,
    /// The whole catalog at item level and every training bundle at bundle level.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub item_mode: ItemAugMode,
    pub bundle_mode: BundleAugMode,
    pub dropout_ratio: f64,
    pub noise_weight: f64,
    pub temperature: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            item_mode: ItemAugMode::MD,
            bundle_mode: BundleAugMode::ID,
            dropout_ratio: 0.2,
            noise_weight: 0.05,
            temperature: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(ModelError::Config(format!(
                "dropout_ratio must lie in [0, 1), got {}",
                self.dropout_ratio
            )));
        }
        if !(self.noise_weight >= 0.0 && self.noise_weight.is_finite()) {
            return Err(ModelError::Config(format!(
                "noise_weight must be non-negative, got {}",
                self.noise_weight
            )));
        }
        Ok(())
    }
}

fn noise<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, weight: f64, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(weight * rng.random_range(-1.0..=1.0)))
}

fn keep_mask<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, ratio: f64, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| if rng.random_bool(ratio) { T::zero() } else { T::one() })
}

/// Builds the augmented encoder inputs for an item-level view.
///
/// Returns `None` for NA, meaning the original pass is reused. `id_shape` is
/// the shape of the id table (needed for FN/FD noise on it).
pub fn augment_item<T: Real, R: Rng + ?Sized>(
    src: &ItemSources<T>,
    id_shape: (usize, usize),
    config: &AugmentationConfig,
    rng: &mut R,
) -> Option<ItemSources<T>> {
    let mut out = src.clone();
    let (c, f) = (src.content.shape(), src.feedback.shape());
    match config.item_mode {
        ItemAugMode::NA => return None,
        ItemAugMode::FN => {
            let w = config.noise_weight;
            out.content.add_assign(&noise(c.0, c.1, w, rng));
            out.feedback.add_assign(&noise(f.0, f.1, w, rng));
            out.id_noise = Some(noise(id_shape.0, id_shape.1, w, rng));
        }
        ItemAugMode::FD => {
            let p = config.dropout_ratio;
            let mc: Matrix<T> = keep_mask(c.0, c.1, p, rng);
            let mf: Matrix<T> = keep_mask(f.0, f.1, p, rng);
            out.content = out.content.zip_map(&mc, |a, b| a * b).expect("same shape");
            out.feedback = out.feedback.zip_map(&mf, |a, b| a * b).expect("same shape");
            out.id_mask = Some(keep_mask(id_shape.0, id_shape.1, p, rng));
        }
        ItemAugMode::MD => {
            for i in 0..src.n_items() {
                if !rng.random_bool(config.dropout_ratio) {
                    continue;
                }
                match rng.random_range(0..3) {
                    0 => out.drop_content[i] = true,
                    1 => out.has_feedback[i] = false,
                    _ => out.use_id[i] = false,
                }
            }
        }
    }
    Some(out)
}

/// Number of seeds touched by a bundle-level augmentation.
fn touched(n_seeds: usize, ratio: f64) -> usize {
    (ratio * n_seeds as f64).floor() as usize
}

/// Augments a seed set.
///
/// ID drops `floor(ratio·n)` seeds but always keeps one; IR replaces that
/// many seeds with distinct items outside `members` (sorted).
pub fn augment_bundle<R: Rng + ?Sized>(
    seeds: &[usize],
    members: &[usize],
    n_items: usize,
    mode: BundleAugMode,
    ratio: f64,
    rng: &mut R,
) -> Vec<usize> {
    let count = touched(seeds.len(), ratio);
    if count == 0 {
        return seeds.to_vec();
    }
    match mode {
        BundleAugMode::ID => {
            let keep = seeds.len().saturating_sub(count).max(1);
            let mut kept: Vec<usize> = index::sample(rng, seeds.len(), keep).into_iter().map(|i| seeds[i]).collect();
            kept.sort_unstable();
            kept
        }
        BundleAugMode::IR => {
            let available = n_items.saturating_sub(members.len());
            let count = count.min(available);
            let replaced = index::sample(rng, seeds.len(), count).into_vec();
            let mut out: Vec<usize> = seeds
                .iter()
                .enumerate()
                .filter(|(i, _)| !replaced.contains(i))
                .map(|(_, &s)| s)
                .collect();
            let mut added = Vec::with_capacity(count);
            while added.len() < count {
                let cand = rng.random_range(0..n_items);
                if members.binary_search(&cand).is_err() && !added.contains(&cand) {
                    added.push(cand);
                }
            }
            out.extend(added);
            out.sort_unstable();
            out
        }
    }
}

/// InfoNCE over row pairs: row `i` of `anchors` is the positive of row `i` of
/// `positives`, every other row of `positives` is a negative.
///
/// Returns the mean over anchors of `-log softmax_v(cos(a_i, p_v)/τ)[i]`.
pub fn info_nce<T: Real>(g: &mut Graph<T>, anchors: NodeId, positives: NodeId, temperature: f64) -> Result<NodeId, ModelError> {
    let n = g.value(anchors).rows();
    if n == 0 || g.value(positives).rows() != n {
        return Err(ModelError::Contract(format!(
            "info_nce needs equal, non-empty anchor and positive lists (got {} and {})",
            n,
            g.value(positives).rows()
        )));
    }
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    let sim = g.matmul_nt(a, p)?;
    let logits = g.scale(sim, T::lit(1.0 / temperature))?;
    let log_prob = g.log_softmax_rows(logits)?;
    let diag = g.constant(Matrix::identity(n));
    let picked = g.mul(log_prob, diag)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, T::lit(-1.0 / n as f64))?)
}

/// Convenience wrapper evaluating [`info_nce`] on plain vectors.
pub fn info_nce_vectors<T: Real>(anchors: &[Vec<T>], positives: &[Vec<T>], temperature: f64) -> Result<T, ModelError> {
    let a = Matrix::from_rows(anchors)?;
    let p = Matrix::from_rows(positives)?;
    let mut g = Graph::new();
    let (a, p) = (g.constant(a), g.constant(p));
    let loss = info_nce(&mut g, a, p, temperature)?;
    Ok(g.scalar(loss))
}
