//! Collaborative-filtering item embeddings from the user–item graph.
//!
//! Embeddings are propagated over the bipartite graph with symmetric degree
//! normalization (`1 / (√|N_u| · √|N_i|)` per edge), averaged over layers
//! `0..=K`, and trained with a pairwise ranking loss on the averaged tables.
//! The exported item table is frozen for the downstream encoder.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InteractionGraph;
use crate::numerics::{dot, Matrix, Real};
use crate::optim::{Adam, AdamConfig};

pub const CF_MAGIC: &[u8; 4] = b"CFE1";
pub const CF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CfError {
    #[error("cf checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cf checkpoint format: {0}")]
    Format(String),
}

/// Frozen layer-averaged user and item tables.
#[derive(Clone, Debug, PartialEq)]
pub struct CfEmbeddings {
    pub users: Matrix<f32>,
    pub items: Matrix<f32>,
    pub layers: usize,
}

impl CfEmbeddings {
    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    /// Preference score `⟨p_u, p_i⟩` on the exported tables.
    pub fn score(&self, user: usize, item: usize) -> f32 {
        dot(self.users.row(user), self.items.row(item))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CF_MAGIC)?;
        for v in [
            CF_VERSION,
            self.users.rows() as u32,
            self.items.rows() as u32,
            self.dim() as u32,
            self.layers as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for m in [&self.users, &self.items] {
            let mut buf = Vec::with_capacity(m.data().len() * 4);
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CfError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..4] != CF_MAGIC {
            return Err(CfError::Format("missing CFE1 magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, m, n, d, k) = (word(0), word(1), word(2), word(3), word(4));
        if version != CF_VERSION as usize {
            return Err(CfError::Format(format!("unsupported version {version}")));
        }
        let body = &bytes[24..];
        if body.len() != (m + n) * d * 4 {
            return Err(CfError::Format(format!("expected {} table bytes, found {}", (m + n) * d * 4, body.len())));
        }
        let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (u, i) = floats.split_at(m * d);
        Ok(Self {
            users: Matrix::from_vec(m, d, u.to_vec()).map_err(|e| CfError::Format(e.to_string()))?,
            items: Matrix::from_vec(n, d, i.to_vec()).map_err(|e| CfError::Format(e.to_string()))?,
            layers: k,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CfError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CfError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Edge weight shared by both propagation directions.
#[inline]
fn edge_coefficient<T: Real>(user_degree: usize, item_degree: usize) -> T {
    let du = T::from_usize(user_degree).unwrap();
    let di = T::from_usize(item_degree).unwrap();
    T::one() / (du.sqrt() * di.sqrt())
}

/// One propagation step: new user rows from item rows and new item rows from user rows.
pub fn propagate_once<T: Real>(users: &Matrix<T>, items: &Matrix<T>, graph: &InteractionGraph) -> (Matrix<T>, Matrix<T>) {
    let d = users.cols();
    let mut next_users = Matrix::zeros(graph.n_users, d);
    let mut next_items = Matrix::zeros(graph.n_items, d);
    for &(u, i) in &graph.edges {
        let c: T = edge_coefficient(graph.user_degree[u], graph.item_degree[i]);
        for (o, &v) in next_users.row_mut(u).iter_mut().zip(items.row(i)) {
            *o = *o + c * v;
        }
        for (o, &v) in next_items.row_mut(i).iter_mut().zip(users.row(u)) {
            *o = *o + c * v;
        }
    }
    (next_users, next_items)
}

/// Layer embeddings `0..=layers`, starting from the given layer-0 tables.
pub fn propagate<T: Real>(
    users0: &Matrix<T>,
    items0: &Matrix<T>,
    graph: &InteractionGraph,
    layers: usize,
) -> Vec<(Matrix<T>, Matrix<T>)> {
    let mut out = Vec::with_capacity(layers + 1);
    out.push((users0.clone(), items0.clone()));
    for _ in 0..layers {
        let (u, i) = out.last().unwrap();
        out.push(propagate_once(u, i, graph));
    }
    out
}

/// Element-wise mean over all layers (`K + 1` terms, divided by `K + 1`).
pub fn aggregate_layers<T: Real>(layers: &[(Matrix<T>, Matrix<T>)]) -> (Matrix<T>, Matrix<T>) {
    assert!(!layers.is_empty(), "at least layer 0 is required");
    let n = T::from_usize(layers.len()).unwrap();
    let mut users = layers[0].0.clone();
    let mut items = layers[0].1.clone();
    for (u, i) in &layers[1..] {
        users.add_assign(u);
        items.add_assign(i);
    }
    (users.map(|v| v / n), items.map(|v| v / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            epochs: 50,
            lr: 1e-2,
            l2: 1e-4,
            batch_size: 2048,
        }
    }
}

/// Uniform Xavier initialization for an `rows × cols` table.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
}

/// A `(user, positive item, negative item)` training triple.
pub type Triple = (usize, usize, usize);

/// Mean pairwise ranking loss `−ln σ(⟨p_u, p_i − p_j⟩)` over `triples` on the
/// layer-averaged tables, plus `l2·(‖U₀‖² + ‖I₀‖²)`, with its gradient with
/// respect to the layer-0 tables.
pub fn ranking_loss_and_grad(
    users0: &Matrix<f64>,
    items0: &Matrix<f64>,
    graph: &InteractionGraph,
    layers: usize,
    triples: &[Triple],
    l2: f64,
) -> (f64, Matrix<f64>, Matrix<f64>) {
    let (users, items) = aggregate_layers(&propagate(users0, items0, graph, layers));
    let d = users.cols();
    let mut g_users = Matrix::zeros(users.rows(), d);
    let mut g_items = Matrix::zeros(items.rows(), d);
    let scale = 1.0 / triples.len().max(1) as f64;
    let mut loss = 0.0;
    for &(u, i, j) in triples {
        let (pu, pi, pj) = (users.row(u), items.row(i), items.row(j));
        let x: f64 = pu.iter().zip(pi.iter().zip(pj)).map(|(a, (b, c))| a * (b - c)).sum();
        // −ln σ(x) = ln(1 + e^{−x}), evaluated stably.
        loss += if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
        let w = -scale / (1.0 + x.exp());
        for (k, o) in g_users.row_mut(u).iter_mut().enumerate() {
            *o += w * (pi[k] - pj[k]);
        }
        for (o, &a) in g_items.row_mut(i).iter_mut().zip(pu) {
            *o += w * a;
        }
        for (o, &a) in g_items.row_mut(j).iter_mut().zip(pu) {
            *o -= w * a;
        }
    }
    loss *= scale;

    // The normalized adjacency is symmetric, so the adjoint of the layer
    // average is the same average applied to the incoming gradient.
    let (mut gu, mut gi) = aggregate_layers(&propagate(&g_users, &g_items, graph, layers));
    loss += l2 * (users0.sum_squares() + items0.sum_squares());
    gu.add_assign(&users0.scale(2.0 * l2));
    gi.add_assign(&items0.scale(2.0 * l2));
    (loss, gu, gi)
}

/// Trains layer-0 tables with the pairwise ranking loss and exports the
/// propagated, layer-averaged embeddings.
///
/// A graph without edges returns the Xavier initialization untouched.
pub fn pretrain<R: Rng + ?Sized>(graph: &InteractionGraph, config: &CfConfig, rng: &mut R) -> CfEmbeddings {
    let mut users0: Matrix<f64> = xavier_uniform(graph.n_users, config.dim, rng);
    let mut items0: Matrix<f64> = xavier_uniform(graph.n_items, config.dim, rng);
    if graph.edges.is_empty() {
        return CfEmbeddings {
            users: users0.cast(),
            items: items0.cast(),
            layers: config.layers,
        };
    }

    let owned: Vec<Vec<usize>> = (0..graph.n_users)
        .map(|u| {
            let mut v = graph.items_of(u).to_vec();
            v.sort_unstable();
            v
        })
        .collect();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), [&users0, &items0]);
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut triples = Vec::with_capacity(chunk.len());
            for &e in chunk {
                let (u, i) = graph.edges[e];
                if owned[u].len() >= graph.n_items {
                    continue;
                }
                let j = loop {
                    let j = rng.random_range(0..graph.n_items);
                    if owned[u].binary_search(&j).is_err() {
                        break j;
                    }
                };
                triples.push((u, i, j));
            }
            if triples.is_empty() {
                continue;
            }
            let (loss, gu, gi) = ranking_loss_and_grad(&users0, &items0, graph, config.layers, &triples, config.l2);
            adam.update(&mut [&mut users0, &mut items0], &[gu, gi]);
            epoch_loss += loss;
            batches += 1;
        }
        log::debug!("cf epoch {epoch}: loss {:.5}", epoch_loss / batches.max(1) as f64);
    }

    let (users, items) = aggregate_layers(&propagate(&users0, &items0, graph, config.layers));
    CfEmbeddings {
        users: users.cast(),
        items: items.cast(),
        layers: config.layers,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::{finite_difference, relative_error};

    fn graph(n_users: usize, n_items: usize, edges: &[(usize, usize)]) -> InteractionGraph {
        InteractionGraph::new(n_users, n_items, edges.to_vec()).unwrap()
    }

    #[test]
    fn single_edge_swaps_embeddings() {
        let g = graph(1, 1, &[(0, 0)]);
        let u = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let i = Matrix::from_vec(1, 2, vec![-3.0, 0.5]).unwrap();
        let layers = propagate(&u, &i, &g, 1);
        assert_eq!(layers[1].0, i);
        assert_eq!(layers[1].1, u);
    }

    #[test]
    fn empty_graph_propagates_to_zero() {
        let g = graph(2, 3, &[]);
        let u = Matrix::filled(2, 4, 1.0);
        let i = Matrix::filled(3, 4, -1.0);
        for (lu, li) in &propagate(&u, &i, &g, 2)[1..] {
            assert!(lu.data().iter().chain(li.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn aggregation_is_a_true_mean() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![3.0, -2.0]).unwrap();
        let (u, _) = aggregate_layers(&[(a.clone(), a.clone()), (b.clone(), b)]);
        assert_eq!(u.data(), &[2.0, 0.0]);
        let (same, _) = aggregate_layers(&[(a.clone(), a.clone()), (a.clone(), a.clone()), (a.clone(), a.clone())]);
        assert!(same.max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn ranking_gradient_matches_finite_differences() {
        let g = graph(3, 4, &[(0, 0), (0, 2), (1, 1), (2, 2), (2, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u0: Matrix<f64> = xavier_uniform(3, 3, &mut rng);
        let i0: Matrix<f64> = xavier_uniform(4, 3, &mut rng);
        let triples = [(0, 0, 1), (1, 1, 3), (2, 3, 0), (0, 2, 3)];
        let (_, gu, gi) = ranking_loss_and_grad(&u0, &i0, &g, 2, &triples, 0.01);
        let fd_u = finite_difference(|u| ranking_loss_and_grad(u, &i0, &g, 2, &triples, 0.01).0, &u0, 1e-5);
        let fd_i = finite_difference(|i| ranking_loss_and_grad(&u0, i, &g, 2, &triples, 0.01).0, &i0, 1e-5);
        assert!(relative_error(&gu, &fd_u) < 1e-6);
        assert!(relative_error(&gi, &fd_i) < 1e-6);
    }

    #[test]
    fn training_ranks_the_observed_item_first() {
        let g = graph(1, 2, &[(0, 0)]);
        let config = CfConfig {
            dim: 8,
            layers: 1,
            epochs: 200,
            lr: 0.05,
            l2: 0.0,
            batch_size: 16,
        };
        let cf = pretrain(&g, &config, &mut ChaCha8Rng::seed_from_u64(11));
        assert!(cf.score(0, 0) > cf.score(0, 1));
    }

    #[test]
    fn zero_lr_returns_aggregated_init() {
        let g = graph(2, 3, &[(0, 0), (1, 2), (0, 1)]);
        let config = CfConfig {
            dim: 4,
            layers: 2,
            epochs: 3,
            lr: 0.0,
            l2: 0.1,
            batch_size: 2,
        };
        let cf = pretrain(&g, &config, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0: Matrix<f64> = xavier_uniform(2, 4, &mut rng);
        let i0: Matrix<f64> = xavier_uniform(3, 4, &mut rng);
        let (u, i) = aggregate_layers(&propagate(&u0, &i0, &g, 2));
        assert_eq!(cf.users, u.cast());
        assert_eq!(cf.items, i.cast());
    }

    #[test]
    fn checkpoint_header() {
        let cf = CfEmbeddings {
            users: Matrix::filled(2, 3, 0.5),
            items: Matrix::filled(4, 3, -0.25),
            layers: 2,
        };
        let mut buf = Vec::new();
        cf.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CFE1");
        let words: Vec<u32> = buf[4..24].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(words, vec![1, 2, 4, 3, 2]);
        assert_eq!(buf.len(), 24 + 6 * 3 * 4);
        assert_eq!(CfEmbeddings::read_from(&buf[..]).unwrap(), cf);
    }
}
