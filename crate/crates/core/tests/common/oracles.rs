//! Straight-line reference implementations used as test oracles.

use bundlekit::cf::propagate;
use bundlekit::corpus::InteractionGraph;
use bundlekit::numerics::Matrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn reference_info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = (cosine(&anchors[i], &positives[i]) / tau).exp();
        let all: f64 = positives.iter().map(|p| (cosine(&anchors[i], p) / tau).exp()).sum();
        total -= (own / all).ln();
    }
    total / n as f64
}

pub fn reference_nll(scores: &[Vec<f64>], targets: &[Vec<usize>]) -> f64 {
    let n = scores[0].len() as f64;
    let mut total = 0.0;
    for (row, ts) in scores.iter().zip(targets) {
        let z: f64 = row.iter().map(|s| s.exp()).sum();
        for &t in ts {
            total -= (row[t].exp() / z).ln() / n;
        }
    }
    total / scores.len() as f64
}

/// Full sort by (score desc, index asc), then truncate.
pub fn reference_rank(scores: &[f32], excluded: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn reference_ndcg(ranked: &[usize], targets: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (p, r) in ranked.iter().take(k).enumerate() {
        if targets.contains(r) {
            dcg += 1.0 / (p as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for p in 0..k.min(targets.len()) {
        idcg += 1.0 / (p as f64 + 2.0).log2();
    }
    dcg / idcg
}

pub fn random_graph(rng: &mut ChaCha8Rng, max_side: usize) -> InteractionGraph {
    let m = rng.random_range(1..=max_side);
    let n = rng.random_range(1..=max_side);
    let n_edges = rng.random_range(0..=m * n);
    let edges = index::sample(rng, m * n, n_edges)
        .into_iter()
        .map(|e| (e / n, e % n))
        .collect();
    InteractionGraph::new(m, n, edges).unwrap()
}

/// `D^{-1/2} A D^{-1/2}` of the (M+N)-node bipartite graph, users first.
pub fn normalized_adjacency(g: &InteractionGraph) -> Matrix<f64> {
    let size = g.n_users + g.n_items;
    let mut a = Matrix::zeros(size, size);
    for &(u, i) in &g.edges {
        a.set(u, g.n_users + i, 1.0);
        a.set(g.n_users + i, u, 1.0);
    }
    let degree: Vec<f64> = (0..size).map(|r| a.row(r).iter().sum()).collect();
    Matrix::from_fn(size, size, |r, c| {
        if a.get(r, c) == 0.0 {
            0.0
        } else {
            a.get(r, c) / (degree[r].sqrt() * degree[c].sqrt())
        }
    })
}

pub fn stack(users: &Matrix<f64>, items: &Matrix<f64>) -> Matrix<f64> {
    let rows: Vec<Vec<f64>> = users.iter_rows().chain(items.iter_rows()).map(<[f64]>::to_vec).collect();
    Matrix::from_rows(&rows).unwrap()
}

pub fn max_oracle_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 10);
    let d = rng.random_range(1..5);
    let users0 = Matrix::from_fn(g.n_users, d, |_, _| rng.random_range(-1.0..1.0));
    let items0 = Matrix::from_fn(g.n_items, d, |_, _| rng.random_range(-1.0..1.0));
    let layers = propagate(&users0, &items0, &g, 3);
    let adj = normalized_adjacency(&g);
    let mut expected = stack(&users0, &items0);
    let mut worst = 0.0f64;
    for (u, i) in &layers {
        worst = worst.max(stack(u, i).max_abs_diff(&expected));
        expected = adj.matmul(&expected).unwrap();
    }
    worst
}
