//! Item-level encoder turning a set of seed items into one bundle vector.

use crate::error::ModelError;
use crate::item_encoder::AttentionWeights;
use crate::numerics::{Graph, Matrix, NodeId, Real, Segment};

#[derive(Clone, Debug, PartialEq)]
pub struct BundleEncoderParams<T> {
    pub layers: Vec<AttentionWeights<T>>,
}

/// Contiguous row ranges for bundles of the given sizes.
pub fn bundle_segments(sizes: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    sizes
        .into_iter()
        .map(|n| {
            let seg = start..start + n;
            start += n;
            seg
        })
        .collect()
}

/// Encodes each seed set against an N×d item table; returns a B×d node.
///
/// Also returns the last-layer item rows (one per seed, bundles stacked).
pub fn encode_bundles<T: Real>(
    g: &mut Graph<T>,
    item_table: NodeId,
    seeds: &[Vec<usize>],
    layers: &[(NodeId, NodeId)],
    use_attention: bool,
) -> Result<(NodeId, NodeId), ModelError> {
    if seeds.iter().any(Vec::is_empty) {
        return Err(ModelError::EmptyBundle);
    }
    let flat: Vec<usize> = seeds.iter().flatten().copied().collect();
    let segments = bundle_segments(seeds.iter().map(Vec::len));
    let mut hidden = g.gather_rows(item_table, &flat)?;
    if use_attention {
        for &(key, query) in layers {
            hidden = g.segment_attention(hidden, key, query, &segments)?;
        }
    }
    Ok((g.segment_mean(hidden, &segments)?, hidden))
}

/// Encodes one bundle given its n×d item rows.
pub fn encode_bundle<T: Real>(item_reps: &Matrix<T>, params: &BundleEncoderParams<T>) -> Result<Vec<T>, ModelError> {
    if item_reps.rows() == 0 {
        return Err(ModelError::EmptyBundle);
    }
    let mut g = Graph::new();
    let table = g.constant(item_reps.clone());
    let layers: Vec<_> = params
        .layers
        .iter()
        .map(|l| (g.constant(l.key.clone()), g.constant(l.query.clone())))
        .collect();
    let seeds = vec![(0..item_reps.rows()).collect::<Vec<_>>()];
    let (e, _) = encode_bundles(&mut g, table, &seeds, &layers, true)?;
    Ok(g.value(e).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn params(z: usize, d: usize, rng: &mut ChaCha8Rng) -> BundleEncoderParams<f64> {
        BundleEncoderParams {
            layers: (0..z)
                .map(|_| AttentionWeights {
                    key: random(d, d, rng),
                    query: random(d, d, rng),
                })
                .collect(),
        }
    }

    #[test]
    fn singleton_returns_the_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random(1, 5, &mut rng);
        let e = encode_bundle(&f, &params(3, 5, &mut rng)).unwrap();
        assert_eq!(e, f.row(0));
    }

    #[test]
    fn no_layers_is_the_mean() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0]]).unwrap();
        let e = encode_bundle(&f, &BundleEncoderParams { layers: vec![] }).unwrap();
        assert_eq!(e, vec![2.0, 0.0]);
    }

    #[test]
    fn duplicate_rows_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random(1, 4, &mut rng);
        let doubled = f.select_rows(&[0, 0]);
        let e = encode_bundle(&doubled, &params(2, 4, &mut rng)).unwrap();
        for (a, b) in e.iter().zip(f.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_bundle_is_rejected() {
        let e = encode_bundle(&Matrix::<f64>::zeros(0, 3), &BundleEncoderParams { layers: vec![] });
        assert!(matches!(e, Err(ModelError::EmptyBundle)));
    }

    #[test]
    fn batched_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = random(6, 3, &mut rng);
        let p = params(2, 3, &mut rng);
        let seeds = vec![vec![0, 3], vec![5], vec![1, 2, 4]];
        let mut g = Graph::new();
        let t = g.constant(table.clone());
        let layers: Vec<_> = p
            .layers
            .iter()
            .map(|l| (g.constant(l.key.clone()), g.constant(l.query.clone())))
            .collect();
        let (e, _) = encode_bundles(&mut g, t, &seeds, &layers, true).unwrap();
        for (b, s) in seeds.iter().enumerate() {
            let single = encode_bundle(&table.select_rows(s), &p).unwrap();
            assert_eq!(g.value(e).row(b), &single[..]);
        }
    }
}
