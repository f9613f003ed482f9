//! Synthetic corpora with planted topic structure.
//!
//! Items belong to latent topics and carry a within-topic Zipf popularity.
//! Bundles draw mostly from one topic, users interact with one or two
//! preferred topics, and content features are noisy topic centroids. A
//! manifest records the planted assignments together with the Recall@20 of a
//! topic-oracle ranker as a self-check.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    split_indices, Bundle, Catalog, Corpus, CorpusStats, FeatureRows, FeatureTable, Interner, InteractionGraph,
    PartialBundleView,
};
use crate::error::ModelError;
use crate::eval::{evaluate, EvalOptions, Scorer, Setting};
use crate::numerics::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub n_bundles: usize,
    pub n_topics: usize,
    pub feature_dim: usize,
    pub min_bundle_size: usize,
    pub max_bundle_size: usize,
    /// Expected share of a user's preferred-topic items they interact with.
    pub feedback_density: f64,
    /// Share of items kept out of every training bundle.
    pub cold_item_fraction: f64,
    /// Share of items with one modality flagged absent.
    pub modality_missing_fraction: f64,
    /// Probability that a bundle slot is drawn from the whole catalog.
    pub cross_topic_noise: f64,
    /// Zipf exponent of the within-topic popularity.
    pub popularity_exponent: f64,
    /// Standard deviation of the topic centroids (feature noise is unit).
    pub centroid_scale: f64,
    /// Seed of the bundle partition; training must use the same value.
    pub split_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 1000,
            n_bundles: 400,
            n_topics: 8,
            feature_dim: 64,
            min_bundle_size: 3,
            max_bundle_size: 8,
            feedback_density: 0.05,
            cold_item_fraction: 0.1,
            modality_missing_fraction: 0.1,
            cross_topic_noise: 0.05,
            popularity_exponent: 1.2,
            centroid_scale: 0.5,
            split_seed: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_topics == 0 || self.n_topics > self.n_items {
            return bad(format!("n_topics must lie in 1..={}, got {}", self.n_items, self.n_topics));
        }
        if self.min_bundle_size < 2 || self.min_bundle_size > self.max_bundle_size {
            return bad(format!(
                "bundle size range {}..={} is invalid (minimum 2)",
                self.min_bundle_size, self.max_bundle_size
            ));
        }
        if self.n_bundles < 10 || self.n_users == 0 || self.feature_dim == 0 {
            return bad("need at least 10 bundles, one user and a positive feature_dim".into());
        }
        for (name, v) in [
            ("feedback_density", self.feedback_density),
            ("cold_item_fraction", self.cold_item_fraction),
            ("modality_missing_fraction", self.modality_missing_fraction),
            ("cross_topic_noise", self.cross_topic_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.popularity_exponent >= 0.0 && self.centroid_scale >= 0.0) {
            return bad("popularity_exponent and centroid_scale must be non-negative".into());
        }
        // Topics are balanced, so the smallest holds n_items / n_topics items.
        // Cold items thin the pools further; that is checked while drawing.
        let per_topic = self.n_items / self.n_topics;
        if self.max_bundle_size > per_topic {
            return bad(format!(
                "max_bundle_size {} exceeds the population {per_topic} of a topic",
                self.max_bundle_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub users: usize,
    pub items: usize,
    pub bundles: usize,
    pub bundle_items: usize,
    pub user_items: usize,
}

impl From<CorpusStats> for ManifestCounts {
    fn from(s: CorpusStats) -> Self {
        Self {
            users: s.users,
            items: s.items,
            bundles: s.bundles,
            bundle_items: s.bundle_items,
            user_items: s.user_items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub split_seed: u64,
    /// Topic of every item, by item index.
    pub item_topics: Vec<usize>,
    /// Within-topic popularity weight of every item (1 for the head item).
    pub popularity: Vec<f64>,
    /// Main topic of every bundle, by bundle index.
    pub bundle_topics: Vec<usize>,
    /// Items excluded from every training bundle.
    pub cold_items: Vec<usize>,
    pub counts: ManifestCounts,
    /// Test Recall@20 of the topic-oracle ranker.
    pub oracle_recall20: f64,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub manifest: Manifest,
}

impl SynthOutput {
    /// Writes the five corpus files and `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), ModelError> {
        self.corpus.write_dir(dir)?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| ModelError::Config(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ModelError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| ModelError::Config(format!("manifest: {e}")))
}

/// Ranks same-topic items first (topic = majority of the seeds), ordered by
/// planted popularity.
pub struct TopicOracle<'a> {
    pub item_topics: &'a [usize],
    pub popularity: &'a [f64],
}

impl TopicOracle<'_> {
    pub fn majority_topic(&self, seeds: &[usize]) -> usize {
        let n_topics = self.item_topics.iter().max().map_or(1, |&t| t + 1);
        let mut votes = vec![0usize; n_topics];
        for &s in seeds {
            votes[self.item_topics[s]] += 1;
        }
        // ties go to the lowest topic id
        let best = votes.iter().copied().max().unwrap_or(0);
        votes.iter().position(|&v| v == best).unwrap_or(0)
    }
}

impl Scorer for TopicOracle<'_> {
    fn score_view(&self, view: &PartialBundleView) -> Result<Vec<f32>, ModelError> {
        let topic = self.majority_topic(&view.seeds);
        Ok(self
            .item_topics
            .iter()
            .zip(self.popularity)
            .map(|(&t, &p)| if t == topic { 1.0 + p as f32 } else { p as f32 * 1e-3 })
            .collect())
    }
}

fn gaussian_rows<R: Rng>(centroids: &[Vec<f64>], topics: &[usize], rng: &mut R) -> Matrix<f32> {
    let dim = centroids[0].len();
    Matrix::from_fn(topics.len(), dim, |r, c| {
        let noise: f64 = rng.sample(StandardNormal);
        (centroids[topics[r]][c] + noise) as f32
    })
}

/// Generates a corpus; the same spec always yields the same bytes.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, ModelError> {
    spec.validate()?;
    let n = spec.n_items;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Balanced topic assignment in shuffled order.
    let mut item_topics: Vec<usize> = (0..n).map(|i| i % spec.n_topics).collect();
    item_topics.shuffle(&mut rng);
    let members: Vec<Vec<usize>> = (0..spec.n_topics)
        .map(|t| (0..n).filter(|&i| item_topics[i] == t).collect())
        .collect();
    // Popularity rank follows the (already random) order inside each topic.
    let mut popularity = vec![0.0; n];
    for items in &members {
        for (rank, &i) in items.iter().enumerate() {
            popularity[i] = 1.0 / ((rank + 1) as f64).powf(spec.popularity_exponent);
        }
    }

    let n_cold = (spec.cold_item_fraction * n as f64).floor() as usize;
    let mut cold_items = index::sample(&mut rng, n, n_cold).into_vec();
    cold_items.sort_unstable();
    let mut is_cold = vec![false; n];
    for &i in &cold_items {
        is_cold[i] = true;
    }

    let split = split_indices(spec.n_bundles, spec.split_seed)?;
    let mut is_train = vec![false; spec.n_bundles];
    for &b in &split.train {
        is_train[b] = true;
    }

    // Training bundles first: held-out bundles may only use items that are
    // either deliberately cold or already seen in training.
    let all_weights = WeightedIndex::new(&popularity).expect("positive weights");
    let mut drawn: Vec<Option<(usize, Vec<usize>)>> = vec![None; spec.n_bundles];
    let mut seen = vec![false; n];
    for train_pass in [true, false] {
        for b in (0..spec.n_bundles).filter(|&b| is_train[b] == train_pass) {
            let allowed = |i: usize| if train_pass { !is_cold[i] } else { is_cold[i] || seen[i] };
            let topic = rng.random_range(0..spec.n_topics);
            let pool: Vec<usize> = members[topic].iter().copied().filter(|&i| allowed(i)).collect();
            if pool.len() < spec.min_bundle_size {
                return Err(ModelError::Config(format!(
                    "topic {topic} has only {} eligible items for bundle {b}; need {}",
                    pool.len(),
                    spec.min_bundle_size
                )));
            }
            let size = rng.random_range(spec.min_bundle_size..=spec.max_bundle_size).min(pool.len());
            let pool_weights = WeightedIndex::new(pool.iter().map(|&i| popularity[i])).expect("non-empty pool");
            let mut items: Vec<usize> = Vec::with_capacity(size);
            while items.len() < size {
                let cand = if rng.random_bool(spec.cross_topic_noise) {
                    all_weights.sample(&mut rng)
                } else {
                    pool[pool_weights.sample(&mut rng)]
                };
                if allowed(cand) && !items.contains(&cand) {
                    items.push(cand);
                }
            }
            drawn[b] = Some((topic, items));
        }
        if train_pass {
            for (_, items) in drawn.iter().flatten() {
                for &i in items {
                    seen[i] = true;
                }
            }
        }
    }
    let mut bundle_topics = Vec::with_capacity(spec.n_bundles);
    let mut bundles = Vec::with_capacity(spec.n_bundles);
    for (b, slot) in drawn.into_iter().enumerate() {
        let (topic, items) = slot.expect("every bundle drawn");
        bundle_topics.push(topic);
        bundles.push(Bundle {
            token: format!("bundle_{b:05}"),
            items,
        });
    }

    let mut edges = Vec::new();
    for u in 0..spec.n_users {
        let n_pref = rng.random_range(1..=2usize).min(spec.n_topics);
        let prefs = index::sample(&mut rng, spec.n_topics, n_pref).into_vec();
        let pool: Vec<usize> = prefs.iter().flat_map(|&t| members[t].iter().copied()).collect();
        let degree = ((spec.feedback_density * pool.len() as f64).round() as usize).clamp(1, pool.len());
        let weights: Vec<f64> = pool.iter().map(|&i| popularity[i]).collect();
        let mut chosen = rand::seq::index::sample_weighted(&mut rng, pool.len(), |k| weights[k], degree)
            .expect("positive weights")
            .into_vec();
        chosen.sort_unstable();
        edges.extend(chosen.into_iter().map(|k| (u, pool[k])));
    }
    let interactions = InteractionGraph::new(spec.n_users, n, edges).expect("edges are distinct by construction");

    let centroid = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..spec.n_topics)
            .map(|_| {
                (0..spec.feature_dim)
                    .map(|_| spec.centroid_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let text_centroids = centroid(&mut rng);
    let media_centroids = centroid(&mut rng);
    let text_values = gaussian_rows(&text_centroids, &item_topics, &mut rng);
    let media_values = gaussian_rows(&media_centroids, &item_topics, &mut rng);
    let mut text_present = vec![true; n];
    let mut media_present = vec![true; n];
    for i in 0..n {
        if rng.random_bool(spec.modality_missing_fraction) {
            if rng.random_bool(0.5) {
                text_present[i] = false;
            } else {
                media_present[i] = false;
            }
        }
    }

    let mut items = Interner::new();
    for i in 0..n {
        items.intern(&format!("item_{i:05}"));
    }
    let mut users = Interner::new();
    for u in 0..spec.n_users {
        users.intern(&format!("user_{u:05}"));
    }
    let corpus = Corpus {
        catalog: Catalog { items, users, bundles },
        features: FeatureTable {
            text: FeatureRows::new(text_values, text_present),
            media: FeatureRows::new(media_values, media_present),
        },
        interactions,
    };

    let oracle = TopicOracle {
        item_topics: &item_topics,
        popularity: &popularity,
    };
    let opts = EvalOptions {
        k: 20,
        seed_ratio: 0.5,
        repeats: 1,
        seed: spec.seed,
        threads: 1,
    };
    let warm = vec![true; n];
    let report = evaluate(&oracle, &corpus.catalog, &split.test, &warm, Setting::Standard, &opts)?;
    log::info!("topic oracle test recall@20 = {:.4}", report.recall);

    let manifest = Manifest {
        spec: spec.clone(),
        split_seed: spec.split_seed,
        counts: corpus.stats().into(),
        item_topics,
        popularity,
        bundle_topics,
        cold_items,
        oracle_recall20: report.recall,
    };
    Ok(SynthOutput { corpus, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_items: 100,
            n_users: 30,
            n_bundles: 20,
            n_topics: 4,
            feature_dim: 8,
            min_bundle_size: 2,
            max_bundle_size: 5,
            ..Default::default()
        }
    }

    #[test]
    fn cold_items_stay_out_of_training_bundles() {
        let out = generate(&small()).unwrap();
        let split = split_indices(20, out.manifest.split_seed).unwrap();
        for &b in &split.train {
            for i in &out.corpus.catalog.bundles[b].items {
                assert!(out.manifest.cold_items.binary_search(i).is_err());
            }
        }
        assert_eq!(out.manifest.cold_items.len(), 10);
    }

    #[test]
    fn held_out_items_are_cold_or_seen_in_training() {
        for cold_item_fraction in [0.0, 0.1] {
            let out = generate(&SynthSpec {
                cold_item_fraction,
                ..small()
            })
            .unwrap();
            let split = split_indices(20, out.manifest.split_seed).unwrap();
            let warm = out.corpus.catalog.warm_items(&split.train);
            for &b in split.val.iter().chain(&split.test) {
                for &i in &out.corpus.catalog.bundles[b].items {
                    assert!(warm[i] || out.manifest.cold_items.binary_search(&i).is_ok());
                }
            }
        }
    }

    #[test]
    fn one_modality_always_present() {
        let spec = SynthSpec {
            modality_missing_fraction: 1.0,
            ..small()
        };
        let out = generate(&spec).unwrap();
        let f = &out.corpus.features;
        for i in 0..100 {
            assert!(f.text.get(i).is_some() != f.media.get(i).is_some());
        }
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        let spec = SynthSpec {
            max_bundle_size: 40,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(ModelError::Config(_))));
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.manifest, b.manifest);
    }
}
