//! Ranking metrics, evaluation protocols and the similarity explainer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{corrupt_partial, sample_partial, Catalog, Corruption, PartialBundleView};
use crate::error::ModelError;
use crate::model::{Model, ItemTable};
use crate::numerics::{dot, Matrix};

/// Top-`k` items by descending score, skipping `excluded`; ties go to the
/// lower index.
pub fn rank_candidates(scores: &[f32], excluded: &[usize], k: usize) -> Vec<usize> {
    let mut skip = vec![false; scores.len()];
    for &e in excluded {
        if e < skip.len() {
            skip[e] = true;
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if order.len() > k {
        order.select_nth_unstable_by(k, by_score);
        order.truncate(k);
    }
    order.sort_unstable_by(by_score);
    order
}

/// Share of `targets` found in the first `k` ranked items.
pub fn recall_at_k(ranked: &[usize], targets: &[usize], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|r| targets.contains(r)).count();
    hits as f64 / targets.len() as f64
}

/// Binary-relevance NDCG with the ideal ranking truncated at `min(k, |targets|)`.
pub fn ndcg_at_k(ranked: &[usize], targets: &[usize], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let gain = |p: usize| 1.0 / ((p + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, r)| targets.contains(r))
        .map(|(p, _)| gain(p))
        .sum();
    let idcg: f64 = (0..k.min(targets.len())).map(gain).sum();
    dcg / idcg
}

/// Evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Setting {
    Standard,
    /// Only bundles whose every member appeared in a training bundle.
    Warm,
    Sparsify(f64),
    Noisify(f64),
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Standard => write!(f, "standard"),
            Setting::Warm => write!(f, "warm"),
            Setting::Sparsify(r) => write!(f, "sparsify({r})"),
            Setting::Noisify(r) => write!(f, "noisify({r})"),
        }
    }
}

impl FromStr for Setting {
    type Err = ModelError;

    /// Accepts `standard`, `warm`, `sparsify(0.5)`, `noisify(0.25)`.
    fn from_str(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::Config(format!("unknown setting `{s}`"));
        let rate = |rest: &str| -> Result<f64, ModelError> {
            rest.strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|r| r.parse().ok())
                .ok_or_else(bad)
        };
        match s {
            "standard" => Ok(Setting::Standard),
            "warm" => Ok(Setting::Warm),
            _ if s.starts_with("sparsify") => Ok(Setting::Sparsify(rate(&s["sparsify".len()..])?)),
            _ if s.starts_with("noisify") => Ok(Setting::Noisify(rate(&s["noisify".len()..])?)),
            _ => Err(bad()),
        }
    }
}

/// Anything that scores the whole catalog for a partial bundle.
pub trait Scorer: Sync {
    fn score_view(&self, view: &PartialBundleView) -> Result<Vec<f32>, ModelError>;
}

/// A model with its item table computed once.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub items: ItemTable,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model) -> Result<Self, ModelError> {
        Ok(Self {
            model,
            items: model.item_table()?,
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_view(&self, view: &PartialBundleView) -> Result<Vec<f32>, ModelError> {
        self.model.scores(&self.items.table, &view.seeds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub seed_ratio: f64,
    pub repeats: usize,
    pub seed: u64,
    /// 0 uses the global rayon pool.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub bundle: usize,
    pub repeat: usize,
    pub seeds: Vec<usize>,
    pub targets: Vec<usize>,
    pub ranked: Vec<usize>,
    /// 1-based ranks of the targets found in the top k.
    pub hits: Vec<usize>,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_bundles: usize,
    /// Set when the protocol left no bundle to evaluate.
    pub empty: bool,
    pub per_bundle: Vec<BundleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// The deterministic partial views of `bundles` under `setting`.
///
/// View `r` of bundle `b` draws from its own random stream, so the result does
/// not depend on which other bundles are evaluated.
pub fn sample_views(
    catalog: &Catalog,
    bundles: &[usize],
    warm: &[bool],
    setting: Setting,
    opts: &EvalOptions,
) -> Result<Vec<(usize, PartialBundleView)>, ModelError> {
    let mut out = Vec::new();
    for &b in bundles {
        let items = &catalog.bundles[b].items;
        if setting == Setting::Warm && !items.iter().all(|&i| warm[i]) {
            continue;
        }
        for r in 0..opts.repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream((b * opts.repeats + r) as u64);
            let view = sample_partial(b, items, opts.seed_ratio, &mut rng)?;
            let view = match setting {
                Setting::Sparsify(rate) => corrupt_partial(&view, Corruption::Sparsify, rate, catalog.n_items(), &mut rng)?,
                Setting::Noisify(rate) => corrupt_partial(&view, Corruption::Noisify, rate, catalog.n_items(), &mut rng)?,
                _ => view,
            };
            out.push((r, view));
        }
    }
    Ok(out)
}

/// Scores every view and aggregates Recall@k / NDCG@k.
pub fn evaluate(
    scorer: &dyn Scorer,
    catalog: &Catalog,
    bundles: &[usize],
    warm: &[bool],
    setting: Setting,
    opts: &EvalOptions,
) -> Result<EvalReport, ModelError> {
    let views = sample_views(catalog, bundles, warm, setting, opts)?;
    let run = || {
        views
            .par_iter()
            .map(|(repeat, view)| {
                let scores = scorer.score_view(view)?;
                let ranked = rank_candidates(&scores, &view.seeds, opts.k);
                let hits = ranked
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| view.targets.contains(r))
                    .map(|(p, _)| p + 1)
                    .collect();
                Ok(BundleRecord {
                    bundle: view.bundle,
                    repeat: *repeat,
                    recall: recall_at_k(&ranked, &view.targets, opts.k),
                    ndcg: ndcg_at_k(&ranked, &view.targets, opts.k),
                    seeds: view.seeds.clone(),
                    targets: view.targets.clone(),
                    ranked,
                    hits,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()
    };
    let mut records = if opts.threads == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?
            .install(run)?
    };
    records.sort_by_key(|r| (r.bundle, r.repeat));
    let n = records.len();
    let mean = |f: fn(&BundleRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            records.iter().map(f).fold(0.0, |acc, v| acc + v) / n as f64
        }
    };
    let mut n_bundles: Vec<usize> = records.iter().map(|r| r.bundle).collect();
    n_bundles.dedup();
    if n == 0 {
        log::warn!("setting {setting} left no bundle to evaluate");
    }
    Ok(EvalReport {
        setting: setting.to_string(),
        k: opts.k,
        recall: mean(|r| r.recall),
        ndcg: mean(|r| r.ndcg),
        n_bundles: n_bundles.len(),
        empty: n == 0,
        per_bundle: records,
        config: None,
    })
}

/// One row of the similarity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainRow {
    /// `feature` rows compare a feature with its item, `item` rows an item with the bundle.
    pub level: String,
    pub item: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    pub cosine: f64,
}

pub const FEATURE_NAMES: [&str; 3] = ["content", "feedback", "id"];

fn cosine(a: &[f32], b: &[f32]) -> Result<f64, ModelError> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let (na, nb) = (dot(&a, &a).sqrt(), dot(&b, &b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(ModelError::Contract("cosine of a zero vector".into()));
    }
    Ok((dot(&a, &b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosines between every last-layer feature row and its item representation,
/// then between every last-layer item row and the bundle representation.
/// Produces `3n + n` rows for `n` items.
pub fn explain(model: &Model, items: &[usize]) -> Result<Vec<ExplainRow>, ModelError> {
    if items.is_empty() {
        return Err(ModelError::EmptyBundle);
    }
    let enc = model.item_table()?;
    let mut rows = Vec::with_capacity(items.len() * 4);
    for &i in items {
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            rows.push(ExplainRow {
                level: "feature".into(),
                item: i,
                feature: Some((*name).into()),
                cosine: cosine(enc.rows.row(3 * i + j), enc.table.row(i))?,
            });
        }
    }
    let (e, hidden): (Vec<f32>, Matrix<f32>) = model.encode_seeds(&enc.table, items)?;
    for (r, &i) in items.iter().enumerate() {
        rows.push(ExplainRow {
            level: "item".into(),
            item: i,
            feature: None,
            cosine: cosine(hidden.row(r), &e)?,
        });
    }
    Ok(rows)
}
