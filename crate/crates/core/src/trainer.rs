//! Training objective and loop.
//!
//! The objective is the mean softmax likelihood loss over a batch of partial
//! bundles, plus weighted item- and bundle-level InfoNCE terms, plus a squared
//! L2 penalty on every trainable matrix. Item representations are recomputed
//! for the whole catalog at every step so gradients are exact.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle_encoder::encode_bundles;
use crate::cf::CfEmbeddings;
use crate::config::RunConfig;
use crate::contrastive::{augment_bundle, augment_item, info_nce, Negatives};
use crate::corpus::{sample_partial, split_indices, Corpus, PartialBundleView, Split};
use crate::error::ModelError;
use crate::eval::{evaluate, EvalOptions, ModelScorer, Setting};
use crate::item_encoder::{encode_items, ItemSources};
use crate::model::{encode_options, Checkpoint, CheckpointMeta, Model, ModelParams, ParamNodes};
use crate::numerics::{Graph, Matrix, NodeId, NumericsError, Real};
use crate::optim::{Adam, AdamConfig};

/// A batch of views with all random augmentation decisions drawn up front,
/// so the loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct BatchPlan<T> {
    pub views: Vec<PartialBundleView>,
    /// Positive views of the seed sets (bundle-level contrast).
    pub augmented_seeds: Vec<Vec<usize>>,
    /// Augmented encoder inputs; `None` reuses the original pass.
    pub item_view: Option<ItemSources<T>>,
    /// Items contrasted at item level.
    pub cl_items: Vec<usize>,
}

pub fn plan_batch<T: Real, R: Rng + ?Sized>(
    views: Vec<PartialBundleView>,
    sources: &ItemSources<T>,
    dim: usize,
    config: &RunConfig,
    rng: &mut R,
) -> BatchPlan<T> {
    let n_items = sources.n_items();
    let aug = &config.augment;
    let augmented_seeds = if config.ablation.use_bundle_cl {
        views
            .iter()
            .map(|v| augment_bundle(&v.seeds, &v.members(), n_items, aug.bundle_mode, aug.dropout_ratio, rng))
            .collect()
    } else {
        Vec::new()
    };
    let item_view = if config.ablation.use_item_cl {
        augment_item(sources, (n_items, dim), aug, rng)
    } else {
        None
    };
    let cl_items = match config.train.negatives {
        Negatives::Full => (0..n_items).collect(),
        Negatives::Batch => {
            let mut all: Vec<usize> = views.iter().flat_map(|v| v.members()).collect();
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    BatchPlan {
        views,
        augmented_seeds,
        item_view,
        cl_items,
    }
}

/// Raw values of the objective's terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    /// `nll + α₁·cl_item + α₂·cl_bundle + β·l2`.
    pub total: T,
    pub nll: T,
    pub cl_item: T,
    pub cl_bundle: T,
    /// Squared L2 norm of the trainable parameters (unweighted).
    pub l2: T,
}

/// Graph nodes of the objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub nll: NodeId,
    pub cl_item: Option<NodeId>,
    pub cl_bundle: Option<NodeId>,
    pub l2: NodeId,
}

/// Mean over bundles of `(1/N)·Σ_{targets} −log softmax(scores)`.
pub fn nll_loss<T: Real>(g: &mut Graph<T>, scores: NodeId, targets: &[Vec<usize>]) -> Result<NodeId, ModelError> {
    let (b, n) = g.value(scores).shape();
    if targets.len() != b || targets.iter().any(Vec::is_empty) {
        return Err(ModelError::Contract("every bundle needs at least one target".into()));
    }
    let mut mask = Matrix::zeros(b, n);
    for (r, ts) in targets.iter().enumerate() {
        for &t in ts {
            if t >= n {
                return Err(ModelError::Contract(format!("target {t} is outside the catalog of {n} items")));
            }
            mask.set(r, t, T::one());
        }
    }
    let log_prob = g.log_softmax_rows(scores)?;
    let mask = g.constant(mask);
    let picked = g.mul(log_prob, mask)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, T::lit(-1.0 / (n as f64 * b as f64)))?)
}

/// Builds the whole objective on `g`.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    sources: &ItemSources<T>,
    plan: &BatchPlan<T>,
    config: &RunConfig,
) -> Result<LossNodes, ModelError> {
    if plan.views.is_empty() {
        return Err(ModelError::Contract("empty batch".into()));
    }
    let opts = encode_options(config);
    let abl = &config.ablation;
    let items = encode_items(g, &nodes.item, sources, opts)?.table;

    let seeds: Vec<Vec<usize>> = plan.views.iter().map(|v| v.seeds.clone()).collect();
    let (bundles, _) = encode_bundles(g, items, &seeds, &nodes.bundle, abl.use_bundle_attention)?;
    let scores = g.matmul_nt(bundles, items)?;
    let targets: Vec<Vec<usize>> = plan.views.iter().map(|v| v.targets.clone()).collect();
    let nll = nll_loss(g, scores, &targets)?;
    let mut total = nll;
    let tau = config.augment.temperature;

    let mut cl_item = None;
    if abl.use_item_cl {
        let augmented = match &plan.item_view {
            Some(view) => encode_items(g, &nodes.item, view, opts)?.table,
            None => items,
        };
        let (a, p) = if plan.cl_items.len() == sources.n_items() {
            (items, augmented)
        } else {
            (g.gather_rows(items, &plan.cl_items)?, g.gather_rows(augmented, &plan.cl_items)?)
        };
        let loss = info_nce(g, a, p, tau)?;
        let weighted = g.scale(loss, T::lit(config.train.alpha_item))?;
        total = g.add(total, weighted)?;
        cl_item = Some(loss);
    }

    let mut cl_bundle = None;
    if abl.use_bundle_cl {
        let (positives, _) = encode_bundles(g, items, &plan.augmented_seeds, &nodes.bundle, abl.use_bundle_attention)?;
        let loss = info_nce(g, bundles, positives, tau)?;
        let weighted = g.scale(loss, T::lit(config.train.alpha_bundle))?;
        total = g.add(total, weighted)?;
        cl_bundle = Some(loss);
    }

    let mut l2 = None;
    for p in nodes.all() {
        let sq = g.sum_squares(p)?;
        l2 = Some(match l2 {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    let l2 = l2.expect("at least three parameter matrices");
    let weighted = g.scale(l2, T::lit(config.train.l2))?;
    total = g.add(total, weighted)?;
    Ok(LossNodes {
        total,
        nll,
        cl_item,
        cl_bundle,
        l2,
    })
}

fn read_terms<T: Real>(g: &Graph<T>, n: &LossNodes) -> LossTerms<T> {
    LossTerms {
        total: g.scalar(n.total),
        nll: g.scalar(n.nll),
        cl_item: n.cl_item.map_or(T::zero(), |id| g.scalar(id)),
        cl_bundle: n.cl_bundle.map_or(T::zero(), |id| g.scalar(id)),
        l2: g.scalar(n.l2),
    }
}

/// Value of the objective without gradients.
pub fn loss_value<T: Real>(
    params: &ModelParams<T>,
    sources: &ItemSources<T>,
    plan: &BatchPlan<T>,
    config: &RunConfig,
) -> Result<LossTerms<T>, ModelError> {
    let mut g = Graph::new();
    let nodes = ParamNodes::constants(&mut g, params);
    let loss = build_loss(&mut g, &nodes, sources, plan, config)?;
    Ok(read_terms(&g, &loss))
}

/// Value of the objective and its gradient for every matrix, in the order of
/// [`ModelParams::names`].
pub fn total_loss<T: Real>(
    params: &ModelParams<T>,
    sources: &ItemSources<T>,
    plan: &BatchPlan<T>,
    config: &RunConfig,
) -> Result<(LossTerms<T>, Vec<Matrix<T>>), ModelError> {
    let mut g = Graph::new();
    let nodes = ParamNodes::params(&mut g, params);
    let loss = build_loss(&mut g, &nodes, sources, plan, config)?;
    g.backward(loss.total)?;
    let grads = nodes.all().into_iter().map(|id| g.grad_or_zeros(id)).collect();
    Ok((read_terms(&g, &loss), grads))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub nll: f64,
    pub cl_item: f64,
    pub cl_bundle: f64,
    pub l2: f64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
    pub seconds: f64,
}

/// Everything derived from the corpus that training needs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub split: Split,
    /// Items that appear in at least one training bundle.
    pub warm: Vec<bool>,
    pub sources: ItemSources<f32>,
}

impl TrainData {
    pub fn new(corpus: &Corpus, cf: &CfEmbeddings, config: &RunConfig) -> Result<Self, ModelError> {
        let split = split_indices(corpus.catalog.bundles.len(), config.split_seed)?;
        let warm = corpus.catalog.warm_items(&split.train);
        let sources = ItemSources::from_corpus(&corpus.features, cf, &corpus.interactions, &warm)?;
        Ok(Self { split, warm, sources })
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    /// Best-validation checkpoint.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn diverged(epoch: usize) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Numerics(source @ NumericsError::NonFinite { .. }) => ModelError::Diverged { epoch, source },
        other => other,
    }
}

pub fn eval_options(config: &RunConfig, k: usize) -> EvalOptions {
    EvalOptions {
        k,
        seed_ratio: config.eval.eval_seed_ratio,
        repeats: config.eval.eval_repeats,
        seed: config.seed,
        threads: config.eval.threads,
    }
}

/// Validation Recall@20 and NDCG@20 of the given parameters.
fn validate(model: &Model, corpus: &Corpus, data: &TrainData) -> Result<(f64, f64), ModelError> {
    let scorer = ModelScorer::new(model)?;
    let opts = eval_options(&model.config, 20);
    let report = evaluate(&scorer, &corpus.catalog, &data.split.val, &data.warm, Setting::Standard, &opts)?;
    Ok((report.recall, report.ndcg))
}

/// Trains a model; `on_epoch` sees every log line as it is produced.
pub fn fit(
    corpus: &Corpus,
    cf: &CfEmbeddings,
    config: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutput, ModelError> {
    config.validate()?;
    let data = TrainData::new(corpus, cf, config)?;
    if data.split.train.is_empty() {
        return Err(ModelError::Contract("no training bundles".into()));
    }
    let n_items = corpus.catalog.n_items();
    let dim = config.model.dim;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ModelParams::<f32>::init(
        n_items,
        corpus.features.dim(),
        cf.dim(),
        dim,
        config.model.item_layers,
        config.model.bundle_layers,
        &mut init_rng,
    );
    let mut model = Model {
        config: config.clone(),
        params,
        sources: data.sources.clone(),
    };
    let snapshot = |model: &Model, epoch: usize, metrics: (f64, f64)| Checkpoint {
        meta: CheckpointMeta {
            config: config.clone(),
            epoch,
            val_recall20: Some(metrics.0),
            val_ndcg20: Some(metrics.1),
        },
        params: model.params.clone(),
        cf_items: cf.items.clone(),
        has_feedback: data.sources.has_feedback.clone(),
        warm: data.warm.clone(),
    };

    let initial = validate(&model, corpus, &data)?;
    log::info!("epoch 0: val recall@20 {:.4} ndcg@20 {:.4}", initial.0, initial.1);
    let mut best = snapshot(&model, 0, initial);
    let mut best_ndcg = initial.1;
    let mut stale = 0;
    let mut history = Vec::new();

    let mut adam = Adam::new(AdamConfig::with_lr(config.train.lr), model.params.matrices());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let batch_size = match config.train.negatives {
        Negatives::Full => usize::MAX,
        Negatives::Batch => config.train.batch_size,
    };

    for epoch in 1..=config.train.epochs {
        let start = Instant::now();
        let mut order = data.split.train.clone();
        order.shuffle(&mut rng);
        let mut sums = LossTerms::<f64>::default();
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.min(order.len())) {
            let views = chunk
                .iter()
                .map(|&b| sample_partial(b, &corpus.catalog.bundles[b].items, config.train.train_seed_ratio, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let plan = plan_batch(views, &model.sources, dim, config, &mut rng);
            let (terms, grads) = total_loss(&model.params, &model.sources, &plan, config).map_err(diverged(epoch))?;
            if !terms.total.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    source: NumericsError::NonFinite { op: "total_loss" },
                });
            }
            adam.update(&mut model.params.matrices_mut(), &grads);
            sums.total += terms.total as f64;
            sums.nll += terms.nll as f64;
            sums.cl_item += terms.cl_item as f64;
            sums.cl_bundle += terms.cl_bundle as f64;
            sums.l2 += terms.l2 as f64;
            batches += 1;
        }
        if model.params.matrices().iter().any(|m| !m.is_finite()) {
            return Err(ModelError::Diverged {
                epoch,
                source: NumericsError::NonFinite { op: "adam" },
            });
        }
        let (recall, ndcg) = validate(&model, corpus, &data).map_err(diverged(epoch))?;
        let nb = batches as f64;
        let line = EpochLog {
            epoch,
            train_loss: sums.total / nb,
            nll: sums.nll / nb,
            cl_item: sums.cl_item / nb,
            cl_bundle: sums.cl_bundle / nb,
            l2: sums.l2 / nb,
            val_recall20: recall,
            val_ndcg20: ndcg,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val recall@20 {recall:.4} ndcg@20 {ndcg:.4}",
            line.train_loss
        );
        on_epoch(&line);
        history.push(line);
        if ndcg > best_ndcg {
            best_ndcg = ndcg;
            best = snapshot(&model, epoch, (recall, ndcg));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.train.patience {
                log::info!("no validation gain for {stale} epochs; stopping at epoch {epoch}");
                break;
            }
        }
    }
    Ok(FitOutput {
        checkpoint: best,
        history,
    })
}
