//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use bundlekit::cf::{pretrain, CfConfig, CfEmbeddings};
use bundlekit::config::RunConfig;
use bundlekit::corpus::PartialBundleView;
use bundlekit::item_encoder::ItemSources;
use bundlekit::model::ModelParams;
use bundlekit::numerics::Matrix;
use bundlekit::synth::{generate, SynthOutput, SynthSpec};
use bundlekit::trainer::{plan_batch, BatchPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five items, two bundles, d = 4, one attention layer per level, 64-bit.
pub struct Toy {
    pub params: ModelParams<f64>,
    pub sources: ItemSources<f64>,
    pub plan: BatchPlan<f64>,
    pub config: RunConfig,
}

pub fn toy_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.model.dim = 4;
    config.model.item_layers = 1;
    config.model.bundle_layers = 1;
    config.train.alpha_item = 0.5;
    config.train.alpha_bundle = 0.5;
    config.train.l2 = 1e-2;
    config.augment.dropout_ratio = 0.5;
    config
}

pub fn toy(seed: u64, config: RunConfig) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f, c) = (5, 6, 3);
    let params = ModelParams::<f64>::init(n, f, c, config.model.dim, config.model.item_layers, config.model.bundle_layers, &mut rng);
    let sources = ItemSources {
        content: Matrix::from_fn(n, f, |_, _| rng.random_range(-1.0..1.0)),
        feedback: Matrix::from_fn(n, c, |_, _| rng.random_range(-1.0..1.0)),
        has_feedback: vec![true, true, false, true, false],
        use_id: vec![true, true, true, false, true],
        drop_content: vec![false; n],
        id_noise: None,
        id_mask: None,
    };
    let views = vec![
        PartialBundleView {
            bundle: 0,
            seeds: vec![0, 1],
            targets: vec![2],
        },
        PartialBundleView {
            bundle: 1,
            seeds: vec![2, 3],
            targets: vec![4, 0],
        },
    ];
    let plan = plan_batch(views, &sources, config.model.dim, &config, &mut rng);
    Toy {
        params,
        sources,
        plan,
        config,
    }
}

/// A corpus small enough to train on in well under a second per epoch.
pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_items: 150,
        n_users: 80,
        n_bundles: 60,
        n_topics: 4,
        feature_dim: 8,
        feedback_density: 0.1,
        seed,
        ..Default::default()
    }
}

pub fn small_corpus(seed: u64) -> (SynthOutput, CfEmbeddings) {
    let out = generate(&small_spec(seed)).unwrap();
    let cf_config = CfConfig {
        dim: 8,
        epochs: 3,
        ..Default::default()
    };
    let cf = pretrain(&out.corpus.interactions, &cf_config, &mut ChaCha8Rng::seed_from_u64(seed));
    (out, cf)
}

pub fn small_config(seed: u64) -> RunConfig {
    let mut config = RunConfig {
        seed,
        ..Default::default()
    };
    config.model.dim = 8;
    config.cf.dim = 8;
    config.train.epochs = 3;
    config.train.batch_size = 16;
    config.train.lr = 1e-2;
    config
}
