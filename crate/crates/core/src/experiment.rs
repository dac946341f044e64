//! Seeded end-to-end ablation on the synthetic corpus: a keyword-agnostic
//! baseline against the biased first stage alone and with causal or full
//! second-stage verification.

use serde::{Deserialize, Serialize};
use u2kws_nn::ParamStore;

use crate::cascade::{CascadeConfig, DecoderMode};
use crate::corpus::{Corpus, CorpusConfig, EvalSplit};
use crate::error::Result;
use crate::eval::{
    evaluate_split, f1, roc, run_split, select_joint_thresholds, select_threshold, DetectionLog,
    EvalOptions, F1Report, RocCurve, ScoreRule, FA_GRID,
};
use crate::keywords::Keyword;
use crate::model::{KwsModel, ModelConfig, ParamReport};
use crate::par::Parallelism;
use crate::train::{train_stage1, train_stage2, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    /// First-stage thresholds tried when tuning a two-pass system.
    pub joint_grid: usize,
    pub options: EvalOptions,
    pub parallelism: Parallelism,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut train = TrainConfig {
            lr: 5e-3,
            stage1_epochs: 30,
            stage2_epochs: 40,
            ..Default::default()
        };
        train.spec_augment.max_time_width = 10;
        train.spec_augment.max_freq_width = 6;
        AblationConfig {
            corpus: CorpusConfig {
                noise: 1.5,
                ..Default::default()
            },
            model: ModelConfig::desk(),
            train,
            cascade: CascadeConfig::default().permissive(),
            joint_grid: 24,
            options: EvalOptions::default(),
            parallelism: Parallelism::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    Baseline,
    EncoderIntegration,
    CausalDecoder,
    FullDecoder,
}

impl System {
    pub const ALL: [System; 4] = [
        System::Baseline,
        System::EncoderIntegration,
        System::CausalDecoder,
        System::FullDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::EncoderIntegration => "encoder_integration",
            System::CausalDecoder => "causal_decoder",
            System::FullDecoder => "full_decoder",
        }
    }

    fn mode(self) -> DecoderMode {
        match self {
            System::Baseline | System::EncoderIntegration => DecoderMode::Off,
            System::CausalDecoder => DecoderMode::Causal,
            System::FullDecoder => DecoderMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: System,
    pub stage1_threshold: f64,
    pub stage2_threshold: Option<f64>,
    pub dev_macro_f1: f64,
    pub test: F1Report,
    pub roc: RocCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    pub params: ParamReport,
    pub baseline_params: ParamReport,
    pub test_negative_hours: f64,
    pub systems: Vec<SystemResult>,
}

impl AblationResult {
    pub fn get(&self, s: System) -> &SystemResult {
        self.systems
            .iter()
            .find(|r| r.system == s)
            .expect("every system is evaluated")
    }

    pub fn macro_f1(&self, s: System) -> f64 {
        self.get(s).test.macro_f1
    }
}

/// Trained checkpoints of one seed.
pub struct TrainedModels {
    pub corpus: Corpus,
    pub baseline: (KwsModel, ParamStore<f32>),
    pub biased: (KwsModel, ParamStore<f32>),
}

pub fn train_models(config: &AblationConfig, seed: u64) -> Result<TrainedModels> {
    let corpus_cfg = CorpusConfig {
        seed,
        ..config.corpus.clone()
    };
    let corpus = Corpus::generate(&corpus_cfg)?;
    let mut model_cfg = config.model.clone();
    model_cfg.vocab_size = corpus.lexicon.vocab().size();
    model_cfg.feat_dim = corpus_cfg.feat_dim;
    model_cfg.seed = seed;
    let train_cfg = TrainConfig {
        seed,
        parallelism: config.parallelism,
        ..config.train.clone()
    };

    let (base_model, mut base_store) =
        KwsModel::init::<f32>(&model_cfg.clone().without_keyword_modules())?;
    let r = train_stage1(
        &base_model,
        &mut base_store,
        &corpus.train,
        &corpus.lexicon,
        &train_cfg,
        |_, _| Ok(()),
    )?;
    log::info!(
        "seed {seed}: baseline final loss {:?}",
        r.log.last().map(|l| l.total)
    );

    let (model, mut store) = KwsModel::init::<f32>(&model_cfg)?;
    let r = train_stage1(
        &model,
        &mut store,
        &corpus.train,
        &corpus.lexicon,
        &train_cfg,
        |_, _| Ok(()),
    )?;
    log::info!(
        "seed {seed}: stage 1 final loss {:?}",
        r.log.last().map(|l| l.total)
    );
    let r = train_stage2(
        &model,
        &mut store,
        &corpus.train,
        &corpus.lexicon,
        &train_cfg,
        |_, _| Ok(()),
    )?;
    log::info!(
        "seed {seed}: stage 2 final loss {:?}",
        r.log.last().map(|l| l.total)
    );
    Ok(TrainedModels {
        corpus,
        baseline: (base_model, base_store),
        biased: (model, store),
    })
}

fn run(
    config: &AblationConfig,
    system: System,
    trained: &TrainedModels,
    split: &EvalSplit,
    keywords: &[Keyword],
) -> Result<DetectionLog> {
    let (model, store) = match system {
        System::Baseline => &trained.baseline,
        _ => &trained.biased,
    };
    let cascade = CascadeConfig {
        decoder_mode: system.mode(),
        ..config.cascade.clone()
    }
    .permissive();
    run_split(model, store, keywords, split, &cascade, config.parallelism)
}

/// Tunes thresholds on dev and scores the test split.
pub fn evaluate_system(
    config: &AblationConfig,
    system: System,
    trained: &TrainedModels,
) -> Result<SystemResult> {
    let c = &trained.corpus;
    let dev = run(config, system, trained, &c.dev, &c.keywords)?;
    let test = run(config, system, trained, &c.test, &c.keywords)?;
    let (t1, t2, dev_f1) = match system.mode() {
        DecoderMode::Off => {
            let table =
                evaluate_split(&dev, &c.dev, &c.keywords, ScoreRule::Stage1, config.options)?;
            let (t, m) = select_threshold(&table);
            (t, None, m)
        }
        _ => {
            let (t1, t2, m) = select_joint_thresholds(
                &dev,
                &c.dev,
                &c.keywords,
                config.options,
                config.joint_grid,
            )?;
            (t1, Some(t2), m)
        }
    };
    let (rule, theta) = match t2 {
        None => (ScoreRule::Stage1, t1),
        Some(t2) => (
            ScoreRule::Stage2 {
                stage1_threshold: t1,
            },
            t2,
        ),
    };
    let table = evaluate_split(&test, &c.test, &c.keywords, rule, config.options)?;
    Ok(SystemResult {
        system,
        stage1_threshold: t1,
        stage2_threshold: t2,
        dev_macro_f1: dev_f1,
        test: f1(&table, theta)?,
        roc: roc(&table, &FA_GRID)?,
    })
}

pub fn run_ablation(config: &AblationConfig, seed: u64) -> Result<AblationResult> {
    let trained = train_models(config, seed)?;
    let systems = System::ALL
        .iter()
        .map(|&s| evaluate_system(config, s, &trained))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResult {
        seed,
        params: ParamReport::of(&trained.biased.1),
        baseline_params: ParamReport::of(&trained.baseline.1),
        test_negative_hours: trained.corpus.test.negative_hours(),
        systems,
    })
}
