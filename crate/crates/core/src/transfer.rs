//! Experiment orchestration: source training (in-context or plain), target
//! adaptation, evaluation and the seed cross-product with resumable output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{generate_all, workers_from_env, Backend, BackendConfig, GenerationRequest, RemoteBackend, ToyBackend};
use crate::corpus::{examples_digest, hex_string, load_dataset_with, Dataset, Example, LoadOptions};
use crate::error::{Error, ErrorCategory, Result};
use crate::metrics::{ConfusionCounts, MethodResults, RunScores, SeedTuple};
use crate::prompting::{
    parse_labels, render_ict_instance, render_pft_instance, render_span_infill_instance, ParseDiagnostics,
    PromptTemplate, RenderedInstance,
};
use crate::sampling::{sample_context, sample_k_shot, Demonstrations, RngKey, RngRole, ShotSet};
use crate::toymodel::{
    encode_instance, fit, generate_greedy, EncodedInstance, FitExtras, Mixture, ModelParams, Relexicalizer,
    Schedule, TrainConfig, Vocab,
};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const STANDARD_K_SRC: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// In-context tuning with `m` demonstrations per training instance.
    Ict { m: usize },
    /// Plain `x => y` fine-tuning.
    Pft,
}

impl Regime {
    pub fn context_size(&self) -> usize {
        match self {
            Regime::Ict { m } => *m,
            Regime::Pft => 0,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Regime::Ict { m } => format!("ict{m}"),
            Regime::Pft => "pft".into(),
        }
    }
}

/// Source shots per class, or the whole training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "KSrcRepr", into = "KSrcRepr")]
pub enum KSrc {
    Shots(usize),
    #[default]
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KSrcRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<KSrcRepr> for KSrc {
    type Error = String;

    fn try_from(r: KSrcRepr) -> std::result::Result<Self, String> {
        match r {
            KSrcRepr::Count(k) => Ok(KSrc::Shots(k)),
            KSrcRepr::Word(w) if w == "full" => Ok(KSrc::Full),
            KSrcRepr::Word(w) => Err(format!("k_src must be an integer or \"full\", got {w:?}")),
        }
    }
}

impl From<KSrc> for KSrcRepr {
    fn from(k: KSrc) -> Self {
        match k {
            KSrc::Shots(k) => KSrcRepr::Count(k),
            KSrc::Full => KSrcRepr::Word("full".into()),
        }
    }
}

impl std::str::FromStr for KSrc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(KSrc::Full);
        }
        s.parse()
            .map(KSrc::Shots)
            .map_err(|_| Error::SpecError(format!("k_src must be an integer or \"full\", got {s:?}")))
    }
}

impl std::fmt::Display for KSrc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KSrc::Shots(k) => write!(f, "{k}"),
            KSrc::Full => f.write_str("full"),
        }
    }
}

/// Optimizer settings for gradient-based target adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_batch() -> usize {
    8
}

impl GradConfig {
    /// One shot: 5e-5 for one epoch. Several shots: 1e-5 for ten epochs.
    pub fn defaults_for(k_tgt: usize) -> Self {
        let (learning_rate, epochs) = if k_tgt <= 1 { (5e-5, 1) } else { (1e-5, 10) };
        GradConfig {
            learning_rate,
            epochs,
            batch_size: 8,
            schedule: Schedule::Constant,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            ..TrainConfig::default()
        }
    }
}

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptationMode {
    /// No target data at all.
    Zero,
    /// Continue plain fine-tuning on K target shots per class.
    Grad {
        #[serde(default = "one")]
        k_tgt: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<GradConfig>,
    },
    /// Fine-tuning on `beta * L_src + (1 - beta) * L_tgt`.
    GradMacro {
        #[serde(default = "one")]
        k_tgt: usize,
        #[serde(default = "half")]
        beta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<GradConfig>,
    },
    /// Target-language demonstrations prepended at inference.
    Ic {
        #[serde(default = "one")]
        k_tgt: usize,
    },
    /// Source-language demonstrations prepended at inference.
    IcSrc {
        #[serde(default = "one")]
        k_tgt: usize,
    },
    /// Span-infilling prompt on an untuned remote model.
    #[serde(rename = "raw_1s")]
    Raw1s {
        #[serde(default = "one")]
        k_tgt: usize,
    },
}

impl AdaptationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptationMode::Zero => "zero",
            AdaptationMode::Grad { .. } => "grad",
            AdaptationMode::GradMacro { .. } => "grad_macro",
            AdaptationMode::Ic { .. } => "ic",
            AdaptationMode::IcSrc { .. } => "ic_src",
            AdaptationMode::Raw1s { .. } => "raw_1s",
        }
    }

    pub fn k_tgt(&self) -> usize {
        match self {
            AdaptationMode::Zero => 0,
            AdaptationMode::Grad { k_tgt, .. }
            | AdaptationMode::GradMacro { k_tgt, .. }
            | AdaptationMode::Ic { k_tgt }
            | AdaptationMode::IcSrc { k_tgt }
            | AdaptationMode::Raw1s { k_tgt } => *k_tgt,
        }
    }

    pub fn is_gradient(&self) -> bool {
        matches!(self, AdaptationMode::Grad { .. } | AdaptationMode::GradMacro { .. })
    }

    pub fn uses_context(&self) -> bool {
        matches!(
            self,
            AdaptationMode::Ic { .. } | AdaptationMode::IcSrc { .. } | AdaptationMode::Raw1s { .. }
        )
    }

    /// Whether target-language training files have to be read.
    pub fn reads_target_train(&self) -> bool {
        !matches!(self, AdaptationMode::Zero | AdaptationMode::IcSrc { .. })
    }

    /// Per-run target-shot seed applies.
    pub fn uses_shot_tgt(&self) -> bool {
        !matches!(self, AdaptationMode::Zero)
    }

    pub fn grad_config(&self) -> Option<GradConfig> {
        match self {
            AdaptationMode::Grad { k_tgt, config } | AdaptationMode::GradMacro { k_tgt, config, .. } => {
                Some(config.clone().unwrap_or_else(|| GradConfig::defaults_for(*k_tgt)))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedLists {
    pub finetune: Vec<u64>,
    pub shot_src: Vec<u64>,
    pub shot_tgt: Vec<u64>,
}

impl Default for SeedLists {
    fn default() -> Self {
        SeedLists {
            finetune: vec![0],
            shot_src: vec![0],
            shot_tgt: vec![0],
        }
    }
}

fn default_threshold() -> f64 {
    0.01
}

fn default_output() -> PathBuf {
    PathBuf::from("results.json")
}

fn yes() -> bool {
    true
}

/// One experiment: a dataset, a training regime, a source budget, an
/// adaptation mode and the seeds to cross.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment_id: String,
    /// Method name used in reports; derived from the mode and regime when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Dataset manifest, relative to its own JSON file.
    pub dataset: PathBuf,
    pub regime: Regime,
    #[serde(default)]
    pub k_src: KSrc,
    pub adaptation: AdaptationMode,
    /// Languages evaluated besides the source. Absent: every language in
    /// the dataset. Empty: the source language only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_languages: Option<Vec<String>>,
    #[serde(default)]
    pub seeds: SeedLists,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Decoding budget; defaults to `labels + 1` on the toy backend and 64 remotely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    /// Fraction of failed generations above which a run aborts.
    #[serde(default = "default_threshold")]
    pub failure_threshold: f64,
    /// Keep the epoch with the best source dev F1 (needs a source dev split).
    #[serde(default)]
    pub dev_selection: bool,
    /// Let small pools repeat examples inside one training context.
    #[serde(default)]
    pub allow_context_reuse: bool,
    /// Trained source models are stored here and reused across specs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Parallel runs; falls back to ICXLT_WORKERS, then to available cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "yes")]
    pub record_predictions: bool,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentSpec {
    /// A spec with defaults everywhere except the required fields.
    pub fn new(experiment_id: impl Into<String>, dataset: impl Into<PathBuf>, regime: Regime, adaptation: AdaptationMode) -> Self {
        ExperimentSpec {
            experiment_id: experiment_id.into(),
            label: None,
            dataset: dataset.into(),
            regime,
            k_src: KSrc::Full,
            adaptation,
            target_languages: None,
            seeds: SeedLists::default(),
            template: PromptTemplate::default(),
            train: TrainConfig::default(),
            backend: BackendConfig::Toy,
            output: default_output(),
            max_new_tokens: None,
            failure_threshold: default_threshold(),
            dev_selection: false,
            allow_context_reuse: false,
            cache_dir: None,
            workers: None,
            record_predictions: true,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ExperimentSpec =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn method_name(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-{}-k{}", self.adaptation.name(), self.regime.tag(), self.k_src))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecError(m));
        if self.experiment_id.is_empty() {
            return bad("experiment_id is empty".into());
        }
        let mode = &self.adaptation;
        if matches!(mode, AdaptationMode::Ic { .. } | AdaptationMode::IcSrc { .. })
            && !matches!(self.regime, Regime::Ict { .. })
        {
            return bad(format!("mode {} needs the ict regime", mode.name()));
        }
        if matches!(mode, AdaptationMode::Raw1s { .. }) && !self.backend.is_remote() {
            return bad("raw_1s needs a remote backend (span infilling needs a pretrained model)".into());
        }
        if mode.is_gradient() && self.backend.is_remote() {
            return bad("gradient adaptation is only available on the toy backend".into());
        }
        if let AdaptationMode::GradMacro { beta, .. } = mode {
            if !(0.0..=1.0).contains(beta) {
                return bad(format!("beta {beta} outside [0, 1]"));
            }
        }
        if let Some(g) = mode.grad_config() {
            g.train_config().validate()?;
        }
        match self.k_src {
            KSrc::Shots(0) => return bad("k_src must be at least 1".into()),
            KSrc::Shots(k) if !STANDARD_K_SRC.contains(&k) => {
                log::warn!("k_src = {k} is outside the usual {{8, 16, 32, 64, full}}")
            }
            _ => {}
        }
        for (name, list) in [
            ("finetune", &self.seeds.finetune),
            ("shot_src", &self.seeds.shot_src),
            ("shot_tgt", &self.seeds.shot_tgt),
        ] {
            if list.is_empty() {
                return bad(format!("seed list {name} is empty"));
            }
            if list.iter().collect::<BTreeSet<_>>().len() != list.len() {
                return bad(format!("seed list {name} has duplicates"));
            }
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return bad("failure_threshold must lie in [0, 1]".into());
        }
        if self.max_new_tokens == Some(0) {
            return bad("max_new_tokens must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        self.template.validate()?;
        self.train.validate()?;
        self.backend.validate()?;
        Ok(())
    }

    /// SHA-256 of this experiment spec with fields that cannot change results blanked.
    pub fn hash(&self) -> String {
        let mut s = self.clone();
        s.output = PathBuf::new();
        s.cache_dir = None;
        s.workers = None;
        s.record_predictions = true;
        s.label = None;
        let json = serde_json::to_vec(&s).expect("spec serializes");
        hex_string(&Sha256::digest(&json))
    }

    /// The seed tuples of every run, in canonical order.
    pub fn planned_runs(&self) -> Vec<SeedTuple> {
        let mut out = Vec::new();
        for &finetune in &self.seeds.finetune {
            for &shot_src in &self.seeds.shot_src {
                if self.adaptation.uses_shot_tgt() {
                    for &t in &self.seeds.shot_tgt {
                        out.push(SeedTuple {
                            finetune,
                            shot_src,
                            shot_tgt: Some(t),
                        });
                    }
                } else {
                    out.push(SeedTuple {
                        finetune,
                        shot_src,
                        shot_tgt: None,
                    });
                }
            }
        }
        out.sort();
        out
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            workers_from_env(std::thread::available_parallelism().map_or(1, |n| n.get()))
        })
    }
}

pub fn run_id(seeds: &SeedTuple) -> String {
    match seeds.shot_tgt {
        Some(t) => format!("ft{}-ss{}-st{}", seeds.finetune, seeds.shot_src, t),
        None => format!("ft{}-ss{}", seeds.finetune, seeds.shot_src),
    }
}

/// Every key a run draws from, named by purpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyUse {
    pub purpose: String,
    pub key: RngKey,
}

/// The keys of one run.
#[derive(Debug, Clone)]
pub struct RunKeys {
    pub source_pool: RngKey,
    pub training: RngKey,
    pub training_context: RngKey,
    pub shot_tgt: Option<RngKey>,
    pub context_order: Option<RngKey>,
    pub adaptation: Option<RngKey>,
}

impl RunKeys {
    pub fn new(experiment_id: &str, seeds: &SeedTuple) -> Self {
        let SeedTuple {
            finetune,
            shot_src,
            shot_tgt,
        } = *seeds;
        RunKeys {
            source_pool: RngKey::new(experiment_id, RngRole::ShotSelection, shot_src).child("source-pool"),
            training: RngKey::new(experiment_id, RngRole::Training, finetune).child(format!("src{shot_src}")),
            training_context: RngKey::new(experiment_id, RngRole::ContextSelection, finetune)
                .child(format!("train-src{shot_src}")),
            shot_tgt: shot_tgt.map(|t| RngKey::new(experiment_id, RngRole::ShotSelection, t).child("target")),
            context_order: shot_tgt.map(|t| RngKey::new(experiment_id, RngRole::ContextSelection, t).child("order")),
            adaptation: shot_tgt.map(|t| {
                RngKey::new(experiment_id, RngRole::Adaptation, finetune).child(format!("src{shot_src}-tgt{t}"))
            }),
        }
    }

    pub fn uses(&self) -> Vec<KeyUse> {
        let mut out = vec![
            KeyUse {
                purpose: "source_pool".into(),
                key: self.source_pool.clone(),
            },
            KeyUse {
                purpose: "training".into(),
                key: self.training.clone(),
            },
            KeyUse {
                purpose: "training_context".into(),
                key: self.training_context.clone(),
            },
        ];
        for (purpose, key) in [
            ("shot_tgt", &self.shot_tgt),
            ("context_order", &self.context_order),
            ("adaptation", &self.adaptation),
        ] {
            if let Some(k) = key {
                out.push(KeyUse {
                    purpose: purpose.into(),
                    key: k.clone(),
                });
            }
        }
        out
    }
}

/// Vocabulary over the labels, the source training texts and every test
/// and dev text. Target training texts are left out so models built for
/// different adaptation modes share one vocabulary; unseen words of
/// target demonstrations map to `<unk>`.
pub fn build_vocab(dataset: &Dataset, template: &PromptTemplate, alias_bank: usize) -> Vocab {
    let texts = dataset
        .source()
        .train
        .iter()
        .chain(dataset.splits.values().flat_map(|s| s.test.iter().chain(s.dev.iter().flatten())))
        .map(|e| e.text.as_str());
    Vocab::with_aliases(dataset.label_set(), texts, template, alias_bank)
}

/// The source training pool: a K-shot set or the whole split.
pub fn source_pool(dataset: &Dataset, k_src: KSrc, key: &RngKey) -> Result<(Vec<Example>, Option<ShotSet>)> {
    match k_src {
        KSrc::Full => Ok((dataset.source().train.clone(), None)),
        KSrc::Shots(k) => {
            let shots = sample_k_shot(dataset.source(), dataset.label_set(), k, key)?;
            Ok((shots.examples.clone(), Some(shots)))
        }
    }
}

/// Training instances of one epoch. With `m = 0` these are the plain
/// `x => y` prompts.
pub fn render_training_epoch(
    pool: &[Example],
    m: usize,
    allow_reuse: bool,
    context_key: &RngKey,
    epoch: usize,
    template: &PromptTemplate,
) -> Result<Vec<RenderedInstance>> {
    pool.iter()
        .enumerate()
        .map(|(i, ex)| {
            let demos = sample_context(pool, m, Some(i), allow_reuse, &context_key.child(format!("{epoch}/{i}")))?;
            render_ict_instance(&demos, ex, template)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pool_size: usize,
    pub pool_digest: String,
    pub steps: usize,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub model_sha256: String,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub summary: TrainSummary,
}

pub fn params_digest(params: &ModelParams) -> String {
    hex_string(&Sha256::digest(params.to_bytes()))
}

fn f1_of(params: &ModelParams, vocab: &Vocab, prompts: &[(Vec<u32>, BTreeSet<String>)]) -> f64 {
    let mut c = ConfusionCounts::default();
    for (ids, gold) in prompts {
        let pred: BTreeSet<String> = generate_greedy(params, ids, vocab.n_labels() + 1)
            .map(|ls| ls.into_iter().map(|l| vocab.label(l).to_string()).collect())
            .unwrap_or_default();
        c.add_instance(gold, &pred);
    }
    c.f1()
}

/// Train a fresh model on `pool`. Parameters are rounded to f32 at the end
/// so a model reloaded from disk is bit-identical to the one returned here.
#[allow(clippy::too_many_arguments)]
pub fn train_on_pool(
    pool: &[Example],
    regime: Regime,
    vocab: &Vocab,
    config: &TrainConfig,
    template: &PromptTemplate,
    allow_reuse: bool,
    key: &RngKey,
    context_key: &RngKey,
    dev: Option<&[Example]>,
) -> Result<TrainedModel> {
    if pool.is_empty() {
        return Err(Error::NotEnoughExamples {
            requested: 1,
            available: 0,
        });
    }
    let m = regime.context_size();
    let init = ModelParams::init(config.dims(vocab), &key.child("init"));
    let mut epoch_data = |epoch: usize| -> Result<Vec<EncodedInstance>> {
        render_training_epoch(pool, m, allow_reuse, context_key, epoch, template)?
            .iter()
            .map(|inst| encode_instance(vocab, inst))
            .collect()
    };
    let dev_prompts: Option<Vec<(Vec<u32>, BTreeSet<String>)>> = match dev {
        Some(dev) if !dev.is_empty() => Some(
            dev.iter()
                .enumerate()
                .map(|(i, ex)| {
                    let demos = sample_context(pool, m, None, allow_reuse, &context_key.child(format!("dev/{i}")))?;
                    let r = render_ict_instance(&demos, ex, template)?;
                    Ok((vocab.encode_prompt(&r.prompt), ex.labels.clone()))
                })
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let scorer = |p: &ModelParams| -> Result<f64> { Ok(f1_of(p, vocab, dev_prompts.as_deref().unwrap_or(&[]))) };
    let extras = FitExtras {
        mixture: None,
        dev: dev_prompts.as_ref().map(|_| &scorer as &dyn Fn(&ModelParams) -> Result<f64>),
        relex: Relexicalizer::new(vocab, config.relexicalize),
    };
    let out = fit(init, &mut epoch_data, config, key, extras)?;
    let mut params = out.params;
    params.quantize_f32();
    Ok(TrainedModel {
        summary: TrainSummary {
            pool_size: pool.len(),
            pool_digest: examples_digest(pool),
            steps: out.steps,
            final_loss: out.history.last().map_or(f64::NAN, |h| h.mean_loss),
            best_epoch: out.best_epoch,
            model_sha256: params_digest(&params),
        },
        params,
    })
}

fn cache_key(spec: &ExperimentSpec, dataset: &Dataset, vocab: &Vocab, seeds: &SeedTuple) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        experiment_id: &'a str,
        source_train: String,
        dev: Option<String>,
        vocab: Vec<&'a str>,
        regime: Regime,
        k_src: KSrc,
        train: &'a TrainConfig,
        template: &'a PromptTemplate,
        dev_selection: bool,
        allow_context_reuse: bool,
        finetune: u64,
        shot_src: u64,
    }
    let src = dataset.source();
    let key = Key {
        experiment_id: &spec.experiment_id,
        source_train: examples_digest(&src.train),
        dev: src.dev.as_deref().map(examples_digest),
        vocab: (0..vocab.len() as u32).map(|i| vocab.token(i)).collect(),
        regime: spec.regime,
        k_src: spec.k_src,
        train: &spec.train,
        template: &spec.template,
        dev_selection: spec.dev_selection,
        allow_context_reuse: spec.allow_context_reuse,
        finetune: seeds.finetune,
        shot_src: seeds.shot_src,
    };
    hex_string(&Sha256::digest(serde_json::to_vec(&key).expect("cache key serializes")))
}

#[derive(Serialize, Deserialize)]
struct CachedSummary {
    summary: TrainSummary,
}

fn load_cached(dir: &Path, key: &str) -> Option<TrainedModel> {
    let params = ModelParams::load(&dir.join(format!("{key}.model"))).ok()?;
    let raw = std::fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
    let cached: CachedSummary = serde_json::from_str(&raw).ok()?;
    (params_digest(&params) == cached.summary.model_sha256).then_some(TrainedModel {
        params,
        summary: cached.summary,
    })
}

fn store_cached(dir: &Path, key: &str, model: &TrainedModel) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.params.save(&dir.join(format!("{key}.model")))?;
    let path = dir.join(format!("{key}.json"));
    let body = serde_json::to_string_pretty(&CachedSummary {
        summary: model.summary.clone(),
    })
    .map_err(|e| Error::json("model cache", e))?;
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Source-stage training for one `(finetune, shot_src)` pair, reusing the
/// spec's model cache when one is configured.
pub fn run_training(spec: &ExperimentSpec, dataset: &Dataset, vocab: &Vocab, seeds: &SeedTuple) -> Result<TrainedModel> {
    if spec.backend.is_remote() {
        return Err(Error::SpecError("training needs the toy backend".into()));
    }
    let cache = spec.cache_dir.as_ref().map(|d| (spec.resolve(d), cache_key(spec, dataset, vocab, seeds)));
    if let Some((dir, key)) = &cache {
        if let Some(m) = load_cached(dir, key) {
            log::info!("{}: reusing cached model {key}", run_id(seeds));
            return Ok(m);
        }
    }
    let keys = RunKeys::new(&spec.experiment_id, seeds);
    let (pool, _) = source_pool(dataset, spec.k_src, &keys.source_pool)?;
    let dev = if spec.dev_selection {
        dataset.source().dev.as_deref()
    } else {
        None
    };
    let config = TrainConfig {
        context_size: Some(spec.regime.context_size()),
        ..spec.train.clone()
    };
    let model = train_on_pool(
        &pool,
        spec.regime,
        vocab,
        &config,
        &spec.template,
        spec.allow_context_reuse,
        &keys.training,
        &keys.training_context,
        dev,
    )?;
    log::info!(
        "{}: trained {} steps, final loss {:.4}",
        run_id(seeds),
        model.summary.steps,
        model.summary.final_loss
    );
    if let Some((dir, key)) = &cache {
        store_cached(dir, key, &model)?;
    }
    Ok(model)
}

fn encode_plain(vocab: &Vocab, examples: &[Example], template: &PromptTemplate) -> Result<Vec<EncodedInstance>> {
    examples
        .iter()
        .map(|ex| encode_instance(vocab, &render_pft_instance(ex, template)?))
        .collect()
}

/// Gradient adaptation of a trained model to target shots in the plain
/// prompt form. `grad_macro` mixes the source shots into every batch.
pub fn adapt_gradient(
    params: &ModelParams,
    vocab: &Vocab,
    target_shots: &ShotSet,
    source_shots: Option<&ShotSet>,
    mode: &AdaptationMode,
    template: &PromptTemplate,
    key: &RngKey,
) -> Result<ModelParams> {
    let config = mode
        .grad_config()
        .ok_or_else(|| Error::SpecError(format!("mode {} does not adapt weights", mode.name())))?
        .train_config();
    let target = encode_plain(vocab, &target_shots.examples, template)?;
    let out = match mode {
        AdaptationMode::GradMacro { beta, .. } => {
            let src = source_shots
                .ok_or_else(|| Error::SpecError("grad_macro needs source shots".into()))?;
            if src.k != target_shots.k {
                return Err(Error::SpecError(format!(
                    "grad_macro needs equal shots per class, got {} source vs {} target",
                    src.k, target_shots.k
                )));
            }
            let source = encode_plain(vocab, &src.examples, template)?;
            let mixture = Mixture { aux: target, beta: *beta };
            fit(
                params.clone(),
                &mut |_| Ok(source.clone()),
                &config,
                key,
                FitExtras {
                    mixture: Some(&mixture),
                    ..FitExtras::default()
                },
            )?
        }
        _ => fit(params.clone(), &mut |_| Ok(target.clone()), &config, key, FitExtras::default())?,
    };
    Ok(out.params)
}

/// Per-language outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangResult {
    pub lang: String,
    pub f1: f64,
    pub instances: usize,
    pub counts: ConfusionCounts,
    pub diagnostics: ParseDiagnostics,
    /// Generations that failed and were scored as empty predictions.
    pub failures: usize,
    pub dropped_demos: usize,
    pub overlong: usize,
    /// Demonstrations prepended to each test input.
    pub context_size: usize,
}

/// Audit record of one test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub lang: String,
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub failure_threshold: f64,
}

fn render_eval(mode: &AdaptationMode, context: Option<&Demonstrations>, ex: &Example, t: &PromptTemplate) -> Result<RenderedInstance> {
    let empty = Demonstrations::default();
    let ctx = context.unwrap_or(&empty);
    match mode {
        AdaptationMode::Raw1s { .. } => render_span_infill_instance(ctx, ex, t),
        m if m.uses_context() => render_ict_instance(ctx, ex, t),
        _ => render_pft_instance(ex, t),
    }
}

/// Render, generate, parse and score every test example. Backend failures
/// count as empty predictions; past `failure_threshold` the run aborts.
pub fn evaluate(
    backend: &dyn Backend,
    mode: &AdaptationMode,
    lang: &str,
    test: &[Example],
    context: Option<&Demonstrations>,
    template: &PromptTemplate,
    label_set: &[String],
    options: &EvalOptions,
) -> Result<(LangResult, Vec<Prediction>)> {
    if context.is_some_and(|c| !c.is_empty()) && !mode.uses_context() {
        return Err(Error::SpecError(format!("mode {} takes no context", mode.name())));
    }
    let rendered: Vec<RenderedInstance> = test
        .iter()
        .map(|ex| render_eval(mode, context, ex, template))
        .collect::<Result<_>>()?;
    let requests: Vec<GenerationRequest> = rendered
        .iter()
        .map(|r| GenerationRequest::greedy(r.prompt.clone(), options.max_new_tokens))
        .collect();
    let outputs = generate_all(backend, &requests);
    let mut result = LangResult {
        lang: lang.to_string(),
        f1: 0.0,
        instances: test.len(),
        counts: ConfusionCounts::default(),
        diagnostics: ParseDiagnostics::default(),
        failures: 0,
        dropped_demos: rendered.iter().map(|r| r.dropped_demos).sum(),
        overlong: rendered.iter().filter(|r| r.overlong).count(),
        context_size: context.map_or(0, Demonstrations::len),
    };
    let mut predictions = Vec::with_capacity(test.len());
    for (index, (ex, out)) in test.iter().zip(outputs).enumerate() {
        let (generated, predicted, error) = match out {
            Ok(text) => {
                let (labels, diag) = parse_labels(&text, label_set, template);
                result.diagnostics.merge(&diag);
                (Some(text), labels, None)
            }
            Err(e) if e.category() == ErrorCategory::Backend => {
                log::warn!("{lang} instance {index}: {e}");
                result.failures += 1;
                (None, BTreeSet::new(), Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        result.counts.add_instance(&ex.labels, &predicted);
        predictions.push(Prediction {
            lang: lang.to_string(),
            index,
            generated,
            predicted,
            gold: ex.labels.clone(),
            error,
        });
    }
    if !test.is_empty() {
        let rate = result.failures as f64 / test.len() as f64;
        if rate > options.failure_threshold {
            return Err(Error::FailureRateExceeded {
                rate,
                threshold: options.failure_threshold,
            });
        }
    }
    result.f1 = result.counts.f1();
    Ok((result, predictions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seeds: SeedTuple,
    pub source_f1: f64,
    /// Sorted by language; the source language included.
    pub languages: Vec<LangResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    /// Digest of each language's target shot set, when one was drawn.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub shot_digests: BTreeMap<String, String>,
    pub rng_keys: Vec<KeyUse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub spec_hash: String,
    /// False while runs are still outstanding; resumption continues from here.
    pub complete: bool,
    pub method: String,
    pub mode: String,
    pub group: String,
    pub dataset_name: String,
    pub source_lang: String,
    pub spec: ExperimentSpec,
    /// Dataset files read, relative to the manifest directory.
    pub files_opened: Vec<String>,
    pub runs: Vec<RunRecord>,
}

impl ResultsFile {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ResultsFile = serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        if r.schema_version != RESULTS_SCHEMA_VERSION {
            return Err(Error::schema(
                path.display().to_string(),
                format!("unsupported schema_version {}", r.schema_version),
            ));
        }
        Ok(r)
    }

    /// Atomic write: a partial file never replaces a good one.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::json("results", e))?;
        let tmp = path.with_extension("json.partial");
        std::fs::write(&tmp, body + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn to_method_results(&self) -> MethodResults {
        MethodResults {
            method: self.method.clone(),
            mode: self.mode.clone(),
            group: self.group.clone(),
            source_lang: self.source_lang.clone(),
            runs: self
                .runs
                .iter()
                .map(|r| RunScores {
                    seeds: r.seeds,
                    scores: r.languages.iter().map(|l| (l.lang.clone(), l.f1)).collect(),
                })
                .collect(),
        }
    }

    /// Score of `lang` in the run with `run_id`.
    pub fn f1(&self, run_id: &str, lang: &str) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.run_id == run_id)
            .and_then(|r| r.languages.iter().find(|l| l.lang == lang))
            .map(|l| l.f1)
    }
}

pub fn predictions_dir(output: &Path) -> PathBuf {
    let stem = output.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}.predictions"))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep finished runs of a matching partial results file.
    pub resume: bool,
}

/// Load the dataset the way `spec` is allowed to see it.
pub fn load_for_spec(spec: &ExperimentSpec) -> Result<(Dataset, Vec<String>)> {
    let manifest = spec.resolve(&spec.dataset);
    let peek = crate::corpus::DatasetManifest::read(&manifest)?;
    let mut options = LoadOptions::default();
    if !spec.adaptation.reads_target_train() {
        options.skip_train = peek.splits.keys().filter(|l| **l != peek.source_lang).cloned().collect();
    }
    let (dataset, audit) = load_dataset_with(&manifest, &options)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let opened = audit
        .opened
        .iter()
        .map(|p| p.strip_prefix(base).unwrap_or(p).display().to_string())
        .collect();
    Ok((dataset, opened))
}

fn eval_languages(spec: &ExperimentSpec, dataset: &Dataset) -> Result<Vec<String>> {
    let source = dataset.source_lang.clone();
    let mut langs = vec![source.clone()];
    match &spec.target_languages {
        None => langs.extend(dataset.languages().filter(|l| *l != source).map(str::to_string)),
        Some(list) => {
            for l in list {
                dataset.split(l).map_err(|_| Error::SpecError(format!("language {l:?} is not in the dataset")))?;
                if *l != source && !langs.contains(l) {
                    langs.push(l.clone());
                }
            }
        }
    }
    langs.sort();
    Ok(langs)
}

enum Engine {
    Toy(Vocab),
    Remote(RemoteBackend),
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    dataset: &'a Dataset,
    langs: &'a [String],
    engine: &'a Engine,
    options: EvalOptions,
}

fn execute_run(ctx: &Ctx<'_>, seeds: &SeedTuple, model: Option<&TrainedModel>) -> Result<(RunRecord, Vec<Prediction>)> {
    let spec = ctx.spec;
    let mode = &spec.adaptation;
    let keys = RunKeys::new(&spec.experiment_id, seeds);
    let source = ctx.dataset.source_lang.as_str();
    let labels = ctx.dataset.label_set();
    let k_tgt = mode.k_tgt();
    let mut languages = Vec::new();
    let mut predictions = Vec::new();
    let mut shot_digests = BTreeMap::new();
    for lang in ctx.langs {
        let split = ctx.dataset.split(lang)?;
        let shot_lang = if matches!(mode, AdaptationMode::IcSrc { .. }) { source } else { lang.as_str() };
        let shots = match &keys.shot_tgt {
            Some(key) if mode.uses_shot_tgt() => {
                let s = sample_k_shot(ctx.dataset.split(shot_lang)?, labels, k_tgt, &key.child(shot_lang))?;
                shot_digests.insert(lang.clone(), examples_digest(&s.examples));
                Some(s)
            }
            _ => None,
        };
        let context = match (&shots, &keys.context_order) {
            (Some(s), Some(order)) if mode.uses_context() => Some(Demonstrations::from_shots(s, &order.child(shot_lang))),
            _ => None,
        };
        let adapted;
        let backend: Box<dyn Backend + '_> = match ctx.engine {
            Engine::Remote(r) => Box::new(RemoteRef(r)),
            Engine::Toy(vocab) => {
                let model = model.ok_or_else(|| Error::SpecError("toy evaluation without a model".into()))?;
                let params = if mode.is_gradient() {
                    let target = shots.as_ref().expect("gradient modes draw target shots");
                    let macro_src = match mode {
                        AdaptationMode::GradMacro { .. } => Some(sample_k_shot(
                            ctx.dataset.source(),
                            labels,
                            k_tgt,
                            &keys.shot_tgt.as_ref().expect("gradient modes have a shot key").child("macro-source"),
                        )?),
                        _ => None,
                    };
                    let key = keys.adaptation.as_ref().expect("gradient modes have an adaptation key").child(lang);
                    adapted = adapt_gradient(&model.params, vocab, target, macro_src.as_ref(), mode, &spec.template, &key)?;
                    &adapted
                } else {
                    &model.params
                };
                Box::new(ToyBackend::new(params, vocab))
            }
        };
        let (row, preds) = evaluate(
            backend.as_ref(),
            mode,
            lang,
            &split.test,
            context.as_ref(),
            &spec.template,
            labels,
            &ctx.options,
        )?;
        languages.push(row);
        predictions.extend(preds);
    }
    let source_f1 = languages.iter().find(|l| l.lang == source).map_or(0.0, |l| l.f1);
    Ok((
        RunRecord {
            run_id: run_id(seeds),
            seeds: *seeds,
            source_f1,
            languages,
            train: model.map(|m| m.summary.clone()),
            shot_digests,
            rng_keys: keys.uses(),
        },
        predictions,
    ))
}

struct RemoteRef<'a>(&'a RemoteBackend);

impl Backend for RemoteRef<'_> {
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        self.0.generate(request)
    }

    fn workers(&self) -> usize {
        self.0.workers()
    }
}

fn write_predictions(dir: &Path, run_id: &str, predictions: &[Prediction]) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{run_id}.jsonl"));
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for p in predictions {
        let line = serde_json::to_string(p).map_err(|e| Error::json("prediction", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Execute the seed cross-product of `spec`, writing the results file after
/// every finished run and once more, marked complete, at the end.
pub fn run_experiment(spec: &ExperimentSpec, options: RunOptions) -> Result<ResultsFile> {
    execute(spec, options, None)
}

/// Like [`run_experiment`] but every run evaluates `model` (encoded with
/// `vocab`) instead of training its own. Ignored for remote backends.
pub fn evaluate_model(spec: &ExperimentSpec, model: &TrainedModel, vocab: Vocab, options: RunOptions) -> Result<ResultsFile> {
    if model.params.dims.vocab_size != vocab.len() || model.params.dims.n_labels != vocab.n_labels() {
        return Err(Error::ShapeError(format!(
            "model expects {} tokens and {} labels, vocabulary has {} and {}",
            model.params.dims.vocab_size,
            model.params.dims.n_labels,
            vocab.len(),
            vocab.n_labels()
        )));
    }
    execute(spec, options, Some((model, vocab)))
}

fn execute(spec: &ExperimentSpec, options: RunOptions, fixed: Option<(&TrainedModel, Vocab)>) -> Result<ResultsFile> {
    spec.validate()?;
    let (dataset, files_opened) = load_for_spec(spec)?;
    let langs = eval_languages(spec, &dataset)?;
    let output = spec.output_path();
    let spec_hash = spec.hash();
    let mut results = ResultsFile {
        schema_version: RESULTS_SCHEMA_VERSION,
        spec_hash: spec_hash.clone(),
        complete: false,
        method: spec.method_name(),
        mode: spec.adaptation.name().to_string(),
        group: format!("{}/{}/k{}", dataset.name, spec.regime.tag(), spec.k_src),
        dataset_name: dataset.name.clone(),
        source_lang: dataset.source_lang.clone(),
        spec: spec.clone(),
        files_opened,
        runs: Vec::new(),
    };
    if options.resume && output.exists() {
        let previous = ResultsFile::read(&output)?;
        if previous.spec_hash != spec_hash {
            return Err(Error::SpecError(format!(
                "{} was produced by a different spec (hash {})",
                output.display(),
                previous.spec_hash
            )));
        }
        if previous.complete {
            log::info!("{} is already complete", output.display());
            return Ok(previous);
        }
        results.runs = previous.runs;
        log::info!("resuming with {} finished runs", results.runs.len());
    }
    let done: BTreeSet<SeedTuple> = results.runs.iter().map(|r| r.seeds).collect();
    let pending: Vec<SeedTuple> = spec.planned_runs().into_iter().filter(|s| !done.contains(s)).collect();

    let (engine, fixed) = match (&spec.backend, fixed) {
        (BackendConfig::Toy, Some((model, vocab))) => {
            let labels: Vec<&str> = (0..vocab.n_labels()).map(|i| vocab.label(i)).collect();
            if labels != dataset.label_set() {
                return Err(Error::SpecError("the model was trained on a different label set".into()));
            }
            (Engine::Toy(vocab), Some(model))
        }
        (BackendConfig::Toy, None) => (Engine::Toy(build_vocab(&dataset, &spec.template, spec.train.alias_bank)), None),
        (BackendConfig::Remote(cfg), _) => (Engine::Remote(RemoteBackend::new(cfg.clone())?), None),
    };
    let max_new_tokens = spec.max_new_tokens.unwrap_or(match &engine {
        Engine::Toy(_) => dataset.num_labels() + 1,
        Engine::Remote(_) => 64,
    });
    let ctx = Ctx {
        spec,
        dataset: &dataset,
        langs: &langs,
        engine: &engine,
        options: EvalOptions {
            max_new_tokens,
            failure_threshold: spec.failure_threshold,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers())
        .build()
        .map_err(|e| Error::SpecError(format!("thread pool: {e}")))?;

    let models: BTreeMap<(u64, u64), TrainedModel> = match &engine {
        Engine::Toy(_) if fixed.is_some() => BTreeMap::new(),
        Engine::Toy(vocab) => {
            let needed: BTreeSet<(u64, u64)> = pending.iter().map(|s| (s.finetune, s.shot_src)).collect();
            let trained: Vec<Result<((u64, u64), TrainedModel)>> = pool.install(|| {
                needed
                    .into_par_iter()
                    .map(|(ft, ss)| {
                        let seeds = SeedTuple {
                            finetune: ft,
                            shot_src: ss,
                            shot_tgt: None,
                        };
                        run_training(spec, &dataset, vocab, &seeds).map(|m| ((ft, ss), m))
                    })
                    .collect()
            });
            trained.into_iter().collect::<Result<_>>()?
        }
        Engine::Remote(_) => BTreeMap::new(),
    };

    let shared = Mutex::new(results);
    let pred_dir = predictions_dir(&output);
    let outcomes: Vec<Result<()>> = pool.install(|| {
        pending
            .par_iter()
            .map(|seeds| {
                let model = fixed.or_else(|| models.get(&(seeds.finetune, seeds.shot_src)));
                let (record, preds) = execute_run(&ctx, seeds, model)?;
                if spec.record_predictions {
                    write_predictions(&pred_dir, &record.run_id, &preds)?;
                }
                let mut guard = shared.lock().expect("results lock poisoned");
                guard.runs.push(record);
                guard.runs.sort_by_key(|r| r.seeds);
                guard.write(&output)
            })
            .collect()
    });
    let mut results = shared.into_inner().expect("results lock poisoned");
    if let Some(err) = outcomes.into_iter().find_map(Result::err) {
        // finished runs stay on disk for --resume
        results.write(&output)?;
        return Err(err);
    }
    results.runs.sort_by_key(|r| r.seeds);
    results.complete = true;
    results.write(&output)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_src_serde() {
        let k: KSrc = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(k, KSrc::Full);
        let k: KSrc = serde_json::from_str("8").unwrap();
        assert_eq!(k, KSrc::Shots(8));
        assert!(serde_json::from_str::<KSrc>("\"most\"").is_err());
        assert_eq!(serde_json::to_string(&KSrc::Full).unwrap(), "\"full\"");
        assert_eq!("16".parse::<KSrc>().unwrap(), KSrc::Shots(16));
    }

    #[test]
    fn mode_defaults() {
        let m: AdaptationMode = serde_json::from_str(r#"{"mode": "ic"}"#).unwrap();
        assert_eq!(m.k_tgt(), 1);
        let m: AdaptationMode = serde_json::from_str(r#"{"mode": "grad_macro"}"#).unwrap();
        assert!(matches!(m, AdaptationMode::GradMacro { beta, .. } if beta == 0.5));
        let g = GradConfig::defaults_for(8);
        assert_eq!((g.learning_rate, g.epochs, g.batch_size), (1e-5, 10, 8));
        let g = GradConfig::defaults_for(1);
        assert_eq!((g.learning_rate, g.epochs), (5e-5, 1));
        assert_eq!(AdaptationMode::Zero.k_tgt(), 0);
        let m: AdaptationMode = serde_json::from_str(r#"{"mode": "raw_1s"}"#).unwrap();
        assert_eq!(m.name(), "raw_1s");
    }

    #[test]
    fn seed_cross_product() {
        let mut spec = ExperimentSpec::new("x", "m.json", Regime::Pft, AdaptationMode::Zero);
        spec.seeds = SeedLists {
            finetune: vec![0, 1],
            shot_src: vec![0, 1],
            shot_tgt: vec![0, 1],
        };
        assert_eq!(spec.planned_runs().len(), 4);
        spec.adaptation = AdaptationMode::Grad { k_tgt: 1, config: None };
        assert_eq!(spec.planned_runs().len(), 8);
    }

    #[test]
    fn validation_rules() {
        let ok = ExperimentSpec::new("x", "m.json", Regime::Ict { m: 10 }, AdaptationMode::Ic { k_tgt: 1 });
        assert!(ok.validate().is_ok());
        let mut s = ok.clone();
        s.regime = Regime::Pft;
        assert!(matches!(s.validate(), Err(Error::SpecError(_))));
        let mut s = ok.clone();
        s.adaptation = AdaptationMode::Raw1s { k_tgt: 1 };
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.seeds.finetune = vec![];
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.k_src = KSrc::Shots(0);
        assert!(s.validate().is_err());
        let mut s = ok;
        s.adaptation = AdaptationMode::GradMacro {
            k_tgt: 1,
            beta: 1.5,
            config: None,
        };
        s.regime = Regime::Pft;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentSpec::new("x", "m.json", Regime::Pft, AdaptationMode::Zero);
        let mut b = a.clone();
        b.output = "elsewhere.json".into();
        b.workers = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.seeds.finetune = vec![7];
        assert_ne!(a.hash(), b.hash());
    }
}
