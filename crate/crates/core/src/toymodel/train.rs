use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::RenderedInstance;
use crate::sampling::{shuffle, uniform_index, RngKey};

use super::network::accumulate_grad;
use super::params::{Dims, ModelParams};
use super::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear decay to zero over the run.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: Schedule,
    pub d_model: usize,
    pub d_ff: usize,
    /// Demonstrations per training instance; `None` trains the plain form.
    pub context_size: Option<usize>,
    /// Per-instance probability of swapping each distinct word for an
    /// alias placeholder, consistently across the whole prompt.
    pub relexicalize: f64,
    /// Alias placeholders reserved in the vocabulary.
    pub alias_bank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: Schedule::Constant,
            d_model: 64,
            d_ff: 128,
            context_size: None,
            relexicalize: 0.0,
            alias_bank: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigError(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return bad("model widths must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("invalid Adam constants");
        }
        if !(0.0..=1.0).contains(&self.relexicalize) {
            return bad("relexicalize must lie in [0, 1]");
        }
        if self.relexicalize > 0.0 && self.alias_bank == 0 {
            return bad("relexicalize needs a non-empty alias_bank");
        }
        Ok(())
    }

    pub fn dims(&self, vocab: &Vocab) -> Dims {
        Dims {
            vocab_size: vocab.len(),
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_labels: vocab.n_labels(),
        }
    }
}

/// Token ids of a prompt and label indices of its target (EOS last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    pub ids: Vec<u32>,
    pub target: Vec<usize>,
}

pub fn encode_instance(vocab: &Vocab, inst: &RenderedInstance) -> Result<EncodedInstance> {
    let target = inst
        .target
        .as_deref()
        .ok_or_else(|| Error::TemplateError("training instance without target".into()))?;
    Ok(EncodedInstance {
        ids: vocab.encode_prompt(&inst.prompt),
        target: vocab.encode_target(target)?,
    })
}

pub fn encode_instances(vocab: &Vocab, instances: &[RenderedInstance]) -> Result<Vec<EncodedInstance>> {
    instances.iter().map(|i| encode_instance(vocab, i)).collect()
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(dims: Dims, config: &TrainConfig) -> Self {
        Adam {
            m: ModelParams::zeros(dims),
            v: ModelParams::zeros(dims),
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ti in 0..params.tensors.len() {
            let p = &mut params.tensors[ti];
            let g = &grad.tensors[ti];
            let m = &mut self.m.tensors[ti];
            let v = &mut self.v.tensors[ti];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Consistent per-instance word-to-alias substitution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relexicalizer {
    pub prob: f64,
    pub alias_start: u32,
    pub n_aliases: u32,
    pub word_start: u32,
}

impl Relexicalizer {
    pub fn new(vocab: &Vocab, prob: f64) -> Option<Self> {
        let aliases = vocab.alias_range();
        (prob > 0.0 && !aliases.is_empty()).then_some(Relexicalizer {
            prob,
            alias_start: aliases.start,
            n_aliases: aliases.end - aliases.start,
            word_start: vocab.word_start(),
        })
    }

    /// Distinct words get distinct aliases while the bank lasts.
    pub fn apply(&self, ids: &mut [u32], rng: &mut impl Rng) {
        let mut map: HashMap<u32, u32> = HashMap::new();
        let mut used: HashSet<u32> = HashSet::new();
        for id in ids.iter_mut() {
            if *id < self.word_start {
                continue;
            }
            let word = *id;
            *id = *map.entry(word).or_insert_with(|| {
                if used.len() as u32 >= self.n_aliases || !rng.gen_bool(self.prob) {
                    return word;
                }
                loop {
                    let a = self.alias_start + uniform_index(rng, self.n_aliases as usize) as u32;
                    if used.insert(a) {
                        return a;
                    }
                }
            });
        }
    }
}

/// A second instance pool mixed into every source batch:
/// `loss = beta * mean(source) + (1 - beta) * mean(aux)`.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub aux: Vec<EncodedInstance>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochReport>,
    /// Set when a dev scorer picked the returned epoch.
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

pub type DevScorer<'a> = &'a dyn Fn(&ModelParams) -> Result<f64>;

/// Optional parts of a training run.
#[derive(Default, Clone, Copy)]
pub struct FitExtras<'a> {
    pub mixture: Option<&'a Mixture>,
    pub dev: Option<DevScorer<'a>>,
    /// Applied to the primary instances of every epoch.
    pub relex: Option<Relexicalizer>,
}

/// Batch loss and gradient: mean over `batch` of the per-instance loss.
fn batch_grad(
    params: &ModelParams,
    batch: &[&EncodedInstance],
    weight: f64,
    grad: &mut ModelParams,
) -> Result<f64> {
    let scale = weight / batch.len() as f64;
    let mut total = 0.0;
    for inst in batch {
        total += accumulate_grad(params, &inst.ids, &inst.target, scale, grad)?;
    }
    Ok(total / batch.len() as f64)
}

/// Fresh parameters drawn from `key` and trained on fixed instances.
pub fn train(
    instances: &[RenderedInstance],
    vocab: &Vocab,
    config: &TrainConfig,
    key: &RngKey,
) -> Result<ModelParams> {
    if instances.is_empty() {
        return Err(Error::NotEnoughExamples {
            requested: 1,
            available: 0,
        });
    }
    let encoded = encode_instances(vocab, instances)?;
    let init = ModelParams::init(config.dims(vocab), &key.child("init"));
    let extras = FitExtras {
        relex: Relexicalizer::new(vocab, config.relexicalize),
        ..FitExtras::default()
    };
    let out = fit(init, &mut |_| Ok(encoded.clone()), config, key, extras)?;
    Ok(out.params)
}

/// Adam training loop. `epoch_data` supplies the instances of each epoch
/// (so contexts may be redrawn); their order is shuffled from `key`.
pub fn fit(
    init: ModelParams,
    epoch_data: &mut dyn FnMut(usize) -> Result<Vec<EncodedInstance>>,
    config: &TrainConfig,
    key: &RngKey,
    extras: FitExtras<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let FitExtras { mixture, dev, relex } = extras;
    if let Some(mx) = mixture {
        if !(0.0..=1.0).contains(&mx.beta) {
            return Err(Error::ConfigError(format!("beta {} outside [0, 1]", mx.beta)));
        }
        if mx.aux.is_empty() && mx.beta < 1.0 {
            return Err(Error::NotEnoughExamples {
                requested: 1,
                available: 0,
            });
        }
    }
    let mut params = init;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            history,
            best_epoch: None,
            steps: 0,
        });
    }
    let mut adam = Adam::new(params.dims, config);
    let mut aux_rng = key.child("aux").stream();
    let mut aux_order: Vec<usize> = Vec::new();
    let mut aux_pos = 0;
    let mut steps = 0usize;
    let mut total_steps = None;
    let mut grad = ModelParams::zeros(params.dims);

    for epoch in 0..config.epochs {
        let mut data = epoch_data(epoch)?;
        if let Some(rx) = relex {
            let mut rng = key.child(format!("relex-{epoch}")).stream();
            for inst in &mut data {
                rx.apply(&mut inst.ids, &mut rng);
            }
        }
        if data.is_empty() {
            return Err(Error::NotEnoughExamples {
                requested: 1,
                available: 0,
            });
        }
        let per_epoch = data.len().div_ceil(config.batch_size);
        let total = *total_steps.get_or_insert(per_epoch * config.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut key.child(format!("epoch-{epoch}")).stream(), &mut order);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            grad.fill(0.0);
            let batch: Vec<&EncodedInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let beta = mixture.map_or(1.0, |m| m.beta);
            let mut loss = 0.0;
            if beta > 0.0 {
                loss += beta * batch_grad(&params, &batch, beta, &mut grad)?;
            }
            if let Some(mx) = mixture.filter(|_| beta < 1.0) {
                let mut aux_batch = Vec::with_capacity(config.batch_size);
                while aux_batch.len() < config.batch_size.min(mx.aux.len()) {
                    if aux_pos == aux_order.len() {
                        aux_order = (0..mx.aux.len()).collect();
                        shuffle(&mut aux_rng, &mut aux_order);
                        aux_pos = 0;
                    }
                    aux_batch.push(&mx.aux[aux_order[aux_pos]]);
                    aux_pos += 1;
                }
                loss += (1.0 - beta) * batch_grad(&params, &aux_batch, 1.0 - beta, &mut grad)?;
            }
            if !loss.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {b}");
                return Err(Error::NonFiniteLoss { epoch, step: steps });
            }
            let lr = match config.schedule {
                Schedule::Constant => config.learning_rate,
                Schedule::Linear => config.learning_rate * (1.0 - steps as f64 / total.max(1) as f64),
            };
            adam.step(&mut params, &grad, lr);
            debug_assert!(params.is_finite(), "parameters became non-finite");
            steps += 1;
            loss_sum += loss;
            loss_n += 1;
        }
        let mean_loss = loss_sum / loss_n as f64;
        let dev_score = match dev {
            Some(score) => Some(score(&params)?),
            None => None,
        };
        log::debug!("epoch {epoch}: loss {mean_loss:.5} dev {dev_score:?}");
        if let Some(s) = dev_score {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, epoch, params.clone()));
            }
        }
        history.push(EpochReport {
            epoch,
            mean_loss,
            dev_score,
        });
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params, None),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::PromptTemplate;
    use crate::sampling::RngRole;

    fn toy() -> (Vocab, Vec<RenderedInstance>) {
        let labels: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let rows = [
            ("red fox", "a"),
            ("blue whale", "b"),
            ("green frog", "c"),
            ("gray wolf", "d"),
            ("red kite", "a"),
            ("blue jay", "b"),
            ("green snake", "c"),
            ("gray seal", "d"),
        ];
        let t = PromptTemplate::default();
        let vocab = Vocab::build(&labels, rows.iter().map(|r| r.0), &t);
        let inst = rows
            .iter()
            .map(|(x, y)| RenderedInstance {
                prompt: format!("{x}{}", t.io_sep),
                target: Some(y.to_string()),
                token_length: 3,
                dropped_demos: 0,
                overlong: false,
            })
            .collect();
        (vocab, inst)
    }

    fn key() -> RngKey {
        RngKey::new("train-test", RngRole::Training, 7)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (vocab, inst) = toy();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let p = train(&inst, &vocab, &cfg, &key()).unwrap();
        let init = ModelParams::init(cfg.dims(&vocab), &key().child("init"));
        assert_eq!(p.to_bytes(), init.to_bytes());
    }

    #[test]
    fn memorizes_tiny_set_and_replays() {
        let (vocab, inst) = toy();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            d_model: 32,
            d_ff: 64,
            ..TrainConfig::default()
        };
        let enc = encode_instances(&vocab, &inst).unwrap();
        let init = ModelParams::init(cfg.dims(&vocab), &key().child("init"));
        let out = fit(init, &mut |_| Ok(enc.clone()), &cfg, &key(), FitExtras::default()).unwrap();
        let last = out.history.last().unwrap().mean_loss;
        assert!(last < 0.1, "final loss {last}");
        let again = train(&inst, &vocab, &cfg, &key()).unwrap();
        assert_eq!(out.params.to_bytes(), again.to_bytes());
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let (vocab, inst) = toy();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-300,
            ..TrainConfig::default()
        };
        let enc = encode_instances(&vocab, &inst).unwrap();
        let init = ModelParams::init(cfg.dims(&vocab), &key().child("init"));
        let out = fit(init.clone(), &mut |_| Ok(enc.clone()), &cfg, &key(), FitExtras::default()).unwrap();
        let before: f64 = enc
            .iter()
            .map(|e| super::super::network::loss_and_grad(&init, &e.ids, &e.target).unwrap().0)
            .sum();
        let after: f64 = enc
            .iter()
            .map(|e| super::super::network::loss_and_grad(&out.params, &e.ids, &e.target).unwrap().0)
            .sum();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn relexicalization_is_consistent() {
        let labels = vec!["a".to_string()];
        let vocab = Vocab::with_aliases(&labels, ["x y z"], &PromptTemplate::default(), 4);
        let rx = Relexicalizer::new(&vocab, 1.0).unwrap();
        let (x, y) = (vocab.id("x"), vocab.id("y"));
        let mut ids = vec![x, y, super::super::vocab::IO_SEP, 5, x, y];
        rx.apply(&mut ids, &mut key().stream());
        assert!(vocab.alias_range().contains(&ids[0]));
        assert_eq!(ids[0], ids[4]);
        assert_eq!(ids[1], ids[5]);
        assert_ne!(ids[0], ids[1]);
        assert_eq!(&ids[2..4], &[super::super::vocab::IO_SEP, 5]);
        assert!(Relexicalizer::new(&vocab, 0.0).is_none());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dev_selection_keeps_best_epoch() {
        let (vocab, inst) = toy();
        let cfg = TrainConfig {
            epochs: 5,
            d_model: 8,
            d_ff: 8,
            ..TrainConfig::default()
        };
        let enc = encode_instances(&vocab, &inst).unwrap();
        let init = ModelParams::init(cfg.dims(&vocab), &key().child("init"));
        let counter = std::cell::Cell::new(0);
        let scorer = |_: &ModelParams| {
            counter.set(counter.get() + 1);
            Ok(if counter.get() == 2 { 1.0 } else { 0.0 })
        };
        let out = fit(
            init,
            &mut |_| Ok(enc.clone()),
            &cfg,
            &key(),
            FitExtras {
                dev: Some(&scorer),
                ..FitExtras::default()
            },
        ).unwrap();
        assert_eq!(out.best_epoch, Some(1));
    }
}
