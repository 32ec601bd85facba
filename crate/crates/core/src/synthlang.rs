//! Synthetic language families with controlled lexical overlap.
//!
//! The source language draws each example from a content vocabulary split
//! into class-indicator tokens and noise tokens; the indicators present in
//! an example are exactly its gold classes. Target languages are parallel
//! copies of the source under a token bijection that keeps a chosen
//! fraction of content tokens unchanged.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, LanguageSplit, TaskKind};
use crate::error::{Error, Result};
use crate::sampling::{shuffle, uniform_index, RngKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLanguage {
    pub lang: String,
    /// Fraction of content tokens kept identical to the source.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub source_lang: String,
    pub targets: Vec<TargetLanguage>,
    pub num_classes: usize,
    pub indicators_per_class: usize,
    /// Content tokens per language (indicators plus noise).
    pub vocab_size: usize,
    pub noise_per_example: usize,
    /// Probability that an example carries 2..=max_labels classes.
    pub multi_label_prob: f64,
    pub max_labels: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthlang".into(),
            source_lang: "src".into(),
            targets: [("tga", 0.25), ("tgb", 0.5), ("tgc", 0.75)]
                .iter()
                .map(|&(l, o)| TargetLanguage {
                    lang: l.into(),
                    overlap: o,
                })
                .collect(),
            num_classes: 6,
            indicators_per_class: 2,
            vocab_size: 100,
            noise_per_example: 2,
            multi_label_prob: 0.3,
            max_labels: 3,
            train_size: 400,
            test_size: 200,
            dev_size: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_indicators(&self) -> usize {
        self.num_classes * self.indicators_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigError(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.indicators_per_class == 0 {
            return bad("indicators_per_class must be positive".into());
        }
        if self.vocab_size < self.n_indicators() + self.noise_per_example.max(1) {
            return bad(format!(
                "vocab_size {} leaves too few noise tokens after {} indicators",
                self.vocab_size,
                self.n_indicators()
            ));
        }
        if !(0.0..=1.0).contains(&self.multi_label_prob) {
            return bad("multi_label_prob must lie in [0, 1]".into());
        }
        if self.max_labels == 0 || self.max_labels > self.num_classes {
            return bad(format!("max_labels must lie in 1..={}", self.num_classes));
        }
        if self.multi_label_prob > 0.0 && self.max_labels < 2 {
            return bad("multi-label examples need max_labels >= 2".into());
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train and test sizes must be positive".into());
        }
        let mut seen = BTreeSet::from([self.source_lang.as_str()]);
        for t in &self.targets {
            if !(0.0..=1.0).contains(&t.overlap) {
                return bad(format!("overlap {} for {} outside [0, 1]", t.overlap, t.lang));
            }
            if t.lang.is_empty() || t.lang.contains(char::is_whitespace) || !seen.insert(&t.lang) {
                return bad(format!("invalid or duplicate language code {:?}", t.lang));
            }
        }
        Ok(())
    }

    pub fn task_kind(&self) -> TaskKind {
        if self.multi_label_prob > 0.0 {
            TaskKind::MultiLabel
        } else {
            TaskKind::SingleLabel
        }
    }
}

/// Token bijection from the source into one target language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMapping {
    pub overlap: f64,
    /// Achieved fraction of content tokens mapped to themselves.
    pub shared_fraction: f64,
    pub forward: BTreeMap<String, String>,
}

impl LanguageMapping {
    pub fn inverse(&self) -> BTreeMap<String, String> {
        self.forward.iter().map(|(a, b)| (b.clone(), a.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMapping {
    pub source_lang: String,
    pub content_tokens: Vec<String>,
    /// Source indicator tokens per class.
    pub indicators: BTreeMap<String, Vec<String>>,
    pub languages: BTreeMap<String, LanguageMapping>,
}

impl FamilyMapping {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Overlap per target language, the covariate used for correlations.
    pub fn overlaps(&self) -> BTreeMap<String, f64> {
        self.languages
            .iter()
            .map(|(l, m)| (l.clone(), m.overlap))
            .collect()
    }

    /// Indicator tokens of `class` as written in `lang`.
    pub fn indicators_in(&self, lang: &str, class: &str) -> Vec<String> {
        let src = self.indicators.get(class).cloned().unwrap_or_default();
        match self.languages.get(lang) {
            Some(m) => src.iter().map(|t| m.forward[t].clone()).collect(),
            None => src,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFamily {
    pub dataset: Dataset,
    pub mapping: FamilyMapping,
}

impl SynthFamily {
    /// Write the dataset files and `mapping.json`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let manifest = self.dataset.write(dir)?;
        let path = dir.join("mapping.json");
        let body = serde_json::to_string_pretty(&self.mapping).map_err(|e| Error::json("mapping", e))?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn class_name(c: usize) -> String {
    format!("c{c}")
}

fn draw_example(
    cfg: &SynthConfig,
    indicators: &[Vec<usize>],
    noise: &[usize],
    tokens: &[String],
    rng: &mut impl Rng,
) -> Example {
    let n_classes = if cfg.max_labels >= 2 && rng.gen_bool(cfg.multi_label_prob) {
        2 + uniform_index(rng, cfg.max_labels - 1)
    } else {
        1
    };
    let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
    shuffle(rng, &mut classes);
    classes.truncate(n_classes);
    let mut words: Vec<usize> = classes
        .iter()
        .map(|&c| indicators[c][uniform_index(rng, indicators[c].len())])
        .collect();
    let mut pool = noise.to_vec();
    for i in 0..cfg.noise_per_example.min(pool.len()) {
        let j = i + uniform_index(rng, pool.len() - i);
        pool.swap(i, j);
        words.push(pool[i]);
    }
    shuffle(rng, &mut words);
    let text = words
        .iter()
        .map(|&w| tokens[w].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Example::new(text, classes.iter().map(|&c| class_name(c)), cfg.source_lang.clone())
}

fn remap(ex: &Example, lang: &str, forward: &BTreeMap<String, String>) -> Example {
    let text = ex
        .text
        .split(' ')
        .map(|w| forward[w].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Example {
        text,
        labels: ex.labels.clone(),
        lang: lang.to_string(),
    }
}

/// Generate a source language and its parallel targets.
pub fn generate_language_family(cfg: &SynthConfig, key: &RngKey) -> Result<SynthFamily> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let tokens: Vec<String> = (0..v).map(|i| format!("{}_{i}", cfg.source_lang)).collect();

    let mut rng = key.child("vocab").stream();
    let mut ids: Vec<usize> = (0..v).collect();
    shuffle(&mut rng, &mut ids);
    let n_ind = cfg.n_indicators();
    let indicators: Vec<Vec<usize>> = ids[..n_ind]
        .chunks(cfg.indicators_per_class)
        .map(|c| c.to_vec())
        .collect();
    let noise: Vec<usize> = ids[n_ind..].to_vec();

    let mut rng = key.child("examples").stream();
    let train: Vec<Example> = (0..cfg.train_size)
        .map(|_| draw_example(cfg, &indicators, &noise, &tokens, &mut rng))
        .collect();
    let seen: HashSet<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let mut draw_fresh = |n: usize, taken: &mut HashSet<String>| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::ConfigError(
                    "cannot draw held-out examples distinct from training data".into(),
                ));
            }
            let ex = draw_example(cfg, &indicators, &noise, &tokens, &mut rng);
            if seen.contains(ex.text.as_str()) || taken.contains(&ex.text) {
                continue;
            }
            out.push(ex);
        }
        Ok(out)
    };
    let mut taken = HashSet::new();
    let test = draw_fresh(cfg.test_size, &mut taken)?;
    taken.extend(test.iter().map(|e| e.text.clone()));
    let dev = if cfg.dev_size > 0 {
        Some(draw_fresh(cfg.dev_size, &mut taken)?)
    } else {
        None
    };

    let is_indicator: Vec<bool> = {
        let mut f = vec![false; v];
        indicators.iter().flatten().for_each(|&i| f[i] = true);
        f
    };
    let mut languages = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for target in &cfg.targets {
        let mut rng = key.child(format!("map/{}", target.lang)).stream();
        let mut shared = vec![false; v];
        for group in [&indicators.concat(), &noise] {
            let k = (target.overlap * group.len() as f64).round() as usize;
            let mut g = group.to_vec();
            g.sort_unstable();
            shuffle(&mut rng, &mut g);
            g[..k].iter().for_each(|&i| shared[i] = true);
        }
        let mut fresh: Vec<usize> = (0..v).collect();
        shuffle(&mut rng, &mut fresh);
        let forward: BTreeMap<String, String> = (0..v)
            .map(|i| {
                let out = if shared[i] {
                    tokens[i].clone()
                } else {
                    format!("{}_{}", target.lang, fresh[i])
                };
                (tokens[i].clone(), out)
            })
            .collect();
        let n_shared = shared.iter().filter(|&&s| s).count();
        log::debug!(
            "{}: {} of {} content tokens shared ({} indicators)",
            target.lang,
            n_shared,
            v,
            (0..v).filter(|&i| shared[i] && is_indicator[i]).count()
        );
        let tr = |xs: &[Example]| -> Vec<Example> {
            xs.iter().map(|e| remap(e, &target.lang, &forward)).collect()
        };
        splits.insert(
            target.lang.clone(),
            LanguageSplit {
                lang: target.lang.clone(),
                train: tr(&train),
                test: tr(&test),
                dev: dev.as_deref().map(tr),
            },
        );
        languages.insert(
            target.lang.clone(),
            LanguageMapping {
                overlap: target.overlap,
                shared_fraction: n_shared as f64 / v as f64,
                forward,
            },
        );
    }
    splits.insert(
        cfg.source_lang.clone(),
        LanguageSplit {
            lang: cfg.source_lang.clone(),
            train,
            test,
            dev,
        },
    );
    let class_names: Vec<String> = (0..cfg.num_classes).map(class_name).collect();
    let dataset = Dataset::new(
        cfg.name.clone(),
        cfg.task_kind(),
        cfg.source_lang.clone(),
        splits,
        Some(class_names.clone()),
    )?;
    let mapping = FamilyMapping {
        source_lang: cfg.source_lang.clone(),
        content_tokens: tokens.clone(),
        indicators: class_names
            .iter()
            .zip(&indicators)
            .map(|(c, ids)| (c.clone(), ids.iter().map(|&i| tokens[i].clone()).collect()))
            .collect(),
        languages,
    };
    Ok(SynthFamily { dataset, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::RngRole;

    fn small(targets: &[(&str, f64)]) -> SynthConfig {
        SynthConfig {
            targets: targets
                .iter()
                .map(|&(l, o)| TargetLanguage {
                    lang: l.into(),
                    overlap: o,
                })
                .collect(),
            vocab_size: 120,
            train_size: 80,
            test_size: 40,
            ..SynthConfig::default()
        }
    }

    fn key() -> RngKey {
        RngKey::new("synth-test", RngRole::Synthesis, 3)
    }

    #[test]
    fn full_overlap_is_identity() {
        let fam = generate_language_family(&small(&[("same", 1.0)]), &key()).unwrap();
        let src = fam.dataset.split("src").unwrap();
        let tgt = fam.dataset.split("same").unwrap();
        for (a, b) in src.train.iter().zip(&tgt.train) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn zero_overlap_is_disjoint() {
        let fam = generate_language_family(&small(&[("far", 0.0)]), &key()).unwrap();
        let words = |lang: &str| -> BTreeSet<String> {
            let s = fam.dataset.split(lang).unwrap();
            s.train
                .iter()
                .chain(&s.test)
                .flat_map(|e| e.text.split(' ').map(str::to_string).collect::<Vec<_>>())
                .collect()
        };
        assert!(words("src").is_disjoint(&words("far")));
        assert_eq!(fam.dataset.label_set().len(), 6);
    }

    #[test]
    fn inverse_recovers_source_and_overlap_is_exact() {
        let cfg = small(&[("a", 0.25), ("b", 0.5), ("c", 0.75)]);
        let fam = generate_language_family(&cfg, &key()).unwrap();
        let src = fam.dataset.split("src").unwrap();
        for (lang, m) in &fam.mapping.languages {
            assert!((m.shared_fraction - m.overlap).abs() <= 1.0 / cfg.vocab_size as f64);
            let inv = m.inverse();
            assert_eq!(inv.len(), cfg.vocab_size);
            let tgt = fam.dataset.split(lang).unwrap();
            for (a, b) in src.test.iter().zip(&tgt.test) {
                let back: Vec<&str> = b.text.split(' ').map(|w| inv[w].as_str()).collect();
                assert_eq!(back.join(" "), a.text);
            }
        }
    }

    #[test]
    fn labels_follow_indicators() {
        let fam = generate_language_family(&small(&[("a", 0.5)]), &key()).unwrap();
        for lang in ["src", "a"] {
            let split = fam.dataset.split(lang).unwrap();
            for ex in split.train.iter().chain(&split.test) {
                let words: BTreeSet<&str> = ex.text.split(' ').collect();
                let predicted: BTreeSet<String> = fam
                    .mapping
                    .indicators
                    .keys()
                    .filter(|c| {
                        fam.mapping
                            .indicators_in(lang, c)
                            .iter()
                            .any(|t| words.contains(t.as_str()))
                    })
                    .cloned()
                    .collect();
                assert_eq!(predicted, ex.labels);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(&[("a", 1.5)]);
        assert!(generate_language_family(&cfg, &key()).is_err());
        cfg = small(&[]);
        cfg.num_classes = 1;
        cfg.max_labels = 1;
        assert!(matches!(cfg.validate(), Err(Error::ConfigError(_))));
        cfg = small(&[("src", 0.5)]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic_in_key() {
        let cfg = small(&[("a", 0.5)]);
        let a = generate_language_family(&cfg, &key()).unwrap();
        let b = generate_language_family(&cfg, &key()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.mapping, b.mapping);
    }
}
