//! Multilingual classification corpora.
//!
//! A dataset is described by a JSON manifest pointing at one JSONL file per
//! language and partition. Every JSONL line is a record
//! `{"text": str, "labels": [str], "lang": str}`; single-label corpora use a
//! one-element list. Loading validates the whole dataset up front and the
//! result is immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

/// One labelled text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub labels: BTreeSet<String>,
    pub lang: String,
}

impl Example {
    pub fn new<I, S>(text: impl Into<String>, labels: I, lang: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Example {
            text: text.into(),
            labels: labels.into_iter().map(Into::into).collect(),
            lang: lang.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSplit {
    pub lang: String,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<Vec<Example>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task_kind: TaskKind,
    label_set: Vec<String>,
    pub source_lang: String,
    pub splits: BTreeMap<String, LanguageSplit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task_kind: TaskKind,
    pub source_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<Vec<String>>,
    pub splits: BTreeMap<String, SplitPaths>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Which files a load is allowed to touch.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Languages whose train partition must not be opened.
    pub skip_train: BTreeSet<String>,
}

/// Files actually opened during a load, in order.
#[derive(Debug, Clone, Default)]
pub struct LoadAudit {
    pub opened: Vec<PathBuf>,
}

/// Load and validate a dataset, reading every file the manifest lists.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset_with(manifest_path, &LoadOptions::default()).map(|(d, _)| d)
}

pub fn load_dataset_with(
    manifest_path: impl AsRef<Path>,
    options: &LoadOptions,
) -> Result<(Dataset, LoadAudit)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.splits.is_empty() {
        return Err(Error::ManifestEmpty(manifest_path.to_path_buf()));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut audit = LoadAudit::default();
    let mut splits = BTreeMap::new();
    for (lang, paths) in &manifest.splits {
        let train = if options.skip_train.contains(lang) {
            Vec::new()
        } else {
            let p = base.join(&paths.train);
            audit.opened.push(p.clone());
            read_jsonl(&p)?
        };
        let test_path = base.join(&paths.test);
        audit.opened.push(test_path.clone());
        let test = read_jsonl(&test_path)?;
        let dev = match &paths.dev {
            Some(dev) => {
                let p = base.join(dev);
                audit.opened.push(p.clone());
                Some(read_jsonl(&p)?)
            }
            None => None,
        };
        splits.insert(
            lang.clone(),
            LanguageSplit {
                lang: lang.clone(),
                train,
                test,
                dev,
            },
        );
    }
    let dataset = Dataset::new(
        manifest.name,
        manifest.task_kind,
        manifest.source_lang,
        splits,
        manifest.label_set,
    )?;
    Ok((dataset, audit))
}

impl Dataset {
    /// Build a dataset from in-memory splits. The label set is the sorted
    /// union of observed labels; a declared set must match it exactly.
    pub fn new(
        name: impl Into<String>,
        task_kind: TaskKind,
        source_lang: impl Into<String>,
        splits: BTreeMap<String, LanguageSplit>,
        declared_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let observed = collect_label_set(
            splits
                .values()
                .flat_map(|s| s.train.iter().chain(&s.test).chain(s.dev.iter().flatten())),
        );
        if let Some(declared) = declared_labels {
            let declared: Vec<String> = declared
                .into_iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if declared != observed {
                return Err(Error::LabelMismatch { declared, observed });
            }
        }
        let dataset = Dataset {
            name: name.into(),
            task_kind,
            label_set: observed,
            source_lang: source_lang.into(),
            splits,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Canonical (lexicographically sorted) label set.
    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    pub fn source(&self) -> &LanguageSplit {
        &self.splits[&self.source_lang]
    }

    pub fn split(&self, lang: &str) -> Result<&LanguageSplit> {
        self.splits
            .get(lang)
            .ok_or_else(|| Error::schema(format!("dataset {}", self.name), format!("no split for language {lang:?}")))
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    fn validate(&self) -> Result<()> {
        let here = format!("dataset {}", self.name);
        if self.splits.is_empty() {
            return Err(Error::ManifestEmpty(PathBuf::from(&self.name)));
        }
        if !self.splits.contains_key(&self.source_lang) {
            return Err(Error::schema(
                here,
                format!("source language {:?} has no split", self.source_lang),
            ));
        }
        if self.label_set.len() < 2 {
            return Err(Error::schema(
                here,
                format!("need at least 2 labels, found {}", self.label_set.len()),
            ));
        }
        let known: BTreeSet<&str> = self.label_set.iter().map(String::as_str).collect();
        for (lang, split) in &self.splits {
            if &split.lang != lang {
                return Err(Error::schema(
                    &here,
                    format!("split keyed {lang:?} claims language {:?}", split.lang),
                ));
            }
            let parts = [("train", Some(&split.train)), ("test", Some(&split.test)), ("dev", split.dev.as_ref())];
            for (part, examples) in parts {
                let Some(examples) = examples else { continue };
                for (i, ex) in examples.iter().enumerate() {
                    let loc = format!("{lang}/{part}[{i}]");
                    check_example(ex, lang, &loc)?;
                    if let Some(bad) = ex.labels.iter().find(|l| !known.contains(l.as_str())) {
                        return Err(Error::UnknownLabel(bad.clone()));
                    }
                    if self.task_kind == TaskKind::SingleLabel && ex.labels.len() != 1 {
                        return Err(Error::SingleLabelViolation {
                            location: loc,
                            count: ex.labels.len(),
                        });
                    }
                }
            }
            let train_keys: HashSet<(&str, &BTreeSet<String>)> =
                split.train.iter().map(|e| (e.text.as_str(), &e.labels)).collect();
            if let Some(dup) = split
                .test
                .iter()
                .find(|e| train_keys.contains(&(e.text.as_str(), &e.labels)))
            {
                return Err(Error::SplitOverlap {
                    lang: lang.clone(),
                    text: dup.text.clone(),
                });
            }
        }
        Ok(())
    }

    /// Write the dataset as a manifest plus per-language JSONL files and
    /// return the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = BTreeMap::new();
        for (lang, split) in &self.splits {
            let train = PathBuf::from(format!("{lang}.train.jsonl"));
            let test = PathBuf::from(format!("{lang}.test.jsonl"));
            write_jsonl(&dir.join(&train), &split.train)?;
            write_jsonl(&dir.join(&test), &split.test)?;
            let dev = match &split.dev {
                Some(dev) => {
                    let p = PathBuf::from(format!("{lang}.dev.jsonl"));
                    write_jsonl(&dir.join(&p), dev)?;
                    Some(p)
                }
                None => None,
            };
            paths.insert(lang.clone(), SplitPaths { train, test, dev });
        }
        let manifest = DatasetManifest {
            name: self.name.clone(),
            task_kind: self.task_kind,
            source_lang: self.source_lang.clone(),
            label_set: Some(self.label_set.clone()),
            splits: paths,
        };
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn check_example(ex: &Example, lang: &str, loc: &str) -> Result<()> {
    if ex.lang != lang {
        return Err(Error::schema(
            loc,
            format!("record language {:?} does not match split {lang:?}", ex.lang),
        ));
    }
    if ex.text.trim().is_empty() {
        return Err(Error::schema(loc, "empty text"));
    }
    if ex.labels.is_empty() {
        return Err(Error::schema(loc, "empty label list"));
    }
    Ok(())
}

/// Sorted union of the labels carried by `examples`.
pub fn collect_label_set<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Vec<String> {
    examples
        .into_iter()
        .flat_map(|e| e.labels.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Deserialize)]
struct RawRecord {
    text: Option<String>,
    labels: Option<Vec<String>>,
    lang: Option<String>,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), lineno + 1);
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::json(&loc, e))?;
        let (Some(text), Some(labels), Some(lang)) = (raw.text, raw.labels, raw.lang) else {
            return Err(Error::schema(loc, "record must carry text, labels and lang"));
        };
        out.push(Example {
            text,
            labels: labels.into_iter().collect(),
            lang,
        });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// SHA-256 over the JSONL serialization of `examples`, hex encoded.
pub fn examples_digest(examples: &[Example]) -> String {
    let mut hasher = Sha256::new();
    for ex in examples {
        hasher.update(serde_json::to_string(ex).expect("examples serialize"));
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_lines(path: &Path, lines: &[&str]) {
        std::fs::write(path, lines.join("\n")).unwrap();
    }

    fn manifest(dir: &Path, body: serde_json::Value) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, body.to_string()).unwrap();
        p
    }

    #[test]
    fn three_line_file_infers_label_set() {
        let dir = tempdir().unwrap();
        write_lines(
            &dir.path().join("en.train.jsonl"),
            &[
                r#"{"text":"one","labels":["a"],"lang":"en"}"#,
                r#"{"text":"two","labels":["b"],"lang":"en"}"#,
                r#"{"text":"three","labels":["a","b"],"lang":"en"}"#,
            ],
        );
        write_lines(
            &dir.path().join("en.test.jsonl"),
            &[r#"{"text":"four","labels":["b"],"lang":"en"}"#],
        );
        let m = manifest(
            dir.path(),
            serde_json::json!({
                "name": "tiny", "task_kind": "multi-label", "source_lang": "en",
                "splits": {"en": {"train": "en.train.jsonl", "test": "en.test.jsonl"}}
            }),
        );
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.label_set(), ["a", "b"]);
        assert_eq!(ds.source().train.len(), 3);
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let dir = tempdir().unwrap();
        let m = manifest(
            dir.path(),
            serde_json::json!({"name": "x", "task_kind": "multi-label", "source_lang": "en", "splits": {}}),
        );
        assert!(matches!(load_dataset(&m), Err(Error::ManifestEmpty(_))));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let dir = tempdir().unwrap();
        write_lines(&dir.path().join("tr.jsonl"), &[r#"{"text":"x","lang":"en"}"#]);
        write_lines(&dir.path().join("te.jsonl"), &[]);
        let m = manifest(
            dir.path(),
            serde_json::json!({"name": "x", "task_kind": "multi-label", "source_lang": "en",
                "splits": {"en": {"train": "tr.jsonl", "test": "te.jsonl"}}}),
        );
        assert!(matches!(load_dataset(&m), Err(Error::SchemaError { .. })));
    }

    #[test]
    fn declared_labels_must_match() {
        let dir = tempdir().unwrap();
        write_lines(
            &dir.path().join("tr.jsonl"),
            &[
                r#"{"text":"x","labels":["a"],"lang":"en"}"#,
                r#"{"text":"y","labels":["b"],"lang":"en"}"#,
            ],
        );
        write_lines(&dir.path().join("te.jsonl"), &[]);
        let m = manifest(
            dir.path(),
            serde_json::json!({"name": "x", "task_kind": "multi-label", "source_lang": "en",
                "label_set": ["a", "b", "c"],
                "splits": {"en": {"train": "tr.jsonl", "test": "te.jsonl"}}}),
        );
        assert!(matches!(load_dataset(&m), Err(Error::LabelMismatch { .. })));
    }

    #[test]
    fn single_label_violation() {
        let dir = tempdir().unwrap();
        write_lines(
            &dir.path().join("tr.jsonl"),
            &[
                r#"{"text":"x","labels":["a","b"],"lang":"en"}"#,
                r#"{"text":"y","labels":["b"],"lang":"en"}"#,
            ],
        );
        write_lines(&dir.path().join("te.jsonl"), &[]);
        let m = manifest(
            dir.path(),
            serde_json::json!({"name": "x", "task_kind": "single-label", "source_lang": "en",
                "splits": {"en": {"train": "tr.jsonl", "test": "te.jsonl"}}}),
        );
        assert!(matches!(
            load_dataset(&m),
            Err(Error::SingleLabelViolation { count: 2, .. })
        ));
    }

    #[test]
    fn train_test_overlap_is_an_error_but_duplicates_are_kept() {
        let mk = |t: &str| Example::new(t, ["a"], "en");
        let other = Example::new("z", ["b"], "en");
        let split = LanguageSplit {
            lang: "en".into(),
            train: vec![mk("dup"), mk("dup"), other.clone()],
            test: vec![mk("fresh")],
            dev: None,
        };
        let ds = Dataset::new("d", TaskKind::MultiLabel, "en", [("en".to_string(), split.clone())].into(), None)
            .unwrap();
        assert_eq!(ds.source().train.len(), 3);

        let mut bad = split;
        bad.test.push(mk("dup"));
        assert!(matches!(
            Dataset::new("d", TaskKind::MultiLabel, "en", [("en".to_string(), bad)].into(), None),
            Err(Error::SplitOverlap { .. })
        ));
    }

    #[test]
    fn singleton_label_set() {
        let ex = Example::new("hi", ["x"], "en");
        assert_eq!(collect_label_set([&ex]), ["x"]);
    }

    #[test]
    fn skipped_train_file_is_never_opened() {
        let dir = tempdir().unwrap();
        for (f, lang) in [("en.tr", "en"), ("en.te", "en"), ("fr.te", "fr")] {
            write_lines(
                &dir.path().join(f),
                &[
                    &format!(r#"{{"text":"{f} a","labels":["a"],"lang":"{lang}"}}"#),
                    &format!(r#"{{"text":"{f} b","labels":["b"],"lang":"{lang}"}}"#),
                ],
            );
        }
        // fr.tr deliberately does not exist
        let m = manifest(
            dir.path(),
            serde_json::json!({"name": "x", "task_kind": "single-label", "source_lang": "en",
                "splits": {"en": {"train": "en.tr", "test": "en.te"},
                           "fr": {"train": "fr.tr", "test": "fr.te"}}}),
        );
        assert!(load_dataset(&m).is_err());
        let opts = LoadOptions {
            skip_train: ["fr".to_string()].into(),
        };
        let (ds, audit) = load_dataset_with(&m, &opts).unwrap();
        assert!(ds.split("fr").unwrap().train.is_empty());
        assert!(!audit.opened.iter().any(|p| p.ends_with("fr.tr")));
    }
}
