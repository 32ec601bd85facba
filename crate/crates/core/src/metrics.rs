//! Scores, transfer ratios and rank correlation, plus the report bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{shuffle, RngKey};

pub const DEFAULT_PERMUTATIONS: usize = 20_000;

/// Micro-accumulated counts over all instances and labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add_instance(&mut self, gold: &BTreeSet<String>, pred: &BTreeSet<String>) {
        self.tp += gold.intersection(pred).count() as u64;
        self.fp += pred.difference(gold).count() as u64;
        self.fn_ += gold.difference(pred).count() as u64;
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn confusion(gold: &[BTreeSet<String>], pred: &[BTreeSet<String>]) -> Result<ConfusionCounts> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if let Some(i) = gold.iter().position(BTreeSet::is_empty) {
        return Err(Error::DegenerateInput(format!("gold label set {i} is empty")));
    }
    let mut c = ConfusionCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        c.add_instance(g, p);
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing was predicted or expected.
pub fn f1_micro(gold: &[BTreeSet<String>], pred: &[BTreeSet<String>]) -> Result<f64> {
    confusion(gold, pred).map(|c| c.f1())
}

/// Mean percentage change of target scores relative to the source score.
pub fn transfer_gap(target_scores: &[f64], source_score: f64) -> Result<f64> {
    if !(source_score > 0.0) {
        return Err(Error::ZeroSource(source_score));
    }
    if target_scores.is_empty() {
        return Err(Error::DegenerateInput("no target scores".into()));
    }
    let sum: f64 = target_scores
        .iter()
        .map(|t| 100.0 * (t / source_score - 1.0))
        .sum();
    Ok(sum / target_scores.len() as f64)
}

/// Percentage gain of a few-shot score over its zero-shot counterpart.
pub fn improvement_delta(few_shot: f64, zero_shot: f64) -> Result<f64> {
    if !(zero_shot > 0.0) {
        return Err(Error::ZeroBaseline(zero_shot));
    }
    Ok(100.0 * (few_shot / zero_shot - 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided permutation p-value, `(hits + 1) / (permutations + 1)`.
    pub p_value: f64,
    pub n: usize,
    pub permutations: usize,
}

pub fn spearman(x: &[f64], y: &[f64], key: &RngKey) -> Result<Correlation> {
    spearman_with(x, y, key, DEFAULT_PERMUTATIONS)
}

pub fn spearman_with(x: &[f64], y: &[f64], key: &RngKey, permutations: usize) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            gold: x.len(),
            pred: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::DegenerateInput(format!("need at least 3 points, got {}", x.len())));
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().any(|t| !t.is_finite()) {
            return Err(Error::DegenerateInput(format!("{name} contains non-finite values")));
        }
        if v.iter().all(|&t| t == v[0]) {
            return Err(Error::DegenerateInput(format!("{name} is constant")));
        }
    }
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let rho = pearson(&rx, &ry);
    let mut rng = key.stream();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffle(&mut rng, &mut ry);
        if pearson(&rx, &ry).abs() >= rho.abs() - 1e-12 {
            hits += 1;
        }
    }
    Ok(Correlation {
        rho,
        p_value: (hits + 1) as f64 / (permutations + 1) as f64,
        n: x.len(),
        permutations,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// Seeds identifying one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeedTuple {
    pub finetune: u64,
    pub shot_src: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot_tgt: Option<u64>,
}

/// Per-language scores of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub seeds: SeedTuple,
    pub scores: BTreeMap<String, f64>,
}

/// Everything the report needs from one method's results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: String,
    /// Adaptation mode name (`zero`, `grad`, `grad_macro`, `ic`, `ic_src`, `raw_1s`).
    pub mode: String,
    /// Methods are only paired within the same group (dataset, regime, K_src).
    pub group: String,
    pub source_lang: String,
    pub runs: Vec<RunScores>,
}

impl MethodResults {
    fn languages(&self) -> BTreeSet<String> {
        self.runs.iter().flat_map(|r| r.scores.keys().cloned()).collect()
    }

    fn target_languages(&self) -> Vec<String> {
        self.languages()
            .into_iter()
            .filter(|l| *l != self.source_lang)
            .collect()
    }

    fn lang_values(&self, lang: &str) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.scores.get(lang).copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangScore {
    pub lang: String,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: String,
    pub mode: String,
    pub group: String,
    pub source_lang: String,
    pub source_score: Option<f64>,
    pub target_avg: Option<f64>,
    pub rows: Vec<LangScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn score_table(m: &MethodResults) -> ScoreTable {
    let rows: Vec<LangScore> = m
        .languages()
        .into_iter()
        .map(|lang| {
            let v = m.lang_values(&lang);
            LangScore {
                mean: mean(&v),
                std: sample_std(&v),
                n: v.len(),
                lang,
            }
        })
        .collect();
    let source_score = rows.iter().find(|r| r.lang == m.source_lang).map(|r| r.mean);
    let targets: Vec<f64> = rows
        .iter()
        .filter(|r| r.lang != m.source_lang)
        .map(|r| r.mean)
        .collect();
    let note = rows
        .iter()
        .any(|r| r.n < 2)
        .then(|| "single seed: standard deviation omitted".to_string());
    ScoreTable {
        method: m.method.clone(),
        mode: m.mode.clone(),
        group: m.group.clone(),
        source_lang: m.source_lang.clone(),
        source_score,
        target_avg: (!targets.is_empty()).then(|| mean(&targets)),
        rows,
        note,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub method: String,
    pub per_language: BTreeMap<String, f64>,
    pub mean_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub few_shot: String,
    pub zero_shot: String,
    pub per_language: BTreeMap<String, f64>,
    pub target_avg_pct: f64,
    /// Per-run values keyed `lang -> [delta per matched run]` (per-run mode only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_run: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub few_shot: String,
    pub zero_shot: String,
    pub covariate: String,
    /// `language` or `language-run` points.
    pub points: String,
    #[serde(flatten)]
    pub result: Option<Correlation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

impl CovariateTable {
    /// CSV with header `lang,value`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let loc = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::schema(&loc, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| Error::schema(&loc, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["lang", "value"] {
            return Err(Error::schema(&loc, "header must be `lang,value`"));
        }
        let mut values = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::schema(&loc, e.to_string()))?;
            let value: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::schema(format!("{loc}:{}", i + 2), "value is not a number"))?;
            values.insert(rec[0].trim().to_string(), value);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "covariate".into());
        Ok(CovariateTable { name, values })
    }

    fn require(&self, langs: &[String]) -> Result<Vec<f64>> {
        let missing: Vec<&str> = langs
            .iter()
            .filter(|l| !self.values.contains_key(*l))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::schema(
                format!("covariate {}", self.name),
                format!("missing languages: {}", missing.join(", ")),
            ));
        }
        Ok(langs.iter().map(|l| self.values[l]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    /// Compute ratios per run before averaging.
    pub per_run: bool,
    pub permutations: usize,
    pub key: RngKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub per_run: bool,
    pub tables: Vec<ScoreTable>,
    pub transfer_gaps: Vec<GapEntry>,
    pub improvements: Vec<DeltaEntry>,
    pub correlations: Vec<CorrelationEntry>,
    pub notes: Vec<String>,
}

fn pairs_with(few: &str, zero: &str) -> bool {
    matches!((few, zero), ("ic", "ic_src") | ("grad" | "grad_macro", "zero"))
}

fn run_matches(few: &SeedTuple, zero: &SeedTuple) -> bool {
    few.finetune == zero.finetune
        && few.shot_src == zero.shot_src
        && (zero.shot_tgt.is_none() || zero.shot_tgt == few.shot_tgt)
}

pub fn gap_entry(m: &MethodResults, per_run: bool) -> Result<Option<GapEntry>> {
    let targets = m.target_languages();
    if targets.is_empty() {
        return Ok(None);
    }
    let mut per_language = BTreeMap::new();
    for lang in &targets {
        let value = if per_run {
            let mut v = Vec::new();
            for r in &m.runs {
                if let (Some(&t), Some(&s)) = (r.scores.get(lang), r.scores.get(&m.source_lang)) {
                    v.push(transfer_gap(&[t], s)?);
                }
            }
            if v.is_empty() {
                continue;
            }
            mean(&v)
        } else {
            let src = m.lang_values(&m.source_lang);
            if src.is_empty() {
                return Ok(None);
            }
            transfer_gap(&[mean(&m.lang_values(lang))], mean(&src))?
        };
        per_language.insert(lang.clone(), value);
    }
    if per_language.is_empty() {
        return Ok(None);
    }
    let mean_pct = mean(&per_language.values().copied().collect::<Vec<_>>());
    Ok(Some(GapEntry {
        method: m.method.clone(),
        per_language,
        mean_pct,
    }))
}

pub fn delta_entry(few: &MethodResults, zero: &MethodResults, per_run: bool) -> Result<DeltaEntry> {
    let zero_langs = zero.languages();
    let langs: Vec<String> = few
        .target_languages()
        .into_iter()
        .filter(|l| zero_langs.contains(l))
        .collect();
    if langs.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "{} and {} share no target language",
            few.method, zero.method
        )));
    }
    let mut per_language = BTreeMap::new();
    let mut runs = BTreeMap::new();
    for lang in &langs {
        if per_run {
            let mut v = Vec::new();
            for fr in &few.runs {
                for zr in zero.runs.iter().filter(|z| run_matches(&fr.seeds, &z.seeds)) {
                    if let (Some(&f), Some(&z)) = (fr.scores.get(lang), zr.scores.get(lang)) {
                        v.push(improvement_delta(f, z)?);
                    }
                }
            }
            if v.is_empty() {
                return Err(Error::DegenerateInput(format!(
                    "no matching runs between {} and {} for {lang}",
                    few.method, zero.method
                )));
            }
            per_language.insert(lang.clone(), mean(&v));
            runs.insert(lang.clone(), v);
        } else {
            let d = improvement_delta(mean(&few.lang_values(lang)), mean(&zero.lang_values(lang)))?;
            per_language.insert(lang.clone(), d);
        }
    }
    let target_avg_pct = if per_run {
        mean(&runs.values().flatten().copied().collect::<Vec<_>>())
    } else {
        let f: Vec<f64> = langs.iter().map(|l| mean(&few.lang_values(l))).collect();
        let z: Vec<f64> = langs.iter().map(|l| mean(&zero.lang_values(l))).collect();
        improvement_delta(mean(&f), mean(&z))?
    };
    Ok(DeltaEntry {
        few_shot: few.method.clone(),
        zero_shot: zero.method.clone(),
        per_language,
        target_avg_pct,
        per_run: runs,
    })
}

/// Assemble tables, gaps, improvements and correlations. Pure in its inputs.
pub fn build_report(
    methods: &[MethodResults],
    covariates: &[CovariateTable],
    options: &ReportOptions,
) -> Result<Report> {
    let mut names = BTreeSet::new();
    for m in methods {
        if !names.insert(&m.method) {
            return Err(Error::schema("results", format!("duplicate method name {:?}", m.method)));
        }
    }
    let tables: Vec<ScoreTable> = methods.iter().map(score_table).collect();
    let mut notes: Vec<String> = tables
        .iter()
        .filter_map(|t| t.note.as_ref().map(|n| format!("{}: {n}", t.method)))
        .collect();
    let mut transfer_gaps = Vec::new();
    for m in methods {
        if let Some(g) = gap_entry(m, options.per_run)? {
            transfer_gaps.push(g);
        }
    }
    let mut improvements = Vec::new();
    let mut correlations = Vec::new();
    for few in methods {
        for zero in methods {
            if few.group != zero.group || !pairs_with(&few.mode, &zero.mode) {
                continue;
            }
            let delta = match delta_entry(few, zero, options.per_run) {
                Ok(d) => d,
                Err(e) => {
                    notes.push(format!("{} vs {}: {e}", few.method, zero.method));
                    continue;
                }
            };
            for cov in covariates {
                let (xs, langs): (Vec<f64>, Vec<String>) = if options.per_run {
                    delta
                        .per_run
                        .iter()
                        .flat_map(|(l, v)| v.iter().map(move |d| (*d, l.clone())))
                        .unzip()
                } else {
                    delta
                        .per_language
                        .iter()
                        .map(|(l, d)| (*d, l.clone()))
                        .unzip()
                };
                let ys = cov.require(&langs)?;
                let (result, error) = match spearman_with(
                    &xs,
                    &ys,
                    &options.key.child(format!("{}/{}/{}", few.method, zero.method, cov.name)),
                    options.permutations,
                ) {
                    Ok(c) => (Some(c), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                correlations.push(CorrelationEntry {
                    few_shot: few.method.clone(),
                    zero_shot: zero.method.clone(),
                    covariate: cov.name.clone(),
                    points: if options.per_run { "language-run" } else { "language" }.into(),
                    result,
                    error,
                });
            }
            improvements.push(delta);
        }
    }
    Ok(Report {
        schema_version: 1,
        per_run: options.per_run,
        tables,
        transfer_gaps,
        improvements,
        correlations,
        notes,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Write `report.json` and `tables/*.csv` under `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))?;
    let path = dir.join("report.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let with_std = report.tables.iter().flat_map(|t| &t.rows).any(|r| r.std.is_some());
    let mut header = vec!["method", "mode", "lang", "role", "n", "mean"];
    if with_std {
        header.push("std");
    }
    let mut rows = Vec::new();
    for t in &report.tables {
        for r in &t.rows {
            let role = if r.lang == t.source_lang { "source" } else { "target" };
            let mut row = vec![
                t.method.clone(),
                t.mode.clone(),
                r.lang.clone(),
                role.to_string(),
                r.n.to_string(),
                fmt(r.mean),
            ];
            if with_std {
                row.push(r.std.map(fmt).unwrap_or_default());
            }
            rows.push(row);
        }
        if let Some(avg) = t.target_avg {
            let mut row = vec![
                t.method.clone(),
                t.mode.clone(),
                "target_avg".into(),
                "target".into(),
                String::new(),
                fmt(avg),
            ];
            if with_std {
                row.push(String::new());
            }
            rows.push(row);
        }
    }
    write_csv(&tables.join("scores.csv"), &header, rows)?;

    let rows = report
        .transfer_gaps
        .iter()
        .flat_map(|g| {
            g.per_language
                .iter()
                .map(|(l, v)| vec![g.method.clone(), l.clone(), fmt(*v)])
                .chain(std::iter::once(vec![g.method.clone(), "mean".into(), fmt(g.mean_pct)]))
        })
        .collect();
    write_csv(&tables.join("transfer_gap.csv"), &["method", "lang", "gap_pct"], rows)?;

    let rows = report
        .improvements
        .iter()
        .flat_map(|d| {
            d.per_language
                .iter()
                .map(|(l, v)| vec![d.few_shot.clone(), d.zero_shot.clone(), l.clone(), fmt(*v)])
                .chain(std::iter::once(vec![
                    d.few_shot.clone(),
                    d.zero_shot.clone(),
                    "target_avg".into(),
                    fmt(d.target_avg_pct),
                ]))
        })
        .collect();
    write_csv(
        &tables.join("improvement.csv"),
        &["few_shot", "zero_shot", "lang", "delta_pct"],
        rows,
    )?;

    let rows = report
        .correlations
        .iter()
        .map(|c| {
            let (rho, p, n) = match &c.result {
                Some(r) => (fmt(r.rho), fmt(r.p_value), r.n.to_string()),
                None => Default::default(),
            };
            vec![
                c.few_shot.clone(),
                c.zero_shot.clone(),
                c.covariate.clone(),
                c.points.clone(),
                rho,
                p,
                n,
                c.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &tables.join("correlations.csv"),
        &["few_shot", "zero_shot", "covariate", "points", "rho", "p_value", "n", "error"],
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::RngRole;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn key() -> RngKey {
        RngKey::new("metrics", RngRole::Permutation, 0)
    }

    #[test]
    fn f1_examples() {
        let gold = vec![set(&["a", "b"]), set(&["a"])];
        let pred = vec![set(&["a"]), set(&["a", "c"])];
        let c = confusion(&gold, &pred).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_micro(&gold, &gold).unwrap(), 1.0);
        let disjoint = vec![set(&["z"]), set(&["y"])];
        assert_eq!(f1_micro(&gold, &disjoint).unwrap(), 0.0);
        assert!(matches!(f1_micro(&gold, &pred[..1]), Err(Error::LengthMismatch { .. })));
        assert_eq!(ConfusionCounts::default().f1(), 0.0);
    }

    #[test]
    fn gap_and_delta_arithmetic() {
        assert!((transfer_gap(&[80.0, 90.0], 100.0).unwrap() + 15.0).abs() < 1e-12);
        assert_eq!(transfer_gap(&[5.0, 5.0], 5.0).unwrap(), 0.0);
        assert!(matches!(transfer_gap(&[1.0], 0.0), Err(Error::ZeroSource(_))));
        assert_eq!(improvement_delta(3.0, 3.0).unwrap(), 0.0);
        assert!(matches!(improvement_delta(1.0, 0.0), Err(Error::ZeroBaseline(_))));
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = spearman_with(&x, &[2.0, 4.0, 8.0, 16.0, 32.0], &key(), 2000).unwrap();
        assert!((up.rho - 1.0).abs() < 1e-12);
        let down = spearman_with(&x, &[5.0, 4.0, 3.0, 2.0, 1.0], &key(), 2000).unwrap();
        assert!((down.rho + 1.0).abs() < 1e-12);
        // exact two-sided p for n = 5 is 2/120
        assert!((down.p_value - 2.0 / 120.0).abs() < 0.01);
        assert!(spearman(&x, &[1.0; 5], &key()).is_err());
        assert!(spearman(&x[..2], &x[..2], &key()).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    fn method(name: &str, mode: &str, runs: &[(u64, &[(&str, f64)])]) -> MethodResults {
        MethodResults {
            method: name.into(),
            mode: mode.into(),
            group: "g".into(),
            source_lang: "en".into(),
            runs: runs
                .iter()
                .map(|(seed, scores)| RunScores {
                    seeds: SeedTuple {
                        finetune: *seed,
                        shot_src: 0,
                        shot_tgt: Some(0),
                    },
                    scores: scores.iter().map(|(l, v)| (l.to_string(), *v)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn report_pairs_and_notes() {
        let ic = method("ic", "ic", &[(1, &[("en", 0.9), ("de", 0.8), ("fr", 0.6)])]);
        let src = method("src", "ic_src", &[(1, &[("en", 0.9), ("de", 0.4), ("fr", 0.5)])]);
        let opts = ReportOptions {
            per_run: false,
            permutations: 100,
            key: key(),
        };
        let r = build_report(&[ic.clone(), src.clone()], &[], &opts).unwrap();
        assert_eq!(r.improvements.len(), 1);
        let d = &r.improvements[0];
        assert!((d.per_language["de"] - 100.0).abs() < 1e-9);
        assert!((d.target_avg_pct - 100.0 * (0.7 / 0.45 - 1.0)).abs() < 1e-9);
        assert!(r.tables[0].rows.iter().all(|row| row.std.is_none()));
        assert!(r.notes.iter().any(|n| n.contains("single seed")));
        let cov = CovariateTable {
            name: "size".into(),
            values: [("de".to_string(), 1.0)].into_iter().collect(),
        };
        let err = build_report(&[ic, src], &[cov], &opts).unwrap_err();
        assert!(err.to_string().contains("fr"), "{err}");
    }

    #[test]
    fn report_files_are_reproducible() {
        let a = method("a", "ic", &[(1, &[("en", 0.9), ("de", 0.8)]), (2, &[("en", 0.8), ("de", 0.7)])]);
        let opts = ReportOptions {
            per_run: true,
            permutations: 10,
            key: key(),
        };
        let r = build_report(&[a], &[], &opts).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(&r, d1.path()).unwrap();
        write_report(&r, d2.path()).unwrap();
        for f in ["report.json", "tables/scores.csv", "tables/transfer_gap.csv"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
        let scores = std::fs::read_to_string(d1.path().join("tables/scores.csv")).unwrap();
        assert!(scores.starts_with("method,mode,lang,role,n,mean,std"));
    }
}
