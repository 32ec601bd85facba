use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use icxlt_core::backend::{BackendConfig, RemoteConfig};
use icxlt_core::corpus::{examples_digest, load_dataset, Dataset};
use icxlt_core::metrics::{build_report, write_report, CovariateTable, ReportOptions, SeedTuple};
use icxlt_core::sampling::{sample_k_shot, RngKey, RngRole};
use icxlt_core::synthlang::{generate_language_family, SynthConfig};
use icxlt_core::toymodel::{ModelParams, TrainConfig, Vocab};
use icxlt_core::transfer::{
    adapt_gradient, build_vocab, evaluate_model, params_digest, run_experiment, run_training, AdaptationMode,
    ExperimentSpec, GradConfig, KeyUse, Regime, ResultsFile, RunKeys, RunOptions, TrainSummary, TrainedModel,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{
    AdaptArgs, AdaptModeArg, BackendFlags, Command, EvalArgs, EvalModeArg, RegimeArg, ReportArgs, RunArgs, SynthArgs,
    TrainArgs, TrainFlags, UsageError, ValidateArgs,
};

const MODEL_FILE: &str = "model.bin";
const VOCAB_FILE: &str = "vocab.json";
const CONFIG_FILE: &str = "config.json";

pub fn dispatch(command: Command) -> Result<Value> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => validate(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw)
        .map_err(|e| icxlt_core::Error::SchemaError {
            location: path.display().to_string(),
            message: e.to_string(),
        })
        .map_err(Into::into)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn synth(a: SynthArgs) -> Result<Value> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.train_size {
        cfg.train_size = n;
    }
    if let Some(n) = a.test_size {
        cfg.test_size = n;
    }
    if let Some(n) = a.dev_size {
        cfg.dev_size = n;
    }
    let key = RngKey::new(&a.experiment_id, RngRole::Synthesis, cfg.seed);
    let family = generate_language_family(&cfg, &key)?;
    let manifest = family.write(&a.out)?;
    // the overlap table doubles as a report covariate
    let mut csv = String::from("lang,value\n");
    for (lang, rho) in family.mapping.overlaps() {
        csv.push_str(&format!("{lang},{rho}\n"));
    }
    let overlap = a.out.join("overlap.csv");
    std::fs::write(&overlap, csv).with_context(|| format!("writing {}", overlap.display()))?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &json!({ "command": "synth", "config": cfg, "rng_keys": [KeyUse { purpose: "synthesis".into(), key }] }),
    )?;
    Ok(json!({
        "ok": true,
        "message": format!("wrote {} ({} languages)", manifest.display(), family.dataset.splits.len()),
        "manifest": manifest,
        "covariates": overlap,
        "languages": family.dataset.splits.keys().collect::<Vec<_>>(),
    }))
}

fn train_config(base: TrainConfig, f: &TrainFlags) -> Result<TrainConfig> {
    let mut c = match &f.train_config {
        Some(p) => read_json(p)?,
        None => base,
    };
    if let Some(v) = f.epochs {
        c.epochs = v;
    }
    if let Some(v) = f.lr {
        c.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = f.d_model {
        c.d_model = v;
    }
    if let Some(v) = f.d_ff {
        c.d_ff = v;
    }
    if let Some(v) = f.relexicalize {
        c.relexicalize = v;
    }
    if let Some(v) = f.alias_bank {
        c.alias_bank = v;
    }
    Ok(c)
}

/// Everything needed to reuse a model directory.
#[derive(Serialize, Deserialize)]
struct ModelInfo {
    command: String,
    spec: ExperimentSpec,
    spec_hash: String,
    seeds: SeedTuple,
    summary: TrainSummary,
    rng_keys: Vec<KeyUse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adaptation: Option<Value>,
}

fn save_model(dir: &Path, params: &ModelParams, vocab: &Vocab, info: &ModelInfo) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    params.save(&dir.join(MODEL_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    write_json(&dir.join(CONFIG_FILE), info)
}

fn load_model(dir: &Path) -> Result<(TrainedModel, Vocab, ModelInfo)> {
    let info: ModelInfo = read_json(&dir.join(CONFIG_FILE))?;
    let params = ModelParams::load(&dir.join(MODEL_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let model = TrainedModel {
        params,
        summary: info.summary.clone(),
    };
    Ok((model, vocab, info))
}

fn regime(r: RegimeArg, m: usize) -> Regime {
    match r {
        RegimeArg::Ict => Regime::Ict { m },
        RegimeArg::Pft => Regime::Pft,
    }
}

fn train(a: TrainArgs) -> Result<Value> {
    let regime = regime(a.regime, a.m);
    let mode = match regime {
        Regime::Ict { .. } => AdaptationMode::Ic { k_tgt: 1 },
        Regime::Pft => AdaptationMode::Zero,
    };
    let mut spec = ExperimentSpec::new(&a.experiment_id, absolute(&a.manifest)?, regime, mode);
    spec.k_src = a.k_src;
    spec.train = train_config(TrainConfig::default(), &a.train)?;
    spec.dev_selection = a.dev_selection;
    spec.allow_context_reuse = a.allow_context_reuse;
    spec.seeds.finetune = vec![a.seed];
    spec.seeds.shot_src = vec![a.shot_src_seed];
    spec.validate()?;
    let dataset = load_dataset(&spec.dataset)?;
    let vocab = build_vocab(&dataset, &spec.template, spec.train.alias_bank);
    let seeds = SeedTuple {
        finetune: a.seed,
        shot_src: a.shot_src_seed,
        shot_tgt: None,
    };
    let model = run_training(&spec, &dataset, &vocab, &seeds)?;
    let keys = RunKeys::new(&spec.experiment_id, &seeds);
    let info = ModelInfo {
        command: "train".into(),
        spec_hash: spec.hash(),
        spec,
        seeds,
        summary: model.summary.clone(),
        rng_keys: keys.uses(),
        adaptation: None,
    };
    save_model(&a.out, &model.params, &vocab, &info)?;
    Ok(json!({
        "ok": true,
        "message": format!(
            "trained {} on {} examples, final loss {:.4}, model {}",
            info.spec.regime.tag(),
            model.summary.pool_size,
            model.summary.final_loss,
            a.out.display()
        ),
        "model_dir": a.out,
        "summary": model.summary,
    }))
}

fn adapt(a: AdaptArgs) -> Result<Value> {
    let (model, vocab, info) = load_model(&a.model)?;
    let defaults = GradConfig::defaults_for(a.k_tgt);
    let config = GradConfig {
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        schedule: defaults.schedule,
    };
    let mode = match a.mode {
        AdaptModeArg::Grad => AdaptationMode::Grad {
            k_tgt: a.k_tgt,
            config: Some(config),
        },
        AdaptModeArg::Macro => AdaptationMode::GradMacro {
            k_tgt: a.k_tgt,
            beta: a.beta,
            config: Some(config),
        },
    };
    let mut spec = info.spec;
    spec.adaptation = mode.clone();
    spec.seeds.shot_tgt = vec![a.shot_seed];
    spec.validate()?;
    let dataset = load_dataset(spec.resolve(&spec.dataset))?;
    let labels = dataset.label_set();
    let seeds = SeedTuple {
        shot_tgt: Some(a.shot_seed),
        ..info.seeds
    };
    // the same keys `run` uses for this language
    let keys = RunKeys::new(&spec.experiment_id, &seeds);
    let shot_key = keys.shot_tgt.clone().expect("shot key set");
    let target = sample_k_shot(dataset.split(&a.lang)?, labels, a.k_tgt, &shot_key.child(&a.lang))?;
    let source = match a.mode {
        AdaptModeArg::Macro => Some(sample_k_shot(dataset.source(), labels, a.k_tgt, &shot_key.child("macro-source"))?),
        AdaptModeArg::Grad => None,
    };
    let key = keys.adaptation.clone().expect("adaptation key set").child(&a.lang);
    let params = adapt_gradient(&model.params, &vocab, &target, source.as_ref(), &mode, &spec.template, &key)?;
    let summary = TrainSummary {
        model_sha256: params_digest(&params),
        ..model.summary
    };
    let info = ModelInfo {
        command: "adapt".into(),
        spec_hash: spec.hash(),
        spec,
        seeds,
        summary,
        rng_keys: keys.uses(),
        adaptation: Some(json!({
            "lang": a.lang,
            "mode": mode,
            "target_shots": examples_digest(&target.examples),
            "source_shots": source.as_ref().map(|s| examples_digest(&s.examples)),
            "base_model": info.summary.model_sha256,
        })),
    };
    save_model(&a.out, &params, &vocab, &info)?;
    Ok(json!({
        "ok": true,
        "message": format!("adapted on {} {} shots, model {}", target.len(), a.lang, a.out.display()),
        "model_dir": a.out,
        "model_sha256": info.summary.model_sha256,
    }))
}

fn remote_config(flags: &BackendFlags) -> Result<Option<RemoteConfig>> {
    let mut cfg = match &flags.backend_config {
        Some(p) => Some(read_json::<RemoteConfig>(p)?),
        None => None,
    };
    if let Some(url) = &flags.backend_url {
        cfg.get_or_insert_with(RemoteConfig::default).base_url = url.clone();
    }
    if let (Some(c), Some(w)) = (cfg.as_mut(), flags.workers) {
        c.workers = w;
    }
    Ok(cfg)
}

fn results_summary(r: &ResultsFile, output: &Path) -> Value {
    let table = icxlt_core::metrics::score_table(&r.to_method_results());
    let mut lines = vec![format!("{} ({} runs) -> {}", r.method, r.runs.len(), output.display())];
    for row in &table.rows {
        lines.push(format!("  {:<8} F1 {:.4}", row.lang, row.mean));
    }
    json!({
        "ok": true,
        "message": lines.join("\n"),
        "output": output,
        "spec_hash": r.spec_hash,
        "method": r.method,
        "runs": r.runs.len(),
        "scores": table.rows,
    })
}

/// Resolved configuration stored next to a results file.
fn write_resolved(output: &Path, command: &str, spec: &ExperimentSpec) -> Result<()> {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    let keys: Vec<Value> = spec
        .planned_runs()
        .iter()
        .map(|s| json!({ "run_id": icxlt_core::transfer::run_id(s), "keys": RunKeys::new(&spec.experiment_id, s).uses() }))
        .collect();
    write_json(
        &output.with_file_name(format!("{stem}.config.json")),
        &json!({ "command": command, "spec": spec, "spec_hash": spec.hash(), "rng_keys": keys }),
    )
}

fn eval(a: EvalArgs) -> Result<Value> {
    let mode = match a.mode {
        EvalModeArg::Zero => AdaptationMode::Zero,
        EvalModeArg::Ic => AdaptationMode::Ic { k_tgt: a.k_tgt.unwrap_or(1) },
        EvalModeArg::IcSrc => AdaptationMode::IcSrc { k_tgt: a.k_tgt.unwrap_or(1) },
        EvalModeArg::Raw1s => AdaptationMode::Raw1s { k_tgt: a.k_tgt.unwrap_or(1) },
    };
    if a.mode == EvalModeArg::Zero && a.k_tgt.is_some_and(|k| k > 0) {
        return Err(usage("zero-shot evaluation takes no target shots"));
    }
    let remote = remote_config(&a.backend)?;
    let loaded = match &a.model {
        Some(dir) => Some(load_model(dir)?),
        None => None,
    };
    let mut spec = match (&loaded, &a.manifest) {
        (Some((_, _, info)), manifest) => {
            let mut s = info.spec.clone();
            if let Some(m) = manifest {
                s.dataset = absolute(m)?;
            }
            s.seeds.finetune = vec![info.seeds.finetune];
            s.seeds.shot_src = vec![info.seeds.shot_src];
            s
        }
        (None, Some(m)) => {
            if remote.is_none() {
                return Err(usage("eval without --model needs a remote backend (--backend-url or --backend-config)"));
            }
            ExperimentSpec::new("icxlt", absolute(m)?, regime(a.regime, a.m), mode.clone())
        }
        (None, None) => return Err(usage("eval needs --model or --manifest")),
    };
    spec.adaptation = mode;
    spec.label = None;
    spec.cache_dir = None;
    spec.seeds.shot_tgt = a.shot_seeds.clone();
    spec.target_languages = a.langs.clone();
    spec.output = absolute(&a.out)?;
    spec.base_dir = PathBuf::new();
    if let Some(id) = &a.experiment_id {
        spec.experiment_id = id.clone();
    }
    if let Some(t) = a.max_new_tokens {
        spec.max_new_tokens = Some(t);
    }
    if let Some(t) = a.failure_threshold {
        spec.failure_threshold = t;
    }
    if let Some(w) = a.backend.workers {
        spec.workers = Some(w);
    }
    if let Some(r) = remote {
        spec.backend = BackendConfig::Remote(r);
    }
    write_resolved(&spec.output, "eval", &spec)?;
    let results = match (loaded, spec.backend.is_remote()) {
        (Some((model, vocab, _)), false) => evaluate_model(&spec, &model, vocab, RunOptions::default())?,
        _ => run_experiment(&spec, RunOptions::default())?,
    };
    Ok(results_summary(&results, &spec.output))
}

fn run(a: RunArgs) -> Result<Value> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(id) = a.experiment_id {
        spec.experiment_id = id;
    }
    if let Some(k) = a.k_src {
        spec.k_src = k;
    }
    if let Some(m) = a.m {
        match &mut spec.regime {
            Regime::Ict { m: cur } => *cur = m,
            Regime::Pft => return Err(usage("--m only applies to the ict regime")),
        }
    }
    if let Some(k) = a.k_tgt {
        match &mut spec.adaptation {
            AdaptationMode::Zero => return Err(usage("--k-tgt does not apply to zero-shot specs")),
            AdaptationMode::Grad { k_tgt, .. }
            | AdaptationMode::GradMacro { k_tgt, .. }
            | AdaptationMode::Ic { k_tgt }
            | AdaptationMode::IcSrc { k_tgt }
            | AdaptationMode::Raw1s { k_tgt } => *k_tgt = k,
        }
    }
    if let Some(s) = a.finetune_seeds {
        spec.seeds.finetune = s;
    }
    if let Some(s) = a.shot_src_seeds {
        spec.seeds.shot_src = s;
    }
    if let Some(s) = a.shot_tgt_seeds {
        spec.seeds.shot_tgt = s;
    }
    if let Some(l) = a.langs {
        spec.target_languages = Some(l);
    }
    // paths given on the command line are relative to the working directory
    if let Some(o) = a.output {
        spec.output = absolute(&o)?;
    }
    if let Some(c) = a.cache_dir {
        spec.cache_dir = Some(absolute(&c)?);
    }
    spec.train = train_config(spec.train.clone(), &a.train)?;
    if let Some(w) = a.backend.workers {
        spec.workers = Some(w);
    }
    if let Some(mut r) = remote_config(&a.backend)? {
        if a.backend.backend_url.is_none() && a.backend.backend_config.is_none() {
            unreachable!("remote config only built from backend flags");
        }
        if let (BackendConfig::Remote(cur), None) = (&spec.backend, &a.backend.backend_config) {
            // --backend-url alone keeps the rest of the remote settings from its spec file
            let url = r.base_url.clone();
            r = RemoteConfig { base_url: url, ..cur.clone() };
            if let Some(w) = a.backend.workers {
                r.workers = w;
            }
        }
        spec.backend = BackendConfig::Remote(r);
    }
    spec.validate()?;
    let output = spec.output_path();
    write_resolved(&output, "run", &spec)?;
    let results = run_experiment(&spec, RunOptions { resume: a.resume })?;
    Ok(results_summary(&results, &output))
}

fn report(a: ReportArgs) -> Result<Value> {
    let methods = a
        .results
        .iter()
        .map(|p| Ok(ResultsFile::read(p)?.to_method_results()))
        .collect::<Result<Vec<_>>>()?;
    let covariates = a
        .covariate
        .iter()
        .map(|c| {
            let (name, path) = match c.split_once('=') {
                Some((n, p)) if !n.is_empty() => (Some(n), p),
                _ => (None, c.as_str()),
            };
            let mut t = CovariateTable::read_csv(Path::new(path))?;
            if let Some(n) = name {
                t.name = n.to_string();
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = ReportOptions {
        per_run: a.per_run,
        permutations: a.permutations,
        key: RngKey::new("report", RngRole::Permutation, a.seed),
    };
    let report = build_report(&methods, &covariates, &opts)?;
    write_report(&report, &a.out)?;
    let mut lines = vec![format!("report written to {}", a.out.display())];
    for g in &report.transfer_gaps {
        lines.push(format!("  gap {:<28} {:+.2}%", g.method, g.mean_pct));
    }
    for d in &report.improvements {
        lines.push(format!("  delta {} vs {}: {:+.2}%", d.few_shot, d.zero_shot, d.target_avg_pct));
    }
    for c in &report.correlations {
        match &c.result {
            Some(r) => lines.push(format!(
                "  spearman({} vs {}, {}) rho {:.3} p {:.4} (n {})",
                c.few_shot, c.zero_shot, c.covariate, r.rho, r.p_value, r.n
            )),
            None => lines.push(format!(
                "  spearman({} vs {}, {}): {}",
                c.few_shot,
                c.zero_shot,
                c.covariate,
                c.error.as_deref().unwrap_or("not computed")
            )),
        }
    }
    for n in &report.notes {
        lines.push(format!("  note: {n}"));
    }
    Ok(json!({
        "ok": true,
        "message": lines.join("\n"),
        "out": a.out,
        "report": report,
    }))
}

fn describe(d: &Dataset) -> Value {
    let splits: serde_json::Map<String, Value> = d
        .splits
        .iter()
        .map(|(l, s)| {
            (
                l.clone(),
                json!({ "train": s.train.len(), "test": s.test.len(), "dev": s.dev.as_ref().map(Vec::len) }),
            )
        })
        .collect();
    json!({ "name": d.name, "source_lang": d.source_lang, "labels": d.label_set(), "splits": splits })
}

fn validate(a: ValidateArgs) -> Result<Value> {
    let mut out = serde_json::Map::new();
    let mut lines = Vec::new();
    if let Some(m) = &a.manifest {
        let d = load_dataset(m)?;
        lines.push(format!(
            "{}: ok, {} languages, {} labels, source {}",
            m.display(),
            d.splits.len(),
            d.num_labels(),
            d.source_lang
        ));
        out.insert("dataset".into(), describe(&d));
    }
    if let Some(p) = &a.spec {
        let spec = ExperimentSpec::load(p)?;
        spec.validate()?;
        let d = load_dataset(spec.resolve(&spec.dataset))?;
        if let Some(langs) = &spec.target_languages {
            for l in langs {
                d.split(l)?;
            }
        }
        lines.push(format!(
            "{}: ok, method {}, {} planned runs, hash {}",
            p.display(),
            spec.method_name(),
            spec.planned_runs().len(),
            spec.hash()
        ));
        out.insert(
            "spec".into(),
            json!({ "method": spec.method_name(), "planned_runs": spec.planned_runs().len(), "spec_hash": spec.hash() }),
        );
    }
    out.insert("ok".into(), Value::Bool(true));
    out.insert("message".into(), Value::String(lines.join("\n")));
    Ok(Value::Object(out))
}
