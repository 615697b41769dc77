use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use autoseq::beamsearch::generate_all;
use autoseq::corpus::{load_dataset, sample_few_shot_with_labels, DataFormat, Example, FewShotSplit, TaskSpec};
use autoseq::finetune_rerank::evaluate_mapping;
use autoseq::lm::{Backend, ModelHandle, TabularModel, TinyModel};
use autoseq::persist;
use autoseq::pipeline::{run_baseline, run_pipeline, PipelineConfig, PipelineOutput, SeedPlan};
use autoseq::remote::{self, RemoteModel, Session};
use autoseq::rerank::{rerank_candidates, top_n_mappings};
use autoseq::scoring::LabelMapping;
use autoseq::synthetic::{self, SyntheticConfig};
use autoseq::templating::{builtin_template, Template};
use autoseq::Exec;
use serde_json::json;

use crate::config::{ModelSection, RunConfig};
use crate::{RunArgs, UsageError};

/// Config file (if any) with the flags applied on top.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &args.task {
        c.task.kind = t.parse().map_err(|e: autoseq::Error| UsageError(e.to_string()))?;
    }
    if let Some(d) = &args.data {
        c.task.data = Some(d.clone());
    }
    if let Some(s) = args.seed {
        c.search.seed = s;
    }
    if let Some(k) = args.k {
        c.search.k = k;
    }
    if let Some(b) = args.beam_width {
        c.search.beam_width = b;
    }
    if let Some(m) = args.max_len {
        c.search.max_len = m;
    }
    if args.autoword {
        c.search.max_len = 1;
    }
    if let Some(n) = args.n {
        c.search.n = n;
    }
    if let Some(b) = args.backend {
        c.generator.backend = b;
        c.classifier.backend = b;
    }
    if let Some(e) = &args.remote_endpoint {
        c.generator.endpoint = Some(e.clone());
        c.classifier.endpoint = Some(e.clone());
    }
    if let Some(p) = &args.generator {
        c.generator.path = Some(p.clone());
    }
    if let Some(p) = &args.classifier {
        c.classifier.path = Some(p.clone());
    }
    if let Some(s) = args.steps {
        c.finetune.steps = s;
    }
    if let Some(w) = args.workers {
        c.workers = w;
    }
    if let Some(o) = &args.out_dir {
        c.out_dir = Some(o.clone());
    }
    Ok(c)
}

/// Runs `f` on a pool of the configured size.
fn with_workers<T: Send>(workers: usize, f: impl FnOnce(Exec) -> Result<T> + Send) -> Result<T> {
    let exec = Exec::for_workers(workers);
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .context("building the worker pool")?;
        pool.install(|| f(exec))
    } else {
        f(exec)
    }
}

fn load_data(c: &RunConfig) -> Result<Vec<Example>> {
    let path = c.data()?;
    Ok(load_dataset(path, DataFormat::from_path(path)).map_err(|e| e.in_stage("load-data"))?)
}

fn task_spec(c: &RunConfig, data: &[Example]) -> Result<TaskSpec> {
    let t = &c.task;
    let spec = match &t.labels {
        Some(labels) => TaskSpec::new(t.kind, labels.clone(), t.metric),
        None => TaskSpec::from_examples(t.kind, data, t.metric),
    };
    let spec = match &t.positive {
        Some(p) => spec.and_then(|s| s.with_positive_label(p)),
        None => spec,
    };
    Ok(spec.map_err(|e| e.in_stage("task"))?)
}

fn template(c: &RunConfig) -> Result<Template> {
    match &c.task.template {
        Some(p) => Template::parse("custom", p).map_err(|e| UsageError(e.to_string()).into()),
        None => Ok(builtin_template(c.task.kind)),
    }
}

fn pipeline_config(c: &RunConfig, data: &[Example]) -> Result<PipelineConfig> {
    let mut p = PipelineConfig::new(task_spec(c, data)?, template(c)?);
    p.k = c.search.k;
    p.seed = c.search.seed;
    p.search = c.search.search_config();
    p.n = c.search.n;
    p.finetune = c.finetune.clone();
    Ok(p)
}

/// Remote sessions opened so far, so generator and classifier on one
/// endpoint share a connection.
#[derive(Default)]
struct Sessions(Vec<(String, Arc<Session>)>);

impl Sessions {
    fn get(&mut self, endpoint: &str) -> autoseq::Result<Arc<Session>> {
        if let Some((_, s)) = self.0.iter().find(|(e, _)| e == endpoint) {
            return Ok(s.clone());
        }
        let s = Arc::new(Session::connect(endpoint)?);
        self.0.push((endpoint.to_string(), s.clone()));
        Ok(s)
    }
}

fn load_model(section: &ModelSection, role: &str, stage: &'static str, sessions: &mut Sessions) -> Result<ModelHandle> {
    let path = || -> Result<&Path> {
        match &section.path {
            Some(p) => Ok(p),
            None => bail!(UsageError(format!(
                "{role} backend {} needs a model path",
                section.backend
            ))),
        }
    };
    let model = match section.backend {
        Backend::Tabular => TabularModel::load(path()?).map(ModelHandle::new),
        Backend::TinyNeural => TinyModel::load(path()?).map(ModelHandle::new),
        Backend::Remote => {
            let Some(endpoint) = &section.endpoint else {
                bail!(UsageError(format!("{role} backend remote needs --remote-endpoint")));
            };
            sessions.get(endpoint).and_then(RemoteModel::new).map(ModelHandle::new)
        }
    };
    Ok(model.map_err(|e| e.in_stage(stage))?)
}

fn prepare_out_dir(c: &RunConfig) -> Result<PathBuf> {
    let dir = c.out_dir()?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), c.to_toml()?).with_context(|| format!("writing {}", dir.display()))?;
    Ok(dir)
}

fn split(p: &PipelineConfig, data: &[Example]) -> Result<FewShotSplit> {
    let seeds = SeedPlan::from_master(p.seed);
    let r = p
        .validate()
        .and_then(|_| p.task.check_examples(data))
        .and_then(|_| sample_few_shot_with_labels(data, &p.task.labels, p.k, seeds.split));
    Ok(r.map_err(|e| e.in_stage("split"))?)
}

pub fn generate(args: &RunArgs) -> Result<()> {
    let c = resolve(args)?;
    let data = load_data(&c)?;
    let p = pipeline_config(&c, &data)?;
    let dir = prepare_out_dir(&c)?;
    let generator = load_model(&c.generator, "generator", "load-generator", &mut Sessions::default())?;
    let split = split(&p, &data)?;
    let cands = with_workers(c.workers, |exec| {
        Ok(generate_all(&generator, &p.template, &split, &p.search, exec).map_err(|e| e.in_stage("generate"))?)
    })?;
    let path = dir.join("candidates.jsonl");
    persist::candidates_to_jsonl(&path, &cands)?;
    for (class, list) in &cands {
        let best = list.first().map(|c| c.text.as_str()).unwrap_or("");
        println!("{class}\t{} candidates\tbest {best:?}", list.len());
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn rerank(args: &RunArgs, candidates: Option<&Path>) -> Result<()> {
    let c = resolve(args)?;
    let data = load_data(&c)?;
    let p = pipeline_config(&c, &data)?;
    let dir = prepare_out_dir(&c)?;
    let input = candidates
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("candidates.jsonl"));
    let cands = persist::candidates_from_jsonl(&input).map_err(|e| e.in_stage("load-candidates"))?;
    let generator = load_model(&c.generator, "generator", "load-generator", &mut Sessions::default())?;
    let split = split(&p, &data)?;
    let (ranked, top) = with_workers(c.workers, |exec| {
        let ranked =
            rerank_candidates(&generator, &p.template, &split, &cands, exec).map_err(|e| e.in_stage("rerank"))?;
        let top = top_n_mappings(&ranked, p.n).map_err(|e| e.in_stage("combine"))?;
        Ok((ranked, top))
    })?;
    persist::candidates_to_jsonl(&dir.join("reranked.jsonl"), &ranked)?;
    persist::mappings_to_jsonl(&dir.join("mappings.jsonl"), &top)?;
    for m in &top {
        println!("{:.6}\t{}", m.combo_score, serde_json::to_string(&m.mapping.texts())?);
    }
    Ok(())
}

fn write_outputs(dir: &Path, out: &PipelineOutput) -> Result<()> {
    persist::write_json(&dir.join("report.json"), &out.report)?;
    persist::write_json(&dir.join("timings.json"), &out.timings)?;
    if !out.candidates.is_empty() {
        persist::candidates_to_jsonl(&dir.join("candidates.jsonl"), &out.candidates)?;
        persist::candidates_to_jsonl(&dir.join("reranked.jsonl"), &out.reranked)?;
    }
    persist::mappings_to_jsonl(&dir.join("mappings.jsonl"), &out.mappings)?;
    persist::write_json(&dir.join("mapping.json"), &out.report.winner_row().mapping)?;
    let ckpt = dir.join("winner.ckpt.json");
    if let Err(e) = out.winner_model.save(&ckpt) {
        eprintln!("note: winner checkpoint not written: {e}");
    }
    Ok(())
}

pub fn search(args: &RunArgs, baseline: Option<&Path>) -> Result<()> {
    let c = resolve(args)?;
    let data = load_data(&c)?;
    let p = pipeline_config(&c, &data)?;
    let dir = prepare_out_dir(&c)?;
    let mut sessions = Sessions::default();
    let classifier = load_model(&c.classifier, "classifier", "load-classifier", &mut sessions)?;
    let mut run = json!({
        "data": c.data()?,
        "classifier": c.classifier,
        "workers": c.workers,
    });
    let mut out = match baseline {
        Some(path) => {
            let texts = persist::mapping_texts_from_json(path).map_err(|e| e.in_stage("load-mapping"))?;
            run["baseline_mapping"] = json!(path);
            with_workers(c.workers, |exec| {
                Ok(run_baseline(&p, &data, &classifier, &texts, exec)?)
            })?
        }
        None => {
            let generator = load_model(&c.generator, "generator", "load-generator", &mut sessions)?;
            run["generator"] = json!(c.generator);
            with_workers(c.workers, |exec| {
                Ok(run_pipeline(&p, &data, &generator, &classifier, exec)?)
            })?
        }
    };
    out.report.run = run;
    write_outputs(&dir, &out)?;
    let w = out.report.winner_row();
    println!("winner mapping {}", serde_json::to_string(&w.mapping)?);
    match w.dev_metric {
        Some(m) => println!("dev {} {m:.6}", p.task.metric.as_str()),
        None => println!("dev {} n/a", p.task.metric.as_str()),
    }
    println!("report {}", dir.join("report.json").display());
    Ok(())
}

pub fn eval(args: &RunArgs, mapping: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let mut c = resolve(args)?;
    if let Some(ck) = checkpoint {
        c.classifier.path = Some(ck.to_path_buf());
    }
    let data = load_data(&c)?;
    let task = task_spec(&c, &data)?;
    let template = template(&c)?;
    let mapping_path = match mapping {
        Some(p) => p.to_path_buf(),
        None => c.out_dir()?.join("mapping.json"),
    };
    let texts = persist::mapping_texts_from_json(&mapping_path).map_err(|e| e.in_stage("load-mapping"))?;
    let model = load_model(&c.classifier, "classifier", "load-classifier", &mut Sessions::default())?;
    let value = with_workers(c.workers, |exec| {
        let r = task
            .check_examples(&data)
            .and_then(|_| LabelMapping::from_texts(&task, &model, &texts))
            .and_then(|m| evaluate_mapping(&model, &template, &task, &m, &data, exec));
        Ok(r.map_err(|e| e.in_stage("eval"))?)
    })?;
    println!(
        "{}",
        json!({ "metric": task.metric.as_str(), "value": value, "examples": data.len() })
    );
    Ok(())
}

pub fn serve_check(endpoint: &str) -> Result<()> {
    let session = Session::connect(endpoint).map_err(|e| e.in_stage("connect"))?;
    let report = remote::serve_check(&session);
    let mut text = String::new();
    for check in &report.checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        writeln!(text, "{status} {} {}", check.name, check.detail)?;
    }
    print!("{text}");
    if !report.passed() {
        bail!(autoseq::Error::Protocol(format!("{endpoint} failed serve-check")));
    }
    Ok(())
}

pub fn serve(backend: Backend, model: &Path, listen: Option<&str>) -> Result<()> {
    let section = ModelSection {
        backend,
        path: Some(model.to_path_buf()),
        endpoint: None,
    };
    if backend == Backend::Remote {
        bail!(UsageError("serve needs a local backend".into()));
    }
    let model = load_model(&section, "served", "load-model", &mut Sessions::default())?;
    match listen {
        Some(addr) => {
            let listener =
                std::net::TcpListener::bind(addr).map_err(|e| autoseq::Error::Transport(format!("{addr}: {e}")))?;
            eprintln!("listening on {}", listener.local_addr()?);
            remote::serve_tcp(model, listener)?;
        }
        None => {
            let stdin = std::io::stdin().lock();
            remote::serve(model, stdin, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

pub fn synth(dir: &Path, seed: u64, per_class: Option<usize>, pretrain_steps: Option<usize>) -> Result<()> {
    let mut sc = SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    };
    if let Some(n) = per_class {
        sc.per_class = n;
    }
    if let Some(s) = pretrain_steps {
        sc.pretrain_steps = s;
    }
    let world = synthetic::build_world(&sc)?;
    let classifier = synthetic::pretrain_classifier(&world, &sc)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tsv = String::new();
    for ex in &world.data {
        let label = ex.label.as_deref().unwrap_or("");
        writeln!(tsv, "{}\t{label}", ex.fields.join("\t"))?;
    }
    fs::write(dir.join("data.tsv"), tsv).with_context(|| format!("writing {}", dir.display()))?;
    world.generator.write(&dir.join("generator.json"))?;
    ModelHandle::new(classifier).save(&dir.join("classifier.json"))?;

    let mut c = RunConfig {
        out_dir: Some("run".into()),
        ..RunConfig::default()
    };
    c.task.data = Some("data.tsv".into());
    c.task.labels = Some(world.task.labels.clone());
    c.generator.path = Some("generator.json".into());
    c.classifier.path = Some("classifier.json".into());
    c.search.seed = seed;
    fs::write(dir.join("autoseq.toml"), c.to_toml()?).with_context(|| format!("writing {}", dir.display()))?;
    println!("wrote {}", dir.display());
    Ok(())
}
