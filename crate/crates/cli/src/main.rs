mod config;
mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use otgnet::diff::ParamStore;
use otgnet::graph::{ClassId, Dataset, NodeSplit, SplitKind};
use otgnet::metrics::AccuracyMatrix;
use otgnet::model::Model;
use otgnet::synth::{generate, stats};
use otgnet::train::{evaluate, select_class, ClassSelection, Trainer, TriadMemory};
use otgnet::triad::{closed_count_bound, enumerate_triads, Triad};
use otgnet::{Error, Result};
use serde::Serialize;

use config::FileConfig;
use output::{dataset_hash, Manifest, OutDir};

#[derive(Parser)]
#[command(
    name = "otgnet",
    version,
    about = "Class-incremental learning on open temporal graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [gen] section.
    Gen(Overrides),
    /// Train every task in order and write checkpoints and metrics.
    Train(Overrides),
    /// Re-evaluate the per-stage checkpoints of a training run.
    Eval(WithCkpt),
    /// Re-run triad selection from the per-stage checkpoints.
    SelectTriads(WithCkpt),
    /// Enumerate triads per class, or summarize a memory file.
    InspectTriads(Inspect),
    /// Dump final-model embeddings of every node.
    ExportEmbeddings(WithCkpt),
    /// Train one named ablation with everything else fixed.
    Ablate(Overrides),
}

#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory, overriding [data] dir.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of full, no-ib, no-triad, random, no-diversity, no-pattern.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct WithCkpt {
    #[command(flatten)]
    common: Overrides,
    /// Output directory of a train or ablate run.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct Inspect {
    #[command(flatten)]
    common: Overrides,
    /// Summarize this memory.json instead of enumerating.
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Only this class.
    #[arg(long)]
    class: Option<ClassId>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("OTG_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("otgnet: error[config]: OTG_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("otgnet: error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(o) => cmd_gen(&o),
        Command::Train(o) => cmd_train(&o, "train"),
        Command::Ablate(o) => {
            if o.variant.is_none() {
                return Err(Error::Config("ablate needs --variant".into()));
            }
            cmd_train(&o, "ablate")
        }
        Command::Eval(w) => cmd_eval(&w),
        Command::SelectTriads(w) => cmd_select(&w),
        Command::InspectTriads(i) => cmd_inspect(&i),
        Command::ExportEmbeddings(w) => cmd_export(&w),
    }
}

fn load_config(o: &Overrides) -> Result<FileConfig> {
    let mut cfg = FileConfig::load(o.config.as_deref())?;
    cfg.apply(o)?;
    Ok(cfg)
}

fn out_dir(o: &Overrides) -> Result<OutDir> {
    let p = o
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    OutDir::new(p)
}

fn data_hash(cfg: &FileConfig) -> Option<String> {
    cfg.data.dir.as_deref().and_then(|d| dataset_hash(d).ok())
}

fn cmd_gen(o: &Overrides) -> Result<()> {
    let cfg = load_config(o)?;
    let mut out = out_dir(o)?;
    let started = Instant::now();
    let data = generate(&cfg.gen)?;
    out.write("nodes.csv", otgnet::graph::nodes_csv(&data.graph).as_bytes())?;
    out.write("events.csv", otgnet::graph::events_csv(&data.graph).as_bytes())?;
    let mut tasks = serde_json::to_string_pretty(&data.tasks).expect("tasks serialize");
    tasks.push('\n');
    out.write("tasks.json", tasks.as_bytes())?;
    let st = stats(&data);
    out.write_json("stats.json", &st)?;
    println!("{}", serde_json::to_string(&st).expect("stats serialize"));
    let mut m = Manifest::new("gen", &cfg.gen, cfg.gen.seed);
    m.dataset_hash = Some(dataset_hash(out.path())?);
    m.stage_seconds = vec![started.elapsed().as_secs_f64()];
    out.finish(m)
}

fn cmd_train(o: &Overrides, command: &str) -> Result<()> {
    let cfg = load_config(o)?;
    let data = cfg.dataset()?;
    let split = cfg.split(&data)?;
    let mut out = out_dir(o)?;
    out.write("config.toml", cfg.to_toml().as_bytes())?;
    let mut trainer = Trainer::new(&data, &split, cfg.model.clone(), cfg.train.clone())?;
    let mut seconds = Vec::new();
    while trainer.stage() < data.tasks.len() {
        let started = Instant::now();
        trainer.train_stage()?;
        seconds.push(started.elapsed().as_secs_f64());
        let s = trainer.stage();
        let ck = trainer.checkpoint();
        out.write(&format!("stage_{s}/model.ckpt"), ck.store.to_json().as_bytes())?;
        out.write(&format!("stage_{s}/memory.json"), ck.memory.to_json().as_bytes())?;
        out.write_json(&format!("stage_{s}/rng_state.json"), &ck.rng)?;
        log::info!("stage {s} finished in {:.1}s", seconds[s - 1]);
    }
    let ck = trainer.checkpoint();
    out.write("model.ckpt", ck.store.to_json().as_bytes())?;
    out.write("memory.json", ck.memory.to_json().as_bytes())?;
    out.write_json("rng_state.json", &ck.rng)?;
    out.write_json("train_log.json", &trainer.logs)?;
    let report = trainer.accuracy.report();
    out.write("metrics.json", (report.to_json() + "\n").as_bytes())?;
    out.write("metrics.csv", report.to_csv().as_bytes())?;
    println!(
        "AP {:.4} AF {}",
        report.final_ap.unwrap_or(0.0),
        report.final_af.map_or("-".into(), |v| format!("{v:.4}"))
    );
    let mut m = Manifest::new(command, &cfg, cfg.train.seed);
    m.dataset_hash = data_hash(&cfg);
    m.variant = o.variant.clone();
    m.stage_seconds = seconds;
    out.finish(m)
}

/// Rebuilds the model of a run from a checkpoint file.
fn load_model(cfg: &FileConfig, data: &Dataset, path: &Path) -> Result<Model> {
    let mut model = Model::new(
        cfg.model.clone(),
        data.graph.feature_dim(),
        data.num_classes(),
        cfg.train.seed,
    )?;
    let store = ParamStore::load(path)?;
    model.store.copy_from(&store)?;
    Ok(model)
}

/// The run's own config.toml, with command-line overrides on top.
fn run_config(w: &WithCkpt) -> Result<FileConfig> {
    let mut o = w.common.clone();
    if o.config.is_none() {
        o.config = Some(w.ckpt.join("config.toml"));
    }
    load_config(&o)
}

fn gate<'a>(cfg: &FileConfig, split: &'a NodeSplit) -> otgnet::model::GateMode<'a> {
    if cfg.train.ib {
        otgnet::model::GateMode::MajorityProxy(split)
    } else {
        otgnet::model::GateMode::Off
    }
}

fn cmd_eval(w: &WithCkpt) -> Result<()> {
    let cfg = run_config(w)?;
    let data = cfg.dataset()?;
    let split = cfg.split(&data)?;
    let mut out = out_dir(&w.common)?;
    let mut acc = AccuracyMatrix::new();
    let mut seconds = Vec::new();
    for j in 0..data.tasks.len() {
        let started = Instant::now();
        let model = load_model(&cfg, &data, &w.ckpt.join(format!("stage_{}/model.ckpt", j + 1)))?;
        acc.push(evaluate(&model, &data, &split, j, gate(&cfg, &split), SplitKind::Test)?)?;
        seconds.push(started.elapsed().as_secs_f64());
    }
    let report = acc.report();
    out.write("metrics.json", (report.to_json() + "\n").as_bytes())?;
    out.write("metrics.csv", report.to_csv().as_bytes())?;
    let mut m = Manifest::new("eval", &cfg, cfg.train.seed);
    m.dataset_hash = data_hash(&cfg);
    m.stage_seconds = seconds;
    out.finish(m)
}

fn cmd_select(w: &WithCkpt) -> Result<()> {
    let cfg = run_config(w)?;
    let data = cfg.dataset()?;
    let split = cfg.split(&data)?;
    let mut out = out_dir(&w.common)?;
    let mut memory = TriadMemory::default();
    let mut summaries: Vec<ClassSelection> = Vec::new();
    let mut seconds = Vec::new();
    for j in 0..data.tasks.len() {
        let model = load_model(&cfg, &data, &w.ckpt.join(format!("stage_{}/model.ckpt", j + 1)))?;
        let mut secs = 0.0;
        if cfg.train.m > 0 {
            for &c in &data.tasks[j].classes {
                let r = select_class(&model, &data, &split, &cfg.train, j, c)?;
                memory.triads.extend(r.triads);
                summaries.push(r.summary);
                secs += r.seconds;
            }
        }
        seconds.push(secs);
    }
    out.write("memory.json", memory.to_json().as_bytes())?;
    out.write_json("selection.json", &summaries)?;
    let mut m = Manifest::new("select-triads", &cfg, cfg.train.seed);
    m.dataset_hash = data_hash(&cfg);
    m.stage_seconds = seconds;
    out.finish(m)
}

#[derive(Serialize)]
struct ClassTriads {
    class: ClassId,
    closed: usize,
    open: usize,
    closed_bound: usize,
}

#[derive(Serialize)]
struct MemorySummary {
    class: ClassId,
    closed: usize,
    open: usize,
    min_r: f64,
    max_r: f64,
}

fn cmd_inspect(i: &Inspect) -> Result<()> {
    let cfg = load_config(&i.common)?;
    let mut out = out_dir(&i.common)?;
    if let Some(path) = &i.memory {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let memory = TriadMemory::from_json(&text)?;
        let mut by_class: BTreeMap<ClassId, MemorySummary> = BTreeMap::new();
        for t in &memory.triads {
            if i.class.is_some_and(|c| c != t.class) {
                continue;
            }
            let e = by_class.entry(t.class).or_insert(MemorySummary {
                class: t.class,
                closed: 0,
                open: 0,
                min_r: f64::INFINITY,
                max_r: f64::NEG_INFINITY,
            });
            match t.kind {
                otgnet::triad::TriadKind::Closed => e.closed += 1,
                otgnet::triad::TriadKind::Open => e.open += 1,
            }
            e.min_r = e.min_r.min(t.r);
            e.max_r = e.max_r.max(t.r);
        }
        let rows: Vec<MemorySummary> = by_class.into_values().collect();
        for r in &rows {
            println!(
                "class {}: {} closed, {} open, R in [{}, {}]",
                r.class, r.closed, r.open, r.min_r, r.max_r
            );
        }
        out.write_json("memory_summary.json", &rows)?;
        return out.finish(Manifest::new("inspect-triads", &cfg, cfg.train.seed));
    }
    let data = cfg.dataset()?;
    let classes: Vec<ClassId> = match i.class {
        Some(c) => vec![c],
        None => {
            let mut v: Vec<ClassId> = data.tasks.iter().flat_map(|t| t.classes.clone()).collect();
            v.sort_unstable();
            v
        }
    };
    let mut rows = Vec::new();
    let mut all: Vec<Triad> = Vec::new();
    for c in classes {
        let t = enumerate_triads(&data.graph, c, |_| true, f64::INFINITY);
        let bound = closed_count_bound(&data.graph, c, |_| true, f64::INFINITY);
        println!(
            "class {c}: {} closed (bound {bound}), {} open",
            t.closed.len(),
            t.open.len()
        );
        rows.push(ClassTriads {
            class: c,
            closed: t.closed.len(),
            open: t.open.len(),
            closed_bound: bound,
        });
        all.extend(t.closed);
        all.extend(t.open);
    }
    out.write_json("triad_counts.json", &rows)?;
    out.write_json("triads.json", &all)?;
    let mut m = Manifest::new("inspect-triads", &cfg, cfg.train.seed);
    m.dataset_hash = data_hash(&cfg);
    out.finish(m)
}

fn cmd_export(w: &WithCkpt) -> Result<()> {
    let cfg = run_config(w)?;
    let data = cfg.dataset()?;
    let split = cfg.split(&data)?;
    let mut out = out_dir(&w.common)?;
    let model = load_model(&cfg, &data, &w.ckpt.join("model.ckpt"))?;
    let t = data.tasks.last().map_or(0.0, |t| t.t_end);
    let queries: Vec<(usize, f64)> = (0..data.graph.node_count()).map(|i| (i, t)).collect();
    let emb = model.embed_values(&data.graph, &queries, gate(&cfg, &split))?;
    let mut csv = String::from("node_id,task_id");
    for k in 0..emb.cols() {
        csv.push_str(&format!(",e_{k}"));
    }
    csv.push('\n');
    for i in 0..emb.rows() {
        csv.push_str(&format!("{i},{}", data.tasks[data.task_of_node(i)].task_id));
        for v in emb.row_slice(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    out.write("embeddings.csv", csv.as_bytes())?;
    let mut m = Manifest::new("export-embeddings", &cfg, cfg.train.seed);
    m.dataset_hash = data_hash(&cfg);
    out.finish(m)
}
