//! `pointcot` command-line driver.
//!
//! Every subcommand reads an optional `key = value` config file; flags given
//! on the command line win over it. Failures print one JSON object on stderr
//! and exit nonzero. Set `POINTCOT_LOG=quiet` to silence progress lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pointcot::datagen::{generate_corpus, read_corpus, write_corpus, CorpusConfig, Split};
use pointcot::encoders::render_splat_views;
use pointcot::geometry::{normalize_to_unit_sphere, read_cloud};
use pointcot::gradsuite::{run_suite, Group};
use pointcot::model::{Model, ReasoningMode};
use pointcot::numerics::{GradCheckOptions, Rng};
use pointcot::reasoner::Vocab;
use pointcot::train::{committed_assertions, evaluate, prepare_split, train_stage, RunConfig};

#[derive(Parser)]
#[command(name = "pointcot", version, about = "Look-Think-Answer reasoning over point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic corpus, clouds, views and split manifest.
    Generate(Common),
    /// Run one training stage and write a checkpoint plus a JSONL log.
    Train(Common),
    /// Decode a split and write an EvalReport.
    Eval(Common),
    /// Answer one question about one point cloud.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Point cloud (.pts or .json).
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        question: String,
    },
    /// Finite-difference check of every differentiable module group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Micro-instances per group.
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    Implicit,
    Explicit,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.stage {
            cfg.stage = v;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Direct => ReasoningMode::Direct,
                ModeArg::Implicit => ReasoningMode::Implicit,
                ModeArg::Explicit => ReasoningMode::Explicit,
            };
        }
        if let Some(v) = self.objects {
            cfg.objects = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(s) = self.split {
            cfg.split = match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn quiet() -> bool {
    std::env::var("POINTCOT_LOG").is_ok_and(|v| v == "quiet")
}

macro_rules! progress {
    ($($t:tt)*) => {
        if !quiet() {
            eprintln!($($t)*);
        }
    };
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"))
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = checkpoint_path(cfg);
    Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    // For generate, --out names the corpus directory.
    let dir = if common.out.is_some() { cfg.out.clone() } else { cfg.corpus.clone() };
    let t = Instant::now();
    let corpus = generate_corpus(&CorpusConfig {
        objects: cfg.objects,
        seed: cfg.seed,
        n_points: cfg.n_points,
        ..CorpusConfig::default()
    })?;
    create_dir(&dir)?;
    write_corpus(&dir, &corpus, &pointcot::datagen::default_rig())?;
    let mut per_level = [0usize; 3];
    for r in &corpus.records {
        per_level[usize::from(r.level) - 1] += 1;
    }
    let m = &corpus.manifest;
    let summary = json!({
        "dir": dir,
        "objects": corpus.metas.len(),
        "records": corpus.records.len(),
        "records_per_level": {"1": per_level[0], "2": per_level[1], "3": per_level[2]},
        "split_objects": {"train": m.train.len(), "val": m.val.len(), "test": m.test.len()},
        "seconds": t.elapsed().as_secs_f64(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let mut model = match &cfg.checkpoint {
        Some(_) => load_model(&cfg)?,
        None => {
            if cfg.stage == 2 {
                progress!("warning: stage 2 without --checkpoint starts from a fresh model");
            }
            Model::new(cfg.model(), Vocab::standard())?
        }
    };
    let corpus = read_corpus(&cfg.corpus).with_context(|| format!("reading corpus {}", cfg.corpus.display()))?;
    let data = prepare_split(&model, &corpus, Split::Train, Some(&cfg.corpus))?;
    create_dir(&cfg.out)?;
    fs::write(cfg.out.join("run.cfg"), cfg.to_text())?;
    let log_path = cfg.out.join(format!("metrics_stage{}.jsonl", cfg.stage));
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut opt = cfg.optimizer();
    let mut rng = Rng::new(cfg.seed).fork(u64::from(cfg.stage));
    let loss = cfg.loss();
    let t = Instant::now();
    let mut io_err = None;
    let mut last = None;
    train_stage(&mut model, &data, cfg.mode, &loss, &mut opt, cfg.steps, cfg.batch_size, &mut rng, &mut |m| {
        let line = json!({"mode": cfg.mode.name(), "metrics": m});
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
        if m.step % 100 == 0 {
            progress!("step {:>5} total {:.4} gen {:.4} pred {:.4}{}", m.step, m.loss_total, m.loss_gen, m.loss_pred, if m.pred_detached { " (detached)" } else { "" });
        }
        last = Some(m.clone());
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics log");
    }
    log.flush()?;
    let ckpt = cfg.out.join("model.ckpt");
    model.save(&ckpt)?;
    println!(
        "{}",
        json!({"checkpoint": ckpt, "log": log_path, "steps": cfg.steps, "stage": cfg.stage, "mode": cfg.mode.name(), "seconds": t.elapsed().as_secs_f64(), "last": last})
    );
    Ok(())
}

fn cmd_eval(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let model = load_model(&cfg)?;
    let corpus = read_corpus(&cfg.corpus).with_context(|| format!("reading corpus {}", cfg.corpus.display()))?;
    let data = prepare_split(&model, &corpus, cfg.split, Some(&cfg.corpus))?;
    let (report, preds) = evaluate(&model, &data, cfg.mode, cfg.split, cfg.max_decode)?;
    create_dir(&cfg.out)?;
    let stem = format!("eval_{}_{}", cfg.split.name(), cfg.mode.name());
    fs::write(cfg.out.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
    fs::write(cfg.out.join(format!("{stem}.txt")), report.to_table())?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    fs::write(cfg.out.join(format!("{stem}_predictions.jsonl")), lines)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_infer(common: &Common, cloud: &Path, question: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let model = load_model(&cfg)?;
    let raw = read_cloud(cloud)?;
    let cloud = normalize_to_unit_sphere(&raw.object_id, &raw.points)?;
    let views = render_splat_views(&cloud, &model.rig);
    let obj = model.prepare(&cloud, &views)?;
    let q = model.vocab.tokenize(question);
    let trace = model.decode(&obj, &q, cfg.mode, cfg.max_decode)?;
    let rationale = model.vocab.detokenize(&trace.rationale_ids);
    let answer = model.vocab.detokenize(&trace.answer_ids);
    let assertions: Vec<String> = committed_assertions(question, &rationale, &answer, trace.complete).iter().map(|a| a.to_string()).collect();
    println!(
        "{}",
        json!({
            "object_id": cloud.object_id,
            "mode": cfg.mode.name(),
            "question": question,
            "rationale": rationale,
            "answer": answer,
            "complete": trace.complete,
            "logprob": trace.logprob,
            "assertions": assertions,
        })
    );
    Ok(())
}

fn cmd_gradcheck(common: &Common, instances: u64) -> Result<()> {
    common.resolve()?;
    let t = Instant::now();
    let reports = run_suite(instances, GradCheckOptions::default())?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
        if !r.passed {
            failed.push(format!("{} (worst {} at {:.3e})", r.group.name(), r.worst_param, r.max_rel_error));
        }
    }
    progress!("{:<9} {:>6} {:>12}  worst parameter", "group", "coords", "max rel err");
    for r in &reports {
        progress!("{:<9} {:>6} {:>12.3e}  {}", r.group.name(), r.coords, r.max_rel_error, r.worst_param);
    }
    progress!("{} groups x {instances} instances in {:.1}s", Group::ALL.len(), t.elapsed().as_secs_f64());
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> String {
    match e.downcast_ref::<pointcot::Error>() {
        Some(pe) => {
            let dbg = format!("{pe:?}");
            dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
        }
        None if e.downcast_ref::<std::io::Error>().is_some() => "Io".into(),
        None => "Error".into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.to_string().trim(), "kind": "Usage"}));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Infer { common, cloud, question } => cmd_infer(common, cloud, question),
        Command::Gradcheck { common, instances } => cmd_gradcheck(common, *instances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": format!("{e:#}"), "kind": error_kind(&e)}));
            ExitCode::FAILURE
        }
    }
}
