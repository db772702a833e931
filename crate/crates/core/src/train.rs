//! Run configuration, the two-stage training loop and the evaluation pass.
//!
//! The run config is a `key = value` text file, one key per line, `#`
//! starting a comment. Unknown or repeated keys are rejected before any
//! work starts. See [`RunConfig::KEYS`] for the accepted keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, DatasetRecord, ObjectMetadata, QuestionKind, Split};
use crate::encoders::{read_views, render_splat_views, EncoderConfig, ViewImage};
use crate::error::{Error, Result};
use crate::evalverify::{parse_assertions, EvalReport, ScoredPrediction};
use crate::fusion::FusionConfig;
use crate::model::{Example, Model, ModelConfig, PreparedObject, ReasoningMode};
use crate::numerics::{Graph, Optimizer, OptimizerKind, Rng};
use crate::objectives::LossConfig;
use crate::reasoner::LmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub objects: usize,
    pub n_points: usize,
    pub n_tokens: usize,
    pub knn: usize,
    pub patch_grid: usize,
    pub d_model: usize,
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub context: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub proj_dim: usize,
    pub stage: u8,
    pub mode: ReasoningMode,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub max_decode: usize,
    pub split: Split,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: 512,
            n_points: crate::datagen::DEFAULT_POINTS,
            n_tokens: 32,
            knn: 16,
            patch_grid: 4,
            d_model: 64,
            d_llm: 64,
            layers: 2,
            heads: 4,
            ff_hidden: 128,
            context: 256,
            lambda: 1.0,
            alpha: 0.1,
            tau: 0.07,
            proj_dim: 32,
            stage: 1,
            mode: ReasoningMode::Explicit,
            optimizer: OptimizerKind::Momentum,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            steps: 2000,
            batch_size: 4,
            max_decode: 48,
            split: Split::Test,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            checkpoint: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 29] = [
        "seed", "objects", "n_points", "n_tokens", "knn", "patch_grid", "d_model", "d_llm", "layers", "heads", "ff_hidden", "context", "lambda", "alpha", "tau", "proj_dim", "stage", "mode",
        "optimizer", "lr", "momentum", "clip_norm", "steps", "batch_size", "max_decode", "split", "corpus", "out", "checkpoint",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "objects" => self.objects = parse_num(key, v)?,
            "n_points" => self.n_points = parse_num(key, v)?,
            "n_tokens" => self.n_tokens = parse_num(key, v)?,
            "knn" => self.knn = parse_num(key, v)?,
            "patch_grid" => self.patch_grid = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "d_llm" => self.d_llm = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "ff_hidden" => self.ff_hidden = parse_num(key, v)?,
            "context" => self.context = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "proj_dim" => self.proj_dim = parse_num(key, v)?,
            "stage" => self.stage = parse_num(key, v)?,
            "mode" => self.mode = ReasoningMode::parse(v).ok_or_else(|| Error::InvalidArgument(format!("mode must be direct, implicit or explicit, got {v:?}")))?,
            "optimizer" => {
                self.optimizer = match v {
                    "momentum" => OptimizerKind::Momentum,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::InvalidArgument(format!("optimizer must be momentum or adam, got {v:?}"))),
                }
            }
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_decode" => self.max_decode = parse_num(key, v)?,
            "split" => self.split = Split::parse(v).ok_or_else(|| Error::InvalidArgument(format!("split must be train, val or test, got {v:?}")))?,
            "corpus" => self.corpus = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::InvalidArgument(format!("config key {k:?} given twice")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("seed", self.seed.to_string());
        kv("objects", self.objects.to_string());
        kv("n_points", self.n_points.to_string());
        kv("n_tokens", self.n_tokens.to_string());
        kv("knn", self.knn.to_string());
        kv("patch_grid", self.patch_grid.to_string());
        kv("d_model", self.d_model.to_string());
        kv("d_llm", self.d_llm.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("ff_hidden", self.ff_hidden.to_string());
        kv("context", self.context.to_string());
        kv("lambda", self.lambda.to_string());
        kv("alpha", self.alpha.to_string());
        kv("tau", self.tau.to_string());
        kv("proj_dim", self.proj_dim.to_string());
        kv("stage", self.stage.to_string());
        kv("mode", self.mode.name().into());
        kv("optimizer", format!("{:?}", self.optimizer).to_lowercase());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_decode", self.max_decode.to_string());
        kv("split", self.split.name().into());
        kv("corpus", self.corpus.display().to_string());
        kv("out", self.out.display().to_string());
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        self.model().validate()?;
        if self.batch_size == 0 || self.lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("batch_size, lr and clip_norm must be positive".into()));
        }
        if self.n_tokens > self.n_points {
            return Err(Error::InvalidArgument(format!("n_tokens {} exceeds n_points {}", self.n_tokens, self.n_points)));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            tau: self.tau,
            proj_dim: self.proj_dim,
            stage: self.stage,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let base = ModelConfig::default();
        ModelConfig {
            encoder: EncoderConfig {
                n_tokens: self.n_tokens,
                knn: self.knn,
                d_model: self.d_model,
                patch_grid: self.patch_grid,
                ..base.encoder
            },
            fusion: FusionConfig {
                d_model: self.d_model,
                d_llm: self.d_llm,
                ..base.fusion
            },
            lm: LmConfig {
                d_llm: self.d_llm,
                n_layers: self.layers,
                n_heads: self.heads,
                ff_hidden: self.ff_hidden,
                context: self.context,
            },
            proj_dim: self.proj_dim,
            seed: self.seed,
            ..base
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        let mut o = Optimizer::new(self.optimizer, self.lr, self.momentum);
        o.clip_norm = Some(self.clip_norm);
        o
    }
}

/// Prepared objects plus tokenized records of one split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub objects: Vec<PreparedObject>,
    pub examples: Vec<Example>,
    pub records: Vec<DatasetRecord>,
    pub metas: Vec<ObjectMetadata>,
}

/// Tokenize and preprocess the records of `split`. Views come from
/// `<views_root>/<views_path>` when given, otherwise they are rendered.
pub fn prepare_split(model: &Model, corpus: &Corpus, split: Split, views_root: Option<&Path>) -> Result<TaskData> {
    let ids = corpus.manifest.ids(split);
    let mut objects = Vec::with_capacity(ids.len());
    let mut metas = Vec::with_capacity(ids.len());
    for (cloud, meta) in corpus.clouds.iter().zip(&corpus.metas) {
        if !ids.contains(&meta.object_id) {
            continue;
        }
        let views: Vec<ViewImage> = match views_root {
            Some(root) => read_views(&root.join("views").join(format!("{}.npy", meta.object_id)))?,
            None => render_splat_views(cloud, &model.rig),
        };
        objects.push(model.prepare(cloud, &views)?);
        metas.push(meta.clone());
    }
    let mut examples = Vec::new();
    let mut records = Vec::new();
    for r in &corpus.records {
        if let Some(object) = objects.iter().position(|o| o.object_id == r.object_id) {
            examples.push(Example {
                object,
                level: r.level,
                question: model.vocab.tokenize(&r.question),
                rationale: model.vocab.tokenize(&r.rationale),
                answer: model.vocab.tokenize(&r.answer),
            });
            records.push(r.clone());
        }
    }
    Ok(TaskData { objects, examples, records, metas })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: u8,
    pub loss_total: f64,
    pub loss_gen: f64,
    pub loss_pred: f64,
    /// True when the answer loss was computed off the gradient path.
    pub pred_detached: bool,
    pub loss_anchor: Option<f64>,
    pub grad_norm: f64,
}

/// Run `steps` optimizer steps of one stage. Batches are drawn without
/// replacement from a per-epoch shuffle.
pub fn train_stage(model: &mut Model, data: &TaskData, mode: ReasoningMode, loss: &LossConfig, opt: &mut Optimizer, steps: usize, batch_size: usize, rng: &mut Rng, log: &mut dyn FnMut(&StepMetrics)) -> Result<()> {
    loss.validate()?;
    if data.examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size.min(data.examples.len()) {
            if order.is_empty() {
                order = (0..data.examples.len()).collect();
                rng.shuffle(&mut order);
            }
            batch.push(&data.examples[order.pop().expect("refilled")]);
        }
        let mut g = Graph::new();
        let vars = model.batch_loss(&mut g, &data.objects, &batch, mode, loss)?;
        let total = g.value(vars.total).item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward_params(vars.total)?;
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let metrics = StepMetrics {
            step,
            stage: loss.stage,
            loss_total: total,
            loss_gen: g.value(vars.gen).item(),
            loss_pred: g.value(vars.pred).item(),
            pred_detached: loss.stage == 1,
            loss_anchor: vars.anchor.map(|a| g.value(a).item()),
            grad_norm: grads.global_norm(),
        };
        opt.step(&mut model.store, &grads);
        log(&metrics);
    }
    Ok(())
}

/// Assertions a prediction commits to: those in its rationale plus the one
/// implied by its answer.
pub fn committed_assertions(question: &str, rationale: &str, answer: &str, complete: bool) -> Vec<crate::evalverify::Assertion> {
    let mut out = parse_assertions(rationale).assertions;
    if complete {
        if let Some(a) = QuestionKind::from_question(question).and_then(|(k, _)| k.implied_assertion(answer)) {
            out.push(a);
        }
    }
    out
}

pub fn predict(model: &Model, data: &TaskData, mode: ReasoningMode, max_len: usize) -> Result<Vec<ScoredPrediction>> {
    data.examples
        .iter()
        .zip(&data.records)
        .map(|(ex, rec)| {
            let trace = model.decode(&data.objects[ex.object], &ex.question, mode, max_len)?;
            let rationale = model.vocab.detokenize(&trace.rationale_ids);
            let answer = model.vocab.detokenize(&trace.answer_ids);
            Ok(ScoredPrediction {
                object_id: rec.object_id.clone(),
                level: rec.level,
                question: rec.question.clone(),
                gold_answer: rec.answer.clone(),
                gold_rationale: rec.rationale.clone(),
                assertions: committed_assertions(&rec.question, &rationale, &answer, trace.complete),
                answer,
                rationale,
                complete: trace.complete,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &TaskData, mode: ReasoningMode, split: Split, max_len: usize) -> Result<(EvalReport, Vec<ScoredPrediction>)> {
    let preds = predict(model, data, mode, max_len)?;
    Ok((EvalReport::build(mode.name(), split.name(), &preds, &data.metas)?, preds))
}

/// Outcome of [`run_two_stage`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub train_report: Option<EvalReport>,
    pub test_report: EvalReport,
    pub seconds: f64,
}

/// Fresh model, `cfg.steps` stage-1 steps, `cfg.steps` stage-2 steps, then
/// decoding of the test split (and of the train split when asked). The
/// corpus is used in memory with views rendered on the fly.
pub fn run_two_stage(cfg: &RunConfig, corpus: &Corpus, mode: ReasoningMode, eval_train: bool) -> Result<RunOutcome> {
    let t = std::time::Instant::now();
    let mut model = Model::new(cfg.model(), crate::reasoner::Vocab::standard())?;
    let train = prepare_split(&model, corpus, Split::Train, None)?;
    let test = prepare_split(&model, corpus, Split::Test, None)?;
    let mut opt = cfg.optimizer();
    for stage in [1u8, 2] {
        let mut rng = Rng::new(cfg.seed).fork(u64::from(stage));
        let loss = LossConfig { stage, ..cfg.loss() };
        train_stage(&mut model, &train, mode, &loss, &mut opt, cfg.steps, cfg.batch_size, &mut rng, &mut |_| {})?;
    }
    let train_report = if eval_train { Some(evaluate(&model, &train, mode, Split::Train, cfg.max_decode)?.0) } else { None };
    let test_report = evaluate(&model, &test, mode, Split::Test, cfg.max_decode)?.0;
    Ok(RunOutcome {
        model,
        train_report,
        test_report,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let c = RunConfig::parse("# comment\nseed = 7\nlr=0.01 # trailing\nmode = direct\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.mode, ReasoningMode::Direct);
        assert!(RunConfig::parse("sede = 7").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("tau = 0").is_err());
        assert!(RunConfig::parse("seed 7").is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = RunConfig::default();
        c.checkpoint = Some("x.ckpt".into());
        c.optimizer = OptimizerKind::Adam;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::KEYS.len(), c.to_text().lines().count());
    }
}
