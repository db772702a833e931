//! Train one mode on a small corpus and print timing plus train/test scores.
//!
//! usage: train_probe [objects] [mode] [steps-per-stage] [key=value ...]

use std::time::Instant;

use pointcot::datagen::{generate_corpus, CorpusConfig, Split};
use pointcot::model::{Model, ReasoningMode};
use pointcot::numerics::Rng;
use pointcot::reasoner::Vocab;
use pointcot::train::{evaluate, prepare_split, train_stage, RunConfig};

fn main() -> pointcot::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let objects = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let mode = args.get(2).and_then(|s| ReasoningMode::parse(s)).unwrap_or(ReasoningMode::Explicit);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = RunConfig::default();
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let corpus = generate_corpus(&CorpusConfig { objects, seed: cfg.seed, ..CorpusConfig::default() })?;
    let mut model = Model::new(cfg.model(), Vocab::standard())?;
    let t = Instant::now();
    let train = prepare_split(&model, &corpus, Split::Train, None)?;
    let test = prepare_split(&model, &corpus, Split::Test, None)?;
    eprintln!("prepared {} train / {} test records in {:.1}s", train.examples.len(), test.examples.len(), t.elapsed().as_secs_f64());
    let mut rng = Rng::new(cfg.seed ^ 0x5eed);
    let mut opt = cfg.optimizer();
    for stage in [1u8, 2] {
        let mut loss = cfg.loss();
        loss.stage = stage;
        let t = Instant::now();
        let mut last = None;
        train_stage(&mut model, &train, mode, &loss, &mut opt, steps, cfg.batch_size, &mut rng, &mut |m| {
            if m.step % 100 == 0 || m.step + 1 == steps {
                eprintln!("stage {stage} step {} total {:.4} gen {:.4} pred {:.4} anchor {:?}", m.step, m.loss_total, m.loss_gen, m.loss_pred, m.loss_anchor.map(|a| (a * 1e3).round() / 1e3));
            }
            last = Some(m.clone());
        })?;
        eprintln!("stage {stage}: {:.1} ms/step", 1e3 * t.elapsed().as_secs_f64() / steps as f64);
    }
    let t = Instant::now();
    let (r, _) = evaluate(&model, &train, mode, Split::Train, cfg.max_decode)?;
    eprintln!("train eval {:.1}s", t.elapsed().as_secs_f64());
    println!("TRAIN {}", r.to_table());
    let (r, _) = evaluate(&model, &test, mode, Split::Test, cfg.max_decode)?;
    println!("TEST {}", r.to_table());
    Ok(())
}
