//! Train all three reasoning modes on matched seeds and print test GHR/EM.
//!
//! usage: ablation [objects] [steps-per-stage] [seeds] [key=value ...]

use pointcot::datagen::{generate_corpus, CorpusConfig};
use pointcot::model::ReasoningMode;
use pointcot::train::{run_two_stage, RunConfig};

fn main() -> pointcot::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let objects = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut base = RunConfig { steps, ..RunConfig::default() };
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set(k, v)?;
    }
    for seed in 0..seeds {
        let corpus = generate_corpus(&CorpusConfig { objects, seed, ..CorpusConfig::default() })?;
        let cfg = RunConfig { seed, ..base.clone() };
        let mut line = format!("seed {seed}");
        for mode in [ReasoningMode::Direct, ReasoningMode::Implicit, ReasoningMode::Explicit] {
            let out = run_two_stage(&cfg, &corpus, mode, false)?;
            let r = &out.test_report;
            line += &format!(" | {:<8} GHR {:>5.1} EM {:>5.1} ({:.0}s)", mode.name(), 100.0 * r.ghr.unwrap_or(f64::NAN), 100.0 * r.exact_match, out.seconds);
        }
        println!("{line}");
    }
    Ok(())
}
