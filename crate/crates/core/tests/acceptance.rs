//! Acceptance harness: one PASS/FAIL line per criterion, then a nonzero exit
//! if any failed. Runs without the libtest harness so the lines always reach
//! stdout. The two training criteria dominate the runtime (about an hour on
//! one core); `POINTCOT_ACCEPT=1,2,...` restricts the run to listed criteria.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use pointcot::datagen::{generate_corpus, object_id, split_objects, Corpus, CorpusConfig, Split, DEFAULT_RATIOS};
use pointcot::evalverify::{compute_ghr, parse_assertions, EvalReport};
use pointcot::fusion::spatial_decay;
use pointcot::geometry::{dot3, CameraRig, Point3};
use pointcot::gradsuite::{micro_setup, run_suite, Group};
use pointcot::model::ReasoningMode;
use pointcot::numerics::{GradCheckOptions, Graph, Optimizer, ParamStore, Rng, Tensor};
use pointcot::objectives::{loss_anchor, loss_gen, AnchorHeads, LossConfig};
use pointcot::reasoner::Vocab;
use pointcot::train::{run_two_stage, train_stage, RunConfig, RunOutcome, TaskData};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// 1 --------------------------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let t = Instant::now();
    let reports = run_suite(20, GradCheckOptions::default()).expect("gradient suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let groups = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r.group.name(), r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let redrawn: usize = reports.iter().map(|r| r.redrawn.len()).sum();
    let covered = [Group::Gcma, Group::Gate, Group::Anchor, Group::Total].iter().all(|g| reports.iter().any(|r| r.group == *g));
    let pass = covered && reports.iter().all(|r| r.passed && r.seeds >= 20) && worst < 1e-4 && secs < 120.0;
    verdict(pass, format!("20 micro-instances per group; max rel err {worst:.2e} < 1e-4 ({groups}); {redrawn} instances redrawn off a kink; {secs:.1}s < 120s"))
}

// 2, 3, 10 --------------------------------------------------------------

fn attention_oracle() -> Verdict {
    let worst = common::gcma_oracle(100);
    verdict(worst < 1e-10, format!("100 seeds, N_p <= 8, N_v <= 16; max deviation {worst:.2e} < 1e-10"))
}

fn fps_oracle() -> Verdict {
    let bad = common::fps_oracle(200);
    verdict(bad.is_empty(), format!("200 clouds, N <= 64; {} index mismatches", bad.len()))
}

fn ghr_oracle() -> Verdict {
    let c = common::ghr_oracle(100);
    let pass = c.reparse_failures == 0 && c.harness == c.oracle && c.harness_rate == c.oracle.rate();
    verdict(
        pass,
        format!(
            "100 rationales; harness true/false/unverifiable {}/{}/{} vs oracle {}/{}/{}",
            c.harness.verified_true, c.harness.verified_false, c.harness.unverifiable, c.oracle.verified_true, c.oracle.verified_false, c.oracle.unverifiable
        ),
    )
}

// 4 --------------------------------------------------------------------

fn closed_forms() -> Verdict {
    let rig = CameraRig::default();
    let mut rng = Rng::new(4);
    let mut decay_err: f64 = 0.0;
    for i in 0..64 {
        let view = rig.view(i % rig.len());
        let sigma = rng.range(0.05, 0.5);
        let p: Point3 = [rng.range(-0.5, 0.5), rng.range(-0.5, 0.5), rng.range(-0.5, 0.5)];
        let uv = view.project(p).uv;
        let theta = rng.range(0.0, std::f64::consts::TAU);
        let c = [uv[0] + sigma * theta.cos(), uv[1] + sigma * theta.sin()];
        decay_err = decay_err.max((spatial_decay(p, c, view, sigma) - (-0.5f64).exp()).abs());
    }

    let mut anchor_err: f64 = 0.0;
    for k in 2..8 {
        let mut store = ParamStore::new();
        let heads = AnchorHeads::init(&mut store, 8, 6, 4, &mut rng);
        let mut g = Graph::new();
        let hidden = g.constant(Tensor::matrix(5, 8, (0..40).map(|_| rng.normal()).collect()).unwrap());
        let row: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let geo = g.constant(Tensor::matrix(k, 6, row.iter().cycle().take(6 * k).copied().collect()).unwrap());
        let l = loss_anchor(&mut g, &store, &heads, hidden, geo, rng.below(k), 0.07).unwrap();
        anchor_err = anchor_err.max((g.value(l).item() - (k as f64).ln()).abs());
    }

    let v = Vocab::standard().len();
    let mut g = Graph::new();
    let logits = g.constant(Tensor::filled(&[12, v], 0.37));
    let targets: Vec<usize> = (0..12).map(|_| rng.below(v)).collect();
    let rows: Vec<usize> = (0..12).collect();
    let ce = loss_gen(&mut g, logits, &targets, &rows).unwrap();
    let ce_err = (g.value(ce).item() - (v as f64).ln()).abs();

    let pass = decay_err <= 1e-12 && anchor_err <= 1e-12 && ce_err <= 1e-12;
    verdict(pass, format!("decay at sigma {decay_err:.1e}, anchor under symmetry vs ln K {anchor_err:.1e}, uniform CE vs ln|V| {ce_err:.1e} (all <= 1e-12)"))
}

// 5 --------------------------------------------------------------------

fn stage_one_truncation() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for mode in [ReasoningMode::Explicit, ReasoningMode::Implicit, ReasoningMode::Direct] {
        for seed in 0..4 {
            let m = micro_setup(seed).unwrap();
            let mut model = m.model;
            let data = TaskData { objects: m.objects, examples: m.examples, records: Vec::new(), metas: Vec::new() };
            let before = model.store.clone();
            let loss = LossConfig { stage: 1, proj_dim: model.cfg.proj_dim, ..LossConfig::default() };
            let mut opt = Optimizer::momentum(0.1, 0.9);
            train_stage(&mut model, &data, mode, &loss, &mut opt, 1, 2, &mut Rng::new(seed), &mut |_| {}).unwrap();
            let id = model.lm.answer_bias;
            let bits = |s: &ParamStore| s.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            let same = bits(&before) == bits(&model.store);
            let moved = model.store.ids().filter(|&p| model.store.value(p) != before.value(p)).count();
            pass &= same && moved > 0;
            if seed == 0 {
                lines.push(format!("{} {}", mode.name(), if same { "identical" } else { "CHANGED" }));
            }
        }
    }
    verdict(pass, format!("answer-only parameters after one stage-1 step, 4 seeds per mode: {}", lines.join(", ")))
}

// 6, 7 -----------------------------------------------------------------

const TRAIN_OBJECTS: usize = 64;
const TRAIN_STEPS: usize = 2000;
// Larger than the overfit corpus: at 64 objects the test split holds 6 or 7
// objects and the mode ordering is mostly noise.
const ABLATION_OBJECTS: usize = 256;
const ABLATION_SEEDS: u64 = 5;

fn corpus_for(objects: usize, seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig { objects, seed, ..CorpusConfig::default() }).unwrap()
}

fn run_config(objects: usize, seed: u64) -> RunConfig {
    RunConfig { seed, objects, steps: TRAIN_STEPS, ..RunConfig::default() }
}

fn overfit() -> Verdict {
    let cfg = run_config(TRAIN_OBJECTS, 0);
    let corpus = corpus_for(TRAIN_OBJECTS, 0);
    let RunOutcome { train_report, seconds, .. } = run_two_stage(&cfg, &corpus, cfg.mode, true).unwrap();
    let em = train_report.unwrap().exact_match;
    verdict(
        em >= 0.95 && seconds < 900.0,
        format!("{TRAIN_OBJECTS} objects, {TRAIN_STEPS}+{TRAIN_STEPS} steps, {} mode; train EM {:.1}% >= 95%; {:.0}s < 900s", cfg.mode.name(), 100.0 * em, seconds),
    )
}

fn directional_ablation() -> Verdict {
    let modes = [ReasoningMode::Direct, ReasoningMode::Implicit, ReasoningMode::Explicit];
    let (mut ghr_ok, mut em_ok) = (0, 0);
    for seed in 0..ABLATION_SEEDS {
        let corpus = corpus_for(ABLATION_OBJECTS, seed);
        let cfg = run_config(ABLATION_OBJECTS, seed);
        let runs: BTreeMap<&str, EvalReport> = modes.iter().map(|&m| (m.name(), run_two_stage(&cfg, &corpus, m, false).unwrap().test_report)).collect();
        let r = |m: ReasoningMode| &runs[m.name()];
        let ghr = |m| r(m).ghr.unwrap_or(f64::NAN);
        let (d, i, e) = (ReasoningMode::Direct, ReasoningMode::Implicit, ReasoningMode::Explicit);
        let order = ghr(e) < ghr(i) && ghr(i) < ghr(d);
        let em = r(e).exact_match > r(d).exact_match;
        ghr_ok += usize::from(order);
        em_ok += usize::from(em);
        println!(
            "    seed {seed}: GHR explicit {:.1} / implicit {:.1} / direct {:.1} {}; EM explicit {:.1} vs direct {:.1} {}",
            100.0 * ghr(e),
            100.0 * ghr(i),
            100.0 * ghr(d),
            if order { "ok" } else { "out of order" },
            100.0 * r(e).exact_match,
            100.0 * r(d).exact_match,
            if em { "ok" } else { "not above" },
        );
    }
    let need = (ABLATION_SEEDS as usize * 4).div_ceil(5);
    verdict(
        ghr_ok >= need && em_ok >= need,
        format!("{ABLATION_OBJECTS} objects, held-out test split, matched budgets; GHR order holds in {ghr_ok}/{ABLATION_SEEDS}, EM explicit > direct in {em_ok}/{ABLATION_SEEDS} (need {need})"),
    )
}

// 8 --------------------------------------------------------------------

fn clean_corpus() -> Verdict {
    let c = generate_corpus(&CorpusConfig { n_points: 64, ..CorpusConfig::default() }).unwrap();
    let lists: Vec<_> = c.records.iter().map(|r| parse_assertions(&r.rationale).assertions).collect();
    let metas: Vec<_> = c.records.iter().map(|r| c.meta(&r.object_id).unwrap()).collect();
    let (rate, counts) = compute_ghr(&lists, &metas).unwrap();
    verdict(
        rate == Some(0.0) && counts.verified_false == 0,
        format!("{} records from {} objects; GHR {:?} over {} verified assertions", c.records.len(), c.metas.len(), rate, counts.verified_true + counts.verified_false),
    )
}

// 9 --------------------------------------------------------------------

fn split_integrity() -> Verdict {
    let mut rng = Rng::new(9);
    let mut leaks = 0;
    for _ in 0..50 {
        let objects = 10 + rng.below(150);
        let c = generate_corpus(&CorpusConfig { objects, n_points: 16, seed: rng.below(1 << 40) as u64, ..CorpusConfig::default() }).unwrap();
        let sets: Vec<HashSet<&str>> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| c.manifest.ids(s).iter().map(String::as_str).collect()).collect();
        let total: usize = sets.iter().map(HashSet::len).sum();
        let union: HashSet<&str> = sets.iter().flatten().copied().collect();
        leaks += usize::from(total != union.len() || union.len() != objects);
        for (k, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            leaks += c.records_in(split).iter().filter(|r| !sets[k].contains(r.object_id.as_str())).count();
        }
    }
    let ids: Vec<String> = (0..1000).map(object_id).collect();
    let mut worst: f64 = 0.0;
    let mut sizes = (0, 0, 0);
    for seed in 0..20 {
        let m = split_objects(&ids, DEFAULT_RATIOS, seed).unwrap();
        sizes = (m.train.len(), m.val.len(), m.test.len());
        for (got, r) in [(m.train.len(), DEFAULT_RATIOS[0]), (m.val.len(), DEFAULT_RATIOS[1]), (m.test.len(), DEFAULT_RATIOS[2])] {
            worst = worst.max((got as f64 - r * 1000.0).abs());
        }
    }
    verdict(
        leaks == 0 && worst <= 1.0 + 1e-9,
        format!("50 corpora, {leaks} leaked ids; 1000 objects split {}/{}/{}, max deviation {worst} <= 1", sizes.0, sizes.1, sizes.2),
    )
}

// 11 -------------------------------------------------------------------

fn rig_geometry() -> Verdict {
    let rig = CameraRig::default();
    let center_err = rig
        .views
        .iter()
        .map(|v| {
            let p = v.project([0.0; 3]);
            (p.uv[0] - 0.5).abs().max((p.uv[1] - 0.5).abs())
        })
        .fold(0.0, f64::max);
    // Coverage uses the projection's own visibility: in front of the camera
    // and inside the frame.
    let mut rng = Rng::new(11);
    let mut covered = 0;
    for _ in 0..10_000 {
        let g = [rng.normal(), rng.normal(), rng.normal()];
        let n = dot3(g, g).sqrt();
        let d = [g[0] / n, g[1] / n, g[2] / n];
        let seen = rig.views.iter().any(|v| v.project(d).visible);
        covered += usize::from(seen);
    }
    verdict(
        rig.len() == 8 && center_err <= 1e-9 && covered == 10_000,
        format!("{} cameras, origin off-center by {center_err:.1e} <= 1e-9; coverage {covered}/10000", rig.len()),
    )
}

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("POINTCOT_ACCEPT").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let criteria: Vec<(usize, &str, fn() -> Verdict)> = vec![
        (1, "gradient fidelity", gradient_fidelity),
        (2, "attention oracle", attention_oracle),
        (3, "FPS oracle", fps_oracle),
        (4, "closed forms", closed_forms),
        (5, "stage-1 truncation", stage_one_truncation),
        (6, "overfit sanity", overfit),
        (7, "directional ablation", directional_ablation),
        (8, "clean corpus", clean_corpus),
        (9, "split integrity", split_integrity),
        (10, "GHR oracle", ghr_oracle),
        (11, "rig geometry", rig_geometry),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !wanted(n) {
            println!("criterion {n:>2} SKIP {name}");
            continue;
        }
        let t = Instant::now();
        let v = check();
        println!("criterion {n:>2} {} {name}: {} [{:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
