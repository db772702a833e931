//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance harness. Each `*_oracle` function returns what it measured and
//! leaves the verdict to the caller.

#![allow(dead_code)]

use pointcot::datagen::{generate_corpus, CorpusConfig, Family, LegPos, ObjectParams, Side};
use pointcot::encoders::{GeoTokens, VisTokens};
use pointcot::evalverify::{compute_ghr, parse_assertions, Assertion, GhrCounts, RELATIONS};
use pointcot::fusion::{fourier_bias, gcma_attend, spatial_decay, FusionConfig, GcmaParams};
use pointcot::geometry::{build_spherical_rig, farthest_point_sample, CameraRig, Point3};
use pointcot::numerics::{ParamStore, Rng, Tensor};

// ---------------------------------------------------------------- FPS

pub fn exhaustive_fps(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let d2 = |a: Point3, b: Point3| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen.iter().map(|&c| d2(points[i], points[c])).fold(f64::INFINITY, f64::min);
            if m > best_d {
                best_d = m;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// Indices of the clouds (out of `clouds`) where the library disagrees.
pub fn fps_oracle(clouds: usize) -> Vec<usize> {
    let mut rng = Rng::new(11);
    let mut bad = Vec::new();
    for cloud in 0..clouds {
        let n = 1 + rng.below(64);
        // A coarse lattice forces distance ties.
        let lattice = cloud % 4 == 0;
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                if lattice {
                    [rng.below(3) as f64, rng.below(3) as f64, rng.below(2) as f64]
                } else {
                    [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)]
                }
            })
            .collect();
        let k = 1 + rng.below(n);
        let start = rng.below(n);
        if farthest_point_sample(&points, k, start).unwrap() != exhaustive_fps(&points, k, start) {
            bad.push(cloud);
        }
    }
    bad
}

// ---------------------------------------------------------------- GCMA

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Logits and attended features with one scalar loop per term.
pub fn brute_gcma(geo: &GeoTokens, vis: &VisTokens, rig: &CameraRig, params: &GcmaParams, store: &ParamStore) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (np, d) = geo.features.dims2();
    let nv = vis.features.rows();
    let (wq, wk, wv) = (store.value(params.wq), store.value(params.wk), store.value(params.wv));
    let proj = |x: &Tensor, r: usize, w: &Tensor, c: usize| (0..d).map(|k| x.at(r, k) * w.at(k, c)).sum::<f64>();
    let sigma = params.sigma(store);
    let mut logits = vec![vec![0.0; nv]; np];
    let mut out = vec![vec![0.0; d]; np];
    for i in 0..np {
        for j in 0..nv {
            let mut dot = 0.0;
            for c in 0..d {
                dot += proj(&geo.features, i, wq, c) * proj(&vis.features, j, wk, c);
            }
            let decay = spatial_decay(geo.centroids[i], vis.patch_centers[j], rig.view(vis.view_index[j]), sigma);
            logits[i][j] = dot / (d as f64).sqrt() * decay + fourier_bias(geo.centroids[i], vis.patch_centers[j], params, store);
        }
        let max = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits[i].iter().map(|l| (l - max).exp()).sum();
        for j in 0..nv {
            let w = (logits[i][j] - max).exp() / z;
            for c in 0..d {
                out[i][c] += w * proj(&vis.features, j, wv, c);
            }
        }
    }
    (logits, out)
}

/// Largest absolute deviation over logits and attended features, on seeds
/// `0..seeds` with N_p ≤ 8 and N_v ≤ 16.
pub fn gcma_oracle(seeds: u64) -> f64 {
    let rig = build_spherical_rig(2.2, 50.0, 16).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = Rng::new(seed);
        let cfg = FusionConfig {
            d_model: 2 + rng.below(5),
            sigma_init: rng.range(0.1, 0.6),
            ..FusionConfig::default()
        };
        let mut store = ParamStore::new();
        let params = GcmaParams::init(&mut store, &cfg, &mut rng);
        let np = 1 + rng.below(8);
        let nv = 1 + rng.below(16);
        let geo = GeoTokens {
            features: random(np, cfg.d_model, &mut rng),
            centroids: (0..np).map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)]).collect(),
            indices: (0..np).collect(),
        };
        let vis = VisTokens {
            features: random(nv, cfg.d_model, &mut rng),
            patch_centers: (0..nv).map(|_| [rng.uniform(), rng.uniform()]).collect(),
            view_index: (0..nv).map(|_| rng.below(8)).collect(),
        };
        let (attended, logits) = gcma_attend(&geo, &vis, &rig, &params, &store).unwrap();
        let (bl, ba) = brute_gcma(&geo, &vis, &rig, &params, &store);
        for i in 0..np {
            for j in 0..nv {
                worst = worst.max((logits.at(i, j) - bl[i][j]).abs());
            }
            for c in 0..cfg.d_model {
                worst = worst.max((attended.at(i, c) - ba[i][c]).abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------- GHR

/// Facts recomputed from the generator parameters, not from metadata.
pub struct Facts<'a>(pub &'a ObjectParams);

impl Facts<'_> {
    fn count(&self, part: &str) -> Option<usize> {
        let p = self.0;
        let legged = matches!(p.family, Family::Chair | Family::Table);
        Some(match part {
            "leg" if legged => 4 - usize::from(p.removed_leg.is_some()),
            "seat" => usize::from(p.family == Family::Chair),
            "backrest" => usize::from(p.family == Family::Chair && p.backrest),
            "armrest" => 2 * usize::from(p.family == Family::Chair && p.armrests),
            "top" => usize::from(p.family == Family::Table),
            "body" => usize::from(matches!(p.family, Family::Mug | Family::Box | Family::Container)),
            "handle" => match p.family {
                Family::Mug => usize::from(p.handle.is_some()),
                Family::Box => 2 * usize::from(p.side_handles),
                _ => 0,
            },
            "lid" => usize::from(p.family == Family::Container && p.lid),
            "leg" => 0,
            _ => return None,
        })
    }

    /// Centers of the single-instance parts.
    fn center(&self, part: &str) -> Option<Point3> {
        let p = self.0;
        let slab_z = p.height - p.slab / 2.0;
        match (p.family, part) {
            (Family::Chair, "seat") | (Family::Table, "top") => Some([0.0, 0.0, slab_z]),
            (Family::Chair, "backrest") if p.backrest => Some([-p.depth / 2.0 - p.slab / 2.0, 0.0, p.height - p.slab + p.backrest_height / 2.0]),
            (Family::Mug | Family::Box | Family::Container, "body") => Some([0.0, 0.0, p.height / 2.0]),
            (Family::Mug, "handle") => p.handle.map(|s| [0.0, if s == Side::Left { 1.0 } else { -1.0 } * (p.radius + 0.12), p.height / 2.0]),
            (Family::Container, "lid") if p.lid => Some([0.0, 0.0, p.height + p.slab / 2.0]),
            _ => None,
        }
    }

    fn property(&self, name: &str, stable: bool) -> Option<bool> {
        let p = self.0;
        let open = p.family == Family::Mug || (p.family == Family::Container && !p.lid);
        match name {
            "stable" => Some(stable),
            "can-contain" | "open-top" => Some(open),
            "symmetric" => Some(match p.family {
                Family::Chair | Family::Table => p.removed_leg.is_none(),
                Family::Mug => p.handle.is_none(),
                Family::Box | Family::Container => true,
            }),
            _ => None,
        }
    }

    /// None for unverifiable, else whether the assertion holds.
    pub fn check(&self, a: &Assertion, stable: bool) -> Option<bool> {
        match a {
            Assertion::Count { part, n } => self.count(part).map(|c| c == *n),
            Assertion::Exists { part, value } => self.count(part).map(|c| (c > 0) == *value),
            Assertion::Missing { position, part } => {
                let legged = matches!(self.0.family, Family::Chair | Family::Table);
                let pos = LegPos::parse(position)?;
                (part == "leg" && legged).then(|| self.0.removed_leg == Some(pos))
            }
            Assertion::Relation { a, rel, b } => {
                let (pa, pb) = (self.center(a)?, self.center(b)?);
                let (axis, sign) = match rel.as_str() {
                    "left-of" => (1, 1.0),
                    "right-of" => (1, -1.0),
                    "above" => (2, 1.0),
                    "below" => (2, -1.0),
                    "in-front-of" => (0, 1.0),
                    "behind" => (0, -1.0),
                    _ => return None,
                };
                Some(sign * (pa[axis] - pb[axis]) > 1e-6)
            }
            Assertion::Property { name, value } => self.property(name, stable).map(|p| p == *value),
        }
    }
}

fn corrupt(a: &Assertion, rng: &mut Rng) -> Assertion {
    let mut a = a.clone();
    match &mut a {
        Assertion::Count { n, .. } => *n = rng.below(5),
        Assertion::Exists { value, .. } | Assertion::Property { value, .. } => *value = !*value,
        Assertion::Missing { position, .. } => *position = LegPos::ALL[rng.below(4)].name().to_string(),
        Assertion::Relation { rel, .. } => *rel = RELATIONS[rng.below(6)].to_string(),
    }
    a
}

fn random_assertion(rng: &mut Rng) -> Assertion {
    const PARTS: [&str; 9] = ["leg", "seat", "backrest", "armrest", "top", "body", "handle", "lid", "wheel"];
    let part = |rng: &mut Rng| PARTS[rng.below(PARTS.len())].to_string();
    match rng.below(5) {
        0 => Assertion::Count { part: part(rng), n: rng.below(5) },
        1 => Assertion::Exists { part: part(rng), value: rng.bernoulli(0.5) },
        2 => Assertion::Missing {
            position: ["front-left", "front-right", "rear-left", "rear-right", "middle"][rng.below(5)].into(),
            part: part(rng),
        },
        3 => Assertion::Relation {
            a: part(rng),
            rel: RELATIONS[rng.below(6)].into(),
            b: part(rng),
        },
        _ => Assertion::Property {
            name: ["stable", "can-contain", "open-top", "symmetric", "heavy"][rng.below(5)].into(),
            value: rng.bernoulli(0.5),
        },
    }
}

pub struct GhrComparison {
    pub harness: GhrCounts,
    pub harness_rate: Option<f64>,
    pub oracle: GhrCounts,
    /// Rationales whose rendered text did not parse back to the same list.
    pub reparse_failures: usize,
}

/// Harness and brute-force counts over `n` rationales mixing gold,
/// corrupted and random assertions.
pub fn ghr_oracle(n: usize) -> GhrComparison {
    let corpus = generate_corpus(&CorpusConfig { objects: 40, n_points: 64, seed: 5, ..CorpusConfig::default() }).unwrap();
    let mut rng = Rng::new(99);
    let mut lists = Vec::new();
    let mut metas = Vec::new();
    let mut oracle = GhrCounts::default();
    let mut reparse_failures = 0;
    for i in 0..n {
        let rec = &corpus.records[i % corpus.records.len()];
        let meta = corpus.meta(&rec.object_id).unwrap();
        let mut list = parse_assertions(&rec.rationale).assertions;
        if i % 3 != 0 {
            list = list.iter().map(|a| if rng.bernoulli(0.5) { corrupt(a, &mut rng) } else { a.clone() }).collect();
        }
        for _ in 0..rng.below(4) {
            list.push(random_assertion(&mut rng));
        }
        let text = list.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ; ");
        let reparsed = parse_assertions(&text).assertions;
        reparse_failures += usize::from(reparsed != list);
        let facts = Facts(&meta.params);
        for a in &reparsed {
            match facts.check(a, meta.stable) {
                Some(true) => oracle.verified_true += 1,
                Some(false) => oracle.verified_false += 1,
                None => oracle.unverifiable += 1,
            }
        }
        lists.push(reparsed);
        metas.push(meta);
    }
    let (harness_rate, harness) = compute_ghr(&lists, &metas).unwrap();
    GhrComparison { harness, harness_rate, oracle, reparse_failures }
}
