//! Procedural benchmark objects with exact metadata.
//!
//! Objects are built from box and cylinder primitives in a frame with +Z up,
//! the object front facing +X and object-left along +Y. Every metadata fact is
//! computed from the generative parameters; the surface-sampled cloud is only
//! a rendering of them.

mod corpus;
mod templates;

pub use corpus::{default_rig, generate_corpus, object_id, read_corpus, read_manifest, split_key, split_objects, write_corpus, Corpus, CorpusConfig, DatasetRecord, Split, SplitManifest, DEFAULT_RATIOS};
pub use templates::{generate_qa, lexicon, QuestionKind, ViewSide};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_sphere, Point3, PointCloud};
use crate::numerics::Rng;

pub const DEFAULT_POINTS: usize = 1024;
/// Draws whose centroid lies closer than this to the support boundary are
/// rejected so the stability label is never a numerical coin flip.
pub const STABILITY_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chair,
    Table,
    Mug,
    Box,
    Container,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Chair, Family::Table, Family::Mug, Family::Box, Family::Container];

    pub fn name(self) -> &'static str {
        match self {
            Family::Chair => "chair",
            Family::Table => "table",
            Family::Mug => "mug",
            Family::Box => "box",
            Family::Container => "container",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn has_legs(self) -> bool {
        matches!(self, Family::Chair | Family::Table)
    }

    /// Part names this family can carry.
    pub fn parts(self) -> &'static [&'static str] {
        match self {
            Family::Chair => &["leg", "seat", "backrest", "armrest"],
            Family::Table => &["leg", "top"],
            Family::Mug => &["body", "handle"],
            Family::Box => &["body", "handle"],
            Family::Container => &["body", "lid"],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every part name any family uses.
pub const PART_NAMES: [&str; 8] = ["leg", "seat", "backrest", "armrest", "top", "body", "handle", "lid"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LegPos {
    FrontLeft,
    FrontRight,
    RearLeft,
    RearRight,
}

impl LegPos {
    pub const ALL: [LegPos; 4] = [LegPos::FrontLeft, LegPos::FrontRight, LegPos::RearLeft, LegPos::RearRight];

    pub fn name(self) -> &'static str {
        match self {
            LegPos::FrontLeft => "front-left",
            LegPos::FrontRight => "front-right",
            LegPos::RearLeft => "rear-left",
            LegPos::RearRight => "rear-right",
        }
    }

    pub fn parse(s: &str) -> Option<LegPos> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// (sign of x, sign of y).
    pub fn signs(self) -> (f64, f64) {
        match self {
            LegPos::FrontLeft => (1.0, 1.0),
            LegPos::FrontRight => (1.0, -1.0),
            LegPos::RearLeft => (-1.0, 1.0),
            LegPos::RearRight => (-1.0, -1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

/// Generative parameters. Fields a family does not use stay at zero/false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub family: Family,
    /// Footprint depth (x) and width (y) of the seat, top or body.
    pub depth: f64,
    pub width: f64,
    /// Seat or table-top surface height; body height otherwise.
    pub height: f64,
    pub slab: f64,
    pub leg_half: f64,
    pub leg_inset: f64,
    pub removed_leg: Option<LegPos>,
    pub backrest: bool,
    pub backrest_height: f64,
    pub armrests: bool,
    /// Mug body radius.
    pub radius: f64,
    pub handle: Option<Side>,
    pub side_handles: bool,
    pub lid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prim {
    /// Axis-aligned box; `open_top` drops the +z face.
    Cuboid { center: Point3, half: Point3, open_top: bool },
    /// Upright cylinder standing on `base`; the top cap is optional.
    Cylinder { base: Point3, radius: f64, height: f64, cap_top: bool },
}

impl Prim {
    pub fn area(&self) -> f64 {
        match *self {
            Prim::Cuboid { half: [a, b, c], open_top, .. } => {
                let top = 4.0 * a * b;
                2.0 * top + 8.0 * (a * c + b * c) - if open_top { top } else { 0.0 }
            }
            Prim::Cylinder { radius, height, cap_top, .. } => {
                let cap = std::f64::consts::PI * radius * radius;
                2.0 * std::f64::consts::PI * radius * height + cap * if cap_top { 2.0 } else { 1.0 }
            }
        }
    }

    /// Centroid of the (possibly open) surface.
    pub fn surface_centroid(&self) -> Point3 {
        match *self {
            Prim::Cuboid { center, half: [a, b, c], open_top } => {
                if !open_top {
                    return center;
                }
                // Open box: the missing top shifts the surface centroid down.
                let top = 4.0 * a * b;
                let total = self.area();
                [center[0], center[1], center[2] - top * c / total]
            }
            Prim::Cylinder { base, radius, height, cap_top } => {
                let cap = std::f64::consts::PI * radius * radius;
                let side = 2.0 * std::f64::consts::PI * radius * height;
                let top = if cap_top { cap } else { 0.0 };
                let z = (side * height / 2.0 + top * height) / (side + cap + top);
                [base[0], base[1], base[2] + z]
            }
        }
    }

    fn bottom_z(&self) -> f64 {
        match *self {
            Prim::Cuboid { center, half, .. } => center[2] - half[2],
            Prim::Cylinder { base, .. } => base[2],
        }
    }

    /// Footprint vertices of a primitive resting on the ground.
    fn footprint(&self) -> Vec<[f64; 2]> {
        match *self {
            Prim::Cuboid { center, half, .. } => vec![
                [center[0] - half[0], center[1] - half[1]],
                [center[0] + half[0], center[1] - half[1]],
                [center[0] + half[0], center[1] + half[1]],
                [center[0] - half[0], center[1] + half[1]],
            ],
            Prim::Cylinder { base, radius, .. } => (0..32)
                .map(|k| {
                    let t = k as f64 * std::f64::consts::TAU / 32.0;
                    [base[0] + radius * t.cos(), base[1] + radius * t.sin()]
                })
                .collect(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Point3 {
        match *self {
            Prim::Cuboid { center, half, open_top } => {
                let [a, b, c] = half;
                // Faces: ±x (b·c), ±y (a·c), -z, +z (a·b).
                let mut w = vec![b * c, b * c, a * c, a * c, a * b];
                if !open_top {
                    w.push(a * b);
                }
                let face = pick_weighted(&w, rng);
                let (s, t) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
                let local = match face {
                    0 => [a, s * b, t * c],
                    1 => [-a, s * b, t * c],
                    2 => [s * a, b, t * c],
                    3 => [s * a, -b, t * c],
                    4 => [s * a, t * b, -c],
                    _ => [s * a, t * b, c],
                };
                [center[0] + local[0], center[1] + local[1], center[2] + local[2]]
            }
            Prim::Cylinder { base, radius, height, cap_top } => {
                let cap = std::f64::consts::PI * radius * radius;
                let side = 2.0 * std::f64::consts::PI * radius * height;
                let mut w = vec![side, cap];
                if cap_top {
                    w.push(cap);
                }
                let theta = rng.range(0.0, std::f64::consts::TAU);
                match pick_weighted(&w, rng) {
                    0 => [base[0] + radius * theta.cos(), base[1] + radius * theta.sin(), base[2] + rng.range(0.0, height)],
                    k => {
                        let r = radius * rng.uniform().sqrt();
                        let z = if k == 1 { base[2] } else { base[2] + height };
                        [base[0] + r * theta.cos(), base[1] + r * theta.sin(), z]
                    }
                }
            }
        }
    }
}

fn pick_weighted(w: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = w.iter().sum();
    let mut x = rng.uniform() * total;
    for (i, wi) in w.iter().enumerate() {
        if x < *wi {
            return i;
        }
        x -= wi;
    }
    w.len() - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    /// Part type, e.g. "leg".
    pub kind: &'static str,
    /// Instance label, e.g. "rear-left leg" or "seat".
    pub label: String,
    pub prim: Prim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetadata {
    pub object_id: String,
    pub family: Family,
    pub part_counts: BTreeMap<String, usize>,
    pub leg_positions: Vec<LegPos>,
    pub removed_parts: Vec<String>,
    pub handle_side: Option<Side>,
    /// Centers of single-instance parts.
    pub part_centers: BTreeMap<String, Point3>,
    /// Full extents of every part instance.
    pub dimensions: BTreeMap<String, Point3>,
    pub mirror_symmetric: bool,
    pub stable: bool,
    /// Signed distance from the centroid's ground projection to the support
    /// polygon boundary (positive inside).
    pub support_margin: f64,
    pub containment: bool,
    pub open_direction: Option<String>,
    pub params: ObjectParams,
}

impl ObjectMetadata {
    /// Present instances of a known part type; `None` for unknown names.
    pub fn count(&self, part: &str) -> Option<usize> {
        if !PART_NAMES.contains(&part) {
            return None;
        }
        Some(self.part_counts.get(part).copied().unwrap_or(0))
    }

    pub fn property(&self, name: &str) -> Option<bool> {
        match name {
            "stable" => Some(self.stable),
            "can-contain" => Some(self.containment),
            "open-top" => Some(self.open_direction.as_deref() == Some("up")),
            "symmetric" => Some(self.mirror_symmetric),
            _ => None,
        }
    }
}

pub fn build_parts(p: &ObjectParams) -> Vec<Part> {
    let mut parts = Vec::new();
    let mut push = |kind: &'static str, label: String, prim: Prim| parts.push(Part { kind, label, prim });
    match p.family {
        Family::Chair | Family::Table => {
            let leg_top = p.height - p.slab;
            for pos in LegPos::ALL {
                if p.removed_leg == Some(pos) {
                    continue;
                }
                let (sx, sy) = pos.signs();
                let x = sx * (p.depth / 2.0 - p.leg_inset);
                let y = sy * (p.width / 2.0 - p.leg_inset);
                push(
                    "leg",
                    format!("{} leg", pos.name()),
                    Prim::Cuboid {
                        center: [x, y, leg_top / 2.0],
                        half: [p.leg_half, p.leg_half, leg_top / 2.0],
                        open_top: false,
                    },
                );
            }
            let slab = Prim::Cuboid {
                center: [0.0, 0.0, p.height - p.slab / 2.0],
                half: [p.depth / 2.0, p.width / 2.0, p.slab / 2.0],
                open_top: false,
            };
            if p.family == Family::Table {
                push("top", "top".into(), slab);
            } else {
                push("seat", "seat".into(), slab);
                if p.backrest {
                    push(
                        "backrest",
                        "backrest".into(),
                        Prim::Cuboid {
                            center: [-p.depth / 2.0 - p.slab / 2.0, 0.0, p.height - p.slab + p.backrest_height / 2.0],
                            half: [p.slab / 2.0, p.width / 2.0, p.backrest_height / 2.0],
                            open_top: false,
                        },
                    );
                }
                if p.armrests {
                    for side in [Side::Left, Side::Right] {
                        push(
                            "armrest",
                            format!("{} armrest", side.name()),
                            Prim::Cuboid {
                                center: [0.0, side.sign() * (p.width / 2.0 - p.slab / 2.0), p.height + 0.22],
                                half: [p.depth * 0.4, p.slab / 2.0, p.slab / 2.0],
                                open_top: false,
                            },
                        );
                    }
                }
            }
        }
        Family::Mug => {
            push(
                "body",
                "body".into(),
                Prim::Cylinder {
                    base: [0.0, 0.0, 0.0],
                    radius: p.radius,
                    height: p.height,
                    cap_top: false,
                },
            );
            if let Some(side) = p.handle {
                let y = side.sign() * (p.radius + 0.12);
                push(
                    "handle",
                    "handle".into(),
                    Prim::Cuboid {
                        center: [0.0, y, p.height / 2.0],
                        half: [0.03, 0.03, p.height * 0.3],
                        open_top: false,
                    },
                );
            }
        }
        Family::Box => {
            push(
                "body",
                "body".into(),
                Prim::Cuboid {
                    center: [0.0, 0.0, p.height / 2.0],
                    half: [p.depth / 2.0, p.width / 2.0, p.height / 2.0],
                    open_top: false,
                },
            );
            if p.side_handles {
                for side in [Side::Left, Side::Right] {
                    push(
                        "handle",
                        format!("{} handle", side.name()),
                        Prim::Cuboid {
                            center: [0.0, side.sign() * (p.width / 2.0 + 0.04), p.height * 0.7],
                            half: [p.depth * 0.2, 0.04, 0.025],
                            open_top: false,
                        },
                    );
                }
            }
        }
        Family::Container => {
            push(
                "body",
                "body".into(),
                Prim::Cuboid {
                    center: [0.0, 0.0, p.height / 2.0],
                    half: [p.depth / 2.0, p.width / 2.0, p.height / 2.0],
                    open_top: true,
                },
            );
            if p.lid {
                push(
                    "lid",
                    "lid".into(),
                    Prim::Cuboid {
                        center: [0.0, 0.0, p.height + p.slab / 2.0],
                        half: [p.depth / 2.0 + 0.02, p.width / 2.0 + 0.02, p.slab / 2.0],
                        open_top: false,
                    },
                );
            }
        }
    }
    parts
}

/// Area-weighted surface centroid, the mass proxy for the stability rule.
pub fn mass_centroid(parts: &[Part]) -> Point3 {
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for part in parts {
        let a = part.prim.area();
        let c = part.prim.surface_centroid();
        for k in 0..3 {
            acc[k] += a * c[k];
        }
        total += a;
    }
    acc.map(|v| v / total)
}

/// Footprint vertices of every part touching the ground plane z = 0.
pub fn ground_contacts(parts: &[Part]) -> Vec<[f64; 2]> {
    parts.iter().filter(|p| p.prim.bottom_z().abs() < 1e-9).flat_map(|p| p.prim.footprint()).collect()
}

/// Counter-clockwise convex hull (Andrew's monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Signed distance from `q` to the boundary of a CCW convex polygon,
/// positive inside.
pub fn signed_distance_to_hull(hull: &[[f64; 2]], q: [f64; 2]) -> f64 {
    if hull.len() < 3 {
        return f64::NEG_INFINITY;
    }
    let mut best = f64::INFINITY;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let e = [b[0] - a[0], b[1] - a[1]];
        let len = e[0].hypot(e[1]);
        let d = (e[0] * (q[1] - a[1]) - e[1] * (q[0] - a[0])) / len;
        best = best.min(d);
    }
    best
}

fn draw_params(family: Family, rng: &mut Rng) -> ObjectParams {
    let mut p = ObjectParams {
        family,
        depth: 0.0,
        width: 0.0,
        height: 0.0,
        slab: 0.0,
        leg_half: 0.0,
        leg_inset: 0.0,
        removed_leg: None,
        backrest: false,
        backrest_height: 0.0,
        armrests: false,
        radius: 0.0,
        handle: None,
        side_handles: false,
        lid: false,
    };
    match family {
        Family::Chair => {
            p.depth = rng.range(0.4, 0.6);
            p.width = rng.range(0.4, 0.6);
            p.height = rng.range(0.4, 0.55);
            p.slab = 0.05;
            p.leg_half = rng.range(0.02, 0.035);
            p.leg_inset = rng.range(0.05, 0.09);
            p.backrest = rng.bernoulli(0.8);
            p.backrest_height = rng.range(0.55, 0.85);
            p.armrests = rng.bernoulli(0.4);
            if rng.bernoulli(0.4) {
                p.removed_leg = Some(*rng.choose(&LegPos::ALL));
            }
        }
        Family::Table => {
            p.depth = rng.range(0.6, 1.0);
            p.width = rng.range(0.6, 1.2);
            p.height = rng.range(0.6, 0.8);
            p.slab = 0.05;
            p.leg_half = rng.range(0.025, 0.045);
            p.leg_inset = rng.range(0.04, 0.1);
            if rng.bernoulli(0.35) {
                p.removed_leg = Some(*rng.choose(&LegPos::ALL));
            }
        }
        Family::Mug => {
            p.radius = rng.range(0.25, 0.4);
            p.height = rng.range(0.5, 0.9);
            if rng.bernoulli(0.8) {
                p.handle = Some(if rng.bernoulli(0.5) { Side::Left } else { Side::Right });
            }
        }
        Family::Box => {
            p.depth = rng.range(0.4, 0.9);
            p.width = rng.range(0.4, 0.9);
            p.height = rng.range(0.3, 0.7);
            p.side_handles = rng.bernoulli(0.5);
        }
        Family::Container => {
            p.depth = rng.range(0.4, 0.9);
            p.width = rng.range(0.4, 0.9);
            p.height = rng.range(0.3, 0.7);
            p.slab = 0.04;
            p.lid = rng.bernoulli(0.45);
        }
    }
    p
}

/// Metadata derived from parameters alone.
pub fn describe(object_id: &str, p: &ObjectParams) -> ObjectMetadata {
    let parts = build_parts(p);
    let mut part_counts = BTreeMap::new();
    let mut part_centers = BTreeMap::new();
    let mut dimensions = BTreeMap::new();
    for part in &parts {
        *part_counts.entry(part.kind.to_string()).or_insert(0) += 1;
        let (center, ext) = match part.prim {
            Prim::Cuboid { center, half, .. } => (center, half.map(|h| 2.0 * h)),
            Prim::Cylinder { base, radius, height, .. } => ([base[0], base[1], base[2] + height / 2.0], [2.0 * radius, 2.0 * radius, height]),
        };
        dimensions.insert(part.label.clone(), ext);
        if part.label == part.kind {
            part_centers.insert(part.kind.to_string(), center);
        }
    }
    let leg_positions = if p.family.has_legs() {
        LegPos::ALL.into_iter().filter(|&l| p.removed_leg != Some(l)).collect()
    } else {
        Vec::new()
    };
    let removed_parts = p.removed_leg.map(|l| format!("{} leg", l.name())).into_iter().collect();
    let centroid = mass_centroid(&parts);
    let hull = convex_hull(&ground_contacts(&parts));
    let support_margin = signed_distance_to_hull(&hull, [centroid[0], centroid[1]]);
    let open = match p.family {
        Family::Mug => true,
        Family::Container => !p.lid,
        _ => false,
    };
    let mirror_symmetric = match p.family {
        Family::Chair | Family::Table => p.removed_leg.is_none(),
        Family::Mug => p.handle.is_none(),
        Family::Box | Family::Container => true,
    };
    ObjectMetadata {
        object_id: object_id.to_string(),
        family: p.family,
        part_counts,
        leg_positions,
        removed_parts,
        handle_side: p.handle,
        part_centers,
        dimensions,
        mirror_symmetric,
        stable: support_margin > 0.0,
        support_margin,
        containment: open,
        open_direction: open.then(|| "up".to_string()),
        params: p.clone(),
    }
}

pub fn sample_surface(parts: &[Part], n: usize, rng: &mut Rng) -> Vec<Point3> {
    let areas: Vec<f64> = parts.iter().map(|p| p.prim.area()).collect();
    (0..n).map(|_| parts[pick_weighted(&areas, rng)].prim.sample(rng)).collect()
}

/// Draw one object of `family`. Parameter draws whose centroid sits within
/// [`STABILITY_MARGIN`] of the support boundary are redrawn.
pub fn generate_object(object_id: &str, family: Family, n_points: usize, rng: &mut Rng) -> Result<(PointCloud, ObjectMetadata)> {
    for _ in 0..1000 {
        let params = draw_params(family, rng);
        let meta = describe(object_id, &params);
        if meta.support_margin.abs() < STABILITY_MARGIN {
            continue;
        }
        let parts = build_parts(&params);
        let raw = sample_surface(&parts, n_points, rng);
        let cloud = normalize_to_unit_sphere(object_id, &raw)?;
        return Ok((cloud, meta));
    }
    Err(Error::Unsatisfiable(format!("no stable-margin draw for {family}")))
}
