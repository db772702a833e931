//! Question / rationale / answer templates for the three task levels.
//!
//! Level 1 asks about parts, level 2 about what a named rig view shows, and
//! level 3 about stability and containment. Every rationale is built from
//! assertions that hold for the object's metadata.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DatasetRecord, Family, LegPos, ObjectMetadata, Side};
use crate::error::{Error, Result};
use crate::evalverify::Assertion;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewSide {
    Front,
    Rear,
}

impl ViewSide {
    pub fn name(self) -> &'static str {
        match self {
            ViewSide::Front => "front",
            ViewSide::Rear => "rear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionKind {
    LegCount,
    ArmrestCount,
    HandleExists,
    HandleCount,
    LidExists,
    BottomLegs,
    BackrestDepth(ViewSide),
    HandleSide(ViewSide),
    TopInside,
    Stable,
    Pour,
}

/// Slot values a template can read.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Facts {
    family: Family,
    legs: usize,
    removed: Option<LegPos>,
    armrests: usize,
    handles: usize,
    handle_side: Option<Side>,
    backrest: bool,
    lid: bool,
    open: bool,
    stable: bool,
}

impl Facts {
    fn of(m: &ObjectMetadata) -> Self {
        let c = |p: &str| m.count(p).unwrap_or(0);
        Self {
            family: m.family,
            legs: c("leg"),
            removed: m.params.removed_leg,
            armrests: c("armrest"),
            handles: c("handle"),
            handle_side: m.handle_side,
            backrest: c("backrest") > 0,
            lid: c("lid") > 0,
            open: m.property("open-top").unwrap_or(false),
            stable: m.stable,
        }
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn count(part: &str, n: usize) -> String {
    Assertion::Count { part: part.into(), n }.to_string()
}

fn exists(part: &str, value: bool) -> String {
    Assertion::Exists { part: part.into(), value }.to_string()
}

fn property(name: &str, value: bool) -> String {
    Assertion::Property { name: name.into(), value }.to_string()
}

fn relation(a: &str, rel: &str, b: &str) -> String {
    Assertion::Relation {
        a: a.into(),
        rel: rel.into(),
        b: b.into(),
    }
    .to_string()
}

fn legs_clause(f: &Facts) -> String {
    let mut s = count("leg", f.legs);
    if let Some(pos) = f.removed {
        s.push(' ');
        s.push_str(
            &Assertion::Missing {
                position: pos.name().into(),
                part: "leg".into(),
            }
            .to_string(),
        );
    }
    s
}

/// Where the rig camera sits relative to the object, and whether its image
/// mirrors object left/right.
fn camera_side(v: ViewSide) -> (&'static str, &'static str) {
    match v {
        ViewSide::Front => ("in-front", "mirrors"),
        ViewSide::Rear => ("behind", "keeps"),
    }
}

impl QuestionKind {
    pub fn level(self) -> u8 {
        use QuestionKind::*;
        match self {
            LegCount | ArmrestCount | HandleExists | HandleCount | LidExists => 1,
            BottomLegs | BackrestDepth(_) | HandleSide(_) | TopInside => 2,
            Stable | Pour => 3,
        }
    }

    pub fn candidates(family: Family, level: u8) -> Vec<QuestionKind> {
        use QuestionKind::*;
        let all: &[QuestionKind] = match family {
            Family::Chair => &[LegCount, ArmrestCount, BottomLegs, BackrestDepth(ViewSide::Front), BackrestDepth(ViewSide::Rear), Stable],
            Family::Table => &[LegCount, BottomLegs, Stable],
            Family::Mug => &[HandleExists, HandleSide(ViewSide::Front), HandleSide(ViewSide::Rear), TopInside, Pour],
            Family::Box => &[HandleCount, TopInside, Pour],
            Family::Container => &[LidExists, TopInside, Pour],
        };
        all.iter().copied().filter(|k| k.level() == level).collect()
    }

    pub fn question(self, family: Family) -> String {
        use QuestionKind::*;
        let fam = family.name();
        match self {
            LegCount => format!("how many legs does this {fam} have ?"),
            ArmrestCount => format!("how many armrests does this {fam} have ?"),
            HandleExists => format!("does this {fam} have a handle ?"),
            HandleCount => format!("how many handles does this {fam} have ?"),
            LidExists => format!("does this {fam} have a lid ?"),
            BottomLegs => format!("from the bottom view how many legs of the {fam} touch the ground ?"),
            BackrestDepth(v) => format!("from the {} view is the backrest of the {fam} near or far ?", v.name()),
            HandleSide(v) => format!("from the {} view is the handle of the {fam} on the left or the right ?", v.name()),
            TopInside => format!("from the top view is the inside of the {fam} visible ?"),
            Stable => format!("is this {fam} stable on the ground ?"),
            Pour => format!("can you pour water into this {fam} ?"),
        }
    }

    /// Recover the kind (and family) from a question string.
    pub fn from_question(q: &str) -> Option<(QuestionKind, Family)> {
        let q = q.split_whitespace().collect::<Vec<_>>().join(" ");
        Family::ALL
            .into_iter()
            .flat_map(|f| (1..=3).flat_map(move |l| Self::candidates(f, l)).map(move |k| (k, f)))
            .find(|(k, f)| k.question(*f) == q)
    }

    fn render(self, f: &Facts) -> Option<(String, String)> {
        use QuestionKind::*;
        let fam = f.family.name();
        Some(match self {
            LegCount => (format!("the {fam} stands on {}", legs_clause(f)), f.legs.to_string()),
            ArmrestCount => (format!("the seat sides show {}", count("armrest", f.armrests)), f.armrests.to_string()),
            HandleExists => (format!("the body side shows {}", exists("handle", f.handles > 0)), yes_no(f.handles > 0).into()),
            HandleCount => (format!("the {fam} sides show {}", count("handle", f.handles)), f.handles.to_string()),
            LidExists => (format!("the rim shows {} and {}", exists("lid", f.lid), property("open-top", f.open)), yes_no(f.lid).into()),
            BottomLegs => (format!("the bottom view sees {} on the ground", legs_clause(f)), f.legs.to_string()),
            BackrestDepth(v) => {
                if !f.backrest {
                    return None;
                }
                let (cam, _) = camera_side(v);
                let near = v == ViewSide::Rear;
                (
                    format!("{} and the {} camera is {cam} so the backrest is {}", relation("backrest", "behind", "seat"), v.name(), if near { "near" } else { "far" }),
                    if near { "near" } else { "far" }.into(),
                )
            }
            HandleSide(v) => {
                let side = f.handle_side?;
                let rel = match side {
                    Side::Left => "left-of",
                    Side::Right => "right-of",
                };
                let (_, flip) = camera_side(v);
                let seen = match (v, side) {
                    (ViewSide::Front, Side::Left) | (ViewSide::Rear, Side::Right) => "right",
                    _ => "left",
                };
                (format!("{} and the {} view {flip} sides", relation("handle", rel, "body"), v.name()), seen.into())
            }
            TopInside => (
                format!("{} so the inside is {}", property("open-top", f.open), if f.open { "visible" } else { "hidden" }),
                yes_no(f.open).into(),
            ),
            Stable => (
                format!(
                    "{} and the centroid is {} the support so {}",
                    legs_clause(f),
                    if f.stable { "inside" } else { "outside" },
                    property("stable", f.stable)
                ),
                yes_no(f.stable).into(),
            ),
            Pour => (
                format!("{} so {}", property("open-top", f.open), property("can-contain", f.open)),
                yes_no(f.open).into(),
            ),
        })
    }

    /// The single fact an answer to this question commits to.
    pub fn implied_assertion(self, answer: &str) -> Option<Assertion> {
        use QuestionKind::*;
        let a = answer.trim().to_lowercase();
        let yes = match a.as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        };
        let num = a.parse::<usize>().ok();
        Some(match self {
            LegCount | BottomLegs => Assertion::Count { part: "leg".into(), n: num? },
            ArmrestCount => Assertion::Count { part: "armrest".into(), n: num? },
            HandleCount => Assertion::Count { part: "handle".into(), n: num? },
            HandleExists => Assertion::Exists { part: "handle".into(), value: yes? },
            LidExists => Assertion::Exists { part: "lid".into(), value: yes? },
            BackrestDepth(v) => {
                let near = match a.as_str() {
                    "near" => true,
                    "far" => false,
                    _ => return None,
                };
                let behind = near == (v == ViewSide::Rear);
                Assertion::Relation {
                    a: "backrest".into(),
                    rel: if behind { "behind" } else { "in-front-of" }.into(),
                    b: "seat".into(),
                }
            }
            HandleSide(v) => {
                let seen_right = match a.as_str() {
                    "right" => true,
                    "left" => false,
                    _ => return None,
                };
                // The front view mirrors object left/right.
                let object_left = seen_right == (v == ViewSide::Front);
                Assertion::Relation {
                    a: "handle".into(),
                    rel: if object_left { "left-of" } else { "right-of" }.into(),
                    b: "body".into(),
                }
            }
            TopInside => Assertion::Property { name: "open-top".into(), value: yes? },
            Stable => Assertion::Property { name: "stable".into(), value: yes? },
            Pour => Assertion::Property { name: "can-contain".into(), value: yes? },
        })
    }
}

/// Draw a level-`level` question for `meta`. A draw whose template needs a
/// part the object lacks returns [`Error::Unsatisfiable`]; callers redraw.
pub fn generate_qa(meta: &ObjectMetadata, level: u8, rng: &mut Rng) -> Result<DatasetRecord> {
    if !(1..=3).contains(&level) {
        return Err(Error::InvalidArgument(format!("level {level} not in 1..=3")));
    }
    let kinds = QuestionKind::candidates(meta.family, level);
    let kind = *rng.choose(&kinds);
    let (rationale, answer) = kind
        .render(&Facts::of(meta))
        .ok_or_else(|| Error::Unsatisfiable(format!("{kind:?} for {}", meta.object_id)))?;
    Ok(DatasetRecord {
        object_id: meta.object_id.clone(),
        level,
        question: kind.question(meta.family),
        rationale,
        answer,
        points_path: format!("clouds/{}.pts", meta.object_id),
        views_path: format!("views/{}.npy", meta.object_id),
    })
}

/// Every word any template can emit, sorted.
pub fn lexicon() -> Vec<String> {
    let mut words = BTreeSet::new();
    let removed = [None, Some(LegPos::FrontLeft), Some(LegPos::FrontRight), Some(LegPos::RearLeft), Some(LegPos::RearRight)];
    let sides = [None, Some(Side::Left), Some(Side::Right)];
    for family in Family::ALL {
        for level in 1..=3 {
            for kind in QuestionKind::candidates(family, level) {
                words.extend(kind.question(family).split_whitespace().map(str::to_string));
                for legs in 0..=4 {
                    for &rem in &removed {
                        for &handle_side in &sides {
                            for flags in 0..16u8 {
                                let bit = |k: u8| flags & (1 << k) != 0;
                                let f = Facts {
                                    family,
                                    legs,
                                    removed: rem,
                                    armrests: 2 * usize::from(bit(0)),
                                    handles: legs.min(2),
                                    handle_side,
                                    backrest: true,
                                    lid: bit(1),
                                    open: bit(2),
                                    stable: bit(3),
                                };
                                if let Some((r, a)) = kind.render(&f) {
                                    words.extend(r.split_whitespace().map(str::to_string));
                                    words.insert(a);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    words.into_iter().collect()
}
