//! Assertion grammar, metadata cross-checking and the evaluation metrics.
//!
//! Grammar (function-call syntax, whitespace-tolerant inside parentheses):
//!
//! ```text
//! count(PART)=INT          exists(PART)=BOOL         missing(POS PART)
//! relation(PART, REL, PART)                         property(NAME)=BOOL
//! ```
//!
//! REL is one of left-of, right-of, above, below, in-front-of, behind. The
//! object frame has +X front, +Y left, +Z up.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datagen::{LegPos, ObjectMetadata};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assertion {
    Count { part: String, n: usize },
    Exists { part: String, value: bool },
    Missing { position: String, part: String },
    Relation { a: String, rel: String, b: String },
    Property { name: String, value: bool },
}

pub const RELATIONS: [&str; 6] = ["left-of", "right-of", "above", "below", "in-front-of", "behind"];

impl Assertion {
    pub fn kind(&self) -> &'static str {
        match self {
            Assertion::Count { .. } => "count",
            Assertion::Exists { .. } => "exists",
            Assertion::Missing { .. } => "missing",
            Assertion::Relation { .. } => "relation",
            Assertion::Property { .. } => "property",
        }
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assertion::Count { part, n } => write!(f, "count({part})={n}"),
            Assertion::Exists { part, value } => write!(f, "exists({part})={value}"),
            Assertion::Missing { position, part } => write!(f, "missing({position} {part})"),
            Assertion::Relation { a, rel, b } => write!(f, "relation({a}, {rel}, {b})"),
            Assertion::Property { name, value } => write!(f, "property({name})={value}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAssertions {
    pub assertions: Vec<Assertion>,
    /// Fragments that opened an assertion keyword but did not parse.
    pub skipped: usize,
}

fn opener() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(count|exists|missing|relation|property)\(").unwrap())
}

fn full() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(count|exists|missing|relation|property)\(([^()]*)\)(?:=([A-Za-z0-9_-]+))?").unwrap())
}

fn word(s: &str) -> Option<String> {
    let s = s.trim();
    let ok = !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    ok.then(|| s.to_string())
}

fn boolean(v: Option<&str>) -> Option<bool> {
    match v? {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn build(kind: &str, inner: &str, value: Option<&str>) -> Option<Assertion> {
    match kind {
        "count" => Some(Assertion::Count {
            part: word(inner)?,
            n: value?.parse().ok()?,
        }),
        "exists" => Some(Assertion::Exists {
            part: word(inner)?,
            value: boolean(value)?,
        }),
        "missing" if value.is_none() => {
            let mut it = inner.split_whitespace();
            let (position, part) = (word(it.next()?)?, word(it.next()?)?);
            it.next().is_none().then_some(Assertion::Missing { position, part })
        }
        "relation" if value.is_none() => {
            let fields: Vec<&str> = inner.split(',').collect();
            let [a, rel, b] = fields[..] else { return None };
            let rel = word(rel)?;
            RELATIONS.contains(&rel.as_str()).then_some(())?;
            Some(Assertion::Relation { a: word(a)?, rel, b: word(b)? })
        }
        "property" => Some(Assertion::Property {
            name: word(inner)?,
            value: boolean(value)?,
        }),
        _ => None,
    }
}

/// Extract every well-formed assertion; other text is ignored.
pub fn parse_assertions(text: &str) -> ParsedAssertions {
    let opened = opener().find_iter(text).count();
    let assertions: Vec<Assertion> = full()
        .captures_iter(text)
        .filter_map(|c| build(&c[1], &c[2], c.get(3).map(|m| m.as_str())))
        .collect();
    ParsedAssertions {
        skipped: opened - assertions.len(),
        assertions,
    }
}

pub fn serialize_assertions(list: &[Assertion]) -> String {
    list.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    True,
    False,
    Unverifiable,
}

impl From<bool> for Verdict {
    fn from(b: bool) -> Self {
        if b {
            Verdict::True
        } else {
            Verdict::False
        }
    }
}

pub fn verify_assertion(a: &Assertion, meta: &ObjectMetadata) -> Verdict {
    match a {
        Assertion::Count { part, n } => meta.count(part).map_or(Verdict::Unverifiable, |c| (c == *n).into()),
        Assertion::Exists { part, value } => meta.count(part).map_or(Verdict::Unverifiable, |c| ((c > 0) == *value).into()),
        Assertion::Missing { position, part } => {
            if part != "leg" || !meta.family.has_legs() || LegPos::parse(position).is_none() {
                return Verdict::Unverifiable;
            }
            meta.removed_parts.contains(&format!("{position} {part}")).into()
        }
        Assertion::Relation { a, rel, b } => {
            let (Some(pa), Some(pb)) = (meta.part_centers.get(a), meta.part_centers.get(b)) else {
                return Verdict::Unverifiable;
            };
            const EPS: f64 = 1e-6;
            let holds = match rel.as_str() {
                "left-of" => pa[1] > pb[1] + EPS,
                "right-of" => pa[1] < pb[1] - EPS,
                "above" => pa[2] > pb[2] + EPS,
                "below" => pa[2] < pb[2] - EPS,
                "in-front-of" => pa[0] > pb[0] + EPS,
                "behind" => pa[0] < pb[0] - EPS,
                _ => return Verdict::Unverifiable,
            };
            holds.into()
        }
        Assertion::Property { name, value } => meta.property(name).map_or(Verdict::Unverifiable, |p| (p == *value).into()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhrCounts {
    pub verified_true: usize,
    pub verified_false: usize,
    pub unverifiable: usize,
}

impl GhrCounts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::True => self.verified_true += 1,
            Verdict::False => self.verified_false += 1,
            Verdict::Unverifiable => self.unverifiable += 1,
        }
    }

    pub fn merge(&mut self, o: &GhrCounts) {
        self.verified_true += o.verified_true;
        self.verified_false += o.verified_false;
        self.unverifiable += o.unverifiable;
    }

    /// False over verifiable; `None` when nothing was verifiable.
    pub fn rate(&self) -> Option<f64> {
        let d = self.verified_true + self.verified_false;
        (d > 0).then(|| self.verified_false as f64 / d as f64)
    }
}

pub fn tally(assertions: &[Assertion], meta: &ObjectMetadata) -> GhrCounts {
    let mut c = GhrCounts::default();
    for a in assertions {
        c.add(verify_assertion(a, meta));
    }
    c
}

/// Hallucination rate over aligned per-record assertion lists.
pub fn compute_ghr(assertions: &[Vec<Assertion>], metas: &[&ObjectMetadata]) -> Result<(Option<f64>, GhrCounts)> {
    if assertions.len() != metas.len() {
        return Err(Error::LengthMismatch(assertions.len(), metas.len()));
    }
    let mut total = GhrCounts::default();
    for (a, m) in assertions.iter().zip(metas) {
        total.merge(&tally(a, m));
    }
    Ok((total.rate(), total))
}

pub fn exact_match(predicted: &str, gold: &str) -> bool {
    predicted.trim().to_lowercase() == gold.trim().to_lowercase()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Single-reference BLEU-4: geometric mean of clipped 1–4-gram precisions,
/// a zero match count smoothed to (0+1)/(total+1), times the brevity penalty.
pub fn bleu4(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * log_sum.exp()
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// One decoded record, ready for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub object_id: String,
    pub level: u8,
    pub question: String,
    pub gold_answer: String,
    pub gold_rationale: String,
    pub answer: String,
    pub rationale: String,
    pub complete: bool,
    /// Assertions the prediction commits to (rationale plus answer).
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub n_records: usize,
    pub exact_match: f64,
    pub bleu4: f64,
    pub ghr: Option<f64>,
    pub counts: GhrCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub split: String,
    pub n_records: usize,
    pub exact_match: f64,
    pub bleu4: f64,
    pub ghr: Option<f64>,
    pub counts: GhrCounts,
    pub incomplete: usize,
    pub per_level: BTreeMap<u8, LevelReport>,
}

fn level_report(preds: &[&ScoredPrediction], metas: &BTreeMap<&str, &ObjectMetadata>) -> Result<LevelReport> {
    let n = preds.len();
    let mut em = 0usize;
    let mut bleu = 0.0;
    let mut counts = GhrCounts::default();
    for p in preds {
        let meta = metas.get(p.object_id.as_str()).ok_or_else(|| Error::InvalidArgument(format!("no metadata for {}", p.object_id)))?;
        if p.complete && exact_match(&p.answer, &p.gold_answer) {
            em += 1;
        }
        bleu += bleu4(&words(&p.rationale), &words(&p.gold_rationale));
        counts.merge(&tally(&p.assertions, meta));
    }
    let frac = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(LevelReport {
        n_records: n,
        exact_match: frac(em as f64),
        bleu4: frac(bleu),
        ghr: counts.rate(),
        counts,
    })
}

impl EvalReport {
    pub fn build(mode: &str, split: &str, preds: &[ScoredPrediction], metas: &[ObjectMetadata]) -> Result<Self> {
        let by_id: BTreeMap<&str, &ObjectMetadata> = metas.iter().map(|m| (m.object_id.as_str(), m)).collect();
        let all: Vec<&ScoredPrediction> = preds.iter().collect();
        let overall = level_report(&all, &by_id)?;
        let mut per_level = BTreeMap::new();
        for level in 1..=3u8 {
            let sel: Vec<&ScoredPrediction> = preds.iter().filter(|p| p.level == level).collect();
            per_level.insert(level, level_report(&sel, &by_id)?);
        }
        Ok(Self {
            mode: mode.to_string(),
            split: split.to_string(),
            n_records: preds.len(),
            exact_match: overall.exact_match,
            bleu4: overall.bleu4,
            ghr: overall.ghr,
            counts: overall.counts,
            incomplete: preds.iter().filter(|p| !p.complete).count(),
            per_level,
        })
    }

    /// Aligned text table: one row per level plus the overall row.
    pub fn to_table(&self) -> String {
        let pct = |x: f64| format!("{:.1}", 100.0 * x);
        let ghr = |g: Option<f64>| g.map_or("n/a".to_string(), pct);
        let names = [(1u8, "Geo."), (2, "Spat."), (3, "Func.")];
        let mut rows = vec![["level".to_string(), "n".into(), "EM%".into(), "BLEU-4".into(), "GHR%".into()]];
        for (lvl, name) in names {
            if let Some(r) = self.per_level.get(&lvl) {
                rows.push([format!("L{lvl} {name}"), r.n_records.to_string(), pct(r.exact_match), format!("{:.3}", r.bleu4), ghr(r.ghr)]);
            }
        }
        rows.push(["overall".into(), self.n_records.to_string(), pct(self.exact_match), format!("{:.3}", self.bleu4), ghr(self.ghr)]);
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("mode={} split={}\n", self.mode, self.split);
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_grammar_examples() {
        let p = parse_assertions("the chair count(leg)=3 and missing(rear-left leg) relation(handle, right-of, body) property(stable)=false");
        assert_eq!(p.skipped, 0);
        assert_eq!(
            p.assertions,
            vec![
                Assertion::Count { part: "leg".into(), n: 3 },
                Assertion::Missing {
                    position: "rear-left".into(),
                    part: "leg".into()
                },
                Assertion::Relation {
                    a: "handle".into(),
                    rel: "right-of".into(),
                    b: "body".into()
                },
                Assertion::Property {
                    name: "stable".into(),
                    value: false
                },
            ]
        );
        assert_eq!(parse_assertions("no facts here").assertions, vec![]);
    }

    #[test]
    fn malformed_fragments_are_counted() {
        let p = parse_assertions("count(leg)=3 count(leg)=many exists(seat)=true");
        assert_eq!(p.assertions.len(), 2);
        assert_eq!(p.skipped, 1);
        assert_eq!(parse_assertions("relation(a, sideways, b) count(leg").skipped, 2);
    }

    #[test]
    fn exact_match_rules() {
        assert!(exact_match("3", "3"));
        assert!(exact_match(" No", "no "));
        assert!(!exact_match("three", "3"));
    }

    #[test]
    fn bleu_identity_empty_and_short() {
        let r = words("a b c d e");
        assert_eq!(bleu4(&r, &r), 1.0);
        assert_eq!(bleu4(&[], &r), 0.0);
        // All clipped precisions are 1; only the brevity penalty remains.
        assert!((bleu4(&words("a b c d"), &r) - (-0.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn ghr_rate() {
        let mut c = GhrCounts::default();
        for v in [Verdict::True, Verdict::True, Verdict::True, Verdict::False, Verdict::Unverifiable] {
            c.add(v);
        }
        assert_eq!(c.rate(), Some(0.25));
        assert_eq!(GhrCounts::default().rate(), None);
    }
}
