//! Training losses and the two-stage schedule.
//!
//! * `loss_gen`: mean cross-entropy over the rationale rows.
//! * `loss_pred`: mean cross-entropy over the answer rows (teacher forced).
//! * `loss_anchor`: InfoNCE between every rationale hidden state and the
//!   pooled geometry of the matched object, with in-batch negatives.
//!
//! Stage 1 optimizes `gen + α·anchor` and leaves the answer term off the
//! tape; stage 2 optimizes `gen + λ·pred + α·anchor`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Var};

/// Norm floor below which a projected vector has no direction.
pub const ZERO_NORM: f64 = 1e-12;
const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub proj_dim: usize,
    pub stage: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.1,
            tau: 0.07,
            proj_dim: 32,
            stage: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.alpha >= 0.0 && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("need lambda >= 0, alpha >= 0, tau > 0; got {}, {}, {}", self.lambda, self.alpha, self.tau)));
        }
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.proj_dim == 0 {
            return Err(Error::InvalidArgument("proj_dim must be positive".into()));
        }
        Ok(())
    }
}

/// φ (reasoning states) and ψ (geometry), each linear-tanh-linear into the
/// shared metric space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorHeads {
    pub phi_w1: ParamId,
    pub phi_b1: ParamId,
    pub phi_w2: ParamId,
    pub phi_b2: ParamId,
    pub psi_w1: ParamId,
    pub psi_b1: ParamId,
    pub psi_w2: ParamId,
    pub psi_b2: ParamId,
}

impl AnchorHeads {
    pub fn init(store: &mut ParamStore, d_llm: usize, d_geo: usize, proj_dim: usize, rng: &mut Rng) -> Self {
        let s = |n: usize| (1.0 / n as f64).sqrt();
        Self {
            phi_w1: store.add_normal("anchor.phi.w1", d_llm, proj_dim, s(d_llm), rng),
            phi_b1: store.add_filled("anchor.phi.b1", 1, proj_dim, 0.0),
            phi_w2: store.add_normal("anchor.phi.w2", proj_dim, proj_dim, s(proj_dim), rng),
            phi_b2: store.add_filled("anchor.phi.b2", 1, proj_dim, 0.0),
            psi_w1: store.add_normal("anchor.psi.w1", d_geo, proj_dim, s(d_geo), rng),
            psi_b1: store.add_filled("anchor.psi.b1", 1, proj_dim, 0.0),
            psi_w2: store.add_normal("anchor.psi.w2", proj_dim, proj_dim, s(proj_dim), rng),
            psi_b2: store.add_filled("anchor.psi.b2", 1, proj_dim, 0.0),
        }
    }

    fn mlp(g: &mut Graph, store: &ParamStore, x: Var, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId) -> Var {
        let w1 = g.param(store, w1);
        let b1 = g.param(store, b1);
        let w2 = g.param(store, w2);
        let b2 = g.param(store, b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    pub fn phi(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        Self::mlp(g, store, h, self.phi_w1, self.phi_b1, self.phi_w2, self.phi_b2)
    }

    pub fn psi(&self, g: &mut Graph, store: &ParamStore, geo: Var) -> Var {
        Self::mlp(g, store, geo, self.psi_w1, self.psi_b1, self.psi_w2, self.psi_b2)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.phi_w1, self.phi_b1, self.phi_w2, self.phi_b2, self.psi_w1, self.psi_b1, self.psi_w2, self.psi_b2]
    }
}

/// Mean of −log softmax(logits[r])[targets[r]] over `rows`.
pub fn span_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], rows: &[usize]) -> Result<Var> {
    let (n, v) = g.dims(logits);
    if targets.len() != n {
        return Err(Error::LengthMismatch(targets.len(), n));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::InvalidArgument(format!("span row {r} outside sequence of {n}")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::InvalidArgument(format!("target {t} outside vocabulary of {v}")));
    }
    if !g.value(logits).all_finite() {
        return Err(Error::NonFiniteLogits);
    }
    let lsm = g.log_softmax_rows(logits);
    let coords: Vec<(usize, usize)> = rows.iter().map(|&r| (r, targets[r])).collect();
    let picked = g.pick(lsm, &coords);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

pub fn loss_gen(g: &mut Graph, logits: Var, targets: &[usize], rationale_rows: &[usize]) -> Result<Var> {
    if rationale_rows.is_empty() {
        return Err(Error::NoRationaleSupervision);
    }
    span_cross_entropy(g, logits, targets, rationale_rows)
}

pub fn loss_pred(g: &mut Graph, logits: Var, targets: &[usize], answer_rows: &[usize]) -> Result<Var> {
    if answer_rows.is_empty() {
        return Err(Error::NoAnswerSupervision);
    }
    span_cross_entropy(g, logits, targets, answer_rows)
}

/// InfoNCE over rationale states `hidden` [T, D_llm] against pooled
/// geometry rows `geo` [K, D]; row `positive` is the matched instance and
/// the denominator runs over all K rows, the positive included.
pub fn loss_anchor(g: &mut Graph, store: &ParamStore, heads: &AnchorHeads, hidden: Var, geo: Var, positive: usize, tau: f64) -> Result<Var> {
    let (t, _) = g.dims(hidden);
    let (k, _) = g.dims(geo);
    if t == 0 {
        return Err(Error::NoRationaleSupervision);
    }
    if k < 2 || positive >= k {
        return Err(Error::InvalidArgument(format!("anchor needs K >= 2 candidates with the positive among them (K = {k}, positive = {positive})")));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let zh = heads.phi(g, store, hidden);
    let zg = heads.psi(g, store, geo);
    for z in [zh, zg] {
        let (_, c) = g.dims(z);
        if g.value(z).data().chunks(c).any(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() < ZERO_NORM) {
            return Err(Error::ZeroNorm);
        }
    }
    let nh = g.l2_normalize_rows(zh, NORMALIZE_EPS);
    let ng = g.l2_normalize_rows(zg, NORMALIZE_EPS);
    let sim = g.matmul_nt(nh, ng);
    let logits = g.scale(sim, 1.0 / tau);
    let lsm = g.log_softmax_rows(logits);
    let coords: Vec<(usize, usize)> = (0..t).map(|r| (r, positive)).collect();
    let picked = g.pick(lsm, &coords);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// InfoNCE from a T×K similarity table (column 0 positive).
pub fn anchor_from_similarities(sims: &[Vec<f64>], tau: f64) -> f64 {
    let t = sims.len() as f64;
    sims.iter()
        .map(|row| {
            let m = row.iter().map(|s| s / tau).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|s| (s / tau - m).exp()).sum::<f64>().ln();
            lse - row[0] / tau
        })
        .sum::<f64>()
        / t
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub gen: Var,
    pub pred: Var,
    pub anchor: Option<Var>,
}

/// Stage 2: gen + λ·pred + α·anchor. Stage 1: gen + α·anchor, the answer
/// term kept off the gradient path.
pub fn loss_total(g: &mut Graph, parts: LossParts, cfg: &LossConfig) -> Var {
    let mut total = parts.gen;
    if let Some(a) = parts.anchor {
        if cfg.alpha != 0.0 {
            let a = g.scale(a, cfg.alpha);
            total = g.add(total, a);
        }
    }
    if cfg.stage == 2 && cfg.lambda != 0.0 {
        let p = g.scale(parts.pred, cfg.lambda);
        total = g.add(total, p);
    }
    total
}

/// Scalar counterpart of [`loss_total`].
pub fn total_value(gen: f64, pred: f64, anchor: f64, cfg: &LossConfig) -> f64 {
    let pred_term = if cfg.stage == 2 { cfg.lambda * pred } else { 0.0 };
    gen + pred_term + cfg.alpha * anchor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 120]));
        let loss = loss_gen(&mut g, l, &[4, 7, 119], &[0, 1, 2]).unwrap();
        assert!((g.value(loss).item() - 120f64.ln()).abs() < 1e-12);
        assert!((120f64.ln() - 4.7875).abs() < 1e-4);
    }

    #[test]
    fn hand_evaluated_three_token_span() {
        let rows = vec![vec![1.0, 0.0, -1.0], vec![0.5, 0.5, 0.0], vec![2.0, -1.0, 0.0]];
        let targets = [0, 2, 1];
        let ce = |r: &[f64], t: usize| -> f64 { (r.iter().map(|x| x.exp()).sum::<f64>()).ln() - r[t] };
        let expect = (ce(&rows[0], 0) + ce(&rows[1], 2) + ce(&rows[2], 1)) / 3.0;
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_rows(&rows).unwrap());
        let got = loss_pred(&mut g, l, &targets, &[0, 1, 2]).unwrap();
        assert!((g.value(got).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::new();
            let mut t = Tensor::zeros(&[2, 5]);
            t.data_mut()[1] = margin;
            t.data_mut()[5 + 3] = margin;
            let l = g.constant(t);
            let id = loss_gen(&mut g, l, &[1, 3], &[0, 1]).unwrap();
            let v = g.value(id).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn empty_spans_are_errors() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(loss_gen(&mut g, l, &[0, 0], &[]), Err(Error::NoRationaleSupervision)));
        assert!(matches!(loss_pred(&mut g, l, &[0, 0], &[]), Err(Error::NoAnswerSupervision)));
    }

    #[test]
    fn anchor_closed_forms() {
        assert!((anchor_from_similarities(&[vec![0.3; 4]], 0.07) - 4f64.ln()).abs() < 1e-12);
        let v = anchor_from_similarities(&[vec![1.0, 0.0]], 1.0);
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn total_arithmetic() {
        let cfg = LossConfig {
            stage: 2,
            ..LossConfig::default()
        };
        assert!((total_value(2.0, 1.0, 0.5, &cfg) - 3.05).abs() < 1e-12);
        let bare = LossConfig {
            lambda: 0.0,
            alpha: 0.0,
            stage: 2,
            ..LossConfig::default()
        };
        assert_eq!(total_value(2.0, 1.0, 0.5, &bare), 2.0);
        assert_eq!(total_value(2.0, 1.0, 0.0, &LossConfig { alpha: 0.0, ..LossConfig::default() }), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { stage: 3, ..LossConfig::default() }.validate().is_err());
    }
}
