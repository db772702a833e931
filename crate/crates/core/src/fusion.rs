//! Geometry-guided cross-modal attention and fused-sequence assembly.
//!
//! Each geometry token i attends over all view patches j with logit
//!
//! ```text
//! A[i,j] = (Q_i · K_j / √D) · exp(−‖u_ij − c_j‖² / 2σ²) + Φ(p_i, c_j)
//! ```
//!
//! where u_ij projects centroid p_i into the view of patch j and Φ is a small
//! network over Fourier features of p_i and c_j. Patches whose view sees the
//! centroid at or behind its camera plane get the decay floor instead.

use serde::{Deserialize, Serialize};

use crate::encoders::{fourier_features, GeoTokenVars, GeoTokens, VisTokenVars, VisTokens};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, CameraView, Point3};
use crate::numerics::{sigmoid, Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub const DECAY_FLOOR: f64 = 1e-4;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_model: usize,
    pub d_llm: usize,
    pub fourier_bands: usize,
    pub fourier_hidden: usize,
    /// Initial σ_s.
    pub sigma_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_llm: 64,
            fourier_bands: 4,
            fourier_hidden: 32,
            sigma_init: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcmaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// σ_s = exp(rho).
    pub rho: ParamId,
    pub fourier_w1: ParamId,
    pub fourier_b1: ParamId,
    pub fourier_w2: ParamId,
    pub fourier_b2: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub bands: usize,
}

impl GcmaParams {
    pub fn init(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let s = (1.0 / d as f64).sqrt();
        let fin = 2 * (3 + 2) * cfg.fourier_bands;
        let fh = cfg.fourier_hidden;
        Self {
            wq: store.add_normal("gcma.wq", d, d, s, rng),
            wk: store.add_normal("gcma.wk", d, d, s, rng),
            wv: store.add_normal("gcma.wv", d, d, s, rng),
            rho: store.add_filled("gcma.rho", 1, 1, cfg.sigma_init.ln()),
            fourier_w1: store.add_normal("gcma.fourier.w1", fin, fh, (1.0 / fin as f64).sqrt(), rng),
            fourier_b1: store.add_filled("gcma.fourier.b1", 1, fh, 0.0),
            fourier_w2: store.add_normal("gcma.fourier.w2", fh, 1, (1.0 / fh as f64).sqrt(), rng),
            fourier_b2: store.add_filled("gcma.fourier.b2", 1, 1, 0.0),
            gate_w: store.add_normal("gcma.gate.w", 2 * d, 1, (1.0 / (2 * d) as f64).sqrt(), rng),
            gate_b: store.add_filled("gcma.gate.b", 1, 1, 0.0),
            norm_gain: store.add_filled("gcma.norm.gain", 1, d, 1.0),
            norm_bias: store.add_filled("gcma.norm.bias", 1, d, 0.0),
            bands: cfg.fourier_bands,
        }
    }

    pub fn sigma(&self, store: &ParamStore) -> f64 {
        store.value(self.rho).item().exp()
    }
}

/// D(i,j) for a single centroid / patch pair.
pub fn spatial_decay(p: Point3, patch_center: [f64; 2], view: &CameraView, sigma_s: f64) -> f64 {
    let pr = view.project(p);
    if !pr.projectable {
        return DECAY_FLOOR;
    }
    let du = pr.uv[0] - patch_center[0];
    let dv = pr.uv[1] - patch_center[1];
    (-(du * du + dv * dv) / (2.0 * sigma_s * sigma_s)).exp()
}

/// Φ(p, c) evaluated from stored parameters.
pub fn fourier_bias(p: Point3, patch_center: [f64; 2], params: &GcmaParams, store: &ParamStore) -> f64 {
    let mut x = fourier_features(&p, params.bands);
    x.extend(fourier_features(&patch_center, params.bands));
    let w1 = store.value(params.fourier_w1);
    let b1 = store.value(params.fourier_b1);
    let w2 = store.value(params.fourier_w2);
    let (fin, h) = w1.dims2();
    let mut out = store.value(params.fourier_b2).item();
    for k in 0..h {
        let mut a = b1.at(0, k);
        for (i, xi) in x.iter().enumerate().take(fin) {
            a += xi * w1.at(i, k);
        }
        out += a.tanh() * w2.at(k, 0);
    }
    out
}

/// Constant geometric inputs of one attention instance.
#[derive(Debug, Clone)]
pub struct ProjectionPrior {
    /// ‖u_ij − c_j‖², zero where not projectable.
    pub dist2: Tensor,
    /// 1 where the centroid projects into patch j's view, else 0.
    pub projectable: Tensor,
    pub gamma_points: Tensor,
    pub gamma_patches: Tensor,
}

pub fn projection_prior(centroids: &[Point3], patch_centers: &[[f64; 2]], view_index: &[usize], rig: &CameraRig, bands: usize) -> Result<ProjectionPrior> {
    if patch_centers.len() != view_index.len() {
        return Err(Error::LengthMismatch(patch_centers.len(), view_index.len()));
    }
    if let Some(&v) = view_index.iter().find(|&&v| v >= rig.len()) {
        return Err(Error::InvalidArgument(format!("patch view index {v} outside rig of {}", rig.len())));
    }
    let (n, m) = (centroids.len(), patch_centers.len());
    let mut dist2 = vec![0.0; n * m];
    let mut mask = vec![0.0; n * m];
    for (i, p) in centroids.iter().enumerate() {
        let projs: Vec<_> = rig.views.iter().map(|v| v.project(*p)).collect();
        for j in 0..m {
            let pr = &projs[view_index[j]];
            if pr.projectable {
                let du = pr.uv[0] - patch_centers[j][0];
                let dv = pr.uv[1] - patch_centers[j][1];
                dist2[i * m + j] = du * du + dv * dv;
                mask[i * m + j] = 1.0;
            }
        }
    }
    let gp: Vec<f64> = centroids.iter().flat_map(|p| fourier_features(p, bands)).collect();
    let gc: Vec<f64> = patch_centers.iter().flat_map(|c| fourier_features(c, bands)).collect();
    Ok(ProjectionPrior {
        dist2: Tensor::from_parts(vec![n, m], dist2),
        projectable: Tensor::from_parts(vec![n, m], mask),
        gamma_points: Tensor::from_parts(vec![n, 6 * bands], gp),
        gamma_patches: Tensor::from_parts(vec![m, 4 * bands], gc),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GcmaVars {
    /// Ĥ_geo [N_p, D]
    pub attended: Var,
    /// A [N_p, N_v]
    pub logits: Var,
    pub decay: Var,
    pub bias: Var,
}

/// Record GCMA on the tape.
pub fn gcma_attend_var(g: &mut Graph, store: &ParamStore, params: &GcmaParams, geo: &GeoTokenVars, vis: &VisTokenVars, rig: &CameraRig) -> Result<GcmaVars> {
    let (np, d) = g.dims(geo.features);
    let (nv, dv) = g.dims(vis.features);
    let dq = store.value(params.wq).rows();
    if d != dv || d != dq || np != geo.centroids.len() || nv != vis.patch_centers.len() {
        return Err(Error::shape(
            "gcma_attend",
            format!("geo {np}x{d} ({} centroids), vis {nv}x{dv} ({} centers), projections {dq}", geo.centroids.len(), vis.patch_centers.len()),
        ));
    }
    let prior = projection_prior(&geo.centroids, &vis.patch_centers, &vis.view_index, rig, params.bands)?;

    let wq = g.param(store, params.wq);
    let wk = g.param(store, params.wk);
    let wv = g.param(store, params.wv);
    let q = g.matmul(geo.features, wq);
    let k = g.matmul(vis.features, wk);
    let v = g.matmul(vis.features, wv);
    let qk = g.matmul_nt(q, k);
    let semantic = g.scale(qk, 1.0 / (d as f64).sqrt());

    // exp(−dist² · exp(−2ρ) / 2), floored where not projectable.
    let rho = g.param(store, params.rho);
    let neg_two_rho = g.scale(rho, -2.0);
    let inv_var = g.exp(neg_two_rho);
    let dist2 = g.constant(prior.dist2.clone());
    let scaled = g.scale_by(dist2, inv_var);
    let scaled = g.scale(scaled, -0.5);
    let raw = g.exp(scaled);
    let mask = g.constant(prior.projectable.clone());
    let kept = g.mul(raw, mask);
    let floor_data: Vec<f64> = prior.projectable.data().iter().map(|m| (1.0 - m) * DECAY_FLOOR).collect();
    let floor = g.constant(Tensor::from_parts(vec![np, nv], floor_data));
    let decay = g.add(kept, floor);

    let bias = fourier_bias_var(g, store, params, &prior);

    let modulated = g.mul(semantic, decay);
    let logits = g.add(modulated, bias);
    let weights = g.softmax_rows(logits);
    let attended = g.matmul(weights, v);
    Ok(GcmaVars {
        attended,
        logits,
        decay,
        bias,
    })
}

/// Φ for every (i, j) pair. The first layer splits over the concatenation,
/// so its pre-activation is a[i] + b[j].
fn fourier_bias_var(g: &mut Graph, store: &ParamStore, params: &GcmaParams, prior: &ProjectionPrior) -> Var {
    let (np, wp) = prior.gamma_points.dims2();
    let (nv, wc) = prior.gamma_patches.dims2();
    let w1 = g.param(store, params.fourier_w1);
    let w1_points = g.slice_rows(w1, 0, wp);
    let w1_patches = g.slice_rows(w1, wp, wc);
    let gp = g.constant(prior.gamma_points.clone());
    let gc = g.constant(prior.gamma_patches.clone());
    let a = g.matmul(gp, w1_points);
    let b = g.matmul(gc, w1_patches);
    let b1 = g.param(store, params.fourier_b1);
    let b = g.add_row(b, b1);
    let pre = g.pairwise_sum(a, b);
    let hidden = g.tanh(pre);
    let w2 = g.param(store, params.fourier_w2);
    let out = g.matmul(hidden, w2);
    let b2 = g.param(store, params.fourier_b2);
    let out = g.add_row(out, b2);
    g.reshape(out, np, nv)
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub sensory: Var,
    pub gate: Var,
}

/// H_sensory = LayerNorm(H_geo + g ⊙ Ĥ_geo), g = σ(w·[H_geo ‖ Ĥ_geo] + b).
pub fn occlusion_gate_fuse_var(g: &mut Graph, store: &ParamStore, params: &GcmaParams, h_geo: Var, attended: Var) -> Result<GateVars> {
    if g.dims(h_geo) != g.dims(attended) {
        return Err(Error::shape("occlusion_gate_fuse", format!("{:?} vs {:?}", g.dims(h_geo), g.dims(attended))));
    }
    let joined = g.concat_cols(&[h_geo, attended]);
    let w = g.param(store, params.gate_w);
    let b = g.param(store, params.gate_b);
    let pre = g.matmul(joined, w);
    let pre = g.add_row(pre, b);
    let gate = g.sigmoid(pre);
    let gated = g.mul_col(attended, gate);
    let fused = g.add(h_geo, gated);
    let normed = g.layer_norm(fused, NORM_EPS);
    let gain = g.param(store, params.norm_gain);
    let bias = g.param(store, params.norm_bias);
    let out = g.mul_row(normed, gain);
    let sensory = g.add_row(out, bias);
    Ok(GateVars { sensory, gate })
}

/// Value-level GCMA: returns (Ĥ_geo, A).
pub fn gcma_attend(geo: &GeoTokens, vis: &VisTokens, rig: &CameraRig, params: &GcmaParams, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let gv = GeoTokenVars {
        features: g.constant(geo.features.clone()),
        centroids: geo.centroids.clone(),
        indices: geo.indices.clone(),
    };
    let vv = VisTokenVars {
        features: g.constant(vis.features.clone()),
        patch_centers: vis.patch_centers.clone(),
        view_index: vis.view_index.clone(),
    };
    let out = gcma_attend_var(&mut g, store, params, &gv, &vv, rig)?;
    Ok((g.value(out.attended).clone(), g.value(out.logits).clone()))
}

/// Value-level gate fusion: returns (H_sensory, per-token gate).
pub fn occlusion_gate_fuse(h_geo: &Tensor, attended: &Tensor, params: &GcmaParams, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let a = g.constant(h_geo.clone());
    let b = g.constant(attended.clone());
    let out = occlusion_gate_fuse_var(&mut g, store, params, a, b)?;
    Ok((g.value(out.sensory).clone(), g.value(out.gate).clone()))
}

/// Gate value for one token from stored parameters.
pub fn gate_value(h_geo: &[f64], attended: &[f64], params: &GcmaParams, store: &ParamStore) -> f64 {
    let w = store.value(params.gate_w);
    let pre: f64 = h_geo.iter().chain(attended).zip(w.data()).map(|(x, w)| x * w).sum::<f64>() + store.value(params.gate_b).item();
    sigmoid(pre)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Sensory,
    Text,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifoldProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl ManifoldProjection {
    pub fn init(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        Self {
            w: store.add_normal("manifold.w", cfg.d_model, cfg.d_llm, (1.0 / cfg.d_model as f64).sqrt(), rng),
            b: store.add_filled("manifold.b", 1, cfg.d_llm, 0.0),
        }
    }
}

/// z = [H_sensory W + b ‖ E[text]] on the tape.
#[derive(Debug, Clone)]
pub struct FusedManifoldVars {
    pub tokens: Var,
    pub provenance: Vec<Provenance>,
    /// H_geo retained for the anchor loss.
    pub geo_features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedManifold {
    pub tokens: Tensor,
    pub provenance: Vec<Provenance>,
    pub geo_features: Tensor,
}

impl FusedManifold {
    pub fn n_sensory(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Sensory).count()
    }
}

pub fn assemble_manifold_var(g: &mut Graph, store: &ParamStore, proj: &ManifoldProjection, sensory: Var, geo_features: Var, text_ids: &[usize], embed: ParamId) -> FusedManifoldVars {
    let w = g.param(store, proj.w);
    let b = g.param(store, proj.b);
    let s = g.matmul(sensory, w);
    let s = g.add_row(s, b);
    let n_sensory = g.dims(sensory).0;
    let mut provenance = vec![Provenance::Sensory; n_sensory];
    let tokens = if text_ids.is_empty() {
        s
    } else {
        let e = g.param(store, embed);
        let t = g.gather_rows(e, text_ids);
        provenance.extend(std::iter::repeat(Provenance::Text).take(text_ids.len()));
        g.concat_rows(&[s, t])
    };
    FusedManifoldVars {
        tokens,
        provenance,
        geo_features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraRig;

    #[test]
    fn decay_closed_forms() {
        let rig = CameraRig::default();
        let view = rig.view(0);
        let p = [0.0, 0.0, 0.0];
        let sigma = 0.13;
        assert_eq!(spatial_decay(p, [0.5, 0.5], view, sigma), 1.0);
        let c = [0.5 + sigma, 0.5];
        assert!((spatial_decay(p, c, view, sigma) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((spatial_decay(p, c, view, sigma) - 0.606_53).abs() < 1e-5);
        let r = sigma * (2.0 * 2f64.ln()).sqrt();
        assert!((spatial_decay(p, [0.5, 0.5 + r], view, sigma) - 0.5).abs() < 1e-12);
        let behind = [view.position[0] * 3.0, 0.0, view.position[2] * 3.0];
        assert_eq!(spatial_decay(behind, [0.5, 0.5], view, sigma), DECAY_FLOOR);
    }

    #[test]
    fn fourier_bias_zero_weights_is_output_bias() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let params = GcmaParams::init(&mut store, &FusionConfig::default(), &mut rng);
        store.value_mut(params.fourier_w2).data_mut().fill(0.0);
        store.value_mut(params.fourier_b2).data_mut()[0] = 0.37;
        for p in [[0.1, 0.2, 0.3], [-0.9, 0.0, 0.4]] {
            assert_eq!(fourier_bias(p, [0.3, 0.8], &params, &store), 0.37);
        }
    }

    #[test]
    fn gate_limits() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let cfg = FusionConfig {
            d_model: 4,
            ..FusionConfig::default()
        };
        let params = GcmaParams::init(&mut store, &cfg, &mut rng);
        store.value_mut(params.gate_w).data_mut().fill(0.0);
        let h = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![0.2, 0.4, -1.0, 2.0]]).unwrap();
        let (_, gate) = occlusion_gate_fuse(&h, &a, &params, &store).unwrap();
        assert_eq!(gate.item(), 0.5);
        let half: Vec<f64> = h.data().iter().zip(a.data()).map(|(x, y)| x + 0.5 * y).collect();
        let (out, _) = occlusion_gate_fuse(&h, &a, &params, &store).unwrap();
        let expect = crate::numerics::layer_norm(&Tensor::from_rows(&[half]).unwrap(), NORM_EPS);
        assert!(out.max_abs_diff(&expect) < 1e-12);

        store.value_mut(params.gate_b).data_mut()[0] = -800.0;
        let (out, gate) = occlusion_gate_fuse(&h, &a, &params, &store).unwrap();
        assert!(gate.item() < 1e-300);
        let expect = crate::numerics::layer_norm(&h, NORM_EPS);
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }
}
