//! The full Look-Think-Answer network: encoders, GCMA fusion, the manifold
//! projection, the causal reasoner and the anchor heads, sharing one
//! parameter store.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"PCOTCKPT"  u32 version = 1
//! u64 config_len, config JSON (ModelConfig)
//! u64 n_params, then per parameter: u32 name_len, name, u64 rows, u64 cols
//! payload: every parameter's rows·cols f64 values, row-major, in header order
//! ```
//!
//! The vocabulary is stored next to the checkpoint as `<path>.vocab.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_points_var, encode_views_var, extract_patches, group_points, EncoderConfig, PatchInputs, PointEncoder, PointGroups, ViewEncoder, ViewImage};
use crate::error::{Error, Result};
use crate::fusion::{assemble_manifold_var, gcma_attend_var, occlusion_gate_fuse_var, FusedManifold, FusedManifoldVars, FusionConfig, GcmaParams, ManifoldProjection};
use crate::geometry::{build_spherical_rig, CameraRig, PointCloud, DEFAULT_FOV_DEG, DEFAULT_RADIUS};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::objectives::{loss_anchor, loss_gen, loss_pred, loss_total, AnchorHeads, LossConfig, LossParts};
use crate::reasoner::{decode_look_think_answer, forward_causal, sequence_spans, training_sequence, LmConfig, LmParams, ReasoningTrace, ThinkMode, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub lm: LmConfig,
    pub proj_dim: usize,
    pub camera_radius: f64,
    pub fov_deg: f64,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            lm: LmConfig::default(),
            proj_dim: 32,
            camera_radius: DEFAULT_RADIUS,
            fov_deg: DEFAULT_FOV_DEG,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny sizes for gradient checks.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                n_tokens: 4,
                knn: 4,
                point_hidden: 4,
                d_model: 6,
                patch_grid: 2,
                n_views: 8,
                image_size: 8,
                fourier_bands: 2,
            },
            fusion: FusionConfig {
                d_model: 6,
                d_llm: 8,
                fourier_bands: 2,
                fourier_hidden: 4,
                sigma_init: 0.3,
            },
            lm: LmConfig {
                d_llm: 8,
                n_layers: 2,
                n_heads: 2,
                ff_hidden: 8,
                context: 64,
            },
            proj_dim: 4,
            camera_radius: DEFAULT_RADIUS,
            fov_deg: DEFAULT_FOV_DEG,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.d_model != self.fusion.d_model || self.fusion.d_llm != self.lm.d_llm || e.fourier_bands != self.fusion.fourier_bands {
            return Err(Error::InvalidArgument("encoder, fusion and reasoner widths disagree".into()));
        }
        if e.n_views != 8 {
            return Err(Error::InvalidArgument(format!("the rig has 8 views, encoder expects {}", e.n_views)));
        }
        if e.patch_grid == 0 || e.image_size % e.patch_grid != 0 {
            return Err(Error::InvalidArgument(format!("image size {} not divisible by patch grid {}", e.image_size, e.patch_grid)));
        }
        if e.n_tokens == 0 || e.knn == 0 || self.proj_dim == 0 {
            return Err(Error::InvalidArgument("token, neighbor and projection counts must be positive".into()));
        }
        Ok(())
    }
}

/// Which answer strategy a model is trained and decoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningMode {
    /// No rationale at all: `<think></think><answer> A <eos>`.
    Direct,
    /// Rationales supervise training, but the answer is decoded directly.
    Implicit,
    /// Rationale decoded before the answer.
    Explicit,
}

impl ReasoningMode {
    pub const ALL: [ReasoningMode; 3] = [ReasoningMode::Direct, ReasoningMode::Implicit, ReasoningMode::Explicit];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(Self::Direct),
            "implicit" => Some(Self::Implicit),
            "explicit" => Some(Self::Explicit),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Implicit => "implicit",
            Self::Explicit => "explicit",
        }
    }

    pub fn think_mode(self) -> ThinkMode {
        match self {
            Self::Explicit => ThinkMode::Explicit,
            Self::Direct | Self::Implicit => ThinkMode::Skip,
        }
    }
}

/// Fixed, parameter-free inputs of one object.
#[derive(Debug, Clone)]
pub struct PreparedObject {
    pub object_id: String,
    pub groups: PointGroups,
    pub patches: PatchInputs,
}

/// One supervised record in token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Index into the prepared-object table.
    pub object: usize,
    pub level: u8,
    pub question: Vec<usize>,
    pub rationale: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub point_enc: PointEncoder,
    pub view_enc: ViewEncoder,
    pub gcma: GcmaParams,
    pub proj: ManifoldProjection,
    pub lm: LmParams,
    pub anchor: AnchorHeads,
    pub rig: CameraRig,
}

pub struct SensoryVars {
    pub manifold: FusedManifoldVars,
    /// Mean of H_geo over tokens, [1, D].
    pub geo_pooled: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchVars {
    pub total: Var,
    pub gen: Var,
    pub pred: Var,
    pub anchor: Option<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let mut store = ParamStore::new();
        let point_enc = PointEncoder::init(&mut store, &cfg.encoder, &mut rng);
        let view_enc = ViewEncoder::init(&mut store, &cfg.encoder, &mut rng);
        let gcma = GcmaParams::init(&mut store, &cfg.fusion, &mut rng);
        let proj = ManifoldProjection::init(&mut store, &cfg.fusion, &mut rng);
        let lm = LmParams::init(&mut store, cfg.lm, vocab.len(), &mut rng)?;
        let anchor = AnchorHeads::init(&mut store, cfg.lm.d_llm, cfg.encoder.d_model, cfg.proj_dim, &mut rng);
        let rig = build_spherical_rig(cfg.camera_radius, cfg.fov_deg, cfg.encoder.image_size)?;
        Ok(Self {
            cfg,
            vocab,
            store,
            point_enc,
            view_enc,
            gcma,
            proj,
            lm,
            anchor,
            rig,
        })
    }

    pub fn prepare(&self, cloud: &PointCloud, views: &[ViewImage]) -> Result<PreparedObject> {
        if views.len() != self.rig.len() {
            return Err(Error::InvalidArgument(format!("{} view images for a {}-view rig", views.len(), self.rig.len())));
        }
        let patches = extract_patches(views, self.cfg.encoder.patch_grid)?;
        if patches.patches.cols() != self.cfg.encoder.patch_inputs() {
            return Err(Error::InvalidArgument(format!("views of size {} do not match the encoder's {}", views[0].size, self.cfg.encoder.image_size)));
        }
        Ok(PreparedObject {
            object_id: cloud.object_id.clone(),
            groups: group_points(cloud, &self.cfg.encoder)?,
            patches,
        })
    }

    /// Look: encoders, GCMA, gate and manifold assembly.
    pub fn sensory(&self, g: &mut Graph, obj: &PreparedObject, question: &[usize]) -> Result<SensoryVars> {
        let geo = encode_points_var(g, &self.store, &self.point_enc, &obj.groups);
        let vis = encode_views_var(g, &self.store, &self.view_enc, &obj.patches);
        let att = gcma_attend_var(g, &self.store, &self.gcma, &geo, &vis, &self.rig)?;
        let fused = occlusion_gate_fuse_var(g, &self.store, &self.gcma, geo.features, att.attended)?;
        let manifold = assemble_manifold_var(g, &self.store, &self.proj, fused.sensory, geo.features, question, self.lm.embed);
        let geo_pooled = g.mean_rows(geo.features);
        Ok(SensoryVars { manifold, geo_pooled })
    }

    pub fn manifold_value(&self, obj: &PreparedObject, question: &[usize]) -> Result<FusedManifold> {
        let mut g = Graph::new();
        let s = self.sensory(&mut g, obj, question)?;
        Ok(FusedManifold {
            tokens: g.value(s.manifold.tokens).clone(),
            provenance: s.manifold.provenance.clone(),
            geo_features: g.value(s.manifold.geo_features).clone(),
        })
    }

    pub fn decode(&self, obj: &PreparedObject, question: &[usize], mode: ReasoningMode, max_len: usize) -> Result<ReasoningTrace> {
        let z = self.manifold_value(obj, question)?;
        let build = |g: &mut Graph| FusedManifoldVars {
            tokens: g.constant(z.tokens.clone()),
            provenance: z.provenance.clone(),
            geo_features: g.constant(z.geo_features.clone()),
        };
        decode_look_think_answer(&self.store, &self.lm, &build, max_len, mode.think_mode())
    }

    /// Losses of a batch on one tape; in-batch objects are the anchor's
    /// negatives. Batches with a single distinct object carry no anchor term.
    pub fn batch_loss(&self, g: &mut Graph, objects: &[PreparedObject], batch: &[&Example], mode: ReasoningMode, loss: &LossConfig) -> Result<BatchVars> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        for ex in batch {
            let next = slots.len();
            slots.entry(ex.object).or_insert(next);
        }
        let mut pooled: Vec<Option<Var>> = vec![None; slots.len()];
        let mut pending_anchor: Vec<(Var, usize)> = Vec::new();
        let mut gens = Vec::new();
        let mut preds = Vec::new();
        for ex in batch {
            let obj = objects.get(ex.object).ok_or_else(|| Error::InvalidArgument(format!("object index {} out of range", ex.object)))?;
            let s = self.sensory(g, obj, &ex.question)?;
            let slot = slots[&ex.object];
            pooled[slot].get_or_insert(s.geo_pooled);

            let direct = training_sequence(&[], &ex.answer);
            let full = training_sequence(&ex.rationale, &ex.answer);
            let (gen_seq, pred_seq) = match mode {
                ReasoningMode::Direct => (&direct, None),
                ReasoningMode::Explicit => (&full, None),
                ReasoningMode::Implicit => (&full, Some(&direct)),
            };
            let out = forward_causal(g, &self.store, &self.lm, &s.manifold, gen_seq)?;
            let (gen_rows, word_rows, ans_rows) = sequence_spans(gen_seq);
            gens.push(loss_gen(g, out.logits, gen_seq, &gen_rows)?);
            if !word_rows.is_empty() {
                let h = g.gather_rows(out.hidden, &word_rows);
                pending_anchor.push((h, slot));
            }
            let (pred_logits, pred_seq, pred_rows) = match pred_seq {
                None => (out.logits, gen_seq, ans_rows),
                Some(seq) => {
                    let o = forward_causal(g, &self.store, &self.lm, &s.manifold, seq)?;
                    (o.logits, seq, sequence_spans(seq).2)
                }
            };
            // Stage 1 computes the answer loss off the tape, for logging.
            let pred_logits = if loss.stage == 1 { g.detach(pred_logits) } else { pred_logits };
            preds.push(loss_pred(g, pred_logits, pred_seq, &pred_rows)?);
        }
        let gen = mean_of(g, &gens);
        let pred = mean_of(g, &preds);
        let anchor = if pooled.len() >= 2 && !pending_anchor.is_empty() {
            let rows: Vec<Var> = pooled.into_iter().map(|p| p.expect("every slot pooled")).collect();
            let geo = g.concat_rows(&rows);
            let mut terms = Vec::with_capacity(pending_anchor.len());
            for (h, slot) in pending_anchor {
                terms.push(loss_anchor(g, &self.store, &self.anchor, h, geo, slot, loss.tau)?);
            }
            Some(mean_of(g, &terms))
        } else {
            None
        };
        let total = loss_total(g, LossParts { gen, pred, anchor }, loss);
        Ok(BatchVars { total, gen, pred, anchor })
    }

    pub fn vocab_path(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".vocab.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_checkpoint(&self.cfg, &self.store)?).map_err(|e| Error::io(path, e))?;
        self.vocab.save(&Self::vocab_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (cfg, values) = decode_checkpoint(&bytes)?;
        let vocab = Vocab::load(&Self::vocab_path(path))?;
        let mut model = Self::new(cfg, vocab)?;
        if values.len() != model.store.len() {
            return Err(Error::Format(format!("checkpoint has {} parameters, model has {}", values.len(), model.store.len())));
        }
        for (name, t) in values {
            let id = model.store.find(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if model.store.value(id).shape() != t.shape() {
                return Err(Error::Format(format!("parameter {name}: shape {:?} vs {:?}", t.shape(), model.store.value(id).shape())));
            }
            *model.store.value_mut(id) = t;
        }
        Ok(model)
    }
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

const MAGIC: &[u8; 8] = b"PCOTCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for e in store.entries() {
        let (r, c) = e.value.dims2();
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap())).map_err(|_| Error::Format("size overflow".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let clen = r.u64()?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(clen)?)?;
    let n = r.u64()?;
    let mut header = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name not utf-8".into()))?;
        let (rows, cols) = (r.u64()?, r.u64()?);
        header.push((name, rows, cols));
    }
    let mut values = Vec::with_capacity(header.len());
    for (name, rows, cols) in header {
        let raw = r.take(rows.checked_mul(cols).and_then(|k| k.checked_mul(8)).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        values.push((name, Tensor::new(vec![rows, cols], data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok((cfg, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(ModelConfig::micro(), Vocab::new(&["a", "b"])).unwrap();
        let bytes = encode_checkpoint(&m.cfg, &m.store).unwrap();
        let (cfg, values) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, m.cfg);
        assert_eq!(values.len(), m.store.len());
        for ((name, t), e) in values.iter().zip(m.store.entries()) {
            assert_eq!(name, &e.name);
            assert_eq!(t, &e.value);
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"garbage!").is_err());
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = ModelConfig::micro();
        cfg.fusion.d_llm = 12;
        assert!(cfg.validate().is_err());
    }
}
