//! Word-level tokenizer, a small pre-norm causal transformer, and
//! grammar-constrained greedy Look-Think-Answer decoding.
//!
//! The decoder input is `z ‖ <bos> ‖ target[..n-1]`; row t of the returned
//! logits predicts `target[t]`. Rows after `<answer>` additionally receive a
//! learned answer-span logit bias, the only parameter owned by answer
//! prediction alone.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedManifoldVars;
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const THINK: usize = 2;
pub const END_THINK: usize = 3;
pub const ANSWER: usize = 4;
pub const UNK: usize = 5;

pub const STRUCTURAL: [&str; 6] = ["<bos>", "<eos>", "<think>", "</think>", "<answer>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Structural tokens take ids 0–5; `words` follow in the given order
    /// with duplicates removed.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Vocabulary over the synthetic template lexicon.
    pub fn standard() -> Self {
        Self::new(&crate::datagen::lexicon())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_structural(id: usize) -> bool {
        id < STRUCTURAL.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(s)?;
        if tokens.len() < STRUCTURAL.len() || tokens[..STRUCTURAL.len()].iter().zip(STRUCTURAL).any(|(a, b)| a != b) {
            return Err(Error::Format("vocab must start with the structural tokens".into()));
        }
        Ok(Self::new(&tokens[STRUCTURAL.len()..]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    pub context: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_llm: 64,
            n_layers: 2,
            n_heads: 4,
            ff_hidden: 128,
            context: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmParams {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    /// Token embedding, tied to the output head.
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub lnf_gain: ParamId,
    pub lnf_bias: ParamId,
    pub answer_bias: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl LmParams {
    pub fn init(store: &mut ParamStore, cfg: LmConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        if cfg.n_heads == 0 || cfg.d_llm % cfg.n_heads != 0 {
            return Err(Error::InvalidArgument(format!("{} heads do not divide width {}", cfg.n_heads, cfg.d_llm)));
        }
        let d = cfg.d_llm;
        let s = (1.0 / d as f64).sqrt();
        let proj_s = s / (2.0 * cfg.n_layers as f64).sqrt();
        let embed = store.add_normal("lm.embed", vocab_size, d, 0.02, rng);
        let pos = store.add_normal("lm.pos", cfg.context, d, 0.02, rng);
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                ln1_gain: store.add_filled(format!("lm.{l}.ln1.gain"), 1, d, 1.0),
                ln1_bias: store.add_filled(format!("lm.{l}.ln1.bias"), 1, d, 0.0),
                wq: store.add_normal(format!("lm.{l}.wq"), d, d, s, rng),
                wk: store.add_normal(format!("lm.{l}.wk"), d, d, s, rng),
                wv: store.add_normal(format!("lm.{l}.wv"), d, d, s, rng),
                wo: store.add_normal(format!("lm.{l}.wo"), d, d, proj_s, rng),
                ln2_gain: store.add_filled(format!("lm.{l}.ln2.gain"), 1, d, 1.0),
                ln2_bias: store.add_filled(format!("lm.{l}.ln2.bias"), 1, d, 0.0),
                ff_w1: store.add_normal(format!("lm.{l}.ff.w1"), d, cfg.ff_hidden, s, rng),
                ff_b1: store.add_filled(format!("lm.{l}.ff.b1"), 1, cfg.ff_hidden, 0.0),
                ff_w2: store.add_normal(format!("lm.{l}.ff.w2"), cfg.ff_hidden, d, (1.0 / cfg.ff_hidden as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt(), rng),
                ff_b2: store.add_filled(format!("lm.{l}.ff.b2"), 1, d, 0.0),
            })
            .collect();
        Ok(Self {
            cfg,
            vocab_size,
            embed,
            pos,
            blocks,
            lnf_gain: store.add_filled("lm.lnf.gain", 1, d, 1.0),
            lnf_bias: store.add_filled("lm.lnf.bias", 1, d, 0.0),
            answer_bias: store.add_filled("lm.answer_bias", 1, vocab_size, 0.0),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// [n, |V|], row t predicts target[t].
    pub logits: Var,
    /// [n, D_llm] final-norm hidden states aligned with `logits`.
    pub hidden: Var,
}

fn ln_affine(g: &mut Graph, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    let gv = g.param(store, gain);
    let bv = g.param(store, bias);
    let n = g.mul_row(n, gv);
    g.add_row(n, bv)
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
    let wv = g.param(store, w);
    let y = g.matmul(x, wv);
    match b {
        Some(b) => {
            let bv = g.param(store, b);
            g.add_row(y, bv)
        }
        None => y,
    }
}

fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = -1e9;
        }
    }
    Tensor::from_parts(vec![len, len], m)
}

/// Rows of `target` that lie after `<answer>`.
pub fn answer_rows(target: &[usize]) -> Vec<usize> {
    match target.iter().position(|&t| t == ANSWER) {
        Some(a) => (a + 1..target.len()).collect(),
        None => Vec::new(),
    }
}

/// Teacher-forced causal pass over `z ‖ <bos> ‖ target[..n-1]`.
pub fn forward_causal(g: &mut Graph, store: &ParamStore, lm: &LmParams, manifold: &FusedManifoldVars, target: &[usize]) -> Result<LmOutput> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty target sequence".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= lm.vocab_size) {
        return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {}", lm.vocab_size)));
    }
    let nz = g.dims(manifold.tokens).0;
    let n = target.len();
    let len = nz + n;
    if len > lm.cfg.context {
        return Err(Error::ContextOverflow {
            len,
            limit: lm.cfg.context,
        });
    }
    let d = lm.cfg.d_llm;
    let heads = lm.cfg.n_heads;
    let hd = d / heads;

    let embed = g.param(store, lm.embed);
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(&target[..n - 1]);
    let tok = g.gather_rows(embed, &inputs);
    let seq = g.concat_rows(&[manifold.tokens, tok]);
    let pos_all = g.param(store, lm.pos);
    let pos = g.slice_rows(pos_all, 0, len);
    let mut x = g.add(seq, pos);
    let mask = g.constant(causal_mask(len));

    for block in &lm.blocks {
        let h = ln_affine(g, store, x, block.ln1_gain, block.ln1_bias);
        let q = linear(g, store, h, block.wq, None);
        let k = linear(g, store, h, block.wk, None);
        let v = linear(g, store, h, block.wv, None);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * hd, hd);
            let kh = g.slice_cols(k, head * hd, hd);
            let vh = g.slice_cols(v, head * hd, hd);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, 1.0 / (hd as f64).sqrt());
            let s = g.add(s, mask);
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        let attn = linear(g, store, cat, block.wo, None);
        x = g.add(x, attn);
        let h = ln_affine(g, store, x, block.ln2_gain, block.ln2_bias);
        let f = linear(g, store, h, block.ff_w1, Some(block.ff_b1));
        let f = g.relu(f);
        let f = linear(g, store, f, block.ff_w2, Some(block.ff_b2));
        x = g.add(x, f);
    }
    let tail = g.slice_rows(x, nz, n);
    let hidden = ln_affine(g, store, tail, lm.lnf_gain, lm.lnf_bias);
    let mut logits = g.matmul_nt(hidden, embed);
    let rows = answer_rows(target);
    if !rows.is_empty() {
        let mut m = vec![0.0; n];
        for r in rows {
            m[r] = 1.0;
        }
        let mcol = g.constant(Tensor::from_parts(vec![n, 1], m));
        let ab = g.param(store, lm.answer_bias);
        let bias = g.matmul(mcol, ab);
        logits = g.add(logits, bias);
    }
    Ok(LmOutput { logits, hidden })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThinkMode {
    /// Decode a rationale inside `<think> … </think>`.
    Explicit,
    /// Close the think span immediately and decode the answer directly.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub rationale_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    /// Full emitted sequence, structural tokens included.
    pub emitted: Vec<usize>,
    /// One row per rationale token: the state that emitted it.
    pub hidden_states: Vec<Vec<f64>>,
    /// Sum of log-softmax probabilities of the emitted tokens.
    pub logprob: f64,
    /// False when `max_len` ran out before `<eos>`.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    Think,
    AfterThink,
    Answer { words: usize },
}

fn allowed(phase: Phase, id: usize, mode: ThinkMode) -> bool {
    let word = !Vocab::is_structural(id);
    match phase {
        Phase::Start => id == THINK,
        Phase::Think => match mode {
            ThinkMode::Explicit => word || id == END_THINK,
            ThinkMode::Skip => id == END_THINK,
        },
        Phase::AfterThink => id == ANSWER,
        Phase::Answer { words: 0 } => word,
        Phase::Answer { .. } => word || id == EOS,
    }
}

/// Greedy decoding under the `<think> R </think> <answer> A <eos>` grammar.
/// Ties in the argmax go to the smallest token id.
pub fn decode_look_think_answer(store: &ParamStore, lm: &LmParams, manifold: &dyn Fn(&mut Graph) -> FusedManifoldVars, max_len: usize, mode: ThinkMode) -> Result<ReasoningTrace> {
    let mut emitted: Vec<usize> = Vec::new();
    let mut trace = ReasoningTrace {
        rationale_ids: Vec::new(),
        answer_ids: Vec::new(),
        emitted: Vec::new(),
        hidden_states: Vec::new(),
        logprob: 0.0,
        complete: false,
    };
    let mut phase = Phase::Start;
    while emitted.len() < max_len {
        // Teacher-forced pass with a placeholder in the slot being predicted.
        let mut target = emitted.clone();
        target.push(EOS);
        let mut g = Graph::new();
        let z = manifold(&mut g);
        let out = forward_causal(&mut g, store, lm, &z, &target)?;
        let t = emitted.len();
        let row = g.value(out.logits).row(t).to_vec();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        // The placeholder must not leak into its own row's answer bias.
        let lp = log_softmax(&row);
        let mut best: Option<usize> = None;
        for id in 0..row.len() {
            if allowed(phase, id, mode) && best.is_none_or(|b| row[id] > row[b]) {
                best = Some(id);
            }
        }
        let id = best.ok_or_else(|| Error::InvalidArgument("no admissible token".into()))?;
        trace.logprob += lp[id];
        emitted.push(id);
        match phase {
            Phase::Start => phase = Phase::Think,
            Phase::Think if id == END_THINK => phase = Phase::AfterThink,
            Phase::Think => {
                trace.rationale_ids.push(id);
                trace.hidden_states.push(g.value(out.hidden).row(t).to_vec());
            }
            Phase::AfterThink => phase = Phase::Answer { words: 0 },
            Phase::Answer { words } => {
                if id == EOS {
                    trace.complete = true;
                    break;
                }
                trace.answer_ids.push(id);
                phase = Phase::Answer { words: words + 1 };
            }
        }
    }
    trace.emitted = emitted;
    Ok(trace)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Build `<think> R </think> <answer> A <eos>`.
pub fn training_sequence(rationale: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(rationale.len() + answer.len() + 4);
    t.push(THINK);
    t.extend_from_slice(rationale);
    t.push(END_THINK);
    t.push(ANSWER);
    t.extend_from_slice(answer);
    t.push(EOS);
    t
}

/// Row spans of a training sequence: (rationale rows incl. `</think>`,
/// rationale word rows, answer rows incl. `<eos>`).
pub fn sequence_spans(target: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let end = target.iter().position(|&t| t == END_THINK);
    let (gen, words) = match end {
        Some(e) => ((1..=e).collect(), (1..e).collect()),
        None => (Vec::new(), Vec::new()),
    };
    (gen, words, answer_rows(target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trip_and_unk() {
        let v = Vocab::new(&["the", "chair", "has", "3", "legs"]);
        assert_eq!(v.tokenize(""), Vec::<usize>::new());
        assert_eq!(v.detokenize(&[]), "");
        let s = "the chair has 3 legs";
        assert_eq!(v.detokenize(&v.tokenize(s)), s);
        assert_eq!(v.tokenize("the antenna"), vec![v.id("the"), UNK]);
        assert_eq!(v.id("<think>"), THINK);
        assert_eq!(v.token(ANSWER), "<answer>");
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::new(&["a", "b"]);
        assert_eq!(Vocab::from_json(&v.to_json().unwrap()).unwrap(), v);
        assert!(Vocab::from_json("[\"a\"]").is_err());
    }

    #[test]
    fn spans_of_sequence() {
        let t = training_sequence(&[10, 11], &[12]);
        assert_eq!(t, vec![THINK, 10, 11, END_THINK, ANSWER, 12, EOS]);
        let (gen, words, ans) = sequence_spans(&t);
        assert_eq!(gen, vec![1, 2, 3]);
        assert_eq!(words, vec![1, 2]);
        assert_eq!(ans, vec![5, 6]);
    }

    #[test]
    fn grammar_table() {
        assert!(allowed(Phase::Start, THINK, ThinkMode::Explicit));
        assert!(!allowed(Phase::Start, 10, ThinkMode::Explicit));
        assert!(allowed(Phase::Think, 10, ThinkMode::Explicit));
        assert!(!allowed(Phase::Think, 10, ThinkMode::Skip));
        assert!(!allowed(Phase::Think, EOS, ThinkMode::Explicit));
        assert!(allowed(Phase::AfterThink, ANSWER, ThinkMode::Explicit));
        assert!(!allowed(Phase::Answer { words: 0 }, EOS, ThinkMode::Explicit));
        assert!(allowed(Phase::Answer { words: 1 }, EOS, ThinkMode::Explicit));
    }
}
