//! Decoder-only transformer over circuit token sequences.
//!
//! Three variants share one backbone: `Baseline` predicts every token with the
//! tied embedding head, `TwoHead` adds a separate value head, and `Graph`
//! additionally injects template structure (attention bias from the slot
//! adjacency and random-walk features at component positions).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::grammar::{advance, mask, masked_sample, ConstraintLevel, GrammarState, DEFAULT_MAX_LEN};
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{encode_circuit, topology_name, CircuitDesign, SpecKey, Token, TokenSequence, VOCAB_SIZE};
use crate::topology::{compute_rwpe, TopologyLibrary, TopologyTemplate, RWPE_STEPS};

const N_TOKEN_TYPES: usize = 7;
const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    TwoHead,
    Graph,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TwoHead => "two_head",
            Variant::Graph => "graph",
        }
    }

    pub fn has_value_head(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "baseline" => Ok(Variant::Baseline),
            "b" | "two_head" | "two-head" => Ok(Variant::TwoHead),
            "c" | "graph" => Ok(Variant::Graph),
            _ => Err(Error::BadConfig(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub variant: Variant,
    pub rwpe_k: usize,
    pub rwpe_hidden: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn desk(variant: Variant) -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 2, d_ff: 128, variant, rwpe_k: RWPE_STEPS, rwpe_hidden: 64, max_len: 64 }
    }

    pub fn full(variant: Variant) -> Self {
        Self { d_model: 256, n_layers: 6, n_heads: 4, d_ff: 1024, ..Self::desk(variant) }
    }

    pub fn preset(name: &str, variant: Variant) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(variant)),
            "full" => Ok(Self::full(variant)),
            _ => Err(Error::BadConfig(format!("unknown preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::BadConfig("dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::BadConfig(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.variant == Variant::Graph && (self.rwpe_k == 0 || self.rwpe_hidden == 0) {
            return Err(Error::BadConfig("graph variant needs rwpe_k and rwpe_hidden".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Clone, Debug)]
struct ValueHeadIds {
    wa: usize,
    ba: usize,
    wb: usize,
    bb: usize,
    wout: usize,
    bout: usize,
}

#[derive(Clone, Debug)]
struct GraphIds {
    bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos: usize,
    typ: usize,
    layers: Vec<LayerIds>,
    final_norm: usize,
    value: Option<ValueHeadIds>,
    graph: Option<GraphIds>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

impl Layout {
    fn build(c: &ModelConfig) -> (Layout, Vec<Spec>) {
        let mut specs = Vec::new();
        let mut add = |name: String, rows, cols, init| {
            specs.push(Spec { name, rows, cols, init });
            specs.len() - 1
        };
        let d = c.d_model;
        let tok = add("tok_emb".into(), VOCAB_SIZE, d, Init::Normal);
        let pos = add("pos_emb".into(), c.max_len, d, Init::Normal);
        let typ = add("type_emb".into(), N_TOKEN_TYPES, d, Init::Normal);
        let layers = (0..c.n_layers)
            .map(|l| LayerIds {
                attn_norm: add(format!("layer{l}.attn_norm"), 1, d, Init::Ones),
                wq: add(format!("layer{l}.wq"), d, d, Init::Normal),
                wk: add(format!("layer{l}.wk"), d, d, Init::Normal),
                wv: add(format!("layer{l}.wv"), d, d, Init::Normal),
                wo: add(format!("layer{l}.wo"), d, d, Init::Normal),
                ffn_norm: add(format!("layer{l}.ffn_norm"), 1, d, Init::Ones),
                w_gate: add(format!("layer{l}.w_gate"), d, c.d_ff, Init::Normal),
                w_up: add(format!("layer{l}.w_up"), d, c.d_ff, Init::Normal),
                w_down: add(format!("layer{l}.w_down"), c.d_ff, d, Init::Normal),
            })
            .collect();
        let final_norm = add("final_norm".into(), 1, d, Init::Ones);
        let value = c.variant.has_value_head().then(|| ValueHeadIds {
            wa: add("value_head.wa".into(), d, d, Init::Normal),
            ba: add("value_head.ba".into(), 1, d, Init::Zeros),
            wb: add("value_head.wb".into(), d, d, Init::Normal),
            bb: add("value_head.bb".into(), 1, d, Init::Zeros),
            wout: add("value_head.wout".into(), d, VOCAB_SIZE, Init::Normal),
            bout: add("value_head.bout".into(), 1, VOCAB_SIZE, Init::Zeros),
        });
        let graph = (c.variant == Variant::Graph).then(|| GraphIds {
            bias: add("graph.bias".into(), c.n_layers, c.n_heads, Init::Zeros),
            w1: add("graph.rwpe_w1".into(), c.rwpe_k, c.rwpe_hidden, Init::Normal),
            b1: add("graph.rwpe_b1".into(), 1, c.rwpe_hidden, Init::Zeros),
            w2: add("graph.rwpe_w2".into(), c.rwpe_hidden, d, Init::Normal),
            b2: add("graph.rwpe_b2".into(), 1, d, Init::Zeros),
        });
        (Layout { tok, pos, typ, layers, final_norm, value, graph }, specs)
    }
}

/// Structural inputs for the graph variant, aligned with sequence positions.
#[derive(Clone, Debug)]
struct GraphContext<T: Scalar> {
    /// `n×n`; entry `(i, j)` is the adjacency of the slots bound at component positions `i` and `j`.
    pair_adjacency: Matrix<T>,
    has_pairs: bool,
    rwpe_rows: Vec<usize>,
    rwpe: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<Matrix<T>>,
    names: Vec<String>,
    layout: Layout,
}

/// Log-probability rows for the generated part of a sequence.
pub struct PolicyRows {
    /// `n_generated × VOCAB_SIZE` masked log-softmax node.
    pub logp: Var,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    pub level: ConstraintLevel,
    /// Budget of generated tokens after the prefix.
    pub max_new_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 0.8, top_k: 50, seed: 0, level: ConstraintLevel::Full, max_new_tokens: DEFAULT_MAX_LEN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub adamw: AdamWConfig,
    pub grad_clip: Option<f64>,
    pub value_weight: f64,
    /// Masking applied to the training softmax; `None` trains on the full vocabulary.
    pub level: ConstraintLevel,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            warmup_frac: 0.05,
            adamw: AdamWConfig::default(),
            grad_clip: Some(1.0),
            value_weight: 5.0,
            level: ConstraintLevel::None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct NamedTensor {
    pub(crate) name: String,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f64>,
}

pub(crate) fn named_tensors<T: Scalar>(names: &[String], params: &[Matrix<T>]) -> Vec<NamedTensor> {
    names
        .iter()
        .zip(params)
        .map(|(n, p)| NamedTensor {
            name: n.clone(),
            rows: p.rows,
            cols: p.cols,
            data: p.data.iter().map(|x| x.as_f64()).collect(),
        })
        .collect()
}

/// Reads a JSON checkpoint, checking its `format` and `version` before the body.
pub(crate) fn read_checkpoint<F: serde::de::DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<F> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let (f, ver) = (v.get("format").and_then(|x| x.as_str()), v.get("version").and_then(|x| x.as_u64()));
    if f != Some(format) || ver != Some(version as u64) {
        return Err(Error::CheckpointMismatch(format!(
            "expected {format} v{version}, found {} v{}",
            f.unwrap_or("?"),
            ver.unwrap_or(0)
        )));
    }
    serde_json::from_value(v).map_err(|e| Error::CheckpointMismatch(e.to_string()))
}

/// Copies `tensors` into `params`, checking names and shapes.
pub(crate) fn restore_tensors<T: Scalar>(names: &[String], params: &mut [Matrix<T>], tensors: Vec<NamedTensor>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::CheckpointMismatch("tensor count".into()));
    }
    for (i, t) in tensors.into_iter().enumerate() {
        let p = &mut params[i];
        if t.name != names[i] || t.rows != p.rows || t.cols != p.cols || t.data.len() != p.len() {
            return Err(Error::CheckpointMismatch(format!("tensor `{}`", t.name)));
        }
        p.data = t.data.into_iter().map(T::c).collect();
    }
    Ok(())
}

/// Whether the next token after `prev` is predicted by the value head.
pub fn routes_to_value_head(prev: Token) -> bool {
    prev.component().is_some() || prev.spec_key().is_some()
}

/// The builtin template named by the sequence's topology token, if any.
pub fn sequence_template<'l>(tokens: &[Token], lib: &'l TopologyLibrary) -> Option<&'l TopologyTemplate> {
    tokens.get(1).and_then(|&t| topology_name(t)).and_then(|n| lib.get(n).ok())
}

fn region_start(tokens: &[Token]) -> Option<usize> {
    let mut seps = tokens.iter().enumerate().filter(|(_, &t)| t == Token::SEP);
    seps.nth(1).map(|(i, _)| i + 1)
}

/// Grammar masks for every target position `t ≥ start` of `tokens` (prefix
/// targets get `None`). Fails if the sequence leaves the grammar.
fn target_masks(
    tokens: &[Token],
    start: usize,
    level: ConstraintLevel,
    template: Option<&TopologyTemplate>,
) -> Result<Vec<Option<crate::grammar::TokenMask>>> {
    let mut out = vec![None; start];
    if level == ConstraintLevel::None {
        out.resize(tokens.len(), None);
        return Ok(out);
    }
    let mut state = GrammarState::new(template, level, usize::MAX)?;
    for (t, &tok) in tokens.iter().enumerate().skip(start) {
        let m = mask(&state).map_err(|e| Error::InvalidSequence(format!("position {t}: {e}")))?;
        state = advance(&state, tok).map_err(|e| Error::InvalidSequence(format!("position {t}: {e}")))?;
        out.push(Some(m));
    }
    Ok(out)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => Matrix::randn(s.rows, s.cols, INIT_STD, &mut rng),
                Init::Ones => Matrix::filled(s.rows, s.cols, T::one()),
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
            })
            .collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Self { config, params, names, layout })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Norm gains and biases are exempt from weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.rows > 1 && p.cols > 1).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
        }
    }

    fn graph_context(&self, tokens: &[Token], template: Option<&TopologyTemplate>) -> Result<Option<GraphContext<T>>> {
        if self.config.variant != Variant::Graph {
            return Ok(None);
        }
        let t = template.ok_or_else(|| {
            let name = tokens.get(1).and_then(|&x| topology_name(x)).unwrap_or("<none>");
            Error::UnknownTopology(name.to_string())
        })?;
        let rwpe = compute_rwpe(t, self.config.rwpe_k)?;
        let n = tokens.len();
        let mut comp_slots: Vec<(usize, usize)> = Vec::new();
        if let Some(start) = region_start(tokens) {
            let kinds: Vec<(usize, _)> =
                tokens.iter().enumerate().skip(start).filter_map(|(i, tk)| tk.component().map(|k| (i, k))).collect();
            let binding = t.bind_slots(kinds.iter().map(|&(_, k)| k));
            comp_slots = kinds.iter().zip(binding).filter_map(|(&(i, _), s)| s.map(|s| (i, s))).collect();
        }
        let mut pair = Matrix::zeros(n, n);
        let mut has_pairs = false;
        for &(i, si) in &comp_slots {
            for &(j, sj) in &comp_slots {
                if t.adjacency[si][sj] != 0 {
                    pair.set(i, j, T::one());
                    has_pairs |= j <= i;
                }
            }
        }
        let mut rows = Vec::new();
        let mut feats = Vec::new();
        for &(i, s) in &comp_slots {
            for p in [i, i + 1] {
                if p < n {
                    rows.push(p);
                    feats.extend(rwpe.features[s].iter().map(|&x| T::c(x)));
                }
            }
        }
        let m = rows.len();
        Ok(Some(GraphContext {
            pair_adjacency: pair,
            has_pairs,
            rwpe_rows: rows,
            rwpe: Matrix::from_vec(m, self.config.rwpe_k, feats),
        }))
    }

    /// Final hidden states (`n × d_model`) for `tokens`.
    fn hidden<'a>(&'a self, tape: &mut Tape<'a, T>, p: &[Var], tokens: &[Token], ctx: Option<&GraphContext<T>>) -> Result<Var> {
        let c = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if n > c.max_len {
            return Err(Error::InvalidSequence(format!("length {n} exceeds max_len {}", c.max_len)));
        }
        let lay = &self.layout;
        let ids: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let positions: Vec<usize> = (0..n).collect();
        let types: Vec<usize> = tokens.iter().map(|t| t.category().index()).collect();
        let e_tok = tape.gather(p[lay.tok], &ids);
        let e_pos = tape.gather(p[lay.pos], &positions);
        let e_typ = tape.gather(p[lay.typ], &types);
        let mut x = tape.add(e_tok, e_pos);
        x = tape.add(x, e_typ);

        if let (Some(g), Some(ctx)) = (&lay.graph, ctx) {
            if !ctx.rwpe_rows.is_empty() {
                let r = tape.constant(ctx.rwpe.clone());
                let h = tape.matmul(r, p[g.w1]);
                let h = tape.add_row(h, p[g.b1]);
                let h = tape.gelu(h);
                let h = tape.matmul(h, p[g.w2]);
                let h = tape.add_row(h, p[g.b2]);
                x = tape.scatter_add_rows(x, h, &ctx.rwpe_rows);
            }
        }

        let dh = c.d_model / c.n_heads;
        let inv_sqrt = T::c(1.0 / (dh as f64).sqrt());
        for (l, ly) in lay.layers.iter().enumerate() {
            let xn = tape.rms_norm(x, p[ly.attn_norm]);
            let q = tape.matmul(xn, p[ly.wq]);
            let k = tape.matmul(xn, p[ly.wk]);
            let v = tape.matmul(xn, p[ly.wv]);
            let mut heads = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let qh = tape.col_slice(q, h * dh, dh);
                let kh = tape.col_slice(k, h * dh, dh);
                let vh = tape.col_slice(v, h * dh, dh);
                let s = tape.matmul_bt(qh, kh);
                let mut s = tape.scale(s, inv_sqrt);
                if let (Some(g), Some(ctx)) = (&lay.graph, ctx) {
                    if ctx.has_pairs {
                        s = tape.add_scaled_const(s, p[g.bias], l * c.n_heads + h, ctx.pair_adjacency.clone());
                    }
                }
                let a = tape.causal_softmax(s);
                heads.push(tape.matmul(a, vh));
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = tape.matmul(o, p[ly.wo]);
            x = tape.add(x, o);

            let xn = tape.rms_norm(x, p[ly.ffn_norm]);
            let gate = tape.matmul(xn, p[ly.w_gate]);
            let gate = tape.silu(gate);
            let up = tape.matmul(xn, p[ly.w_up]);
            let hmid = tape.mul(gate, up);
            let down = tape.matmul(hmid, p[ly.w_down]);
            x = tape.add(x, down);
        }
        Ok(tape.rms_norm(x, p[lay.final_norm]))
    }

    fn structure_logits<'a>(&'a self, tape: &mut Tape<'a, T>, p: &[Var], h: Var) -> Var {
        tape.matmul_bt(h, p[self.layout.tok])
    }

    fn value_logits<'a>(&'a self, tape: &mut Tape<'a, T>, p: &[Var], h: Var) -> Var {
        let v = self.layout.value.as_ref().expect("value head present");
        let a = tape.matmul(h, p[v.wa]);
        let a = tape.add_row(a, p[v.ba]);
        let a = tape.silu(a);
        let b = tape.matmul(a, p[v.wb]);
        let b = tape.add_row(b, p[v.bb]);
        let r = tape.add(h, b);
        let o = tape.matmul(r, p[v.wout]);
        tape.add_row(o, p[v.bout])
    }

    /// Logits (`rows.len() × VOCAB_SIZE`) predicting the token after each of
    /// `rows`, with per-row head routing.
    pub fn forward_rows<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        tokens: &[Token],
        template: Option<&TopologyTemplate>,
        rows: &[usize],
    ) -> Result<Var> {
        let ctx = self.graph_context(tokens, template)?;
        let p: Vec<Var> = self.params.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect();
        let h = self.hidden(tape, &p, tokens, ctx.as_ref())?;
        let (mut s_rows, mut s_at, mut v_rows, mut v_at) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, &r) in rows.iter().enumerate() {
            if self.config.variant.has_value_head() && routes_to_value_head(tokens[r]) {
                v_rows.push(r);
                v_at.push(k);
            } else {
                s_rows.push(r);
                s_at.push(k);
            }
        }
        let all_rows = rows.len() == tokens.len() && rows.iter().enumerate().all(|(k, &r)| k == r);
        let select = |tape: &mut Tape<'a, T>, rs: &[usize]| {
            if all_rows && rs.len() == tokens.len() {
                h
            } else {
                tape.gather_rows(h, rs)
            }
        };
        if v_rows.is_empty() {
            let hs = select(tape, &s_rows);
            return Ok(self.structure_logits(tape, &p, hs));
        }
        if s_rows.is_empty() {
            let hv = select(tape, &v_rows);
            return Ok(self.value_logits(tape, &p, hv));
        }
        let hs = tape.gather_rows(h, &s_rows);
        let ls = self.structure_logits(tape, &p, hs);
        let hv = tape.gather_rows(h, &v_rows);
        let lv = self.value_logits(tape, &p, hv);
        let zero = tape.constant(Matrix::zeros(rows.len(), VOCAB_SIZE));
        let out = tape.scatter_add_rows(zero, ls, &s_at);
        Ok(tape.scatter_add_rows(out, lv, &v_at))
    }

    /// Logits for every position: row `i` predicts token `i + 1`.
    pub fn forward(&self, seq: &TokenSequence, template: Option<&TopologyTemplate>) -> Result<Matrix<T>> {
        let tokens = seq.trimmed();
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let mut tape = Tape::new();
        let out = self.forward_rows(&mut tape, tokens, template, &rows)?;
        Ok(tape.value(out).clone())
    }

    pub fn next_token_logits(&self, tokens: &[Token], template: Option<&TopologyTemplate>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let out = self.forward_rows(&mut tape, tokens, template, &[tokens.len() - 1])?;
        Ok(tape.value(out).data.clone())
    }

    /// Weighted negative log-likelihood summed over the targets of one sequence,
    /// and the number of (non-PAD) targets.
    pub fn sequence_nll<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        seq: &TokenSequence,
        template: Option<&TopologyTemplate>,
        level: ConstraintLevel,
        value_weight: f64,
    ) -> Result<(Var, usize)> {
        let tokens = seq.trimmed();
        if tokens.len() < 2 {
            return Err(Error::InvalidSequence("fewer than two tokens".into()));
        }
        let rows: Vec<usize> = (0..tokens.len() - 1).collect();
        let logits = self.forward_rows(tape, tokens, template, &rows)?;
        let mask = if level == ConstraintLevel::None {
            None
        } else {
            let start = region_start(tokens).ok_or_else(|| Error::InvalidSequence("no component region".into()))?;
            let masks = target_masks(tokens, start, level, template)?;
            let mut flat = Vec::with_capacity(rows.len() * VOCAB_SIZE);
            for m in &masks[1..] {
                match m {
                    Some(m) => flat.extend_from_slice(m.as_slice()),
                    None => flat.extend(std::iter::repeat_n(true, VOCAB_SIZE)),
                }
            }
            Some(flat)
        };
        let logp = tape.log_softmax(logits, mask);
        let picks = rows
            .iter()
            .map(|&r| {
                let target = tokens[r + 1];
                let w = if target.is_value() { value_weight } else { 1.0 };
                (r, target.index(), T::c(-w))
            })
            .collect();
        Ok((tape.pick(logp, picks), rows.len()))
    }

    /// Weighted next-token cross-entropy, averaged over non-PAD target positions.
    pub fn sl_loss(&self, batch: &[TokenSequence], lib: &TopologyLibrary) -> Result<T> {
        self.sl_loss_with(batch, lib, ConstraintLevel::None, 5.0)
    }

    pub fn sl_loss_with(
        &self,
        batch: &[TokenSequence],
        lib: &TopologyLibrary,
        level: ConstraintLevel,
        value_weight: f64,
    ) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = T::zero();
        let mut count = 0;
        for seq in batch {
            let mut tape = Tape::new();
            let template = sequence_template(seq.trimmed(), lib);
            let (l, n) = self.sequence_nll(&mut tape, seq, template, level, value_weight)?;
            total += tape.scalar(l);
            count += n;
        }
        Ok(total / T::from_usize_lossy(count))
    }

    /// Loss and per-parameter gradients (aligned with `params`).
    pub fn sl_loss_and_grads(
        &self,
        batch: &[TokenSequence],
        lib: &TopologyLibrary,
        level: ConstraintLevel,
        value_weight: f64,
    ) -> Result<(T, Vec<Matrix<T>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let count: usize = batch.iter().map(|s| s.trimmed().len().saturating_sub(1)).sum();
        let inv = T::one() / T::from_usize_lossy(count.max(1));
        let mut grads: Vec<Matrix<T>> = self.params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        let mut total = T::zero();
        for seq in batch {
            let mut tape = Tape::new();
            let template = sequence_template(seq.trimmed(), lib);
            let (l, _) = self.sequence_nll(&mut tape, seq, template, level, value_weight)?;
            let l = tape.scale(l, inv);
            total += tape.scalar(l);
            for (id, g) in tape.param_grads(tape.backward(l)) {
                grads[id].add_assign(&g);
            }
        }
        Ok((total, grads))
    }

    pub fn train_sl(&mut self, data: &[TokenSequence], lib: &TopologyLibrary, cfg: &TrainConfig) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let bs = cfg.batch_size.max(1);
        let per_epoch = data.len().div_ceil(bs);
        let total = per_epoch * cfg.epochs;
        let warmup = ((total as f64) * cfg.warmup_frac).round() as usize;
        let mut opt = AdamW::new(cfg.adamw, &self.params);
        let decay = self.decay_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut report = TrainReport::default();
        let mut step = 0;
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_sum = 0.0;
            for chunk in order.chunks(bs) {
                step += 1;
                let batch: Vec<TokenSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
                let (loss, mut grads) = self.sl_loss_and_grads(&batch, lib, cfg.level, cfg.value_weight)?;
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                let lr = lr_at(step, total, warmup, cfg.lr);
                opt.step(&mut self.params, &grads, lr, &decay);
                report.step_losses.push(loss.as_f64());
                report.learning_rates.push(lr);
                epoch_sum += loss.as_f64();
            }
            report.epoch_losses.push(epoch_sum / per_epoch as f64);
        }
        Ok(report)
    }

    /// Masked log-softmax rows (temperature 1) for the generated region of `seq`.
    pub fn policy_rows<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        seq: &TokenSequence,
        template: Option<&TopologyTemplate>,
        level: ConstraintLevel,
    ) -> Result<PolicyRows> {
        let tokens = seq.trimmed();
        let start = region_start(tokens).ok_or_else(|| Error::InvalidSequence("no component region".into()))?;
        if start >= tokens.len() {
            return Err(Error::InvalidSequence("empty component region".into()));
        }
        let masks = target_masks(tokens, start, level, template)?;
        let rows: Vec<usize> = (start - 1..tokens.len() - 1).collect();
        let logits = self.forward_rows(tape, tokens, template, &rows)?;
        let mask = (level != ConstraintLevel::None).then(|| {
            let mut flat = Vec::with_capacity(rows.len() * VOCAB_SIZE);
            for m in &masks[start..] {
                flat.extend_from_slice(m.as_ref().expect("region mask").as_slice());
            }
            flat
        });
        let logp = tape.log_softmax(logits, mask);
        Ok(PolicyRows { logp, targets: tokens[start..].iter().map(|t| t.index()).collect() })
    }

    /// Total and mean log-probability of the generated tokens under the masked
    /// distribution at temperature 1.
    pub fn sequence_log_prob(
        &self,
        seq: &TokenSequence,
        template: Option<&TopologyTemplate>,
        level: ConstraintLevel,
    ) -> Result<(f64, f64)> {
        if level != ConstraintLevel::None {
            let report = crate::grammar::validate_sequence(seq, level, template);
            if !report.valid {
                return Err(Error::InvalidSequence(report.to_string()));
            }
        }
        let mut tape = Tape::new();
        let rows = self.policy_rows(&mut tape, seq, template, level)?;
        let lp = tape.value(rows.logp);
        let total: f64 = rows.targets.iter().enumerate().map(|(r, &t)| lp.at(r, t).as_f64()).sum();
        Ok((total, total / rows.targets.len() as f64))
    }

    pub fn generate(
        &self,
        template: &TopologyTemplate,
        spec: &BTreeMap<SpecKey, f64>,
        sampling: &SamplingConfig,
    ) -> Result<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        self.generate_with(template, spec, sampling, &mut rng)
    }

    pub fn generate_with<R: Rng + ?Sized>(
        &self,
        template: &TopologyTemplate,
        spec: &BTreeMap<SpecKey, f64>,
        sampling: &SamplingConfig,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        let keys = template.spec_keys();
        if let Some(k) = spec.keys().find(|k| !keys.contains(k)) {
            return Err(Error::BadConfig(format!("spec key {} not used by {}", k.name(), template.name)));
        }
        let prefix = encode_circuit(&CircuitDesign { topology: template.name.clone(), spec: spec.clone(), components: vec![] })?;
        let mut tokens = prefix.tokens;
        tokens.pop(); // END
        let mut state = GrammarState::new(Some(template), sampling.level, sampling.max_new_tokens)?;
        while !state.is_done() && state.position < sampling.max_new_tokens && tokens.len() < self.config.max_len {
            let logits = self.next_token_logits(&tokens, Some(template))?;
            let m = mask(&state)?;
            let tok = masked_sample(&logits, &m, sampling.temperature, sampling.top_k, rng)?;
            state = advance(&state, tok)?;
            tokens.push(tok);
        }
        Ok(TokenSequence::new(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: "circgen-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: named_tensors(&self.names, &self.params),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    /// Loads a checkpoint; with `expected`, a differing config is rejected.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let file: CheckpointFile = read_checkpoint(path, "circgen-checkpoint", CHECKPOINT_VERSION)?;
        if let Some(e) = expected {
            if *e != file.config {
                return Err(Error::CheckpointMismatch(format!("config {:?} != expected {:?}", file.config, e)));
            }
        }
        let mut model = Self::new(file.config, 0)?;
        restore_tensors(&model.names, &mut model.params, file.tensors)?;
        Ok(model)
    }
}

pub fn shuffle<X, R: Rng + ?Sized>(v: &mut [X], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}
