//! Candidate selection: best-of-N under a confidence, learned-reward or
//! simulator ranker, and the reward model itself.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{named_tensors, read_checkpoint, restore_tensors, shuffle, Model, NamedTensor, SamplingConfig};
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::search::Spec;
use crate::simulate::{score_sequence, Backend};
use crate::tensor::Matrix;
use crate::tokenizer::{bin_to_value, decode_sequence, CircuitDesign, Token, TokenSequence, VOCAB_SIZE};
use crate::topology::TopologyTemplate;

pub const HUBER_DELTA: f64 = 1.0;
const RM_CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

impl RewardModelConfig {
    pub fn full() -> Self {
        Self { d_model: 128, n_layers: 2, n_heads: 4, d_ff: 256, mlp_hidden: 64, max_len: 64 }
    }

    pub fn desk() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 2, d_ff: 128, mlp_hidden: 64, max_len: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.mlp_hidden == 0 {
            return Err(Error::BadConfig("dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::BadConfig(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
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
struct RmLayout {
    tok: usize,
    pos: usize,
    log_value: usize,
    layers: Vec<EncoderLayer>,
    final_norm: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Bidirectional encoder regressing the simulated reward of a sequence.
/// Value tokens also carry their log-magnitude through a learned direction.
#[derive(Clone, Debug)]
pub struct RewardModel<T: Scalar> {
    pub config: RewardModelConfig,
    pub params: Vec<Matrix<T>>,
    names: Vec<String>,
    layout: RmLayout,
}

#[derive(Serialize, Deserialize)]
struct RmCheckpointFile {
    format: String,
    version: u32,
    config: RewardModelConfig,
    tensors: Vec<NamedTensor>,
}

/// `log10(value)` rescaled to roughly `[-1, 1]` over the tokenizer range.
fn log_feature(t: Token) -> f64 {
    bin_to_value(t).map_or(0.0, |v| (v.log10() + 3.0) / 9.0)
}

impl<T: Scalar> RewardModel<T> {
    pub fn new(config: RewardModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, fill: Option<f64>| {
            names.push(name);
            params.push(match fill {
                Some(v) => Matrix::filled(rows, cols, T::c(v)),
                None => Matrix::randn(rows, cols, 0.02, &mut rng),
            });
            params.len() - 1
        };
        let (d, c) = (config.d_model, &config);
        let tok = add("tok_emb".into(), VOCAB_SIZE, d, None);
        let pos = add("pos_emb".into(), c.max_len, d, None);
        let log_value = add("log_value".into(), 1, d, None);
        let layers = (0..c.n_layers)
            .map(|l| EncoderLayer {
                attn_norm: add(format!("enc{l}.attn_norm"), 1, d, Some(1.0)),
                wq: add(format!("enc{l}.wq"), d, d, None),
                wk: add(format!("enc{l}.wk"), d, d, None),
                wv: add(format!("enc{l}.wv"), d, d, None),
                wo: add(format!("enc{l}.wo"), d, d, None),
                ffn_norm: add(format!("enc{l}.ffn_norm"), 1, d, Some(1.0)),
                w_gate: add(format!("enc{l}.w_gate"), d, c.d_ff, None),
                w_up: add(format!("enc{l}.w_up"), d, c.d_ff, None),
                w_down: add(format!("enc{l}.w_down"), c.d_ff, d, None),
            })
            .collect();
        let final_norm = add("final_norm".into(), 1, d, Some(1.0));
        let w1 = add("head.w1".into(), d, c.mlp_hidden, None);
        let b1 = add("head.b1".into(), 1, c.mlp_hidden, Some(0.0));
        let w2 = add("head.w2".into(), c.mlp_hidden, 1, None);
        let b2 = add("head.b2".into(), 1, 1, Some(0.0));
        let layout = RmLayout { tok, pos, log_value, layers, final_norm, w1, b1, w2, b2 };
        Ok(Self { config, params, names, layout })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn token_embeddings(&self) -> &Matrix<T> {
        &self.params[self.layout.tok]
    }

    /// Replaces the token embedding table, e.g. with [`svd_warm_start`] output.
    pub fn set_token_embeddings(&mut self, e: Matrix<T>) -> Result<()> {
        let cur = &self.params[self.layout.tok];
        if !cur.same_shape(&e) {
            return Err(Error::BadConfig(format!("embedding shape {}x{} != {}x{}", e.rows, e.cols, cur.rows, cur.cols)));
        }
        self.params[self.layout.tok] = e;
        Ok(())
    }

    fn check_tokens<'s>(&self, seq: &'s TokenSequence) -> Result<&'s [Token]> {
        decode_sequence(seq).map_err(|e| Error::InvalidSequence(e.to_string()))?;
        let tokens = seq.trimmed();
        if tokens.len() > self.config.max_len {
            return Err(Error::InvalidSequence(format!("length {} exceeds max_len {}", tokens.len(), self.config.max_len)));
        }
        Ok(tokens)
    }

    /// `1×1` prediction node for `tokens` (already trimmed).
    fn forward_tape<'a>(&'a self, tape: &mut Tape<'a, T>, tokens: &[Token]) -> Var {
        let c = &self.config;
        let lay = &self.layout;
        let p: Vec<Var> = self.params.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect();
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let positions: Vec<usize> = (0..n).collect();
        let e_tok = tape.gather(p[lay.tok], &ids);
        let e_pos = tape.gather(p[lay.pos], &positions);
        let mut x = tape.add(e_tok, e_pos);
        let feats = tape.constant(Matrix::from_vec(n, 1, tokens.iter().map(|&t| T::c(log_feature(t))).collect()));
        let lv = tape.matmul(feats, p[lay.log_value]);
        x = tape.add(x, lv);

        let dh = c.d_model / c.n_heads;
        let inv_sqrt = T::c(1.0 / (dh as f64).sqrt());
        for ly in &lay.layers {
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
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax(s);
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
        let x = tape.rms_norm(x, p[lay.final_norm]);
        let pooled = tape.weighted_row_sum(x, vec![T::c(1.0 / n as f64); n]);
        let h = tape.matmul(pooled, p[lay.w1]);
        let h = tape.add_row(h, p[lay.b1]);
        let h = tape.silu(h);
        let o = tape.matmul(h, p[lay.w2]);
        tape.add_row(o, p[lay.b2])
    }

    /// Huber loss and gradients averaged over `batch`.
    pub fn loss_and_grads(&self, batch: &[(TokenSequence, f64)]) -> Result<(T, Vec<Matrix<T>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut grads: Vec<Matrix<T>> = self.params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        let mut total = T::zero();
        let w = T::c(1.0 / batch.len() as f64);
        for (seq, y) in batch {
            let tokens = self.check_tokens(seq)?;
            let mut tape = Tape::new();
            let pred = self.forward_tape(&mut tape, tokens);
            let l = tape.huber(pred, vec![T::c(*y)], T::c(HUBER_DELTA));
            let l = tape.scale(l, w);
            total += tape.scalar(l);
            for (id, g) in tape.param_grads(tape.backward(l)) {
                grads[id].add_assign(&g);
            }
        }
        Ok((total, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = RmCheckpointFile {
            format: "circgen-reward-model".into(),
            version: RM_CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: named_tensors(&self.names, &self.params),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: RmCheckpointFile = read_checkpoint(path, "circgen-reward-model", RM_CHECKPOINT_VERSION)?;
        let mut rm = Self::new(file.config, 0)?;
        restore_tensors(&rm.names, &mut rm.params, file.tensors)?;
        Ok(rm)
    }
}

/// Predicted reward of `seq`; trailing PAD is ignored.
pub fn predict_reward<T: Scalar>(rm: &RewardModel<T>, seq: &TokenSequence) -> Result<f64> {
    let tokens = rm.check_tokens(seq)?;
    let mut tape = Tape::new();
    let out = rm.forward_tape(&mut tape, tokens);
    Ok(tape.scalar(out).as_f64())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub mae: f64,
    pub rmse: f64,
    pub within_half: f64,
    pub within_one: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> RegressionMetrics {
    assert_eq!(pred.len(), target.len());
    let n = pred.len();
    if n == 0 {
        return RegressionMetrics::default();
    }
    let err: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let nf = n as f64;
    RegressionMetrics {
        n,
        pearson: pearson(pred, target),
        spearman: spearman(pred, target),
        mae: err.iter().map(|e| e.abs()).sum::<f64>() / nf,
        rmse: (err.iter().map(|e| e * e).sum::<f64>() / nf).sqrt(),
        within_half: err.iter().filter(|e| e.abs() <= 0.5).count() as f64 / nf,
        within_one: err.iter().filter(|e| e.abs() <= 1.0).count() as f64 / nf,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub held_out_frac: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, lr: 1e-3, warmup_frac: 0.05, held_out_frac: 0.2, grad_clip: Some(1.0), seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub epoch_losses: Vec<f64>,
    pub n_train: usize,
    pub train: RegressionMetrics,
    pub held_out: RegressionMetrics,
}

pub fn evaluate_reward_model<T: Scalar>(rm: &RewardModel<T>, data: &[(TokenSequence, f64)]) -> Result<RegressionMetrics> {
    let pred = data.iter().map(|(s, _)| predict_reward(rm, s)).collect::<Result<Vec<_>>>()?;
    let target: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
    Ok(regression_metrics(&pred, &target))
}

/// Huber regression on a shuffled split of `data`; the last
/// `held_out_frac` is kept for evaluation.
pub fn train_reward_model<T: Scalar>(
    rm: &mut RewardModel<T>,
    data: &[(TokenSequence, f64)],
    cfg: &RmTrainConfig,
) -> Result<RmReport> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_held = ((data.len() as f64 * cfg.held_out_frac).round() as usize).min(data.len() - 1);
    let split = data.len() - n_held;
    let mut train: Vec<(TokenSequence, f64)> = order[..split].iter().map(|&i| data[i].clone()).collect();
    let held: Vec<(TokenSequence, f64)> = order[split..].iter().map(|&i| data[i].clone()).collect();

    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (total as f64 * cfg.warmup_frac).round() as usize;
    let mut opt = AdamW::new(AdamWConfig::default(), &rm.params);
    let decay: Vec<bool> = rm.params.iter().map(|p| p.rows > 1 && p.cols > 1).collect();
    let mut report = RmReport { n_train: train.len(), ..Default::default() };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        shuffle(&mut train, &mut rng);
        let mut epoch = 0.0;
        for batch in train.chunks(bs) {
            step += 1;
            let (loss, mut grads) = rm.loss_and_grads(batch)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut rm.params, &grads, lr_at(step, total, warmup, cfg.lr), &decay);
            epoch += loss.as_f64() * batch.len() as f64;
        }
        report.epoch_losses.push(epoch / train.len() as f64);
    }
    report.train = evaluate_reward_model(rm, &train)?;
    report.held_out = evaluate_reward_model(rm, &held)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdProjection<T> {
    pub embeddings: Matrix<T>,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Numerical rank; columns past it are zero.
    pub rank: usize,
}

/// Rank-`dim` row projection `U[:, :dim] · Σ[:dim]` of `e`, each column's
/// sign fixed so its largest-magnitude entry is positive.
pub fn svd_warm_start<T: Scalar>(e: &Matrix<T>, dim: usize) -> SvdProjection<T> {
    let data: Vec<f64> = e.data.iter().map(|x| x.as_f64()).collect();
    let m = DMatrix::from_row_slice(e.rows, e.cols, &data);
    let svd = m.svd(true, false);
    let u = svd.u.expect("u requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let singular_values: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * e.rows.max(e.cols) as f64 * f64::EPSILON;
    let rank = singular_values.iter().filter(|&&v| v > tol).count().min(dim);
    let mut out = Matrix::zeros(e.rows, dim);
    for (j, &k) in order.iter().take(rank).enumerate() {
        let col: Vec<f64> = (0..e.rows).map(|r| u[(r, k)] * s[k]).collect();
        let pivot = col.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.into_iter().enumerate() {
            out.set(r, j, T::c(sign * v));
        }
    }
    SvdProjection { embeddings: out, singular_values, rank }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Confidence,
    RewardModel,
    Spice,
}

impl ScoreSource {
    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::Confidence => "confidence",
            ScoreSource::RewardModel => "reward_model",
            ScoreSource::Spice => "spice",
        }
    }
}

pub enum Ranker<'a, T: Scalar> {
    /// Mean log-probability under the generating model.
    Confidence,
    RewardModel(&'a RewardModel<T>),
    /// Simulated reward through a backend.
    Spice(&'a Backend),
}

impl<T: Scalar> Ranker<'_, T> {
    pub fn source(&self) -> ScoreSource {
        match self {
            Ranker::Confidence => ScoreSource::Confidence,
            Ranker::RewardModel(_) => ScoreSource::RewardModel,
            Ranker::Spice(_) => ScoreSource::Spice,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub seq: TokenSequence,
    pub design: Option<CircuitDesign>,
    pub source: ScoreSource,
    pub score: f64,
    /// Index of the generator that produced it.
    pub generator: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub winner: RankedCandidate,
    pub candidates: Vec<RankedCandidate>,
}

/// Draws `n` candidates from each generator and keeps the top-scoring one
/// (ties go to the earliest). Unscorable candidates get `-inf`. Generator
/// `g` samples from its own stream of `sampling.seed`, so a larger `n`
/// extends rather than replaces the candidate list.
pub fn best_of_n<T: Scalar>(
    generators: &[&Model<T>],
    t: &TopologyTemplate,
    spec: &Spec,
    n: usize,
    ranker: &Ranker<'_, T>,
    sampling: &SamplingConfig,
) -> Result<BestOfN> {
    if n == 0 || generators.is_empty() {
        return Err(Error::BadConfig("best-of-n needs n >= 1 and a generator".into()));
    }
    let mut candidates = Vec::with_capacity(n * generators.len());
    for (g, model) in generators.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        rng.set_stream(g as u64);
        for _ in 0..n {
            let seq = model.generate_with(t, spec, sampling, &mut rng)?;
            let score = match ranker {
                Ranker::Confidence => model.sequence_log_prob(&seq, Some(t), sampling.level).map_or(f64::NEG_INFINITY, |x| x.1),
                Ranker::RewardModel(rm) => predict_reward(rm, &seq).unwrap_or(f64::NEG_INFINITY),
                Ranker::Spice(b) => score_sequence(b, t, &seq)?.0.total,
            };
            let design = decode_sequence(&seq).ok();
            candidates.push(RankedCandidate { seq, design, source: ranker.source(), score, generator: g });
        }
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.score > candidates[best].score {
            best = i;
        }
    }
    Ok(BestOfN { winner: candidates[best].clone(), candidates })
}

/// Random Gaussian projection to `dim` columns, scaled by `1/√dim`; a
/// reference point for [`svd_warm_start`].
pub fn random_projection<R: Rng + ?Sized>(e: &Matrix<f64>, dim: usize, rng: &mut R) -> Matrix<f64> {
    let r = Matrix::<f64>::randn(e.cols, dim, 1.0 / (dim as f64).sqrt(), rng);
    crate::tensor::matmul(e, &r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::huber_value;
    use crate::model::{ModelConfig, Variant};
    use crate::tensor::matmul;
    use crate::tokenizer::encode_circuit;
    use crate::topology::{get_template, sample_random_design};
    use nalgebra::SymmetricEigen;

    fn gram(a: &Matrix<f64>) -> Matrix<f64> {
        matmul(a, &a.transpose())
    }

    fn frob(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn huber_points() {
        assert_eq!(huber_value(0.5f64, HUBER_DELTA), 0.125);
        assert_eq!(huber_value(2.0f64, HUBER_DELTA), 1.5);
    }

    #[test]
    fn svd_matches_eigen_oracle() {
        let e = Matrix::<f64>::randn(10, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let k = 2;
        let proj = svd_warm_start(&e, k);
        assert_eq!(proj.rank, 2);
        // E Eᵀ = Σ λ u uᵀ; the rank-k part is what U_k Σ_k reproduces
        let eet = gram(&e);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(10, 10, &eet.data));
        let mut idx: Vec<usize> = (0..10).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut oracle = Matrix::zeros(10, 10);
        for &i in &idx[..k] {
            let l = eig.eigenvalues[i];
            for r in 0..10 {
                for c in 0..10 {
                    let v = oracle.at(r, c) + l * eig.eigenvectors[(r, i)] * eig.eigenvectors[(c, i)];
                    oracle.set(r, c, v);
                }
            }
        }
        assert!(frob(&gram(&proj.embeddings), &oracle) < 1e-9);
        for (j, &i) in idx[..4].iter().enumerate() {
            assert!((proj.singular_values[j].powi(2) - eig.eigenvalues[i]).abs() < 1e-9);
        }
        for j in 0..k {
            let col: Vec<f64> = (0..10).map(|r| proj.embeddings.at(r, j)).collect();
            let pivot = col.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(pivot > 0.0);
        }
        let rp = random_projection(&e, k, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(frob(&gram(&proj.embeddings), &eet) < frob(&gram(&rp), &eet));
    }

    #[test]
    fn svd_full_rank_is_exact_and_pads() {
        let e = Matrix::<f64>::randn(6, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let proj = svd_warm_start(&e, 5);
        assert_eq!(proj.rank, 3);
        assert_eq!(proj.embeddings.cols, 5);
        assert!(frob(&gram(&proj.embeddings), &gram(&e)) < 1e-9);
        assert!((0..6).all(|r| proj.embeddings.at(r, 3) == 0.0 && proj.embeddings.at(r, 4) == 0.0));
    }

    #[test]
    fn spearman_ties_and_pearson() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 8.0, 27.0]) - 1.0).abs() < 1e-12);
        let m = regression_metrics(&[1.0, 2.0, 3.5], &[1.0, 2.6, 3.0]);
        assert!((m.mae - 1.1 / 3.0).abs() < 1e-12);
        assert!((m.within_half - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.within_one, 1.0);
    }

    fn rm_data(n: usize, target: impl Fn(usize) -> f64) -> Vec<(TokenSequence, f64)> {
        let t = get_template("buck").unwrap();
        (0..n).map(|i| (encode_circuit(&sample_random_design(t, &t.nominal_spec(), i as u64)).unwrap(), target(i))).collect()
    }

    #[test]
    fn constant_target_is_fit() {
        let mut rm = RewardModel::<f32>::new(
            RewardModelConfig { d_model: 16, n_heads: 2, d_ff: 32, mlp_hidden: 16, ..RewardModelConfig::desk() },
            1,
        )
        .unwrap();
        let data = rm_data(20, |_| 3.0);
        let cfg = RmTrainConfig { epochs: 60, batch_size: 8, lr: 1e-2, ..Default::default() };
        let r = train_reward_model(&mut rm, &data, &cfg).unwrap();
        assert!(r.held_out.mae < 0.05, "{:?}", r.held_out);
    }

    #[test]
    fn rm_gradient_finite_difference() {
        let rm = RewardModel::<f64>::new(
            RewardModelConfig { d_model: 8, n_heads: 2, d_ff: 8, mlp_hidden: 4, ..RewardModelConfig::desk() },
            2,
        )
        .unwrap();
        let data = rm_data(2, |i| 2.0 + 3.0 * i as f64);
        let (_, grads) = rm.loss_and_grads(&data).unwrap();
        let h = 1e-6;
        for pi in 0..rm.params.len() {
            let k = rm.params[pi].len() / 2;
            let mut plus = rm.clone();
            plus.params[pi].data[k] += h;
            let mut minus = rm.clone();
            minus.params[pi].data[k] -= h;
            let fd = (plus.loss_and_grads(&data).unwrap().0 - minus.loss_and_grads(&data).unwrap().0) / (2.0 * h);
            assert!((fd - grads[pi].data[k]).abs() < 1e-7, "{}: {fd} vs {}", rm.names()[pi], grads[pi].data[k]);
        }
    }

    #[test]
    fn prediction_ignores_pad_and_checkpoint_round_trips() {
        let rm = RewardModel::<f64>::new(RewardModelConfig::desk(), 3).unwrap();
        let (seq, _) = rm_data(1, |_| 0.0).remove(0);
        let a = predict_reward(&rm, &seq).unwrap();
        let mut padded = seq.clone();
        padded.tokens.extend([Token::PAD; 5]);
        assert_eq!(a, predict_reward(&rm, &padded).unwrap());
        assert!(matches!(predict_reward(&rm, &TokenSequence::new(vec![Token::START])), Err(Error::InvalidSequence(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rm.json");
        rm.save(&p).unwrap();
        let back = RewardModel::<f64>::load(&p).unwrap();
        assert_eq!(predict_reward(&back, &seq).unwrap(), a);
    }

    #[test]
    fn best_of_n_properties() {
        let m = Model::<f32>::new(ModelConfig::desk(Variant::TwoHead), 7).unwrap();
        let t = get_template("inverting_amp").unwrap();
        let spec = t.nominal_spec();
        let sampling = SamplingConfig { seed: 11, ..Default::default() };
        let one = best_of_n(&[&m], t, &spec, 1, &Ranker::Spice(&Backend::Analytic), &sampling).unwrap();
        assert_eq!(one.candidates.len(), 1);
        assert_eq!(one.winner, one.candidates[0]);

        let mut last = f64::NEG_INFINITY;
        for n in [1, 2, 4, 6] {
            let r = best_of_n(&[&m], t, &spec, n, &Ranker::Confidence, &sampling).unwrap();
            let max = r.candidates.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.winner.score, max);
            assert!(r.winner.score >= last);
            last = r.winner.score;
        }

        let m2 = Model::<f32>::new(ModelConfig::desk(Variant::TwoHead), 8).unwrap();
        let hybrid = best_of_n(&[&m, &m2], t, &spec, 4, &Ranker::Spice(&Backend::Analytic), &sampling).unwrap();
        assert_eq!(hybrid.candidates.len(), 8);
        assert!(hybrid.candidates.iter().any(|c| c.generator == 1));
        let max = hybrid.candidates.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(hybrid.winner.score, max);
    }
}
