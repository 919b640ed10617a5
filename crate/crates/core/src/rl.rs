//! Policy-gradient fine-tuning: REINFORCE with a global EMA baseline and
//! group-normalised (per-topology) advantages, both with a KL penalty to a
//! frozen reference policy.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::grammar::ConstraintLevel;
use crate::model::{Model, SamplingConfig};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::simulate::{score_sequence, Backend};
use crate::tensor::Matrix;
use crate::tokenizer::TokenSequence;
use crate::topology::TopologyTemplate;

pub const KL_BETA_MIN: f64 = 1e-4;
pub const KL_BETA_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reinforce,
    Grpo,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reinforce" => Ok(Algorithm::Reinforce),
            "grpo" => Ok(Algorithm::Grpo),
            _ => Err(Error::BadConfig(format!("unknown algorithm `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    /// REINFORCE batch size.
    pub batch_size: usize,
    /// Topologies per GRPO step.
    pub k_topologies: usize,
    /// Samples per topology group.
    pub group_size: usize,
    pub lr: f64,
    pub sampling: SamplingConfig,
    pub kl_target: f64,
    pub beta_init: f64,
    pub eps: f64,
    pub ema_decay: f64,
    pub grad_clip: Option<f64>,
    /// Held-out evaluation period for checkpoint selection (0 disables it).
    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            steps: 500,
            batch_size: 8,
            k_topologies: 3,
            group_size: 4,
            lr: 1e-5,
            sampling: SamplingConfig::default(),
            kl_target: 0.5,
            beta_init: 0.1,
            eps: 1e-6,
            ema_decay: 0.9,
            grad_clip: Some(1.0),
            eval_every: 50,
            eval_samples: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub topology: String,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
    pub advantages: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub value: Option<f64>,
    pub decay: f64,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        Self { value: None, decay }
    }

    /// Baseline to use for a batch with mean reward `batch_mean`; the first batch initialises it.
    pub fn current(&mut self, batch_mean: f64) -> f64 {
        *self.value.get_or_insert(batch_mean)
    }

    pub fn update(&mut self, batch_mean: f64) {
        let b = self.current(batch_mean);
        self.value = Some(self.decay * b + (1.0 - self.decay) * batch_mean);
    }
}

/// `(R − μ) / (σ + ε)` with the population standard deviation.
pub fn normalize_group<T: Scalar>(rewards: &[T], eps: T) -> Result<(T, T, Vec<T>)> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n = T::from_usize_lossy(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    let adv = rewards.iter().map(|&r| (r - mean) / (std + eps)).collect();
    Ok((mean, std, adv))
}

pub fn grpo_advantages(groups: &[(String, Vec<f64>)], eps: f64) -> Result<Vec<AdvantageGroup>> {
    groups
        .iter()
        .map(|(topology, rewards)| {
            let (mean, std, advantages) = normalize_group(rewards, eps)?;
            Ok(AdvantageGroup { topology: topology.clone(), rewards: rewards.clone(), mean, std, eps, advantages })
        })
        .collect()
}

pub fn adapt_kl_coeff(beta: f64, kl: f64, target: f64) -> f64 {
    let b = if kl > 1.5 * target {
        beta * 2.0
    } else if kl < target / 1.5 {
        beta / 2.0
    } else {
        beta
    };
    b.clamp(KL_BETA_MIN, KL_BETA_MAX)
}

/// Mean over generated positions of `Σ_x p(x) log(p(x) / p_ref(x))` on the masked support.
pub fn kl_divergence<T: Scalar>(
    policy: &Model<T>,
    reference: &Model<T>,
    seq: &TokenSequence,
    template: &TopologyTemplate,
    level: ConstraintLevel,
) -> Result<f64> {
    let ref_lp = reference_log_probs(reference, seq, template, level)?;
    let mut tape = Tape::new();
    let rows = policy.policy_rows(&mut tape, seq, Some(template), level)?;
    let n = rows.targets.len();
    let kl = tape.kl_rows(rows.logp, ref_lp, vec![T::one(); n]);
    Ok(tape.scalar(kl).as_f64() / n as f64)
}

fn reference_log_probs<T: Scalar>(
    reference: &Model<T>,
    seq: &TokenSequence,
    template: &TopologyTemplate,
    level: ConstraintLevel,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let rows = reference.policy_rows(&mut tape, seq, Some(template), level)?;
    Ok(tape.value(rows.logp).clone())
}

/// One scored rollout.
#[derive(Clone, Debug)]
pub struct Rollout<'t> {
    pub template: &'t TopologyTemplate,
    pub seq: TokenSequence,
    pub reward: f64,
    pub sim_valid: bool,
    pub advantage: f64,
}

/// Surrogate `−(1/N) Σ_i A_i log p(seq_i) + β · mean KL` and its gradient.
/// Returns `(loss, mean KL, grads)`.
pub fn surrogate_loss_and_grads<T: Scalar>(
    policy: &Model<T>,
    reference: &Model<T>,
    rollouts: &[Rollout<'_>],
    beta: f64,
    level: ConstraintLevel,
) -> Result<(T, f64, Vec<Matrix<T>>)> {
    if rollouts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_seq = rollouts.len() as f64;
    let mut grads: Vec<Matrix<T>> = policy.params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
    let mut total = T::zero();
    let mut kl_sum = 0.0;
    for r in rollouts {
        let ref_lp = reference_log_probs(reference, &r.seq, r.template, level)?;
        let mut tape = Tape::new();
        let rows = policy.policy_rows(&mut tape, &r.seq, Some(r.template), level)?;
        let n = rows.targets.len();
        let w = T::c(-r.advantage / n_seq);
        let picks = rows.targets.iter().enumerate().map(|(i, &t)| (i, t, w)).collect();
        let pg = tape.pick(rows.logp, picks);
        let kl_w = vec![T::c(1.0 / (n as f64 * n_seq)); n];
        let kl = tape.kl_rows(rows.logp, ref_lp, kl_w);
        kl_sum += tape.scalar(kl).as_f64();
        let kl_term = tape.scale(kl, T::c(beta));
        let loss = tape.add(pg, kl_term);
        total += tape.scalar(loss);
        for (id, g) in tape.param_grads(tape.backward(loss)) {
            grads[id].add_assign(&g);
        }
    }
    Ok((total, kl_sum, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub beta: f64,
    pub sim_valid: f64,
    pub baseline: Option<f64>,
    pub loss: f64,
}

/// Mutable optimisation state shared by both algorithms.
pub struct RlState<T: Scalar> {
    pub opt: AdamW<T>,
    pub beta: f64,
    pub baseline: BaselineState,
    pub step: usize,
}

impl<T: Scalar> RlState<T> {
    pub fn new(policy: &Model<T>, cfg: &RlConfig) -> Self {
        let adamw = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        Self { opt: AdamW::new(adamw, &policy.params), beta: cfg.beta_init, baseline: BaselineState::new(cfg.ema_decay), step: 0 }
    }
}

fn rollout<'t, T: Scalar, R: Rng + ?Sized>(
    policy: &Model<T>,
    template: &'t TopologyTemplate,
    spec: &std::collections::BTreeMap<crate::tokenizer::SpecKey, f64>,
    backend: &Backend,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<Rollout<'t>> {
    let seq = policy.generate_with(template, spec, &cfg.sampling, rng)?;
    let (reward, metrics) = score_sequence(backend, template, &seq)?;
    Ok(Rollout { template, seq, reward: reward.total, sim_valid: metrics.is_some_and(|m| m.plausible()), advantage: 0.0 })
}

/// Rollouts that can be scored for log-probability: at `NONE` a sampled
/// sequence may lack its component region entirely.
fn trainable(rollouts: Vec<Rollout<'_>>) -> Vec<Rollout<'_>> {
    rollouts.into_iter().filter(|r| r.seq.component_region_start().is_some_and(|s| s < r.seq.trimmed().len())).collect()
}

fn apply_update<T: Scalar>(
    policy: &mut Model<T>,
    reference: &Model<T>,
    state: &mut RlState<T>,
    rollouts: &[Rollout<'_>],
    cfg: &RlConfig,
) -> Result<(f64, f64)> {
    let (loss, kl, mut grads) = surrogate_loss_and_grads(policy, reference, rollouts, state.beta, cfg.sampling.level)?;
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    let no_decay = vec![false; grads.len()];
    state.opt.step(&mut policy.params, &grads, cfg.lr, &no_decay);
    Ok((loss.as_f64(), kl))
}

fn finish_step<T: Scalar>(state: &mut RlState<T>, rollouts: &[Rollout<'_>], kl: f64, loss: f64, cfg: &RlConfig) -> StepStats {
    let mean_reward = rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len().max(1) as f64;
    let sim_valid = rollouts.iter().filter(|r| r.sim_valid).count() as f64 / rollouts.len().max(1) as f64;
    let stats =
        StepStats { step: state.step, mean_reward, kl, beta: state.beta, sim_valid, baseline: state.baseline.value, loss };
    state.beta = adapt_kl_coeff(state.beta, kl, cfg.kl_target);
    state.step += 1;
    stats
}

/// REINFORCE step: advantages `R − b` against the global EMA baseline.
pub fn reinforce_step<T: Scalar, R: Rng + ?Sized>(
    policy: &mut Model<T>,
    reference: &Model<T>,
    state: &mut RlState<T>,
    templates: &[&TopologyTemplate],
    backend: &Backend,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if templates.is_empty() || cfg.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rollouts = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let t = templates[rng.random_range(0..templates.len())];
        let spec = t.sample_spec(rng);
        rollouts.push(rollout(policy, t, &spec, backend, cfg, rng)?);
    }
    let mean = rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len() as f64;
    let b = state.baseline.current(mean);
    rollouts.iter_mut().for_each(|r| r.advantage = r.reward - b);
    let train = trainable(rollouts.clone());
    let (loss, kl) = if train.is_empty() { (0.0, 0.0) } else { apply_update(policy, reference, state, &train, cfg)? };
    state.baseline.update(mean);
    Ok(finish_step(state, &rollouts, kl, loss, cfg))
}

/// GRPO step: `K` distinct topologies, `G` samples each sharing one spec,
/// advantages normalised within each group.
pub fn grpo_step<T: Scalar, R: Rng + ?Sized>(
    policy: &mut Model<T>,
    reference: &Model<T>,
    state: &mut RlState<T>,
    templates: &[&TopologyTemplate],
    backend: &Backend,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if cfg.group_size < 2 {
        return Err(Error::GroupTooSmall(cfg.group_size));
    }
    if templates.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = cfg.k_topologies.min(templates.len()).max(1);
    let mut rollouts = Vec::with_capacity(k * cfg.group_size);
    for ti in sample_indices(rng, templates.len(), k).into_vec() {
        let t = templates[ti];
        let spec = t.sample_spec(rng);
        let mut group = Vec::with_capacity(cfg.group_size);
        for _ in 0..cfg.group_size {
            group.push(rollout(policy, t, &spec, backend, cfg, rng)?);
        }
        let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
        let (_, _, adv) = normalize_group(&rewards, cfg.eps)?;
        for (r, a) in group.iter_mut().zip(adv) {
            r.advantage = a;
        }
        rollouts.extend(group);
    }
    let train = trainable(rollouts.clone());
    let (loss, kl) = if train.is_empty() { (0.0, 0.0) } else { apply_update(policy, reference, state, &train, cfg)? };
    Ok(finish_step(state, &rollouts, kl, loss, cfg))
}

/// Fraction of `n` held-out samples (fixed seed) that simulate plausibly.
pub fn held_out_sim_validity<T: Scalar>(
    policy: &Model<T>,
    templates: &[&TopologyTemplate],
    backend: &Backend,
    sampling: &SamplingConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut valid = 0;
    for i in 0..n {
        let t = templates[i % templates.len()];
        let spec = t.sample_spec(&mut rng);
        let seq = policy.generate_with(t, &spec, sampling, &mut rng)?;
        if score_sequence(backend, t, &seq)?.1.is_some_and(|m| m.plausible()) {
            valid += 1;
        }
    }
    Ok(valid as f64 / n.max(1) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub steps: Vec<StepStats>,
    pub evaluations: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_sim_valid: f64,
}

/// Runs `cfg.steps` updates, logging one JSON line per step to `log`, and
/// leaves `policy` at the checkpoint with the best held-out sim-validity.
pub fn train_rl<T: Scalar>(
    policy: &mut Model<T>,
    reference: &Model<T>,
    templates: &[&TopologyTemplate],
    backend: &Backend,
    cfg: &RlConfig,
    log: Option<&Path>,
) -> Result<RlReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = RlState::new(policy, cfg);
    let mut writer = match log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut report = RlReport::default();
    let eval_seed = cfg.seed ^ 0x5eed;
    let mut best = policy.params.clone();
    if cfg.eval_every > 0 {
        let v = held_out_sim_validity(policy, templates, backend, &cfg.sampling, cfg.eval_samples, eval_seed)?;
        report.evaluations.push((0, v));
        report.best_sim_valid = v;
    }
    for _ in 0..cfg.steps {
        let stats = match cfg.algorithm {
            Algorithm::Reinforce => reinforce_step(policy, reference, &mut state, templates, backend, cfg, &mut rng)?,
            Algorithm::Grpo => grpo_step(policy, reference, &mut state, templates, backend, cfg, &mut rng)?,
        };
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&stats)?)?;
        }
        report.steps.push(stats);
        if cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every) {
            let v = held_out_sim_validity(policy, templates, backend, &cfg.sampling, cfg.eval_samples, eval_seed)?;
            report.evaluations.push((state.step, v));
            if v > report.best_sim_valid {
                report.best_sim_valid = v;
                report.best_step = state.step;
                best = policy.params.clone();
            }
        }
    }
    if cfg.eval_every > 0 {
        policy.params = best;
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(report)
}

/// Two topologies whose rewards differ only in scale, each with a softmax
/// policy over a few arms. Rollouts are drawn by stratified inverse-CDF
/// sampling, so a run is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub scales: Vec<f64>,
    /// Arm quality in `[0, 1]`; a topology's reward for an arm is `scale · quality`.
    pub arm_quality: Vec<f64>,
    pub group_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub eps: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            scales: vec![8.0, 4.0],
            arm_quality: vec![0.2, 0.4, 0.6, 0.8],
            group_size: 4,
            steps: 600,
            lr: 0.05,
            ema_decay: 0.9,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BanditTrace {
    /// Baseline used at each step (global EMA runs only).
    pub baseline: Vec<f64>,
    /// Mean batch reward pooled over topologies, per step.
    pub pooled_mean: Vec<f64>,
    /// Mean advantage per topology, per step.
    pub mean_advantage: Vec<Vec<f64>>,
    /// Expected reward per topology under the final policy.
    pub final_expected: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn stratified_arms(p: &[f64], n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            let mut acc = 0.0;
            for (k, &pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        })
        .collect()
}

pub fn run_two_scale_bandit(cfg: &BanditConfig, algorithm: Algorithm) -> Result<BanditTrace> {
    let n_arms = cfg.arm_quality.len();
    let mut logits = vec![vec![0.0; n_arms]; cfg.scales.len()];
    let mut baseline = BaselineState::new(cfg.ema_decay);
    let mut trace = BanditTrace::default();
    for _ in 0..cfg.steps {
        let mut arms = Vec::new();
        let mut rewards = Vec::new();
        for (tau, &scale) in cfg.scales.iter().enumerate() {
            let a = stratified_arms(&softmax(&logits[tau]), cfg.group_size);
            rewards.push(a.iter().map(|&k| scale * cfg.arm_quality[k]).collect::<Vec<f64>>());
            arms.push(a);
        }
        let pooled = rewards.iter().flatten().sum::<f64>() / (cfg.scales.len() * cfg.group_size) as f64;
        let advantages: Vec<Vec<f64>> = match algorithm {
            Algorithm::Reinforce => {
                let b = baseline.current(pooled);
                trace.baseline.push(b);
                let adv = rewards.iter().map(|g| g.iter().map(|r| r - b).collect()).collect();
                baseline.update(pooled);
                adv
            }
            Algorithm::Grpo => rewards.iter().map(|g| normalize_group(g, cfg.eps).map(|x| x.2)).collect::<Result<_>>()?,
        };
        for tau in 0..cfg.scales.len() {
            let p = softmax(&logits[tau]);
            for (&k, &a) in arms[tau].iter().zip(&advantages[tau]) {
                // ∇ log softmax_k = e_k − p
                for (j, z) in logits[tau].iter_mut().enumerate() {
                    let ind = if j == k { 1.0 } else { 0.0 };
                    *z += cfg.lr * a * (ind - p[j]) / cfg.group_size as f64;
                }
            }
        }
        trace.pooled_mean.push(pooled);
        trace.mean_advantage.push(advantages.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect());
    }
    trace.final_expected = cfg
        .scales
        .iter()
        .zip(&logits)
        .map(|(&s, l)| softmax(l).iter().zip(&cfg.arm_quality).map(|(p, q)| p * s * q).sum())
        .collect();
    Ok(trace)
}
