//! Sampling-based evaluation of a generator: validity rates, simulation
//! outcomes and reward, per topology and pooled.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{validate_sequence, ConstraintLevel};
use crate::model::{Model, SamplingConfig};
use crate::scalar::Scalar;
use crate::simulate::{score_sequence, Backend};
use crate::topology::TopologyTemplate;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub specs_per_topology: usize,
    pub samples_per_spec: usize,
    pub sampling: SamplingConfig,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { specs_per_topology: 5, samples_per_spec: 10, sampling: SamplingConfig::default(), bootstrap: false, seed: 0 }
    }
}

/// Outcome of one generated sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub structural: bool,
    pub components_correct: bool,
    pub sim_success: bool,
    pub sim_valid: bool,
    pub reward: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub samples: usize,
    pub structural: f64,
    pub components_correct: f64,
    pub sim_success: f64,
    pub sim_valid: f64,
    pub reward: f64,
    /// Mean generation time per sample, seconds.
    pub wall_time: f64,
    pub ci: Option<BTreeMap<String, Interval>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: Option<EvalConfig>,
    pub backend: String,
    pub per_topology: BTreeMap<String, MetricRow>,
    pub aggregate: MetricRow,
}

type Extract = fn(&SampleOutcome) -> f64;

const METRICS: [(&str, Extract); 4] = [
    ("structural", |o| o.structural as u8 as f64),
    ("sim_success", |o| o.sim_success as u8 as f64),
    ("sim_valid", |o| o.sim_valid as u8 as f64),
    ("reward", |o| o.reward),
];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile bootstrap interval (2.5%, 97.5%) of the mean of `xs`.
pub fn bootstrap_ci<R: Rng + ?Sized>(xs: &[f64], resamples: usize, rng: &mut R) -> Result<Interval> {
    if xs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut means: Vec<f64> =
        (0..resamples).map(|_| (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64).collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(Interval { lo: at(0.025), hi: at(0.975) })
}

pub fn summarize_outcomes<R: Rng + ?Sized>(outcomes: &[SampleOutcome], bootstrap: bool, rng: &mut R) -> Result<MetricRow> {
    if outcomes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let col = |f: Extract| outcomes.iter().map(f).collect::<Vec<f64>>();
    let ci = if bootstrap {
        let mut m = BTreeMap::new();
        for (name, f) in METRICS {
            m.insert(name.to_string(), bootstrap_ci(&col(f), BOOTSTRAP_RESAMPLES, rng)?);
        }
        Some(m)
    } else {
        None
    };
    Ok(MetricRow {
        samples: outcomes.len(),
        structural: mean(&col(METRICS[0].1)),
        components_correct: mean(&col(|o| o.components_correct as u8 as f64)),
        sim_success: mean(&col(METRICS[1].1)),
        sim_valid: mean(&col(METRICS[2].1)),
        reward: mean(&col(METRICS[3].1)),
        wall_time: mean(&col(|o| o.seconds)),
        ci,
    })
}

/// Generates and scores one sample; the timer covers generation only.
pub fn sample_outcome<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    t: &TopologyTemplate,
    spec: &crate::search::Spec,
    sampling: &SamplingConfig,
    backend: &Backend,
    rng: &mut R,
) -> Result<SampleOutcome> {
    let start = Instant::now();
    let seq = model.generate_with(t, spec, sampling, rng)?;
    let seconds = start.elapsed().as_secs_f64();
    let v = validate_sequence(&seq, ConstraintLevel::Topology, Some(t));
    let (reward, metrics) = score_sequence(backend, t, &seq)?;
    Ok(SampleOutcome {
        structural: v.structural,
        components_correct: v.components_correct,
        sim_success: metrics.as_ref().is_some_and(|m| m.converged),
        sim_valid: metrics.as_ref().is_some_and(|m| m.plausible()),
        reward: reward.total,
        seconds,
    })
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    templates: &[&TopologyTemplate],
    backend: &Backend,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if templates.is_empty() || cfg.specs_per_topology == 0 || cfg.samples_per_spec == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = EvalReport { config: Some(cfg.clone()), backend: backend.name().to_string(), ..Default::default() };
    let mut all = Vec::new();
    for t in templates {
        let mut outcomes = Vec::new();
        for _ in 0..cfg.specs_per_topology {
            let spec = t.sample_spec(&mut rng);
            for _ in 0..cfg.samples_per_spec {
                outcomes.push(sample_outcome(model, t, &spec, &cfg.sampling, backend, &mut rng)?);
            }
        }
        report.per_topology.insert(t.name.clone(), summarize_outcomes(&outcomes, cfg.bootstrap, &mut rng)?);
        all.extend(outcomes);
    }
    report.aggregate = summarize_outcomes(&all, cfg.bootstrap, &mut rng)?;
    Ok(report)
}

impl EvalReport {
    /// Plain-text table, one row per topology plus the pooled row.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>7} {:>10} {:>9} {:>9} {:>7} {:>10}\n",
            "topology", "n", "struct%", "simok%", "simval%", "reward", "ms/sample"
        );
        let rows = self.per_topology.iter().map(|(k, v)| (k.as_str(), v)).chain([("all", &self.aggregate)]);
        for (name, r) in rows {
            s += &format!(
                "{:<20} {:>7} {:>10.1} {:>9.1} {:>9.1} {:>7.3} {:>10.2}\n",
                name,
                r.samples,
                100.0 * r.structural,
                100.0 * r.sim_success,
                100.0 * r.sim_valid,
                r.reward,
                1e3 * r.wall_time
            );
            if let Some(ci) = &r.ci {
                let reward = ci["reward"];
                s += &format!("{:<20} reward 95% CI [{:.3}, {:.3}]\n", "", reward.lo, reward.hi);
            }
        }
        s
    }
}
