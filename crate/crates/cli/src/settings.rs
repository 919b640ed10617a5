//! Resolved run settings: defaults, then a `key = value` file, then `--set`
//! overrides and explicit flags.

use std::path::Path;

use circgen::grammar::ConstraintLevel;
use circgen::model::{ModelConfig, SamplingConfig, TrainConfig, Variant};
use circgen::rank::{RewardModelConfig, RmTrainConfig};
use circgen::rl::{Algorithm, RlConfig};
use circgen::search::GaConfig;
use circgen::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub backend: String,
    pub preset: String,
    pub variant: Variant,
    pub level: ConstraintLevel,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub value_weight: f64,
    pub augment: usize,
    pub algorithm: Algorithm,
    pub rl_steps: usize,
    pub rl_batch: usize,
    pub k_topologies: usize,
    pub group_size: usize,
    pub rl_lr: f64,
    pub kl_target: f64,
    pub beta_init: f64,
    pub eval_every: usize,
    pub ga_population: usize,
    pub ga_generations: usize,
    pub ga_alpha: f64,
    pub ga_mutation_prob: f64,
    pub ga_mutation_sigma: f64,
    pub ga_tournament: usize,
    pub ga_elitism: usize,
    pub n_seeds: usize,
    pub rm_preset: String,
    pub rm_epochs: usize,
    pub rm_lr: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let s = SamplingConfig::default();
        let t = TrainConfig::default();
        let r = RlConfig::default();
        let g = GaConfig::default();
        let rm = RmTrainConfig::default();
        Self {
            seed: 0,
            backend: "analytic".into(),
            preset: "desk".into(),
            variant: Variant::TwoHead,
            level: s.level,
            temperature: s.temperature,
            top_k: s.top_k,
            max_new_tokens: s.max_new_tokens,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            value_weight: t.value_weight,
            augment: 5,
            algorithm: r.algorithm,
            rl_steps: r.steps,
            rl_batch: r.batch_size,
            k_topologies: r.k_topologies,
            group_size: r.group_size,
            rl_lr: r.lr,
            kl_target: r.kl_target,
            beta_init: r.beta_init,
            eval_every: r.eval_every,
            ga_population: g.population,
            ga_generations: g.generations,
            ga_alpha: g.alpha,
            ga_mutation_prob: g.mutation_prob,
            ga_mutation_sigma: g.mutation_sigma,
            ga_tournament: g.tournament,
            ga_elitism: g.elitism,
            n_seeds: 3,
            rm_preset: "desk".into(),
            rm_epochs: rm.epochs,
            rm_lr: rm.lr,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::BadConfig(format!("bad value `{v}` for `{key}`")))
}

impl Settings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = v.trim();
        match key.as_str() {
            "seed" => self.seed = num(&key, v)?,
            "backend" => self.backend = v.to_string(),
            "preset" => self.preset = v.to_string(),
            "variant" => self.variant = v.parse()?,
            "level" => self.level = v.parse()?,
            "temperature" => self.temperature = num(&key, v)?,
            "top_k" => self.top_k = num(&key, v)?,
            "max_new_tokens" => self.max_new_tokens = num(&key, v)?,
            "epochs" => self.epochs = num(&key, v)?,
            "batch_size" => self.batch_size = num(&key, v)?,
            "lr" => self.lr = num(&key, v)?,
            "warmup_frac" => self.warmup_frac = num(&key, v)?,
            "value_weight" => self.value_weight = num(&key, v)?,
            "augment" => self.augment = num(&key, v)?,
            "algorithm" => self.algorithm = v.parse()?,
            "rl_steps" => self.rl_steps = num(&key, v)?,
            "rl_batch" => self.rl_batch = num(&key, v)?,
            "k_topologies" | "k" => self.k_topologies = num(&key, v)?,
            "group_size" | "g" => self.group_size = num(&key, v)?,
            "rl_lr" => self.rl_lr = num(&key, v)?,
            "kl_target" => self.kl_target = num(&key, v)?,
            "beta_init" => self.beta_init = num(&key, v)?,
            "eval_every" => self.eval_every = num(&key, v)?,
            "ga_population" => self.ga_population = num(&key, v)?,
            "ga_generations" => self.ga_generations = num(&key, v)?,
            "ga_alpha" => self.ga_alpha = num(&key, v)?,
            "ga_mutation_prob" => self.ga_mutation_prob = num(&key, v)?,
            "ga_mutation_sigma" => self.ga_mutation_sigma = num(&key, v)?,
            "ga_tournament" => self.ga_tournament = num(&key, v)?,
            "ga_elitism" => self.ga_elitism = num(&key, v)?,
            "n_seeds" => self.n_seeds = num(&key, v)?,
            "rm_preset" => self.rm_preset = v.to_string(),
            "rm_epochs" => self.rm_epochs = num(&key, v)?,
            "rm_lr" => self.rm_lr = num(&key, v)?,
            _ => return Err(Error::BadConfig(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::BadConfig(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
            level: self.level,
            max_new_tokens: self.max_new_tokens,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.preset, self.variant)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            value_weight: self.value_weight,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            algorithm: self.algorithm,
            steps: self.rl_steps,
            batch_size: self.rl_batch,
            k_topologies: self.k_topologies,
            group_size: self.group_size,
            lr: self.rl_lr,
            sampling: self.sampling(),
            kl_target: self.kl_target,
            beta_init: self.beta_init,
            eval_every: self.eval_every,
            seed: self.seed,
            ..RlConfig::default()
        }
    }

    pub fn ga_config(&self) -> GaConfig {
        GaConfig {
            population: self.ga_population,
            generations: self.ga_generations,
            alpha: self.ga_alpha,
            mutation_prob: self.ga_mutation_prob,
            mutation_sigma: self.ga_mutation_sigma,
            tournament: self.ga_tournament,
            elitism: self.ga_elitism,
            seed: self.seed,
        }
    }

    pub fn rm_config(&self) -> Result<RewardModelConfig> {
        match self.rm_preset.as_str() {
            "desk" => Ok(RewardModelConfig::desk()),
            "full" => Ok(RewardModelConfig::full()),
            p => Err(Error::BadConfig(format!("unknown reward-model preset `{p}`"))),
        }
    }

    pub fn rm_train_config(&self) -> RmTrainConfig {
        RmTrainConfig { epochs: self.rm_epochs, lr: self.rm_lr, seed: self.seed, ..RmTrainConfig::default() }
    }
}
