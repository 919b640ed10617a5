//! Direct search over template slot values: random search, a real-coded GA
//! in log10 space, and a GA seeded by a generator's best proposal.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SamplingConfig};
use crate::scalar::Scalar;
use crate::simulate::{Backend, RewardBreakdown};
use crate::tokenizer::{decode_sequence, CircuitDesign, SpecKey};
use crate::topology::{sample_random_design_with, TopologyTemplate};

pub type Spec = BTreeMap<SpecKey, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub alpha: f64,
    pub mutation_prob: f64,
    /// Mutation standard deviation in decades.
    pub mutation_sigma: f64,
    pub tournament: usize,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 16,
            generations: 20,
            alpha: 0.5,
            mutation_prob: 0.2,
            mutation_sigma: 0.1,
            tournament: 3,
            elitism: 1,
            seed: 0,
        }
    }
}

impl GaConfig {
    /// Simulator calls made by one run.
    pub fn evaluations(&self) -> usize {
        self.population + self.generations * (self.population - self.elitism.min(self.population))
    }

    /// Largest generation count whose evaluation count fits in `budget`.
    pub fn with_budget(mut self, budget: usize) -> Self {
        let per_gen = (self.population - self.elitism.min(self.population)).max(1);
        self.generations = budget.saturating_sub(self.population) / per_gen;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    /// log10 value per slot.
    pub genes: Vec<f64>,
    pub fitness: f64,
    pub evaluated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub design: CircuitDesign,
    pub reward: RewardBreakdown,
    pub evaluations: usize,
    /// Best-so-far reward: per draw for random search, per generation for the GA.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStartResult {
    pub result: SearchResult,
    pub generator_evaluations: usize,
    pub ga_evaluations: usize,
    pub seeded: bool,
}

/// Independent log-uniform draws; returns the first best.
pub fn random_search(t: &TopologyTemplate, spec: &Spec, budget: usize, backend: &Backend, seed: u64) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::BadConfig("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(CircuitDesign, RewardBreakdown)> = None;
    let mut history = Vec::with_capacity(budget);
    for _ in 0..budget {
        let d = sample_random_design_with(t, spec, &mut rng);
        let (_, r) = backend.score(t, &d)?;
        if best.as_ref().is_none_or(|(_, b)| r.total > b.total) {
            best = Some((d, r));
        }
        history.push(best.as_ref().unwrap().1.total);
    }
    let (design, reward) = best.unwrap();
    Ok(SearchResult { design, reward, evaluations: budget, history })
}

fn bounds(t: &TopologyTemplate) -> Vec<(f64, f64)> {
    t.slots.iter().map(|s| (s.lo.log10(), s.hi.log10())).collect()
}

fn repair(genes: &mut [f64], b: &[(f64, f64)]) {
    for (g, &(lo, hi)) in genes.iter_mut().zip(b) {
        *g = g.clamp(lo, hi);
    }
}

fn to_design(t: &TopologyTemplate, spec: &Spec, genes: &[f64]) -> CircuitDesign {
    let values: Vec<f64> = genes.iter().map(|g| 10f64.powf(*g)).collect();
    t.design_from_values(spec.clone(), &values)
}

/// Index of the fittest of `k` uniform draws; ties go to the lower index.
pub fn tournament_select<R: Rng + ?Sized>(pop: &[Individual], k: usize, rng: &mut R) -> usize {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..k.max(1) {
        let i = rng.random_range(0..pop.len());
        if pop[i].fitness > pop[best].fitness || (pop[i].fitness == pop[best].fitness && i < best) {
            best = i;
        }
    }
    best
}

/// BLX-α: each child gene uniform on `[min − α·d, max + α·d]`.
pub fn blx_alpha<R: Rng + ?Sized>(a: &[f64], b: &[f64], alpha: f64, rng: &mut R) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (lo, hi) = (x.min(y), x.max(y));
            let d = hi - lo;
            let (l, h) = (lo - alpha * d, hi + alpha * d);
            if h > l {
                rng.random_range(l..=h)
            } else {
                lo
            }
        })
        .collect()
}

pub fn mutate<R: Rng + ?Sized>(genes: &mut [f64], prob: f64, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("sigma > 0");
    for g in genes {
        if rng.random::<f64>() < prob {
            *g += n.sample(rng);
        }
    }
}

fn best_index(pop: &[Individual]) -> usize {
    let mut b = 0;
    for (i, ind) in pop.iter().enumerate() {
        if ind.fitness > pop[b].fitness {
            b = i;
        }
    }
    b
}

/// Generational GA with tournament selection, BLX-α crossover, Gaussian
/// mutation and clamp repair. `seeds` fill the first population slots.
pub fn ga_optimize(
    t: &TopologyTemplate,
    spec: &Spec,
    cfg: &GaConfig,
    backend: &Backend,
    seeds: &[CircuitDesign],
) -> Result<SearchResult> {
    if cfg.population < 2 {
        return Err(Error::BadConfig("population must be at least 2".into()));
    }
    let b = bounds(t);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evaluations = 0;
    let eval = |genes: Vec<f64>, evaluations: &mut usize| -> Result<Individual> {
        let (_, r) = backend.score(t, &to_design(t, spec, &genes))?;
        *evaluations += 1;
        Ok(Individual { genes, fitness: r.total, evaluated: true })
    };

    let mut pop = Vec::with_capacity(cfg.population);
    for s in seeds.iter().take(cfg.population) {
        let Some(values) = t.slot_values(s) else { continue };
        let mut genes: Vec<f64> = values.iter().map(|v| v.log10()).collect();
        repair(&mut genes, &b);
        pop.push(eval(genes, &mut evaluations)?);
    }
    while pop.len() < cfg.population {
        let d = sample_random_design_with(t, spec, &mut rng);
        let genes = d.components.iter().map(|c| c.value.log10()).collect();
        pop.push(eval(genes, &mut evaluations)?);
    }

    let mut best = pop[best_index(&pop)].clone();
    let mut history = vec![best.fitness];
    let elite = cfg.elitism.min(cfg.population);
    for _ in 0..cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&i, &j| pop[j].fitness.total_cmp(&pop[i].fitness).then(i.cmp(&j)));
        let mut next: Vec<Individual> = order[..elite].iter().map(|&i| pop[i].clone()).collect();
        while next.len() < cfg.population {
            let p1 = tournament_select(&pop, cfg.tournament, &mut rng);
            let p2 = tournament_select(&pop, cfg.tournament, &mut rng);
            let mut child = blx_alpha(&pop[p1].genes, &pop[p2].genes, cfg.alpha, &mut rng);
            mutate(&mut child, cfg.mutation_prob, cfg.mutation_sigma, &mut rng);
            repair(&mut child, &b);
            next.push(eval(child, &mut evaluations)?);
        }
        pop = next;
        let gb = &pop[best_index(&pop)];
        if gb.fitness > best.fitness {
            best = gb.clone();
        }
        history.push(best.fitness);
    }
    let design = to_design(t, spec, &best.genes);
    let (_, reward) = backend.score(t, &design)?;
    Ok(SearchResult { design, reward, evaluations, history })
}

/// Source of candidate designs for warm starting; `None` marks an invalid proposal.
pub trait DesignGenerator {
    fn propose(&mut self, t: &TopologyTemplate, spec: &Spec) -> Result<Option<CircuitDesign>>;
}

impl<F: FnMut(&TopologyTemplate, &Spec) -> Option<CircuitDesign>> DesignGenerator for F {
    fn propose(&mut self, t: &TopologyTemplate, spec: &Spec) -> Result<Option<CircuitDesign>> {
        Ok(self(t, spec))
    }
}

/// Samples designs from a trained model.
pub struct ModelGenerator<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub sampling: SamplingConfig,
    rng: ChaCha8Rng,
}

impl<'m, T: Scalar> ModelGenerator<'m, T> {
    pub fn new(model: &'m Model<T>, sampling: SamplingConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        Self { model, sampling, rng }
    }
}

impl<T: Scalar> DesignGenerator for ModelGenerator<'_, T> {
    fn propose(&mut self, t: &TopologyTemplate, spec: &Spec) -> Result<Option<CircuitDesign>> {
        let seq = self.model.generate_with(t, spec, &self.sampling, &mut self.rng)?;
        Ok(decode_sequence(&seq).ok().filter(|d| t.slot_values(d).is_some()))
    }
}

/// Draws `n_seeds` proposals, simulates the valid ones and seeds the GA with
/// the best. Falls back to a cold start when nothing valid comes back.
pub fn warm_start_ga(
    t: &TopologyTemplate,
    spec: &Spec,
    generator: &mut dyn DesignGenerator,
    n_seeds: usize,
    cfg: &GaConfig,
    backend: &Backend,
) -> Result<WarmStartResult> {
    let mut generator_evaluations = 0;
    let mut best: Option<(CircuitDesign, f64)> = None;
    for _ in 0..n_seeds {
        let Some(d) = generator.propose(t, spec)? else { continue };
        let (_, r) = backend.score(t, &d)?;
        generator_evaluations += 1;
        if best.as_ref().is_none_or(|(_, b)| r.total > *b) {
            best = Some((d, r.total));
        }
    }
    let seeds: Vec<CircuitDesign> = best.into_iter().map(|(d, _)| d).collect();
    let result = ga_optimize(t, spec, cfg, backend, &seeds)?;
    Ok(WarmStartResult { ga_evaluations: result.evaluations, generator_evaluations, seeded: !seeds.is_empty(), result })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::compute_reward;
    use crate::topology::{get_template, sample_random_design};

    #[test]
    fn random_search_budget_one_is_one_draw() {
        let t = get_template("boost").unwrap();
        let spec = t.nominal_spec();
        let r = random_search(t, &spec, 1, &Backend::Analytic, 9).unwrap();
        let d = sample_random_design(t, &spec, 9);
        let m = Backend::Analytic.evaluate(t, &d).unwrap();
        assert_eq!(r.design, d);
        assert_eq!(r.reward, compute_reward(t, &d, &m));
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn random_search_prefix_property() {
        let t = get_template("buck").unwrap();
        let spec = t.nominal_spec();
        let long = random_search(t, &spec, 40, &Backend::Analytic, 3).unwrap();
        for n in [1, 5, 20] {
            let short = random_search(t, &spec, n, &Backend::Analytic, 3).unwrap();
            assert_eq!(short.history[..], long.history[..n]);
        }
        assert!(long.history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn degenerate_operators_copy_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = vec![-3.0, 1.5, 0.2];
        let c = blx_alpha(&p, &p, 0.0, &mut rng);
        assert_eq!(c, p);
        let mut m = c.clone();
        mutate(&mut m, 1.0, 0.0, &mut rng);
        assert_eq!(m, p);
    }

    #[test]
    fn blx_child_in_expanded_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = blx_alpha(&[0.0], &[1.0], 0.5, &mut rng);
            assert!((-0.5..=1.5).contains(&c[0]));
        }
    }

    #[test]
    fn ga_accounting_and_monotone_history() {
        let t = get_template("buck").unwrap();
        let spec = t.nominal_spec();
        let cfg = GaConfig { generations: 5, ..Default::default() };
        let r = ga_optimize(t, &spec, &cfg, &Backend::Analytic, &[]).unwrap();
        assert_eq!(r.evaluations, cfg.evaluations());
        assert_eq!(r.evaluations, 16 + 5 * 15);
        assert_eq!(r.history.len(), 6);
        assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
        for (c, s) in r.design.components.iter().zip(&t.slots) {
            assert!(c.value >= s.lo * (1.0 - 1e-12) && c.value <= s.hi * (1.0 + 1e-12));
        }
        let again = ga_optimize(t, &spec, &cfg, &Backend::Analytic, &[]).unwrap();
        assert_eq!(r.history, again.history);
    }

    #[test]
    fn warm_start_accounting() {
        let t = get_template("inverting_amp").unwrap();
        let spec = t.nominal_spec();
        let cfg = GaConfig { generations: 3, ..Default::default() };
        let cold = ga_optimize(t, &spec, &cfg, &Backend::Analytic, &[]).unwrap();
        let mut none = |_: &TopologyTemplate, _: &Spec| None;
        let w = warm_start_ga(t, &spec, &mut none, 3, &cfg, &Backend::Analytic).unwrap();
        assert!(!w.seeded);
        assert_eq!(w.generator_evaluations, 0);
        assert_eq!(w.result, cold);

        let mut k = 0;
        let mut some = |t: &TopologyTemplate, s: &Spec| {
            k += 1;
            Some(sample_random_design(t, s, k))
        };
        let w = warm_start_ga(t, &spec, &mut some, 3, &cfg, &Backend::Analytic).unwrap();
        assert!(w.seeded);
        assert_eq!(w.generator_evaluations, 3);
        assert_eq!(w.ga_evaluations, cfg.evaluations());
    }

    #[test]
    fn with_budget_fits() {
        let cfg = GaConfig::default().with_budget(320);
        assert_eq!(cfg.generations, 20);
        assert!(cfg.evaluations() <= 320);
        assert_eq!(GaConfig::default().with_budget(160).generations, 9);
    }
}
