//! Differential-evolution attack search over sparse (meter, amount)
//! encodings with best/1 mutation, a duplicate-index filter in the
//! crossover, and Deb's feasibility rules for selection.
//!
//! Children of one generation are proposed against the generation-start
//! population and evaluated independently (possibly in parallel);
//! selection is then applied in slot order, so a fixed seed reproduces
//! the same result regardless of evaluation parallelism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    AttackProblem, AttackResult, AttackSpec, AttackVector, CandidateEval, Scenario,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeConfig {
    pub pop_size: usize,
    pub max_generations: usize,
    pub crossover_rate: f64,
    pub differential_weight: f64,
    pub seed: u64,
    /// stop after this many generations without improvement of the
    /// incumbent best; `None` disables early stopping
    pub early_stop: Option<usize>,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            pop_size: 400,
            max_generations: 400,
            crossover_rate: 0.9,
            differential_weight: 0.5,
            seed: 0,
            early_stop: Some(100),
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return Err(Error::Config("population size must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::Config("crossover rate must lie in [0, 1]".into()));
        }
        if self.differential_weight <= 0.0 {
            return Err(Error::Config("differential weight must be positive".into()));
        }
        Ok(())
    }
}

/// Deb's three comparison criteria; `true` when `a` strictly beats `b`.
/// Feasible candidates (zero violation) are compared by objective
/// (larger is better); a feasible candidate always beats an infeasible
/// one; among infeasible candidates the smaller violation wins.
pub fn deb_better(a: &CandidateEval, b: &CandidateEval) -> bool {
    let a_feasible = a.violation == 0.0;
    let b_feasible = b.violation == 0.0;
    match (a_feasible, b_feasible) {
        (true, true) => a.objective > b.objective,
        (true, false) => true,
        (false, true) => false,
        (false, false) => a.violation < b.violation,
    }
}

fn sample_amount<R: Rng>(spec: &AttackSpec, meter: usize, rng: &mut R) -> f64 {
    let (lo, hi) = (spec.bound_lo[meter], spec.bound_hi[meter]);
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Random population: meter indices drawn without replacement (fixed to
/// the given set in specific-k), amounts uniform within per-meter bounds.
pub fn init_population<R: Rng>(
    spec: &AttackSpec,
    config: &DeConfig,
    rng: &mut R,
) -> Vec<AttackVector> {
    let m = spec.n_meters();
    (0..config.pop_size)
        .map(|_| {
            let indices: Vec<usize> = match &spec.scenario {
                Scenario::SpecificK(fixed) => fixed.clone(),
                Scenario::AnyK => {
                    // partial Fisher-Yates over the meter range
                    let mut pool: Vec<usize> = (0..m).collect();
                    for j in 0..spec.k {
                        let pick = rng.gen_range(j..m);
                        pool.swap(j, pick);
                    }
                    pool.truncate(spec.k);
                    pool
                }
            };
            let entries = indices
                .into_iter()
                .map(|meter| (meter, sample_amount(spec, meter, rng)))
                .collect();
            AttackVector { entries }
        })
        .collect()
}

/// Builds one child by best/1 mutation and binomial crossover.
///
/// Index genes mutate by rounding and wrapping the differential step,
/// then pass the duplicate filter: a mutant index colliding with one of
/// the child's earlier indices falls back to the father's gene, and if
/// that collides too, to a random unused meter. In specific-k runs the
/// index genes never change. Amount genes are clamped to the bounds of
/// whatever meter the child ends up touching in that slot.
pub fn propose_child<R: Rng>(
    population: &[AttackVector],
    best: &AttackVector,
    target: usize,
    spec: &AttackSpec,
    config: &DeConfig,
    rng: &mut R,
) -> AttackVector {
    let n = population.len();
    let k = spec.k;
    let m = spec.n_meters();
    let father = &population[target];

    let r1 = loop {
        let r = rng.gen_range(0..n);
        if r != target {
            break r;
        }
    };
    let r2 = loop {
        let r = rng.gen_range(0..n);
        if r != target && r != r1 {
            break r;
        }
    };
    let (p1, p2) = (&population[r1], &population[r2]);

    let index_genes = match spec.scenario {
        Scenario::AnyK => k,
        Scenario::SpecificK(_) => 0,
    };
    let genome_len = index_genes + k;
    let j_rand = rng.gen_range(0..genome_len);

    let mut indices = Vec::with_capacity(k);
    if index_genes == 0 {
        indices.extend(father.entries.iter().map(|(i, _)| *i));
    } else {
        for j in 0..k {
            let gate = rng.gen::<f64>() < config.crossover_rate || j == j_rand;
            let father_idx = father.entries[j].0;
            let candidate = if gate {
                let mutant = best.entries[j].0 as f64
                    + config.differential_weight
                        * (p1.entries[j].0 as f64 - p2.entries[j].0 as f64);
                let wrapped = (mutant.round() as i64).rem_euclid(m as i64) as usize;
                if indices.contains(&wrapped) {
                    father_idx
                } else {
                    wrapped
                }
            } else {
                father_idx
            };
            let chosen = if indices.contains(&candidate) {
                // the father gene can collide with an earlier mutant; fall
                // back to a random unused meter to keep indices unique
                loop {
                    let r = rng.gen_range(0..m);
                    if !indices.contains(&r) {
                        break r;
                    }
                }
            } else {
                candidate
            };
            indices.push(chosen);
        }
    }

    let mut entries = Vec::with_capacity(k);
    for (p, &meter) in indices.iter().enumerate() {
        let gene = index_genes + p;
        let gate = rng.gen::<f64>() < config.crossover_rate || gene == j_rand;
        let raw = if gate {
            best.entries[p].1
                + config.differential_weight * (p1.entries[p].1 - p2.entries[p].1)
        } else {
            father.entries[p].1
        };
        entries.push((meter, spec.clamp_amount(meter, raw)));
    }
    AttackVector { entries }
}

fn check_invariants(vector: &AttackVector, spec: &AttackSpec) {
    debug_assert_eq!(vector.entries.len(), spec.k);
    let mut seen = vec![false; spec.n_meters()];
    for &(meter, amount) in &vector.entries {
        debug_assert!(meter < spec.n_meters());
        debug_assert!(!seen[meter], "duplicate meter {meter}");
        seen[meter] = true;
        debug_assert!(
            amount >= spec.bound_lo[meter] - 1e-15 && amount <= spec.bound_hi[meter] + 1e-15,
            "amount {amount} outside bounds of meter {meter}"
        );
    }
}

/// Runs the generational loop and returns the population best, flagged
/// infeasible when no candidate ever satisfied the stealth constraint.
pub fn run_de<P: AttackProblem>(problem: &P, config: &DeConfig) -> Result<AttackResult> {
    config.validate()?;
    let spec = problem.spec();
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut population = init_population(spec, config, &mut rng);
    for vector in &population {
        check_invariants(vector, spec);
    }
    let mut evals: Vec<CandidateEval> = population
        .par_iter()
        .map(|v| problem.evaluate(v))
        .collect();

    let mut nfe = config.pop_size;
    let mut nfe_to_success = None;
    for (slot, eval) in evals.iter().enumerate() {
        if nfe_to_success.is_none() && eval.violation == 0.0 && eval.success {
            nfe_to_success = Some(slot + 1);
        }
    }

    let best_slot = |evals: &[CandidateEval]| -> usize {
        let mut best = 0;
        for i in 1..evals.len() {
            if deb_better(&evals[i], &evals[best]) {
                best = i;
            }
        }
        best
    };

    let mut best = best_slot(&evals);
    let mut stagnant = 0usize;
    let mut generations = 0usize;

    for _gen in 1..=config.max_generations {
        generations += 1;
        let best_vector = population[best].clone();

        let children: Vec<AttackVector> = (0..config.pop_size)
            .map(|i| propose_child(&population, &best_vector, i, spec, config, &mut rng))
            .collect();
        for child in &children {
            check_invariants(child, spec);
        }
        let child_evals: Vec<CandidateEval> = children
            .par_iter()
            .map(|v| problem.evaluate(v))
            .collect();

        let mut improved = false;
        for (slot, (child, eval)) in children.into_iter().zip(child_evals).enumerate() {
            if nfe_to_success.is_none() && eval.violation == 0.0 && eval.success {
                nfe_to_success = Some(nfe + slot + 1);
            }
            if deb_better(&eval, &evals[slot]) {
                if deb_better(&eval, &evals[best]) {
                    improved = true;
                }
                population[slot] = child;
                evals[slot] = eval;
            }
        }
        nfe += config.pop_size;
        best = best_slot(&evals);

        if improved {
            stagnant = 0;
        } else {
            stagnant += 1;
            if let Some(limit) = config.early_stop {
                if stagnant >= limit {
                    break;
                }
            }
        }
    }

    let eval = evals[best];
    Ok(AttackResult {
        vector: population.swap_remove(best),
        objective: eval.objective,
        residual: eval.residual,
        feasible: eval.violation == 0.0,
        success: eval.success,
        nfe,
        nfe_to_success,
        iterations: generations,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// An "identity victim" whose readings are the state itself: the
/// objective reduces to the largest absolute clamped injection, so the
/// global optimum is enumerable. Used to validate the search against
/// brute force without any trained model.
pub mod toy {
    use super::*;

    pub struct IdentityVictim {
        pub spec: AttackSpec,
    }

    impl IdentityVictim {
        pub fn new(z: Vec<f64>, k: usize, eta: f64, tau: f64) -> Self {
            let bound: Vec<f64> = z.iter().map(|v| eta * v.abs().max(0.01)).collect();
            IdentityVictim {
                spec: AttackSpec {
                    k,
                    scenario: Scenario::AnyK,
                    eta,
                    bound_lo: bound.iter().map(|b| -b).collect(),
                    bound_hi: bound,
                    tau,
                },
            }
        }

        /// Enumerates every (meter, boundary amount) candidate.
        pub fn bruteforce_optimum(&self) -> f64 {
            (0..self.spec.n_meters())
                .map(|i| self.spec.bound_lo[i].abs().max(self.spec.bound_hi[i].abs()))
                .fold(0.0, f64::max)
        }
    }

    impl AttackProblem for IdentityVictim {
        fn spec(&self) -> &AttackSpec {
            &self.spec
        }

        fn evaluate(&self, vector: &AttackVector) -> CandidateEval {
            let objective = vector
                .entries
                .iter()
                .map(|&(meter, amount)| self.spec.clamp_amount(meter, amount).abs())
                .fold(0.0, f64::max);
            CandidateEval {
                objective,
                violation: 0.0,
                residual: 0.0,
                success: false,
            }
        }
    }
}

/// Convenience constructor for the enumerable toy victim.
pub fn toy_problem(z: Vec<f64>, k: usize, eta: f64, tau: f64) -> toy::IdentityVictim {
    toy::IdentityVictim::new(z, k, eta, tau)
}
