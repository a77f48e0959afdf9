//! Baselines and evaluation metrics.

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::environments::{Campus, CampusState, Database, Environment, Pool};
use crate::environments::campus::N_STATES;
use crate::mdp::{
    estimate_mapped_mdp, greedy_policy, optimal_values, solve_optimal_q, MappedMdp, Policy, QFunction,
    ValueFunction,
};
use crate::percept::SymbolizedPercept;

/// A regular grid over a box of true coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self, HarnessError> {
        let g = Self { lower, upper, cells };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let d = self.cells.len();
        if d == 0 || self.lower.len() != d || self.upper.len() != d {
            return Err(HarnessError::Config("grid bounds and cells must have one entry per dimension".into()));
        }
        if self.cells.contains(&0) {
            return Err(HarnessError::Config("grid resolutions must be positive".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(HarnessError::Config("grid lower bounds must be below upper bounds".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    /// Row-major cell of a point; out-of-range coordinates are clamped.
    pub fn cell(&self, coords: &[f64]) -> usize {
        let mut idx = 0;
        for (d, &x) in coords.iter().enumerate().take(self.cells.len()) {
            let n = self.cells[d];
            let t = (x - self.lower[d]) / (self.upper[d] - self.lower[d]);
            let i = ((t * n as f64).floor().max(0.0) as usize).min(n - 1);
            idx = idx * n + i;
        }
        idx
    }

    /// Per-dimension indices of a cell.
    pub fn unravel(&self, mut cell: usize) -> Vec<usize> {
        let mut out = vec![0; self.cells.len()];
        for d in (0..self.cells.len()).rev() {
            out[d] = cell % self.cells[d];
            cell /= self.cells[d];
        }
        out
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        self.unravel(cell)
            .iter()
            .enumerate()
            .map(|(d, &i)| {
                let w = (self.upper[d] - self.lower[d]) / self.cells[d] as f64;
                self.lower[d] + (i as f64 + 0.5) * w
            })
            .collect()
    }
}

/// Direct-perception solution over grid cells.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub grid: GridSpec,
    pub mapped: MappedMdp,
    /// Q over cells (the sink row removed).
    pub q: QFunction,
    pub policy: Policy,
    pub values: ValueFunction,
}

impl Baseline {
    pub fn action(&self, coords: &[f64]) -> usize {
        self.policy.action(self.grid.cell(coords))
    }

    pub fn value(&self, coords: &[f64]) -> f64 {
        self.values.get(self.grid.cell(coords))
    }
}

/// Solves the task on the true state discretized by `grid`, using the
/// interactions of `db` keyed by cell.
pub fn direct_perception_baseline(db: &Database, grid: &GridSpec) -> Result<Baseline, HarnessError> {
    grid.validate()?;
    if db.interactions.is_empty() {
        return Err(HarnessError::Empty("interaction database"));
    }
    if db.coords.first().is_some_and(|c| c.len() != grid.cells.len()) {
        return Err(HarnessError::Config("grid dimension does not match the state coordinates".into()));
    }
    let n = grid.n_cells();
    let mapped = estimate_mapped_mdp(
        &db.interactions,
        |p| grid.cell(&db.coords[p.index()]),
        n,
        db.n_actions,
        db.discount,
    )?;
    let full = solve_optimal_q(mapped.mdp(), crate::mdp::DEFAULT_TOLERANCE)?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| full.row(i).to_vec()).collect();
    let q = QFunction::from_rows(&rows);
    Ok(Baseline {
        grid: grid.clone(),
        mapped,
        policy: greedy_policy(&q),
        values: optimal_values(&q),
        q,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Fraction of `points` where `act` picks an action whose oracle Q value is
/// more than `tolerance` below the oracle optimum.
pub fn policy_error(
    oracle: &Baseline,
    points: &[Vec<f64>],
    mut act: impl FnMut(&[f64]) -> Result<usize, HarnessError>,
    tolerance: f64,
) -> Result<f64, HarnessError> {
    if points.is_empty() {
        return Err(HarnessError::Empty("sample points"));
    }
    let mut errors = 0usize;
    for p in points {
        let cell = oracle.grid.cell(p);
        let a = act(p)?;
        if oracle.q.get(cell, a) < oracle.q.max_value(cell) - tolerance {
            errors += 1;
        }
    }
    Ok(errors as f64 / points.len() as f64)
}

/// Learning-pool and test-pool error of a mapping on the campus: the
/// fraction of pictures whose action is not optimal in the true MDP.
pub fn campus_errors(
    campus: &Campus,
    mut act: impl FnMut(&SymbolizedPercept) -> Result<usize, HarnessError>,
) -> Result<(f64, f64), HarnessError> {
    let q = solve_optimal_q(&campus.true_mdp(), crate::mdp::DEFAULT_TOLERANCE)?;
    let mut out = [0.0; 2];
    for (k, pool) in [Pool::Learning, Pool::Test].into_iter().enumerate() {
        let (mut wrong, mut total) = (0usize, 0usize);
        for i in 0..N_STATES {
            for p in campus.pool(CampusState::from_index(i), pool) {
                let s = campus.dictionary().symbolize(p).map_err(crate::environments::EnvError::from)?;
                let a = act(&s)?;
                if q.get(i, a) < q.max_value(i) - 1e-6 {
                    wrong += 1;
                }
                total += 1;
            }
        }
        if total == 0 {
            return Err(HarnessError::Empty("campus pool"));
        }
        out[k] = wrong as f64 / total as f64;
    }
    Ok((out[0], out[1]))
}

/// Outcome counts of episodic rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialStats {
    pub trials: usize,
    pub successes: usize,
    /// Terminal without the goal reward.
    pub failures: usize,
    /// Cut at the step cap.
    pub timeouts: usize,
    /// Mean length of successful trials.
    pub mean_success_length: Option<f64>,
}

impl TrialStats {
    pub fn miss_rate(&self) -> f64 {
        (self.failures + self.timeouts) as f64 / self.trials as f64
    }
}

enum TrialEnd {
    Success(usize),
    Failure,
    Timeout,
}

/// Rolls out `act` from `trials` start states. Trial `i` draws its start
/// from its own stream, so results do not depend on the thread count.
/// Success means ending on a positive reward.
pub fn run_trials<E, S, A>(
    env: &E,
    trials: usize,
    seed: u64,
    max_steps: usize,
    start: S,
    act: A,
) -> Result<TrialStats, HarnessError>
where
    E: Environment + Sync,
    S: Fn(&mut ChaCha8Rng) -> E::State + Sync,
    A: Fn(&E::State, &mut ChaCha8Rng) -> Result<usize, HarnessError> + Sync,
{
    if trials == 0 {
        return Err(HarnessError::Empty("trials"));
    }
    let one = |i: usize| -> Result<TrialEnd, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut s = start(&mut rng);
        for step in 1..=max_steps {
            let a = act(&s, &mut rng)?;
            let t = env.step(&s, a, &mut rng);
            if t.terminal {
                return Ok(if t.reward > 0.0 { TrialEnd::Success(step) } else { TrialEnd::Failure });
            }
            s = t.next;
        }
        Ok(TrialEnd::Timeout)
    };
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(trials);
    let chunk = trials.div_ceil(workers);
    let ends: Vec<Result<TrialEnd, HarnessError>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                scope.spawn(move || (w * chunk..((w + 1) * chunk).min(trials)).map(one).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("trial worker panicked"))
            .collect()
    });
    let mut stats = TrialStats {
        trials,
        successes: 0,
        failures: 0,
        timeouts: 0,
        mean_success_length: None,
    };
    let mut total_length = 0usize;
    for end in ends {
        match end? {
            TrialEnd::Success(n) => {
                stats.successes += 1;
                total_length += n;
            }
            TrialEnd::Failure => stats.failures += 1,
            TrialEnd::Timeout => stats.timeouts += 1,
        }
    }
    if stats.successes > 0 {
        stats.mean_success_length = Some(total_length as f64 / stats.successes as f64);
    }
    Ok(stats)
}
