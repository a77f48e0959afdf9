//! Experiment configuration, runs and reports.
//!
//! One [`ExperimentConfig`] plus one seed fully determines an experiment:
//! the environment, the interaction database, the learned model and every
//! emitted CSV.

mod eval;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eval::{
    campus_errors, direct_perception_baseline, pearson, policy_error, run_trials, Baseline, GridSpec,
    TrialStats,
};

use crate::environments::campus::N_STATES;
use crate::environments::{
    collect_interactions, collect_transitions, Campus, CampusConfig, CampusState, Car, CarConfig, CarState,
    Database, EnvError, Environment, Maze, MazeConfig, Pool,
};
use crate::classifier::Classifier;
use crate::mdp::MdpError;
use crate::percept::{FeatureDictionary, SymbolizedPercept};
use crate::rlvc_loop::{
    run_rlvc_observed, trace_to_csv, Change, IterationRecord, Observer, RlvcConfig, RlvcError, RlvcModel,
    RlvcOutcome, TrainingData,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("nothing to evaluate: empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rlvc(#[from] RlvcError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Maze,
    Campus,
    Car,
}

/// Direct-perception settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Cells per dimension; 50x50 (maze), 44 (campus) or 13x13 (car) when unset.
    pub cells: Option<Vec<usize>>,
    /// Size of a dedicated transition database. When unset the baseline
    /// uses the interactions of the training database.
    pub interactions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Car rollouts per evaluation.
    pub trials: usize,
    /// Rollouts longer than this count as misses.
    pub max_steps: usize,
    /// Car rollouts run at every iteration (0 disables).
    pub trials_per_iteration: usize,
    /// Maze policy error is measured on a `n x n` lattice of points.
    pub sample_points: usize,
    /// An action is wrong when its oracle Q value is more than this below
    /// the oracle optimum; `0.02 * max |r|` when unset.
    pub policy_tolerance: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            max_steps: 300,
            trials_per_iteration: 0,
            sample_points: 25,
            policy_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Size of the training database.
    pub interactions: usize,
    pub rlvc: RlvcConfig,
    pub maze: MazeConfig,
    pub campus: CampusConfig,
    pub car: CarConfig,
    pub baseline: BaselineConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Campus,
            interactions: 10_000,
            rlvc: RlvcConfig::default(),
            maze: MazeConfig::default(),
            campus: CampusConfig::default(),
            car: CarConfig::default(),
            baseline: BaselineConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.interactions == 0 {
            return Err(HarnessError::Config("interactions must be positive".into()));
        }
        if self.baseline.interactions == Some(0) {
            return Err(HarnessError::Config("baseline interactions must be positive".into()));
        }
        if self.evaluation.max_steps == 0 || self.evaluation.sample_points == 0 {
            return Err(HarnessError::Config("evaluation counts must be positive".into()));
        }
        if self.evaluation.policy_tolerance.is_some_and(|t| !(t >= 0.0)) {
            return Err(HarnessError::Config("policy_tolerance must be >= 0".into()));
        }
        self.rlvc.validate()?;
        self.grid()?;
        Ok(())
    }

    /// The direct-perception grid of the task.
    pub fn grid(&self) -> Result<GridSpec, HarnessError> {
        let (lower, upper, cells) = match self.task {
            Task::Maze => (vec![0.0, 0.0], vec![self.maze.size; 2], vec![50, 50]),
            Task::Campus => (vec![-0.5], vec![N_STATES as f64 - 0.5], vec![N_STATES]),
            Task::Car => (vec![-1.0, -self.car.max_speed], vec![1.0, self.car.max_speed], vec![13, 13]),
        };
        GridSpec::new(lower, upper, self.baseline.cells.clone().unwrap_or(cells))
    }
}

/// Independent seed for one use of the experiment seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const ENV_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const ORACLE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const PROBE_STREAM: u64 = 4;

#[derive(Debug, Clone)]
pub enum TaskEnv {
    Maze(Maze),
    Campus(Campus),
    Car(Car),
}

/// Metrics of one mapping on one task. Fields that do not apply are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub task: Task,
    pub classes: usize,
    /// Campus learning-pool error.
    pub learning_error: Option<f64>,
    /// Campus test-pool error.
    pub test_error: Option<f64>,
    /// Maze error at the sample lattice.
    pub policy_error: Option<f64>,
    /// Maze Pearson correlation with the oracle value grid.
    pub value_correlation: Option<f64>,
    pub trials: Option<TrialStats>,
}

pub const REPORT_HEADER: &str =
    "task,classes,learning_error,test_error,policy_error,value_correlation,trials,missed,miss_rate,mean_success_length";

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let task = match self.task {
            Task::Maze => "maze",
            Task::Campus => "campus",
            Task::Car => "car",
        };
        let t = self.trials;
        format!(
            "{REPORT_HEADER}\n{},{},{},{},{},{},{},{},{},{}\n",
            task,
            self.classes,
            opt(self.learning_error),
            opt(self.test_error),
            opt(self.policy_error),
            opt(self.value_correlation),
            t.map(|t| t.trials.to_string()).unwrap_or_default(),
            t.map(|t| (t.failures + t.timeouts).to_string()).unwrap_or_default(),
            opt(t.map(|t| t.miss_rate())),
            opt(t.and_then(|t| t.mean_success_length)),
        )
    }
}

/// Output of [`Experiment::train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub outcome: RlvcOutcome,
    pub trace_csv: String,
}

/// A configured task with its seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub env: TaskEnv,
}

/// Fills the error columns of the trace; the first failure is kept and
/// later iterations are skipped.
struct Metrics<'a, F> {
    experiment: &'a Experiment,
    oracle: Option<&'a Baseline>,
    failure: &'a mut Option<HarnessError>,
    on_change: F,
}

impl<F: FnMut(&Classifier, Change)> Observer for Metrics<'_, F> {
    fn observe(&mut self, model: &RlvcModel, record: &mut IterationRecord) {
        if self.failure.is_none() {
            if let Err(e) = self.experiment.iteration_metrics(model, self.oracle, record) {
                *self.failure = Some(e);
            }
        }
    }

    fn changed(&mut self, classifier: &Classifier, change: Change) {
        (self.on_change)(classifier, change)
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        config.validate()?;
        let env_seed = derive_seed(seed, ENV_STREAM);
        let env = match config.task {
            Task::Maze => TaskEnv::Maze(Maze::new(&config.maze, env_seed)?),
            Task::Campus => TaskEnv::Campus(Campus::new(&config.campus, env_seed)?),
            Task::Car => TaskEnv::Car(Car::new(&config.car, env_seed)?),
        };
        Ok(Self { config, seed, env })
    }

    /// The training database, with percepts.
    pub fn database(&self) -> Database {
        let (n, s) = (self.config.interactions, derive_seed(self.seed, DATA_STREAM));
        match &self.env {
            TaskEnv::Maze(e) => collect_interactions(e, n, s),
            TaskEnv::Campus(e) => collect_interactions(e, n, s),
            TaskEnv::Car(e) => collect_interactions(e, n, s),
        }
    }

    fn dictionary(&self) -> &FeatureDictionary {
        match &self.env {
            TaskEnv::Maze(e) => e.dictionary(),
            TaskEnv::Campus(e) => e.dictionary(),
            TaskEnv::Car(e) => e.dictionary(),
        }
    }

    pub fn training_data(&self) -> Result<TrainingData, HarnessError> {
        Ok(self.database().training_data(self.dictionary()).map_err(EnvError::from)?)
    }

    /// The training database as `(interactions CSV, percepts text)`.
    pub fn database_files(&self) -> (String, String) {
        let db = self.database();
        (db.interactions_csv(), db.percepts_text(self.dictionary().dim()))
    }

    fn max_abs_reward(&self) -> f64 {
        match &self.env {
            TaskEnv::Maze(e) => e.max_abs_reward(),
            TaskEnv::Campus(e) => e.max_abs_reward(),
            TaskEnv::Car(e) => e.max_abs_reward(),
        }
    }

    /// Solves the task on the true state grid.
    pub fn baseline(&self) -> Result<Baseline, HarnessError> {
        let (n, stream) = match self.config.baseline.interactions {
            Some(n) => (n, ORACLE_STREAM),
            None => (self.config.interactions, DATA_STREAM),
        };
        let s = derive_seed(self.seed, stream);
        let db = match &self.env {
            TaskEnv::Maze(e) => collect_transitions(e, n, s),
            TaskEnv::Campus(e) => collect_transitions(e, n, s),
            TaskEnv::Car(e) => collect_transitions(e, n, s),
        };
        direct_perception_baseline(&db, &self.config.grid()?)
    }

    /// Runs RLVC on the training database. Maze and campus runs record their
    /// error at every iteration; car runs do when `trials_per_iteration > 0`.
    pub fn train(&self) -> Result<TrainOutput, HarnessError> {
        let data = self.training_data()?;
        self.train_on(&data)
    }

    pub fn train_on(&self, data: &TrainingData) -> Result<TrainOutput, HarnessError> {
        self.train_on_with(data, |_: &Classifier, _: Change| {})
    }

    /// [`Experiment::train_on`], also reporting every refine and merge to
    /// `on_change`.
    pub fn train_on_with(
        &self,
        data: &TrainingData,
        on_change: impl FnMut(&Classifier, Change),
    ) -> Result<TrainOutput, HarnessError> {
        let oracle = match self.env {
            TaskEnv::Maze(_) => Some(self.baseline()?),
            _ => None,
        };
        let mut failure = None;
        let observer = Metrics {
            experiment: self,
            oracle: oracle.as_ref(),
            failure: &mut failure,
            on_change,
        };
        let outcome = run_rlvc_observed(data, &self.config.rlvc, observer)?;
        if let Some(e) = failure {
            return Err(e);
        }
        let trace_csv = trace_to_csv(&outcome.trace);
        Ok(TrainOutput { outcome, trace_csv })
    }

    fn iteration_metrics(
        &self,
        model: &RlvcModel,
        oracle: Option<&Baseline>,
        record: &mut IterationRecord,
    ) -> Result<(), HarnessError> {
        match &self.env {
            TaskEnv::Maze(maze) => {
                let oracle = oracle.expect("maze runs carry an oracle");
                record.learning_error = Some(self.maze_policy_error(maze, model, oracle)?);
            }
            TaskEnv::Campus(campus) => {
                let (l, t) = campus_errors(campus, |p| Ok(model.action(p)?))?;
                record.learning_error = Some(l);
                record.test_error = Some(t);
            }
            TaskEnv::Car(car) => {
                let n = self.config.evaluation.trials_per_iteration;
                if n > 0 {
                    record.learning_error = Some(self.car_trials(car, model, n)?.miss_rate());
                }
            }
        }
        Ok(())
    }

    fn policy_tolerance(&self) -> f64 {
        self.config
            .evaluation
            .policy_tolerance
            .unwrap_or(0.02 * self.max_abs_reward())
    }

    /// Noise-free view of the maze at a point.
    fn maze_view(&self, maze: &Maze, p: &[f64]) -> SymbolizedPercept {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, PROBE_STREAM));
        maze.symbolized(&(p[0], p[1]), &mut rng)
    }

    /// Cell centers of an `n x n` lattice over the maze, exits excluded.
    pub fn maze_sample_points(maze: &Maze, n: usize) -> Vec<Vec<f64>> {
        let size = maze.config().size;
        let step = size / n as f64;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
                if !maze.in_exit(x, y) {
                    out.push(vec![x, y]);
                }
            }
        }
        out
    }

    fn maze_policy_error(&self, maze: &Maze, model: &RlvcModel, oracle: &Baseline) -> Result<f64, HarnessError> {
        let points = Self::maze_sample_points(maze, self.config.evaluation.sample_points);
        policy_error(
            oracle,
            &points,
            |p| Ok(model.action(&self.maze_view(maze, p))?),
            self.policy_tolerance(),
        )
    }

    /// Pearson correlation between the model's values and the oracle's at
    /// the oracle cell centers outside the exits.
    fn maze_value_correlation(&self, maze: &Maze, model: &RlvcModel, oracle: &Baseline) -> Result<Option<f64>, HarnessError> {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for cell in 0..oracle.grid.n_cells() {
            let c = oracle.grid.center(cell);
            if maze.in_exit(c[0], c[1]) {
                continue;
            }
            a.push(model.value(&self.maze_view(maze, &c))?);
            b.push(oracle.values.get(cell));
        }
        Ok(pearson(&a, &b))
    }

    fn car_start(rng: &mut ChaCha8Rng) -> CarState {
        use rand::Rng;
        CarState {
            p: rng.random_range(-1.0..1.0),
            s: 0.0,
        }
    }

    fn car_trials(&self, car: &Car, model: &RlvcModel, trials: usize) -> Result<TrialStats, HarnessError> {
        let e = &self.config.evaluation;
        run_trials(
            car,
            trials,
            derive_seed(self.seed, EVAL_STREAM),
            e.max_steps,
            Self::car_start,
            |s, rng| Ok(model.action(&car.symbolized(s, rng))?),
        )
    }

    /// Evaluates a learned mapping.
    pub fn evaluate(&self, model: &RlvcModel) -> Result<EvaluationReport, HarnessError> {
        let mut report = self.empty_report(model.n_classes());
        match &self.env {
            TaskEnv::Maze(maze) => {
                let oracle = self.baseline()?;
                report.policy_error = Some(self.maze_policy_error(maze, model, &oracle)?);
                report.value_correlation = self.maze_value_correlation(maze, model, &oracle)?;
            }
            TaskEnv::Campus(campus) => {
                let (l, t) = campus_errors(campus, |p| Ok(model.action(p)?))?;
                report.learning_error = Some(l);
                report.test_error = Some(t);
            }
            TaskEnv::Car(car) => {
                report.trials = Some(self.car_trials(car, model, self.config.evaluation.trials)?);
            }
        }
        Ok(report)
    }

    /// Evaluates the direct-perception mapping with the same protocol.
    pub fn evaluate_baseline(&self, baseline: &Baseline) -> Result<EvaluationReport, HarnessError> {
        let mut report = self.empty_report(baseline.grid.n_cells());
        match &self.env {
            TaskEnv::Maze(maze) => {
                let oracle = self.baseline()?;
                let points = Self::maze_sample_points(maze, self.config.evaluation.sample_points);
                report.policy_error = Some(policy_error(
                    &oracle,
                    &points,
                    |p| Ok(baseline.action(p)),
                    self.policy_tolerance(),
                )?);
            }
            TaskEnv::Campus(campus) => {
                let q = crate::mdp::solve_optimal_q(&campus.true_mdp(), crate::mdp::DEFAULT_TOLERANCE)?;
                let wrong = (0..N_STATES)
                    .filter(|&i| {
                        let a = baseline.action(&[i as f64]);
                        q.get(i, a) < q.max_value(i) - 1e-6
                    })
                    .count();
                report.learning_error = Some(wrong as f64 / N_STATES as f64);
            }
            TaskEnv::Car(car) => {
                let e = &self.config.evaluation;
                report.trials = Some(run_trials(
                    car,
                    e.trials,
                    derive_seed(self.seed, EVAL_STREAM),
                    e.max_steps,
                    Self::car_start,
                    |s, _| Ok(baseline.action(&[s.p, s.s])),
                )?);
            }
        }
        Ok(report)
    }

    fn empty_report(&self, classes: usize) -> EvaluationReport {
        EvaluationReport {
            task: self.config.task,
            classes,
            learning_error: None,
            test_error: None,
            policy_error: None,
            value_correlation: None,
            trials: None,
        }
    }

    fn action_columns(&self) -> String {
        let names = match &self.env {
            TaskEnv::Maze(e) => e.action_names(),
            TaskEnv::Campus(e) => e.action_names(),
            TaskEnv::Car(e) => e.action_names(),
        };
        names.iter().map(|n| format!(",q_{n}")).collect()
    }

    /// Value grid of a learned mapping: one row per grid cell (maze, car) or
    /// per learning-pool picture (campus), with the class, `V = max_a Q`,
    /// the greedy action and the Q row.
    pub fn export(&self, model: &RlvcModel) -> Result<String, HarnessError> {
        let mut out = String::new();
        let row = |out: &mut String, prefix: String, p: &SymbolizedPercept| -> Result<(), HarnessError> {
            let i = model.class_index(p)?;
            let _ = write!(out, "{prefix},{},{},{}", model.class_ids[i], model.q.max_value(i), model.q.best_action(i));
            for a in 0..model.n_actions() {
                let _ = write!(out, ",{}", model.q.get(i, a));
            }
            out.push('\n');
            Ok(())
        };
        let tail = format!("class,value,action{}\n", self.action_columns());
        match &self.env {
            TaskEnv::Campus(campus) => {
                out.push_str(&format!("spot,orientation,picture,{tail}"));
                for i in 0..N_STATES {
                    let s = CampusState::from_index(i);
                    for (k, p) in campus.pool(s, Pool::Learning).iter().enumerate() {
                        let sp = campus.dictionary().symbolize(p).map_err(EnvError::from)?;
                        row(&mut out, format!("{},{},{k}", s.spot, s.orientation), &sp)?;
                    }
                }
            }
            TaskEnv::Maze(maze) => {
                let grid = self.config.grid()?;
                out.push_str(&format!("i,j,x,y,{tail}"));
                for cell in 0..grid.n_cells() {
                    let (ij, c) = (grid.unravel(cell), grid.center(cell));
                    let p = self.maze_view(maze, &c);
                    row(&mut out, format!("{},{},{},{}", ij[0], ij[1], c[0], c[1]), &p)?;
                }
            }
            TaskEnv::Car(car) => {
                let grid = self.config.grid()?;
                out.push_str(&format!("i,j,p,s,{tail}"));
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, PROBE_STREAM));
                for cell in 0..grid.n_cells() {
                    let (ij, c) = (grid.unravel(cell), grid.center(cell));
                    let p = car.symbolized(&CarState { p: c[0], s: c[1] }, &mut rng);
                    row(&mut out, format!("{},{},{},{}", ij[0], ij[1], c[0], c[1]), &p)?;
                }
            }
        }
        Ok(out)
    }

    /// The baseline's value grid in the layout of [`Experiment::export`].
    pub fn export_baseline(&self, baseline: &Baseline) -> String {
        let names: Vec<&str> = match self.config.task {
            Task::Campus => vec!["state"],
            Task::Maze => vec!["x", "y"],
            Task::Car => vec!["p", "s"],
        };
        let mut out = String::new();
        let dims = baseline.grid.cells.len();
        let idx: Vec<&str> = ["i", "j", "k"].into_iter().take(dims).collect();
        let _ = writeln!(
            out,
            "{},{},cell,value,action{}",
            idx.join(","),
            names.join(","),
            self.action_columns()
        );
        for cell in 0..baseline.grid.n_cells() {
            let ij: Vec<String> = baseline.grid.unravel(cell).iter().map(|v| v.to_string()).collect();
            let c: Vec<String> = baseline.grid.center(cell).iter().map(|v| v.to_string()).collect();
            let _ = write!(
                out,
                "{},{},{cell},{},{}",
                ij.join(","),
                c.join(","),
                baseline.values.get(cell),
                baseline.policy.action(cell)
            );
            for a in 0..baseline.q.n_actions() {
                let _ = write!(out, ",{}", baseline.q.get(cell, a));
            }
            out.push('\n');
        }
        out
    }
}
