//! Benchmark tasks emitting synthetic percepts.
//!
//! Every environment is deterministic given its construction seed and the
//! random stream passed to each call. Percepts are built from a generated
//! descriptor dictionary, so the learner only ever sees located descriptors.

pub mod campus;
pub mod car;
pub mod maze;
mod tapestry;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use campus::{Campus, CampusConfig, CampusState, Pool};
pub use car::{Car, CarConfig, CarState};
pub use maze::{Maze, MazeConfig};
pub use tapestry::Tapestry;

use crate::mdp::{Interaction, PerceptId};
use crate::percept::{write_percepts, FeatureDictionary, Percept, PerceptError, SymbolizedPercept};
use crate::rlvc_loop::TrainingData;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("could not generate a valid layout after {0} attempts")]
    Generation(usize),
    #[error(transparent)]
    Percept(#[from] PerceptError),
}

/// Outcome of one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<S> {
    pub next: S,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment {
    type State: Clone;

    fn n_actions(&self) -> usize;

    fn action_names(&self) -> &'static [&'static str];

    fn discount(&self) -> f64;

    fn max_abs_reward(&self) -> f64;

    fn dictionary(&self) -> &FeatureDictionary;

    /// Start state of an exploration episode.
    fn sample_start(&self, rng: &mut ChaCha8Rng) -> Self::State;

    fn step(&self, s: &Self::State, a: usize, rng: &mut ChaCha8Rng) -> Transition<Self::State>;

    fn percept(&self, s: &Self::State, id: PerceptId, rng: &mut ChaCha8Rng) -> Percept;

    /// The percept after dictionary lookup. Same distribution as symbolizing
    /// [`Environment::percept`]; environments may skip the descriptors.
    fn symbolized(&self, s: &Self::State, rng: &mut ChaCha8Rng) -> SymbolizedPercept {
        let p = self.percept(s, PerceptId(0), rng);
        self.dictionary()
            .symbolize(&p)
            .expect("environment percepts match their dictionary")
    }

    /// Low-dimensional true state, used by direct-perception baselines.
    fn coords(&self, s: &Self::State) -> Vec<f64>;

    /// Exploration episodes are cut after this many steps (not terminal).
    fn max_episode_length(&self) -> Option<usize> {
        None
    }
}

/// A static interaction database.
///
/// Observation ids index both `coords` and, when generated, `percepts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Database {
    pub percepts: Vec<Percept>,
    pub coords: Vec<Vec<f64>>,
    pub interactions: Vec<Interaction>,
    pub n_actions: usize,
    pub discount: f64,
}

impl Database {
    pub fn training_data(&self, dict: &FeatureDictionary) -> Result<TrainingData, PerceptError> {
        let percepts = self
            .percepts
            .iter()
            .map(|p| dict.symbolize(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainingData {
            percepts,
            interactions: self.interactions.clone(),
            n_actions: self.n_actions,
            n_symbols: dict.len(),
            discount: self.discount,
        })
    }

    /// `s_id,action,reward,s_next_id,terminal`
    pub fn interactions_csv(&self) -> String {
        let mut out = String::from("s_id,action,reward,s_next_id,terminal\n");
        for it in &self.interactions {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                it.s.0,
                it.a,
                it.r,
                it.s_next.0,
                u8::from(it.terminal_next)
            );
        }
        out
    }

    pub fn percepts_text(&self, dim: usize) -> String {
        write_percepts(&self.percepts, dim)
    }
}

/// `n` interactions under the uniformly random policy, restarting on
/// terminal states and at the environment's episode cap.
pub fn collect_interactions<E: Environment>(env: &E, n: usize, seed: u64) -> Database {
    collect(env, n, seed, true)
}

/// Like [`collect_interactions`] but without percepts, for baselines keyed by
/// the true state.
pub fn collect_transitions<E: Environment>(env: &E, n: usize, seed: u64) -> Database {
    collect(env, n, seed, false)
}

const SENSOR_STREAM: u64 = 0x5e45_0f1c_a11b_2a7e;

fn collect<E: Environment>(env: &E, n: usize, seed: u64, with_percepts: bool) -> Database {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed ^ SENSOR_STREAM);
    let mut db = Database {
        percepts: Vec::new(),
        coords: Vec::new(),
        interactions: Vec::with_capacity(n),
        n_actions: env.n_actions(),
        discount: env.discount(),
    };
    let mut observe = |db: &mut Database, s: &E::State| {
        let id = PerceptId(db.coords.len() as u32);
        db.coords.push(env.coords(s));
        if with_percepts {
            db.percepts.push(env.percept(s, id, &mut sensor_rng));
        }
        id
    };
    let cap = env.max_episode_length().unwrap_or(usize::MAX);
    let mut state: Option<(E::State, PerceptId, usize)> = None;
    while db.interactions.len() < n {
        let (s, id, len) = match state.take() {
            Some(x) if x.2 < cap => x,
            _ => {
                let s = env.sample_start(&mut rng);
                let id = observe(&mut db, &s);
                (s, id, 0)
            }
        };
        let a = rng.random_range(0..env.n_actions());
        let t = env.step(&s, a, &mut rng);
        let next_id = observe(&mut db, &t.next);
        db.interactions.push(Interaction {
            s: id,
            a,
            r: t.reward,
            s_next: next_id,
            terminal_next: t.terminal,
        });
        if !t.terminal {
            state = Some((t.next, next_id, len + 1));
        }
    }
    db
}
