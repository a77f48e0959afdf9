//! Car on the hill, seen through two cameras.
//!
//! One camera looks at the ground under the car, the other at a velocity
//! gauge. The gauge always shows the same symbols; only the position of its
//! cursor relative to the fixed ticks reveals the velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Tapestry, Transition};
use crate::mdp::PerceptId;
use crate::percept::{jitter, FeatureDictionary, InterestPoint, Percept, SymbolPoint, SymbolizedPercept};

pub const ACTIONS: [&str; 2] = ["left", "right"];
pub const THRUST: [f64; 2] = [-4.0, 4.0];

/// Position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarState {
    pub p: f64,
    pub s: f64,
}

/// Hill profile.
pub fn hill(p: f64) -> f64 {
    if p < 0.0 {
        p * p + p
    } else {
        p / (1.0 + 5.0 * p * p).sqrt()
    }
}

/// Derivative of [`hill`].
pub fn hill_slope(p: f64) -> f64 {
    if p < 0.0 {
        2.0 * p + 1.0
    } else {
        (1.0 + 5.0 * p * p).powf(-1.5)
    }
}

/// `ds/dt` under thrust `a`.
pub fn acceleration(p: f64, a: f64, mass: f64, gravity: f64) -> f64 {
    let d = hill_slope(p);
    let k = 1.0 + d * d;
    a / (mass * k.sqrt()) - gravity * d / k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarConfig {
    pub mass: f64,
    pub gravity: f64,
    pub time_step: f64,
    pub discount: f64,
    pub goal_reward: f64,
    pub max_speed: f64,
    /// Ground strip size; `p` in `[-1, 1]` maps onto its width.
    pub strip: (f64, f64),
    pub ground_window: f64,
    pub ground_spacing: f64,
    pub ground_symbols: usize,
    /// Distance between gauge ticks; the cursor sits at `tick * (s + 3)`.
    pub tick_spacing: f64,
    pub cursor_height: f64,
    /// Vertical offset of the gauge band in the combined percept.
    pub gauge_offset: f64,
    pub descriptor_dim: usize,
    pub match_threshold: f64,
    pub descriptor_noise: f64,
    pub max_episode_length: Option<usize>,
}

impl Default for CarConfig {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            time_step: 0.1,
            discount: 0.75,
            goal_reward: 100.0,
            max_speed: 3.0,
            strip: (1280.0, 128.0),
            ground_window: 160.0,
            ground_spacing: 28.0,
            ground_symbols: 72,
            tick_spacing: 40.0,
            cursor_height: 30.0,
            gauge_offset: 1000.0,
            descriptor_dim: 8,
            match_threshold: 1.0,
            descriptor_noise: 0.4,
            max_episode_length: Some(50),
        }
    }
}

/// Gauge layout: 7 ticks, 7 digit labels and a two-point cursor.
const N_TICKS: usize = 7;
const GAUGE_SYMBOLS: usize = 2 * N_TICKS + 2;
const GAUGE_MARGIN: f64 = 60.0;
const LABEL_DROP: f64 = 20.0;
const CURSOR_LENGTH: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct Car {
    config: CarConfig,
    dictionary: FeatureDictionary,
    ground: Tapestry,
}

impl Car {
    pub fn new(config: &CarConfig, seed: u64) -> Result<Self, EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if !(config.time_step > 0.0 && config.mass > 0.0 && config.max_speed > 0.0) {
            return bad("time_step, mass and max_speed must be positive");
        }
        if !(0.0..1.0).contains(&config.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if !(config.descriptor_noise >= 0.0 && config.descriptor_noise < config.match_threshold / 2.0) {
            return bad("descriptor_noise must lie in [0, match_threshold / 2)");
        }
        if config.ground_symbols == 0 || !(config.ground_spacing > 0.0 && config.ground_window > 0.0) {
            return bad("ground parameters must be positive");
        }
        if config.gauge_offset <= config.strip.1 {
            return bad("gauge band must not overlap the ground band");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dictionary = FeatureDictionary::random(
            config.ground_symbols + GAUGE_SYMBOLS,
            config.descriptor_dim,
            config.match_threshold,
            &mut rng,
        )?;
        let half = config.ground_window / 2.0;
        let ground = Tapestry::poisson(
            (-half, 0.0, config.strip.0 + half, config.strip.1),
            config.ground_spacing,
            0..config.ground_symbols as u32,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            dictionary,
            ground,
        })
    }

    pub fn config(&self) -> &CarConfig {
        &self.config
    }

    /// One integration step: `p' = p + h s + h^2 a / 2`, `s' = s + h a`.
    pub fn car_step(&self, state: CarState, action: usize) -> Transition<CarState> {
        let c = &self.config;
        let h = c.time_step;
        let acc = acceleration(state.p, THRUST[action], c.mass, c.gravity);
        let next = CarState {
            p: state.p + h * state.s + h * h * acc / 2.0,
            s: state.s + h * acc,
        };
        let (reward, terminal) = if next.p < -1.0 || next.s.abs() > c.max_speed {
            (0.0, true)
        } else if next.p >= 1.0 {
            (c.goal_reward, true)
        } else {
            (0.0, false)
        };
        Transition { next, reward, terminal }
    }

    fn ground_points(&self, state: CarState) -> Vec<(f64, f64, u32)> {
        let c = &self.config;
        let x = (state.p.clamp(-1.0, 1.0) + 1.0) / 2.0 * c.strip.0;
        self.ground.window(x, c.strip.1 / 2.0, c.ground_window, c.strip.1)
    }

    /// Gauge points in gauge coordinates (before the band offset).
    pub fn gauge_points(&self, s: f64) -> Vec<(f64, f64, u32)> {
        let c = &self.config;
        let base = c.ground_symbols as u32;
        let mut out = Vec::with_capacity(GAUGE_SYMBOLS);
        for i in 0..N_TICKS {
            let x = GAUGE_MARGIN + c.tick_spacing * i as f64;
            out.push((x, LABEL_DROP, base + i as u32));
            out.push((x, 0.0, base + (N_TICKS + i) as u32));
        }
        let s = s.clamp(-c.max_speed, c.max_speed);
        let x = GAUGE_MARGIN + c.tick_spacing * (s + 3.0);
        let y = LABEL_DROP + c.cursor_height;
        out.push((x, y, base + 2 * N_TICKS as u32));
        out.push((x, y + CURSOR_LENGTH, base + 2 * N_TICKS as u32 + 1));
        out
    }

    /// Symbol of the cursor tip.
    pub fn cursor_symbol(&self) -> u32 {
        (self.config.ground_symbols + 2 * N_TICKS) as u32
    }

    /// Ground and gauge points in the combined frame.
    fn points(&self, state: CarState) -> Vec<(f64, f64, u32)> {
        let mut pts = self.ground_points(state);
        let off = self.config.gauge_offset;
        pts.extend(self.gauge_points(state.s).into_iter().map(|(x, y, s)| (x, y + off, s)));
        pts
    }

    /// The two camera views as separate percepts.
    pub fn car_percepts(&self, state: CarState, rng: &mut ChaCha8Rng) -> (Percept, Percept) {
        let c = &self.config;
        let ground = self.to_percept(self.ground_points(state), (c.ground_window, c.strip.1), rng);
        let gauge = self.to_percept(self.gauge_points(state.s), self.gauge_frame(), rng);
        (ground, gauge)
    }

    fn gauge_frame(&self) -> (f64, f64) {
        let c = &self.config;
        (
            2.0 * GAUGE_MARGIN + c.tick_spacing * (N_TICKS - 1) as f64,
            LABEL_DROP + c.cursor_height + CURSOR_LENGTH,
        )
    }

    fn to_percept(&self, pts: Vec<(f64, f64, u32)>, frame: (f64, f64), rng: &mut ChaCha8Rng) -> Percept {
        Percept {
            id: PerceptId(0),
            width: frame.0,
            height: frame.1,
            points: pts
                .into_iter()
                .map(|(x, y, sym)| InterestPoint {
                    x,
                    y,
                    descriptor: jitter(
                        self.dictionary.prototype(sym).expect("symbol in dictionary"),
                        self.config.descriptor_noise,
                        rng,
                    ),
                })
                .collect(),
        }
    }
}

impl Environment for Car {
    type State = CarState;

    fn n_actions(&self) -> usize {
        2
    }

    fn action_names(&self) -> &'static [&'static str] {
        &ACTIONS
    }

    fn discount(&self) -> f64 {
        self.config.discount
    }

    fn max_abs_reward(&self) -> f64 {
        self.config.goal_reward.abs()
    }

    fn dictionary(&self) -> &FeatureDictionary {
        &self.dictionary
    }

    fn sample_start(&self, rng: &mut ChaCha8Rng) -> CarState {
        let v = self.config.max_speed;
        CarState {
            p: rng.random_range(-1.0..1.0),
            s: rng.random_range(-v..=v),
        }
    }

    fn step(&self, s: &CarState, a: usize, _rng: &mut ChaCha8Rng) -> Transition<CarState> {
        self.car_step(*s, a)
    }

    fn percept(&self, s: &CarState, id: PerceptId, rng: &mut ChaCha8Rng) -> Percept {
        let c = &self.config;
        let frame = (
            c.ground_window.max(self.gauge_frame().0),
            c.gauge_offset + self.gauge_frame().1,
        );
        let mut p = self.to_percept(self.points(*s), frame, rng);
        p.id = id;
        p
    }

    fn symbolized(&self, s: &CarState, _rng: &mut ChaCha8Rng) -> SymbolizedPercept {
        SymbolizedPercept::new(
            self.points(*s)
                .into_iter()
                .map(|(x, y, symbol)| SymbolPoint { x, y, symbol })
                .collect(),
        )
    }

    fn coords(&self, s: &CarState) -> Vec<f64> {
        vec![s.p, s.s]
    }

    fn max_episode_length(&self) -> Option<usize> {
        self.config.max_episode_length
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car() -> Car {
        Car::new(&CarConfig::default(), 2).unwrap()
    }

    #[test]
    fn hill_is_continuous_at_zero() {
        assert!((hill(0.0) - hill(-1e-15)).abs() < 1e-12);
        assert!((hill_slope(0.0) - 1.0).abs() < 1e-12);
        assert!((hill_slope(-1e-13) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gravity_pulls_towards_the_valley() {
        // left of the valley floor the slope is negative: the car accelerates right
        for p in [-0.9, -0.7] {
            assert!(acceleration(p, 0.0, 1.0, 9.81) > 0.0);
        }
        assert!(acceleration(-0.3, 0.0, 1.0, 9.81) < 0.0);
        assert!(acceleration(0.5, 0.0, 1.0, 9.81) < 0.0);
    }

    #[test]
    fn single_step_from_the_valley_top() {
        let c = car();
        // H'(0) = 1, so the thrust and gravity terms both halve
        let acc = 4.0 / 2f64.sqrt() - 9.81 / 2.0;
        let t = c.car_step(CarState { p: 0.0, s: 0.0 }, 1);
        assert!((t.next.p - 0.005 * acc).abs() < 1e-12);
        assert!((t.next.s - 0.1 * acc).abs() < 1e-12);
        assert!((t.next.p + 0.0103829).abs() < 1e-7);
        assert!((t.next.s + 0.207657).abs() < 1e-6);
        assert!(!t.terminal && t.reward == 0.0);
    }

    #[test]
    fn coasting_follows_the_slope() {
        for p in [-0.9, -0.7, -0.5, -0.2, 0.3, 0.8] {
            let slope = hill_slope(p);
            let acc = acceleration(p, 0.0, 1.0, 9.81);
            assert_eq!(acc, -9.81 * slope / (1.0 + slope * slope));
            assert!(acc * slope <= 0.0);
        }
        // the valley floor sits at p = -0.5
        assert_eq!(acceleration(-0.5, 0.0, 1.0, 9.81), 0.0);
    }

    #[test]
    fn terminal_conditions() {
        let c = car();
        let t = c.car_step(CarState { p: 0.99, s: 2.0 }, 1);
        assert!(t.terminal && t.reward == 100.0);
        let t = c.car_step(CarState { p: -0.99, s: -2.0 }, 0);
        assert!(t.terminal && t.reward == 0.0);
        let t = c.car_step(CarState { p: -0.5, s: 2.999 }, 1);
        assert!(t.next.s > 3.0 && t.terminal && t.reward == 0.0);
    }

    #[test]
    fn gauge_symbols_do_not_depend_on_velocity() {
        let c = car();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = c.symbolized(&CarState { p: 0.1, s: -3.0 }, &mut rng);
        let b = c.symbolized(&CarState { p: 0.1, s: 1.5 }, &mut rng);
        assert_eq!(a.symbols(), b.symbols());
        assert_ne!(a, b);
        // cursor to first tick distance is linear in s along x
        let cursor = c.cursor_symbol();
        for s in [-3.0, -1.0, 0.5, 2.0] {
            let g = c.gauge_points(s);
            let cur = g.iter().find(|p| p.2 == cursor).unwrap();
            let tick = g[1];
            assert!((cur.0 - tick.0 - 40.0 * (s + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_window_follows_position() {
        let c = car();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = c.symbolized(&CarState { p: 0.1, s: 0.0 }, &mut rng);
        let b = c.symbolized(&CarState { p: 0.1, s: 0.0 }, &mut rng);
        assert_eq!(a, b);
        let far = c.symbolized(&CarState { p: -0.9, s: 0.0 }, &mut rng);
        assert_ne!(a, far);
        assert!(a.points().iter().filter(|p| p.y < 200.0).count() >= 3);
        // descriptor path agrees with the symbolic fast path
        let p = c.percept(&CarState { p: 0.1, s: 0.7 }, PerceptId(3), &mut rng);
        assert_eq!(c.dictionary().symbolize(&p).unwrap(), c.symbolized(&CarState { p: 0.1, s: 0.7 }, &mut rng));
        let (g, v) = c.car_percepts(CarState { p: 0.1, s: 0.7 }, &mut rng);
        assert_eq!(g.points.len() + v.points.len(), p.points.len());
    }
}
