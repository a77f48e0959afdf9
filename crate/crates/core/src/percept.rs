//! Synthetic percepts: finite sets of interest points carrying local descriptors.
//!
//! A [`FeatureDictionary`] quantizes descriptors into symbols. Primitive
//! visual features are symbols; a percept exhibits a primitive feature when
//! one of its interest points maps to that symbol.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::mdp::PerceptId;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptError {
    #[error("descriptor has dimension {got}, dictionary expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("non-finite descriptor component")]
    NonFinite,
    #[error("prototypes {0} and {1} are within {2} of each other (threshold {3})")]
    AmbiguousDictionary(usize, usize, f64, f64),
    #[error("match threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("metric weights must be positive and match the descriptor dimension")]
    InvalidMetric,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A point of the descriptor space.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestPoint {
    pub x: f64,
    pub y: f64,
    pub descriptor: Descriptor,
}

/// Stand-in for an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Percept {
    pub id: PerceptId,
    pub width: f64,
    pub height: f64,
    pub points: Vec<InterestPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Euclidean,
    /// Mahalanobis distance with a diagonal covariance, given as inverse variances.
    Diagonal(Vec<f64>),
}

/// A primitive visual feature: one dictionary symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrimitiveFeature {
    pub symbol: u32,
}

/// Descriptor prototypes with a matching radius.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDictionary {
    prototypes: Vec<Descriptor>,
    metric: Metric,
    threshold: f64,
}

impl FeatureDictionary {
    /// Validates that prototypes are pairwise farther apart than `threshold`,
    /// which makes symbol assignment unambiguous.
    pub fn new(
        prototypes: Vec<Descriptor>,
        metric: Metric,
        threshold: f64,
    ) -> Result<Self, PerceptError> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(PerceptError::InvalidThreshold(threshold));
        }
        let dim = prototypes.first().map_or(0, Descriptor::dim);
        if let Metric::Diagonal(w) = &metric {
            if w.len() != dim || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(PerceptError::InvalidMetric);
            }
        }
        for p in &prototypes {
            if p.dim() != dim {
                return Err(PerceptError::DimensionMismatch {
                    got: p.dim(),
                    expected: dim,
                });
            }
            if p.0.iter().any(|c| !c.is_finite()) {
                return Err(PerceptError::NonFinite);
            }
        }
        let dict = Self {
            prototypes,
            metric,
            threshold,
        };
        for i in 0..dict.prototypes.len() {
            for j in i + 1..dict.prototypes.len() {
                let d = dict.distance(&dict.prototypes[i], &dict.prototypes[j]);
                // Two balls of radius `threshold` must not overlap.
                if d <= 2.0 * threshold {
                    return Err(PerceptError::AmbiguousDictionary(i, j, d, threshold));
                }
            }
        }
        Ok(dict)
    }

    /// Random Euclidean dictionary whose prototypes are at least
    /// `4 * threshold` apart.
    pub fn random(
        n_symbols: usize,
        dim: usize,
        threshold: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, PerceptError> {
        let side = 8.0 * threshold * (n_symbols as f64).powf(1.0 / dim.max(1) as f64).max(2.0);
        let min_sep = 4.0 * threshold;
        let mut prototypes: Vec<Descriptor> = Vec::with_capacity(n_symbols);
        while prototypes.len() < n_symbols {
            let candidate = Descriptor((0..dim).map(|_| rng.random_range(0.0..side)).collect());
            if prototypes
                .iter()
                .all(|p| euclidean(&p.0, &candidate.0) >= min_sep)
            {
                prototypes.push(candidate);
            }
        }
        Self::new(prototypes, Metric::Euclidean, threshold)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Descriptor::dim)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn prototype(&self, symbol: u32) -> Option<&Descriptor> {
        self.prototypes.get(symbol as usize)
    }

    pub fn prototypes(&self) -> &[Descriptor] {
        &self.prototypes
    }

    pub fn distance(&self, a: &Descriptor, b: &Descriptor) -> f64 {
        match &self.metric {
            Metric::Euclidean => euclidean(&a.0, &b.0),
            Metric::Diagonal(w) => a
                .0
                .iter()
                .zip(&b.0)
                .zip(w)
                .map(|((x, y), w)| w * (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// The symbol whose prototype lies within the match threshold of `d`.
    pub fn symbol_of(&self, d: &Descriptor) -> Result<Option<u32>, PerceptError> {
        if d.dim() != self.dim() {
            return Err(PerceptError::DimensionMismatch {
                got: d.dim(),
                expected: self.dim(),
            });
        }
        Ok(self
            .prototypes
            .iter()
            .position(|p| self.distance(p, d) <= self.threshold)
            .map(|i| i as u32))
    }

    /// Resolves all interest points of a percept to symbols, dropping the
    /// unmatched ones.
    pub fn symbolize(&self, percept: &Percept) -> Result<SymbolizedPercept, PerceptError> {
        let mut points = Vec::with_capacity(percept.points.len());
        for p in &percept.points {
            if let Some(symbol) = self.symbol_of(&p.descriptor)? {
                points.push(SymbolPoint {
                    x: p.x,
                    y: p.y,
                    symbol,
                });
            }
        }
        Ok(SymbolizedPercept::new(points))
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolPoint {
    pub x: f64,
    pub y: f64,
    pub symbol: u32,
}

/// A percept after dictionary lookup: only the matched points remain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymbolizedPercept {
    points: Vec<SymbolPoint>,
    /// Sorted, deduplicated symbols of `points`.
    symbols: Vec<u32>,
}

impl SymbolizedPercept {
    pub fn new(points: Vec<SymbolPoint>) -> Self {
        let mut symbols: Vec<u32> = points.iter().map(|p| p.symbol).collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self { points, symbols }
    }

    pub fn points(&self) -> &[SymbolPoint] {
        &self.points
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn has_symbol(&self, symbol: u32) -> bool {
        self.symbols.binary_search(&symbol).is_ok()
    }

    /// Locations of the points carrying `symbol`.
    pub fn locations(&self, symbol: u32) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.symbol == symbol)
            .map(|p| (p.x, p.y))
            .collect()
    }
}

/// `D(s, f)` extended to locations: where `s` exhibits the primitive `f`.
pub fn detect_primitive(
    f: PrimitiveFeature,
    s: &Percept,
    dict: &FeatureDictionary,
) -> Result<Vec<(f64, f64)>, PerceptError> {
    let mut out = Vec::new();
    for p in &s.points {
        if dict.symbol_of(&p.descriptor)? == Some(f.symbol) {
            out.push((p.x, p.y));
        }
    }
    Ok(out)
}

/// Canonical generator: the symbols of all interest points of all percepts.
pub fn generate_candidates<'a>(
    percepts: impl IntoIterator<Item = &'a Percept>,
    dict: &FeatureDictionary,
) -> Result<BTreeSet<PrimitiveFeature>, PerceptError> {
    let mut out = BTreeSet::new();
    for s in percepts {
        for p in &s.points {
            if let Some(symbol) = dict.symbol_of(&p.descriptor)? {
                out.insert(PrimitiveFeature { symbol });
            }
        }
    }
    Ok(out)
}

/// Perturbs a descriptor by a vector of Euclidean norm at most `max_norm`.
pub fn jitter(d: &Descriptor, max_norm: f64, rng: &mut impl Rng) -> Descriptor {
    if max_norm <= 0.0 || d.dim() == 0 {
        return d.clone();
    }
    let bound = max_norm / (d.dim() as f64).sqrt();
    Descriptor(
        d.0.iter()
            .map(|c| c + rng.random_range(-bound..=bound))
            .collect(),
    )
}

const PERCEPT_HEADER: &str = "# rlvc percepts v1";

/// Writes percepts in the line-oriented text format:
///
/// ```text
/// # rlvc percepts v1
/// dim <n>
/// percept <id> <width> <height> <n_points>
/// <x> <y> <c_1> ... <c_n>        (one line per point)
/// ```
pub fn write_percepts<'a>(percepts: impl IntoIterator<Item = &'a Percept>, dim: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{PERCEPT_HEADER}");
    let _ = writeln!(out, "dim {dim}");
    for p in percepts {
        let _ = writeln!(
            out,
            "percept {} {} {} {}",
            p.id.0,
            p.width,
            p.height,
            p.points.len()
        );
        for ip in &p.points {
            let _ = write!(out, "{} {}", ip.x, ip.y);
            for c in &ip.descriptor.0 {
                let _ = write!(out, " {c}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_percepts(text: &str) -> Result<Vec<Percept>, PerceptError> {
    let err = |line: usize, msg: &str| PerceptError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, dim_line) = lines.next().ok_or_else(|| err(1, "missing dim line"))?;
    let dim: usize = dim_line
        .strip_prefix("dim ")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| err(ln, "expected `dim <n>`"))?;

    let mut out = Vec::new();
    while let Some((ln, header)) = lines.next() {
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "percept" {
            return Err(err(ln, "expected `percept <id> <width> <height> <n_points>`"));
        }
        let id: u32 = fields[1].parse().map_err(|_| err(ln, "bad id"))?;
        let width: f64 = fields[2].parse().map_err(|_| err(ln, "bad width"))?;
        let height: f64 = fields[3].parse().map_err(|_| err(ln, "bad height"))?;
        let n: usize = fields[4].parse().map_err(|_| err(ln, "bad point count"))?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or_else(|| err(ln, "truncated percept"))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| err(ln, "bad number"))?;
            if values.len() != dim + 2 {
                return Err(err(ln, "wrong number of point components"));
            }
            points.push(InterestPoint {
                x: values[0],
                y: values[1],
                descriptor: Descriptor(values[2..].to_vec()),
            });
        }
        out.push(Percept {
            id: PerceptId(id),
            width,
            height,
            points,
        });
    }
    Ok(out)
}
