//! Test-time numeric noise over flow tables.
//!
//! All four families are additive and mean-centered, so a perturbed cell has
//! the same expected value as the clean one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FeatureKind, FlowTable};

/// Above this rate Poisson draws switch from sequential search to a rounded normal.
pub const POISSON_SEARCH_LIMIT: f64 = 30.0;
pub const DEFAULT_POISSON_LAMBDA: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("unknown perturbation `{0}` (expected poisson, uniform, gaussian or laplace)")]
    UnknownKind(String),
    #[error("invalid scale `{0}`: expected a non-negative real or `auto`")]
    BadScale(String),
    #[error("kinds cover {kinds} columns but records have {values}")]
    KindMismatch { kinds: usize, values: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Poisson,
    Uniform,
    Gaussian,
    Laplace,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::Poisson,
        NoiseKind::Uniform,
        NoiseKind::Gaussian,
        NoiseKind::Laplace,
    ];

    /// Variance of one centered draw at `scale`.
    pub fn variance(self, scale: f64) -> f64 {
        match self {
            NoiseKind::Poisson => scale,
            NoiseKind::Uniform => scale * scale / 3.0,
            NoiseKind::Gaussian => scale * scale,
            NoiseKind::Laplace => 2.0 * scale * scale,
        }
    }

    /// Fourth central moment of one centered draw at `scale`.
    pub fn fourth_moment(self, scale: f64) -> f64 {
        let s4 = scale.powi(4);
        match self {
            NoiseKind::Poisson => scale + 3.0 * scale * scale,
            NoiseKind::Uniform => s4 / 5.0,
            NoiseKind::Gaussian => 3.0 * s4,
            NoiseKind::Laplace => 24.0 * s4,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Poisson => "poisson",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Laplace => "laplace",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(NoiseKind::Poisson),
            "uniform" => Ok(NoiseKind::Uniform),
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            "laplace" => Ok(NoiseKind::Laplace),
            _ => Err(PerturbError::UnknownKind(s.to_string())),
        }
    }
}

/// Noise magnitude: fixed, or derived per column (Poisson uses λ = 4, the
/// other families use the column's standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Absolute(f64),
    Auto,
}

impl FromStr for Scale {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Scale::Auto);
        }
        match s.parse::<f64>() {
            Ok(x) if x.is_finite() && x >= 0.0 => Ok(Scale::Absolute(x)),
            _ => Err(PerturbError::BadScale(s.to_string())),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Absolute(x) => write!(f, "{x}"),
            Scale::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: NoiseKind,
    pub scale: Scale,
    pub seed: u64,
    pub clip_nonnegative: bool,
    /// Round each noisy value to the decimal precision of the original cell.
    pub round: bool,
}

impl PerturbSpec {
    pub fn new(kind: NoiseKind, scale: Scale, seed: u64) -> Self {
        Self {
            kind,
            scale,
            seed,
            clip_nonnegative: true,
            round: true,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}(scale={}, seed={}{}{})",
            self.kind,
            self.scale,
            self.seed,
            if self.clip_nonnegative { ", clip" } else { "" },
            if self.round { "" } else { ", no-round" }
        )
    }
}

/// Stream of centered draws from one family.
pub struct NoiseSampler {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl NoiseSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    fn unit(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Standard normal via the Marsaglia polar method.
    fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.unit() - 1.0;
            let v = 2.0 * self.unit() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    fn poisson(&mut self, lambda: f64) -> f64 {
        if lambda <= 0.0 {
            return 0.0;
        }
        if lambda > POISSON_SEARCH_LIMIT {
            return (lambda + lambda.sqrt() * self.standard_normal()).round().max(0.0);
        }
        let u = self.unit();
        let mut k = 0u32;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k as f64
    }

    pub fn sample(&mut self, kind: NoiseKind, scale: f64) -> f64 {
        match kind {
            NoiseKind::Poisson => self.poisson(scale) - scale,
            NoiseKind::Uniform => scale * (2.0 * self.unit() - 1.0),
            NoiseKind::Gaussian => scale * self.standard_normal(),
            NoiseKind::Laplace => {
                let u = self.unit() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
        }
    }
}

/// One centered draw.
pub fn sample_noise(kind: NoiseKind, scale: f64, sampler: &mut NoiseSampler) -> f64 {
    sampler.sample(kind, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean: f64,
    /// Population variance (divides by n).
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

pub fn moment_report(kind: NoiseKind, scale: f64, n_draws: usize, seed: u64) -> MomentReport {
    assert!(n_draws >= 1, "moment_report needs at least one draw");
    let mut s = NoiseSampler::new(seed);
    let draws: Vec<f64> = (0..n_draws).map(|_| s.sample(kind, scale)).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let variance = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MomentReport {
        mean,
        variance,
        min: draws.iter().copied().fold(f64::INFINITY, f64::min),
        max: draws.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n: n_draws,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbResult {
    pub table: FlowTable,
    pub numeric_cells: usize,
    /// Set when no column is numeric; the table is returned unchanged.
    pub no_numeric_columns: bool,
}

/// Digits after the decimal point, `None` for exponent notation.
fn decimals(s: &str) -> Option<usize> {
    let s = s.trim();
    if s.contains(['e', 'E']) {
        return None;
    }
    Some(s.split_once('.').map_or(0, |(_, frac)| frac.len()))
}

fn format_value(x: f64, original: &str, round: bool) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    match (round, decimals(original)) {
        (true, Some(d)) => {
            let s = format!("{x:.d$}");
            // "-0", "-0.00" after rounding
            if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
                s[1..].to_string()
            } else {
                s
            }
        }
        _ => format!("{x}"),
    }
}

fn column_std(table: &FlowTable, col: usize) -> f64 {
    let xs: Vec<f64> = table
        .records
        .iter()
        .filter_map(|r| r.values.get(col))
        .filter_map(|v| v.trim().parse::<f64>().ok())
        .filter(|x| x.is_finite())
        .collect();
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Population standard deviation of every column (0 for categorical ones).
pub fn column_stds(table: &FlowTable, kinds: &[FeatureKind]) -> Vec<f64> {
    kinds
        .iter()
        .enumerate()
        .map(|(j, k)| if *k == FeatureKind::Numeric { column_std(table, j) } else { 0.0 })
        .collect()
}

/// Perturbs every numeric cell; categorical cells are copied verbatim.
/// `Scale::Auto` uses the table's own column deviations.
pub fn perturb_table(
    table: &FlowTable,
    spec: &PerturbSpec,
    kinds: &[FeatureKind],
) -> Result<PerturbResult, PerturbError> {
    perturb_table_with_stats(table, spec, kinds, None)
}

/// As [`perturb_table`], but `Scale::Auto` takes per-column deviations from
/// `stds` (typically frozen from a training split) when given.
pub fn perturb_table_with_stats(
    table: &FlowTable,
    spec: &PerturbSpec,
    kinds: &[FeatureKind],
    stds: Option<&[f64]>,
) -> Result<PerturbResult, PerturbError> {
    if let Some(r) = table.records.iter().find(|r| r.values.len() > kinds.len()) {
        return Err(PerturbError::KindMismatch {
            kinds: kinds.len(),
            values: r.values.len(),
        });
    }
    let numeric: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == FeatureKind::Numeric)
        .map(|(i, _)| i)
        .collect();
    if numeric.is_empty() {
        return Ok(PerturbResult {
            table: table.clone(),
            numeric_cells: 0,
            no_numeric_columns: true,
        });
    }
    let scales: Vec<f64> = kinds
        .iter()
        .enumerate()
        .map(|(j, _)| match (spec.scale, spec.kind) {
            (Scale::Absolute(x), _) => x,
            (Scale::Auto, NoiseKind::Poisson) => DEFAULT_POISSON_LAMBDA,
            (Scale::Auto, _) if kinds[j] == FeatureKind::Numeric => match stds {
                Some(s) => s.get(j).copied().unwrap_or(0.0),
                None => column_std(table, j),
            },
            (Scale::Auto, _) => 0.0,
        })
        .collect();

    let mut sampler = NoiseSampler::new(spec.seed);
    let mut out = table.clone();
    let mut cells = 0;
    for rec in &mut out.records {
        for &j in &numeric {
            let Some(cell) = rec.values.get_mut(j) else { continue };
            let Ok(x) = cell.trim().parse::<f64>() else { continue };
            if !x.is_finite() {
                continue;
            }
            let mut y = x + sampler.sample(spec.kind, scales[j]);
            if spec.clip_nonnegative && x >= 0.0 && y < 0.0 {
                y = 0.0;
            }
            if y != x {
                *cell = format_value(y, cell, spec.round);
            }
            cells += 1;
        }
    }
    Ok(PerturbResult {
        table: out,
        numeric_cells: cells,
        no_numeric_columns: false,
    })
}
