// SPDX-License-Identifier: MIT OR Apache-2.0

//! Critical suppression threshold α_crit.
//!
//! For a sample `x` of class `i` and decoder column `c`, the bias-free
//! suppressed logit is
//!
//! ```text
//! z'(α) = Σ_j w_ij · max(0, 1 − α|c_j|) · x_j
//! ```
//!
//! Linearizing `max(0, 1 − y) ≈ 1 − y` gives `z'(α) ≈ z − α·R` with
//! `R = Σ_j |c_j| w_ij x_j`, hence the analytical estimate `z / R`. The
//! numerical estimate brackets the first sign change of the exact `z'` on
//! a uniform α grid and locates the root inside the bracket by linear
//! interpolation (false position).

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{ActivationDataset, HeadWeights};
use crate::edits::suppressed_logit;
use crate::error::{Error, Result};

/// Uniform α grid `0, step, 2·step, … ≤ alpha_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub alpha_max: f64,
    pub step: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            alpha_max: 20.0,
            step: 0.01,
        }
    }
}

impl AlphaGrid {
    pub fn new(alpha_max: f64, step: f64) -> Result<Self> {
        let g = Self { alpha_max, step };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max > 0.0 && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_max must be finite and > 0, got {}",
                self.alpha_max
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!(
                "step must be finite and > 0, got {}",
                self.step
            )));
        }
        if self.alpha_max / self.step > 1e8 {
            return Err(Error::Config("alpha grid has more than 1e8 points".into()));
        }
        Ok(())
    }

    /// Index of the last grid point.
    pub fn last_index(&self) -> usize {
        (self.alpha_max / self.step + 1e-9).floor() as usize
    }

    /// Grid points, each computed as `i · step` (no accumulated drift).
    pub fn points(&self) -> Vec<f64> {
        (0..=self.last_index()).map(|i| self.at(i)).collect()
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        i as f64 * self.step
    }
}

/// Why a sample has no threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    NonpositiveLogit,
    NonpositiveRelevance,
    NoZeroCrossing,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exclusion::NonpositiveLogit => "nonpositive logit",
            Exclusion::NonpositiveRelevance => "nonpositive relevance",
            Exclusion::NoZeroCrossing => "no zero-crossing",
        })
    }
}

/// Outcome of one estimator on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    Included(f64),
    Excluded(Exclusion),
}

impl Estimate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Estimate::Included(v) => Some(*v),
            Estimate::Excluded(_) => None,
        }
    }

    pub fn exclusion(&self) -> Option<Exclusion> {
        match self {
            Estimate::Included(_) => None,
            Estimate::Excluded(e) => Some(*e),
        }
    }
}

/// Per-sample threshold record. `None` estimates were not requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCritSample {
    pub index: usize,
    /// Bias-free logit `Σ_j w_ij x_j`.
    pub logit: f64,
    /// Sensitivity `Σ_j |c_j| w_ij x_j`.
    pub relevance: f64,
    pub analytical: Option<Estimate>,
    pub numerical: Option<Estimate>,
    /// Grid interval that bracketed the numerical root.
    pub bracket: Option<(f64, f64)>,
}

fn logit_and_relevance(w_row: &[f32], x: &[f32], c: &[f32]) -> (f64, f64) {
    let mut z = 0.0f64;
    let mut r = 0.0f64;
    for ((w, x), c) in w_row.iter().zip(x).zip(c) {
        let p = f64::from(*w) * f64::from(*x);
        z += p;
        r += f64::from(c.abs()) * p;
    }
    (z, r)
}

/// Analytical estimate `z / R` for one activation vector.
pub fn analytical_estimate(z: f64, relevance: f64) -> Estimate {
    if z <= 0.0 {
        Estimate::Excluded(Exclusion::NonpositiveLogit)
    } else if relevance <= 0.0 {
        Estimate::Excluded(Exclusion::NonpositiveRelevance)
    } else {
        Estimate::Included(z / relevance)
    }
}

/// Numerical root of `f` on `grid`, given `f(0) = f0`. Returns the root and
/// its bracket, or the exclusion reason.
pub fn find_first_root<F: Fn(f64) -> f64>(
    f: F,
    f0: f64,
    grid: &AlphaGrid,
) -> std::result::Result<(f64, (f64, f64)), Exclusion> {
    if f0 <= 0.0 {
        return Err(Exclusion::NonpositiveLogit);
    }
    let mut lo = 0.0;
    let mut f_lo = f0;
    for i in 1..=grid.last_index() {
        let hi = grid.at(i);
        let f_hi = f(hi);
        if f_hi <= 0.0 {
            return Ok((false_position(&f, lo, f_lo, hi, f_hi), (lo, hi)));
        }
        lo = hi;
        f_lo = f_hi;
    }
    Err(Exclusion::NoZeroCrossing)
}

/// Illinois false position on `[lo, hi]` with `f(lo) > 0 ≥ f(hi)`. Each
/// iterate interpolates linearly between the current bracket ends, so the
/// result stays inside the original bracket. When `f(hi)` is exactly zero
/// (a clamped, flat tail) interpolation cannot move, and the bracket is
/// bisected instead so the first crossing is still found.
fn false_position<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut f_lo: f64, mut hi: f64, mut f_hi: f64) -> f64 {
    let tol = 1e-13 * f_lo.abs().max(1.0);
    let mut side = 0i8;
    for _ in 0..300 {
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
        let mut x = if f_hi == 0.0 {
            0.5 * (lo + hi)
        } else {
            hi - f_hi * (hi - lo) / (f_hi - f_lo)
        };
        if !(lo..=hi).contains(&x) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        if fx != 0.0 && fx.abs() <= tol {
            return x;
        }
        if fx > 0.0 {
            lo = x;
            f_lo = fx;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = x;
            f_hi = fx;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
    }
    hi
}

fn class_samples(dataset: &ActivationDataset, i: usize) -> Result<Vec<usize>> {
    let idx = dataset.indices_of_class(i);
    if idx.is_empty() {
        return Err(Error::Data(format!("no samples of class {i}")));
    }
    Ok(idx)
}

fn check_inputs(head: &HeadWeights, dataset: &ActivationDataset, c: &[f32], i: usize) -> Result<()> {
    let m = head.num_features();
    if dataset.num_features() != m || c.len() != m {
        return Err(Error::Shape(format!(
            "head has {m} columns, activations {}, contributions {}",
            dataset.num_features(),
            c.len()
        )));
    }
    if i >= head.num_classes() {
        return Err(Error::Index(format!(
            "class {i} out of range for {} classes",
            head.num_classes()
        )));
    }
    Ok(())
}

fn run(
    head: &HeadWeights,
    dataset: &ActivationDataset,
    c: &[f32],
    i: usize,
    analytical: bool,
    grid: Option<&AlphaGrid>,
) -> Result<Vec<AlphaCritSample>> {
    check_inputs(head, dataset, c, i)?;
    if let Some(g) = grid {
        g.validate()?;
    }
    let indices = class_samples(dataset, i)?;
    let w_row = head.w.row(i);
    Ok(indices
        .par_iter()
        .map(|&n| {
            let x = dataset.x.row(n);
            let (z, r) = logit_and_relevance(w_row, x, c);
            let mut sample = AlphaCritSample {
                index: n,
                logit: z,
                relevance: r,
                analytical: analytical.then(|| analytical_estimate(z, r)),
                numerical: None,
                bracket: None,
            };
            if let Some(g) = grid {
                match find_first_root(|a| suppressed_logit(w_row, x, c, a), z, g) {
                    Ok((root, bracket)) => {
                        sample.numerical = Some(Estimate::Included(root));
                        sample.bracket = Some(bracket);
                    }
                    Err(e) => sample.numerical = Some(Estimate::Excluded(e)),
                }
            }
            sample
        })
        .collect())
}

/// Analytical thresholds for every sample of class `i`.
pub fn alpha_crit_analytical(
    head: &HeadWeights,
    dataset: &ActivationDataset,
    c: &[f32],
    i: usize,
) -> Result<Vec<AlphaCritSample>> {
    run(head, dataset, c, i, true, None)
}

/// Numerical thresholds for every sample of class `i`.
pub fn alpha_crit_numerical(
    head: &HeadWeights,
    dataset: &ActivationDataset,
    c: &[f32],
    i: usize,
    grid: &AlphaGrid,
) -> Result<Vec<AlphaCritSample>> {
    run(head, dataset, c, i, false, Some(grid))
}

/// Both estimators in one pass.
pub fn alpha_crit(
    head: &HeadWeights,
    dataset: &ActivationDataset,
    c: &[f32],
    i: usize,
    grid: &AlphaGrid,
) -> Result<Vec<AlphaCritSample>> {
    run(head, dataset, c, i, true, Some(grid))
}

/// True when every product `w_ij x_j` whose component is clamped somewhere
/// in `[0, alpha]` (that is, `alpha·|c_j| > 1`) is non-negative. On such
/// inputs `z'(α)` is convex and bounded below by its linearization up to
/// `alpha`, so the numerical threshold cannot undercut the analytical one.
pub fn clamped_products_nonnegative(w_row: &[f32], x: &[f32], c: &[f32], alpha: f64) -> bool {
    w_row
        .iter()
        .zip(x)
        .zip(c)
        .all(|((w, x), c)| alpha * f64::from(c.abs()) <= 1.0 || f64::from(*w) * f64::from(*x) >= 0.0)
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Analytical,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCritSummary {
    pub method: Method,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub p5: f64,
    pub p95: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Percentile `p ∈ [0, 100]` of sorted data, linear interpolation between
/// order statistics at position `p/100 · (n − 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// Summary statistics of included values only.
pub fn summarize_values(method: Method, values: &[f64], excluded: usize) -> Result<AlphaCritSummary> {
    if values.is_empty() {
        return Err(Error::Data(format!(
            "no included samples to summarize ({excluded} excluded)"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = |q| percentile_sorted(&sorted, q);
    Ok(AlphaCritSummary {
        method,
        median: p(50.0),
        p25: p(25.0),
        p75: p(75.0),
        p5: p(5.0),
        p95: p(95.0),
        included: values.len(),
        excluded,
    })
}

pub fn summarize_alpha_crit(results: &[AlphaCritSample], method: Method) -> Result<AlphaCritSummary> {
    let mut values = Vec::new();
    let mut excluded = 0;
    for s in results {
        let est = match method {
            Method::Analytical => s.analytical,
            Method::Numerical => s.numerical,
        };
        match est {
            Some(Estimate::Included(v)) => values.push(v),
            Some(Estimate::Excluded(_)) => excluded += 1,
            None => {
                return Err(Error::Data(format!(
                    "sample {} has no {method:?} estimate",
                    s.index
                )))
            }
        }
    }
    summarize_values(method, &values, excluded)
}

/// Every term `1 − α·|c_j|` over the supplied thresholds and components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionTerms {
    pub terms: Vec<f64>,
    pub fraction_negative: f64,
}

impl SuppressionTerms {
    /// Equal-width histogram over `[lo, hi]`; values outside are clamped
    /// into the end bins.
    pub fn histogram(&self, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
        let mut counts = vec![0usize; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for &t in &self.terms {
            let b = if width > 0.0 {
                ((t - lo) / width).floor().clamp(0.0, (counts.len() - 1) as f64) as usize
            } else {
                0
            };
            counts[b] += 1;
        }
        counts
    }
}

pub fn suppression_terms(alphas: &[f64], c: &[f32]) -> Result<SuppressionTerms> {
    if alphas.is_empty() || c.is_empty() {
        return Err(Error::Data("suppression term distribution needs at least one threshold and one component".into()));
    }
    let terms: Vec<f64> = alphas
        .iter()
        .flat_map(|a| c.iter().map(move |cj| 1.0 - a * f64::from(cj.abs())))
        .collect();
    let negative = terms.iter().filter(|t| **t < 0.0).count();
    Ok(SuppressionTerms {
        fraction_negative: negative as f64 / terms.len() as f64,
        terms,
    })
}

/// Distribution of `1 − α_crit·|c_j|` over the numerically included samples.
pub fn suppression_term_distribution(results: &[AlphaCritSample], c: &[f32]) -> Result<SuppressionTerms> {
    let alphas: Vec<f64> = results
        .iter()
        .filter_map(|s| s.numerical.and_then(|e| e.value()))
        .collect();
    suppression_terms(&alphas, c)
}

/// One CSV row per sample.
pub fn write_samples_csv<W: Write>(results: &[AlphaCritSample], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "index",
        "logit",
        "relevance",
        "analytical",
        "analytical_excluded",
        "numerical",
        "numerical_excluded",
    ])?;
    let cell = |e: Option<Estimate>| match e {
        Some(Estimate::Included(v)) => (v.to_string(), String::new()),
        Some(Estimate::Excluded(x)) => (String::new(), x.to_string()),
        None => (String::new(), String::new()),
    };
    for s in results {
        let (a, ax) = cell(s.analytical);
        let (n, nx) = cell(s.numerical);
        w.write_record([
            s.index.to_string(),
            s.logit.to_string(),
            s.relevance.to_string(),
            a,
            ax,
            n,
            nx,
        ])?;
    }
    w.flush()?;
    Ok(())
}
