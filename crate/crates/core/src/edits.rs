// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions on the final linear head.
//!
//! - Multiplicative weight edits: every column `j` of `W` is scaled by
//!   `max(0, 1 ± α·|c_j|)`, where `c = D[:, l]` is the decoder column of the
//!   chosen latent. Permanent; the bias is untouched.
//! - Steering: an additive offset `v = Σ β_l·D[:, l]` applied to the
//!   activation vector at inference time.
//! - Rank-one (ROME-style) update `W' = W + (v* − W·k)·kᵀ / ‖k‖²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::{ActivationDataset, HeadWeights};
use crate::error::{Error, Result};
use crate::features::ClassLatentProfile;
use crate::sae::SaeParams;
use crate::tensor::{dot, matvec, Matrix};

/// Logit value written into `v*` for the suppressed class by default.
pub const ROME_SUPPRESSED_LOGIT: f32 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Suppress,
    Enhance,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Suppress => -1.0,
            Direction::Enhance => 1.0,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Suppress => "suppress",
            Direction::Enhance => "enhance",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suppress" => Ok(Direction::Suppress),
            "enhance" => Ok(Direction::Enhance),
            other => Err(Error::Config(format!("unknown direction \"{other}\""))),
        }
    }
}

/// One multiplicative edit along a latent direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub latent: usize,
    pub direction: Direction,
    pub alpha: f64,
}

impl EditPlan {
    pub fn new(latent: usize, direction: Direction, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self {
            latent,
            direction,
            alpha,
        })
    }

    pub fn suppress(latent: usize, alpha: f64) -> Result<Self> {
        Self::new(latent, Direction::Suppress, alpha)
    }
}

/// Column `l` of the decoder: the contribution of latent `l` to each
/// activation dimension. Not normalized.
pub fn feature_contributions(params: &SaeParams, l: usize) -> Result<Vec<f32>> {
    if l >= params.latent_dim() {
        return Err(Error::Index(format!(
            "latent {l} out of range for {} latents",
            params.latent_dim()
        )));
    }
    Ok(params.dec_w.column(l))
}

/// Per-column scale factors `max(0, 1 ± α·|c_j|)`.
pub fn column_factors(c: &[f32], direction: Direction, alpha: f64) -> Vec<f64> {
    let s = direction.sign();
    c.iter()
        .map(|cj| (1.0 + s * alpha * f64::from(cj.abs())).max(0.0))
        .collect()
}

/// Returns a copy of `head` with every column rescaled by its edit factor.
pub fn apply_weight_edit(head: &HeadWeights, c: &[f32], plan: &EditPlan) -> Result<HeadWeights> {
    if c.len() != head.num_features() {
        return Err(Error::Shape(format!(
            "contribution vector has length {}, head has {} columns",
            c.len(),
            head.num_features()
        )));
    }
    if !(plan.alpha >= 0.0 && plan.alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", plan.alpha)));
    }
    let factors = column_factors(c, plan.direction, plan.alpha);
    let cols = head.num_features();
    let data: Vec<f32> = head
        .w
        .as_slice()
        .iter()
        .enumerate()
        .map(|(idx, &w)| (f64::from(w) * factors[idx % cols]) as f32)
        .collect();
    let w = Matrix::from_vec(head.num_classes(), cols, data)?;
    HeadWeights::new(w, head.b.clone())
}

/// Bias-free logit of class `i` after suppression with strength `alpha`:
/// `Σ_j w_ij · max(0, 1 − α|c_j|) · x_j`.
pub fn edited_logit(head: &HeadWeights, x: &[f32], c: &[f32], i: usize, alpha: f64) -> Result<f64> {
    let m = head.num_features();
    if x.len() != m || c.len() != m {
        return Err(Error::Shape(format!(
            "x has length {}, c has length {}, head has {m} columns",
            x.len(),
            c.len()
        )));
    }
    if i >= head.num_classes() {
        return Err(Error::Index(format!(
            "class {i} out of range for {} classes",
            head.num_classes()
        )));
    }
    Ok(suppressed_logit(head.w.row(i), x, c, alpha))
}

/// Unchecked core of [`edited_logit`] for callers that validated shapes.
pub(crate) fn suppressed_logit(w_row: &[f32], x: &[f32], c: &[f32], alpha: f64) -> f64 {
    w_row
        .iter()
        .zip(x)
        .zip(c)
        .map(|((w, x), c)| {
            let factor = (1.0 - alpha * f64::from(c.abs())).max(0.0);
            f64::from(*w) * factor * f64::from(*x)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Steering
// ---------------------------------------------------------------------------

/// Set of latents with signed steering coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub terms: Vec<(usize, f64)>,
}

impl SteeringPlan {
    pub fn new(terms: Vec<(usize, f64)>) -> Result<Self> {
        for (i, (l, beta)) in terms.iter().enumerate() {
            if terms[..i].iter().any(|(o, _)| o == l) {
                return Err(Error::Config(format!("latent {l} appears twice")));
            }
            if !beta.is_finite() {
                return Err(Error::Config(format!("coefficient for latent {l} is not finite")));
            }
        }
        Ok(Self { terms })
    }

    /// `v = Σ β_l · D[:, l]`.
    pub fn vector(&self, params: &SaeParams) -> Result<Vec<f32>> {
        let mut v = vec![0.0f64; params.input_dim()];
        for &(l, beta) in &self.terms {
            let c = feature_contributions(params, l)?;
            for (vi, ci) in v.iter_mut().zip(&c) {
                *vi += beta * f64::from(*ci);
            }
        }
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

/// Sign-aware suppression vector for class `k` along latent `l`:
/// `v = −β · sign(μ_{k,l}) · D[:, l]`, with `sign(0) = +1`.
pub fn make_steering_vector(
    params: &SaeParams,
    profile: &ClassLatentProfile,
    k: usize,
    l: usize,
    beta: f64,
) -> Result<Vec<f32>> {
    if k >= profile.num_classes() {
        return Err(Error::Index(format!(
            "class {k} out of range for {} classes",
            profile.num_classes()
        )));
    }
    if l >= profile.latent_dim() || l >= params.latent_dim() {
        return Err(Error::Index(format!("latent {l} out of range")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be finite and >= 0, got {beta}")));
    }
    let sign = if profile.mean(k, l) < 0.0 { -1.0 } else { 1.0 };
    SteeringPlan::new(vec![(l, -beta * sign)])?.vector(params)
}

/// `x + v`. The head is not touched.
pub fn apply_steering(x: &[f32], v: &[f32]) -> Result<Vec<f32>> {
    if x.len() != v.len() {
        return Err(Error::Shape(format!(
            "activation length {} vs steering length {}",
            x.len(),
            v.len()
        )));
    }
    Ok(x.iter().zip(v).map(|(a, b)| a + b).collect())
}

/// Steers every row of a dataset.
pub fn steer_dataset(dataset: &ActivationDataset, v: &[f32]) -> Result<ActivationDataset> {
    let m = dataset.num_features();
    if v.len() != m {
        return Err(Error::Shape(format!(
            "steering vector length {} vs {m} features",
            v.len()
        )));
    }
    let mut data = Vec::with_capacity(dataset.x.as_slice().len());
    for r in 0..dataset.num_samples() {
        data.extend(apply_steering(dataset.x.row(r), v)?);
    }
    let x = Matrix::from_vec(dataset.num_samples(), m, data)?;
    ActivationDataset::new(x, dataset.labels.clone(), dataset.class_names.clone())
}

// ---------------------------------------------------------------------------
// Rank-one update
// ---------------------------------------------------------------------------

/// Key activation and desired output for a rank-one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomeEdit {
    pub key: Vec<f32>,
    pub target: Vec<f32>,
}

impl RomeEdit {
    pub fn new(key: Vec<f32>, target: Vec<f32>) -> Result<Self> {
        if dot(&key, &key) <= 0.0 {
            return Err(Error::DegenerateKey);
        }
        Ok(Self { key, target })
    }

    /// Suppression edit for class `k` keyed on `key`: `v*` is the head's
    /// full logits at `key` (bias included) with entry `k` replaced by
    /// `suppressed_logit`.
    pub fn suppress_class(head: &HeadWeights, key: &[f32], k: usize, suppressed_logit: f32) -> Result<Self> {
        if k >= head.num_classes() {
            return Err(Error::Index(format!(
                "class {k} out of range for {} classes",
                head.num_classes()
            )));
        }
        let mut target: Vec<f32> = matvec(&head.w, key)?
            .into_iter()
            .zip(&head.b)
            .map(|(z, b)| (z + f64::from(*b)) as f32)
            .collect();
        target[k] = suppressed_logit;
        Self::new(key.to_vec(), target)
    }
}

/// First sample of class `k` that the head classifies correctly, the
/// default key for a suppression edit.
pub fn default_rome_key(head: &HeadWeights, dataset: &ActivationDataset, k: usize) -> Result<usize> {
    dataset
        .indices_of_class(k)
        .into_iter()
        .find(|&n| crate::eval::predict(head, dataset.x.row(n)).ok() == Some(k))
        .ok_or_else(|| Error::Data(format!("no correctly classified sample of class {k}")))
}

/// `W' = W + (v* − W·k)·kᵀ / ‖k‖²`; the bias is unchanged.
pub fn rome_update(head: &HeadWeights, edit: &RomeEdit) -> Result<HeadWeights> {
    let key = &edit.key;
    if key.len() != head.num_features() || edit.target.len() != head.num_classes() {
        return Err(Error::Shape(format!(
            "key length {} / target length {} vs head {:?}",
            key.len(),
            edit.target.len(),
            head.w.shape()
        )));
    }
    let norm2 = dot(key, key);
    if norm2 <= 0.0 {
        return Err(Error::DegenerateKey);
    }
    let wk = matvec(&head.w, key)?;
    let mut data = Vec::with_capacity(head.w.as_slice().len());
    for (i, wki) in wk.iter().enumerate() {
        let residual = (f64::from(edit.target[i]) - wki) / norm2;
        data.extend(
            head.w
                .row(i)
                .iter()
                .zip(key)
                .map(|(w, kj)| (f64::from(*w) + residual * f64::from(*kj)) as f32),
        );
    }
    let w = Matrix::from_vec(head.num_classes(), head.num_features(), data)?;
    HeadWeights::new(w, head.b.clone())
}
