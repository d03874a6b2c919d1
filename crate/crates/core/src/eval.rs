// SPDX-License-Identifier: MIT OR Apache-2.0

//! Predictions, confusion matrices, intervention sweeps and the seed
//! robustness protocol.
//!
//! Predictions always use the full affine head `W·x + b`. Only the α_crit
//! estimators work with bias-free logits.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alphacrit::AlphaGrid;
use crate::bundle::{ActivationDataset, HeadWeights};
use crate::edits::{apply_weight_edit, feature_contributions, steer_dataset, make_steering_vector, Direction, EditPlan};
use crate::error::{Error, Result};
use crate::features::{class_conditional_means, dominant_feature, ClassLatentProfile};
use crate::sae::{encode, train_sae, SaeParams, SaeTrainConfig};
use crate::tensor::{dot, Matrix};

/// Argmax of `W·x + b`; ties go to the lowest class index.
pub fn predict(head: &HeadWeights, x: &[f32]) -> Result<usize> {
    if x.len() != head.num_features() {
        return Err(Error::Shape(format!(
            "activation length {} vs head with {} columns",
            x.len(),
            head.num_features()
        )));
    }
    Ok(predict_unchecked(head, x))
}

fn predict_unchecked(head: &HeadWeights, x: &[f32]) -> usize {
    let mut best = 0;
    let mut best_logit = f64::NEG_INFINITY;
    for (i, b) in head.b.iter().enumerate() {
        let logit = dot(head.w.row(i), x) + f64::from(*b);
        if logit > best_logit {
            best = i;
            best_logit = logit;
        }
    }
    best
}

/// Predicted class of every row.
pub fn predict_all(head: &HeadWeights, x: &Matrix) -> Result<Vec<usize>> {
    if x.cols() != head.num_features() {
        return Err(Error::Shape(format!(
            "activations have {} columns, head has {}",
            x.cols(),
            head.num_features()
        )));
    }
    Ok((0..x.rows()).map(|n| predict_unchecked(head, x.row(n))).collect())
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Self {
        let mut counts = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            counts[t][p] += 1;
        }
        Self { counts }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of each class's samples predicted correctly (0 for a class
    /// with no samples).
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes()).map(|k| self.counts[k][k]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Long-format CSV `true,pred,count`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["true", "pred", "count"])?;
        for (t, row) in self.counts.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                w.write_record([t.to_string(), p.to_string(), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(head: &HeadWeights, dataset: &ActivationDataset) -> Result<ConfusionMatrix> {
    let preds = predict_all(head, &dataset.x)?;
    Ok(ConfusionMatrix::from_predictions(
        &dataset.labels,
        &preds,
        dataset.num_classes(),
    ))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Per-class accuracy and target-class prediction distribution as a
/// function of intervention strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    /// Strengths, strictly increasing from 0.
    pub alphas: Vec<f64>,
    pub target_class: usize,
    /// `accuracy[g][k]`: accuracy of class `k` at `alphas[g]`.
    pub accuracy: Vec<Vec<f64>>,
    /// `predictions[g][p]`: number of target-class samples predicted as `p`.
    pub predictions: Vec<Vec<u64>>,
}

impl SweepCurve {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn class_curve(&self, k: usize) -> Vec<f64> {
        self.accuracy.iter().map(|row| row[k]).collect()
    }

    /// Long-format CSV `alpha,class,accuracy`: one row per (grid point,
    /// class).
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["alpha", "class", "accuracy"])?;
        for (a, row) in self.alphas.iter().zip(&self.accuracy) {
            for (k, acc) in row.iter().enumerate() {
                w.write_record([a.to_string(), k.to_string(), acc.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format CSV `alpha,pred,count` of the target-class prediction
    /// distribution.
    pub fn write_predictions_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["alpha", "pred", "count"])?;
        for (a, row) in self.alphas.iter().zip(&self.predictions) {
            for (p, c) in row.iter().enumerate() {
                w.write_record([a.to_string(), p.to_string(), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Upper end and spacing of the default sweep grid.
pub const DEFAULT_SWEEP_MAX: f64 = 10.0;
pub const DEFAULT_SWEEP_STEP: f64 = 0.1;

/// `0, step, 2·step, …, max` computed as `i·step`.
pub fn uniform_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    let g = AlphaGrid {
        alpha_max: max,
        step,
    };
    g.validate()?;
    Ok(g.points())
}

pub fn default_sweep_grid() -> Vec<f64> {
    uniform_grid(DEFAULT_SWEEP_MAX, DEFAULT_SWEEP_STEP).expect("default grid is valid")
}

/// Checks that a sweep grid starts at 0 and strictly increases.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    match grid.first() {
        Some(&0.0) => {}
        Some(g0) => return Err(Error::Config(format!("sweep grid must start at 0, got {g0}"))),
        None => return Err(Error::Config("sweep grid is empty".into())),
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("sweep grid has non-finite values".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("sweep grid must be strictly increasing".into()));
    }
    Ok(())
}

fn check_target(dataset: &ActivationDataset, k: usize) -> Result<()> {
    if k >= dataset.num_classes() {
        return Err(Error::Index(format!(
            "class {k} out of range for {} classes",
            dataset.num_classes()
        )));
    }
    Ok(())
}

/// One grid point of a sweep: accuracies and target prediction counts.
fn sweep_point(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
    target: usize,
) -> (Vec<f64>, Vec<u64>) {
    let cm = ConfusionMatrix::from_predictions(labels, predictions, num_classes);
    let dist = cm.counts[target].clone();
    (cm.per_class_accuracy(), dist)
}

/// Generic sweep: `predict_at(s)` returns the predictions of every sample at
/// strength `s`. Grid points are evaluated in parallel and reassembled in
/// grid order.
pub fn sweep_with<F>(dataset: &ActivationDataset, target: usize, grid: &[f64], predict_at: F) -> Result<SweepCurve>
where
    F: Fn(f64) -> Result<Vec<usize>> + Sync,
{
    validate_grid(grid)?;
    check_target(dataset, target)?;
    let points: Vec<(Vec<f64>, Vec<u64>)> = grid
        .par_iter()
        .map(|&s| {
            let preds = predict_at(s)?;
            Ok(sweep_point(&dataset.labels, &preds, dataset.num_classes(), target))
        })
        .collect::<Result<_>>()?;
    let (accuracy, predictions) = points.into_iter().unzip();
    Ok(SweepCurve {
        alphas: grid.to_vec(),
        target_class: target,
        accuracy,
        predictions,
    })
}

/// Multiplicative edit sweep along contribution vector `c`.
pub fn accuracy_sweep(
    head: &HeadWeights,
    dataset: &ActivationDataset,
    c: &[f32],
    direction: Direction,
    target: usize,
    grid: &[f64],
) -> Result<SweepCurve> {
    if c.len() != head.num_features() {
        return Err(Error::Shape(format!(
            "contribution vector has length {}, head has {} columns",
            c.len(),
            head.num_features()
        )));
    }
    sweep_with(dataset, target, grid, |alpha| {
        let edited = apply_weight_edit(head, c, &EditPlan::new(0, direction, alpha)?)?;
        predict_all(&edited, &dataset.x)
    })
}

/// Steering sweep over `β` for class `k` along latent `l`.
pub fn steering_sweep(
    head: &HeadWeights,
    dataset: &ActivationDataset,
    params: &SaeParams,
    profile: &ClassLatentProfile,
    target: usize,
    latent: usize,
    betas: &[f64],
) -> Result<SweepCurve> {
    sweep_with(dataset, target, betas, |beta| {
        let v = make_steering_vector(params, profile, target, latent, beta)?;
        let steered = steer_dataset(dataset, &v)?;
        predict_all(head, &steered.x)
    })
}

/// Strength at which class `k` accuracy first falls to 50%.
///
/// Returns 0 if accuracy at the first grid point is already ≤ 0.5, `None`
/// if it never gets there, and otherwise the linear interpolation inside
/// the first interval where accuracy goes from > 0.5 to ≤ 0.5.
pub fn alpha_50(curve: &SweepCurve, k: usize) -> Option<f64> {
    let acc = curve.class_curve(k);
    if *acc.first()? <= 0.5 {
        return Some(curve.alphas[0]);
    }
    for g in 1..acc.len() {
        let (a0, a1) = (acc[g - 1], acc[g]);
        if a0 > 0.5 && a1 <= 0.5 {
            let (x0, x1) = (curve.alphas[g - 1], curve.alphas[g]);
            return Some(x0 + (x1 - x0) * (a0 - 0.5) / (a0 - a1));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Seed robustness
// ---------------------------------------------------------------------------

/// Target-class suppression curves across SAE seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub target_class: usize,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Dominant latent picked for each seed.
    pub latents: Vec<usize>,
    /// `curves[s][g]`: target accuracy for seed `s` at grid point `g`.
    pub curves: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation across seeds.
    pub std: Vec<f64>,
}

/// Pointwise mean and population standard deviation of equal-length curves.
pub fn aggregate_curves(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let g = curves.first().map_or(0, Vec::len);
    let n = curves.len().max(1) as f64;
    let mean: Vec<f64> = (0..g)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    let std = (0..g)
        .map(|i| {
            let var = curves.iter().map(|c| (c[i] - mean[i]).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect();
    (mean, std)
}

/// Per-seed pieces of one robustness run, for callers that need more than
/// the curves.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: SaeParams,
    pub profile: ClassLatentProfile,
    pub latent: usize,
    pub curve: SweepCurve,
}

/// Trains one SAE, picks the dominant latent of `k` from the class means
/// over `dataset`, and sweeps suppression.
pub fn run_seed(
    x_train: &Matrix,
    dataset: &ActivationDataset,
    head: &HeadWeights,
    cfg: &SaeTrainConfig,
    k: usize,
    grid: &[f64],
) -> Result<SeedRun> {
    let (params, _) = train_sae(x_train, cfg)?;
    let z = encode(&params, &dataset.x)?;
    let profile = class_conditional_means(&z, &dataset.labels, dataset.num_classes())?;
    let latent = dominant_feature(&profile, k)?;
    let c = feature_contributions(&params, latent)?;
    let curve = accuracy_sweep(head, dataset, &c, Direction::Suppress, k, grid)?;
    Ok(SeedRun {
        seed: cfg.seed,
        params,
        profile,
        latent,
        curve,
    })
}

pub fn seed_robustness_sweep(
    x_train: &Matrix,
    dataset: &ActivationDataset,
    head: &HeadWeights,
    cfg_base: &SaeTrainConfig,
    seeds: &[u64],
    k: usize,
    grid: &[f64],
) -> Result<RobustnessResult> {
    let mut all = seed_robustness_sweeps(x_train, dataset, head, cfg_base, seeds, &[k], grid)?;
    Ok(all.remove(0))
}

/// Robustness for several target classes from one SAE per seed.
pub fn seed_robustness_sweeps(
    x_train: &Matrix,
    dataset: &ActivationDataset,
    head: &HeadWeights,
    cfg_base: &SaeTrainConfig,
    seeds: &[u64],
    classes: &[usize],
    grid: &[f64],
) -> Result<Vec<RobustnessResult>> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "robustness needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    validate_grid(grid)?;
    for &k in classes {
        check_target(dataset, k)?;
    }
    let tag = |seed: u64| move |e: Error| Error::Seed {
        seed,
        source: Box::new(e),
    };
    let per_seed: Vec<Vec<(usize, Vec<f64>)>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SaeTrainConfig {
                seed,
                ..cfg_base.clone()
            };
            let (params, _) = train_sae(x_train, &cfg).map_err(tag(seed))?;
            let z = encode(&params, &dataset.x).map_err(tag(seed))?;
            let profile = class_conditional_means(&z, &dataset.labels, dataset.num_classes()).map_err(tag(seed))?;
            classes
                .iter()
                .map(|&k| {
                    let latent = dominant_feature(&profile, k)?;
                    let c = feature_contributions(&params, latent)?;
                    let curve = accuracy_sweep(head, dataset, &c, Direction::Suppress, k, grid)?;
                    Ok((latent, curve.class_curve(k)))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(tag(seed))
        })
        .collect::<Result<_>>()?;
    Ok(classes
        .iter()
        .enumerate()
        .map(|(ci, &k)| {
            let latents = per_seed.iter().map(|runs| runs[ci].0).collect();
            let curves: Vec<Vec<f64>> = per_seed.iter().map(|runs| runs[ci].1.clone()).collect();
            let (mean, std) = aggregate_curves(&curves);
            RobustnessResult {
                target_class: k,
                alphas: grid.to_vec(),
                seeds: seeds.to_vec(),
                latents,
                curves,
                mean,
                std,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(rows: &[&[f32]], b: &[f32]) -> HeadWeights {
        HeadWeights::new(Matrix::from_rows(rows).unwrap(), b.to_vec()).unwrap()
    }

    fn dataset(rows: &[&[f32]], labels: &[usize], c: usize) -> ActivationDataset {
        ActivationDataset::new(
            Matrix::from_rows(rows).unwrap(),
            labels.to_vec(),
            (0..c).map(|k| format!("c{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn predict_cases() {
        let eye = [&[1.0f32, 0.0][..], &[0.0, 1.0]];
        assert_eq!(predict(&head(&eye, &[0.0, 0.0]), &[2.0, 1.0]).unwrap(), 0);
        assert_eq!(predict(&head(&eye, &[0.0, 5.0]), &[2.0, 1.0]).unwrap(), 1);
        assert_eq!(predict(&head(&eye, &[0.0, 0.0]), &[1.0, 1.0]).unwrap(), 0);
        assert!(matches!(predict(&head(&eye, &[0.0, 0.0]), &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn confusion_cases() {
        let eye = [&[1.0f32, 0.0][..], &[0.0, 1.0]];
        let h = head(&eye, &[0.0, 0.0]);
        let ds = dataset(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.0]], &[0, 1, 0], 2);
        let cm = confusion_matrix(&h, &ds).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 0], vec![0, 1]]);
        assert_eq!(cm.total(), 3);

        let ds = dataset(&[&[0.0, 1.0]], &[0], 2);
        let cm = confusion_matrix(&h, &ds).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        let row_sums: Vec<u64> = cm.counts.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![1, 0]);
    }

    #[test]
    fn sweep_identity_at_zero() {
        let h = head(&[&[1.0, 0.5], &[0.2, 1.0]], &[0.0, 0.1]);
        let ds = dataset(&[&[1.0, 0.2], &[0.1, 1.0], &[0.6, 0.5]], &[0, 1, 0], 2);
        let grid = [0.0, 0.5, 1.0];
        let curve = accuracy_sweep(&h, &ds, &[0.5, 0.0], Direction::Suppress, 0, &grid).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(curve.accuracy[0], confusion_matrix(&h, &ds).unwrap().per_class_accuracy());
    }

    #[test]
    fn sweep_flips_at_known_alpha() {
        // Class 0 logit (2·max(0,1−0.5α)) drops below class 1's constant
        // logit 1 once α > 1.
        let h = head(&[&[2.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let ds = dataset(&[&[1.0, 1.0]], &[0], 2);
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
        let curve = accuracy_sweep(&h, &ds, &[0.5, 0.0], Direction::Suppress, 0, &grid).unwrap();
        // At α=1 the logits tie and the lowest index wins.
        assert_eq!(curve.class_curve(0), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(curve.predictions[3], vec![0, 1]);
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.1, 0.2]).is_err());
        assert!(validate_grid(&[0.0, 0.2, 0.2]).is_err());
        assert!(validate_grid(&[0.0, 0.1]).is_ok());
    }

    fn curve_from(points: &[(f64, f64)]) -> SweepCurve {
        SweepCurve {
            alphas: points.iter().map(|p| p.0).collect(),
            target_class: 0,
            accuracy: points.iter().map(|p| vec![p.1]).collect(),
            predictions: vec![vec![0]; points.len()],
        }
    }

    #[test]
    fn alpha_50_cases() {
        assert_eq!(alpha_50(&curve_from(&[(0.0, 1.0), (1.0, 0.8), (2.0, 0.4)]), 0), Some(1.75));
        assert_eq!(alpha_50(&curve_from(&[(0.0, 1.0), (1.0, 0.9)]), 0), None);
        assert_eq!(alpha_50(&curve_from(&[(0.0, 0.4), (1.0, 0.1)]), 0), Some(0.0));
        assert_eq!(alpha_50(&curve_from(&[(0.0, 1.0), (1.0, 0.5)]), 0), Some(1.0));
    }

    #[test]
    fn aggregate() {
        let (m, s) = aggregate_curves(&[vec![1.0, 0.5], vec![1.0, 0.5]]);
        assert_eq!(m, vec![1.0, 0.5]);
        assert_eq!(s, vec![0.0, 0.0]);
        let (m, s) = aggregate_curves(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(m, vec![0.5, 0.0]);
        assert_eq!(s, vec![0.5, 0.0]);
    }

    #[test]
    fn robustness_needs_two_seeds() {
        let h = head(&[&[1.0]], &[0.0]);
        let ds = dataset(&[&[1.0]], &[0], 1);
        let r = seed_robustness_sweep(&ds.x, &ds, &h, &SaeTrainConfig::default(), &[1], 0, &[0.0]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn sweep_csv_rows() {
        let curve = SweepCurve {
            alphas: vec![0.0, 0.5],
            target_class: 0,
            accuracy: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
            predictions: vec![vec![1, 0], vec![0, 1]],
        };
        let mut out = Vec::new();
        curve.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "alpha,class,accuracy\n0,0,1\n0,1,0.5\n0.5,0,0\n0.5,1,1\n"
        );
    }
}
