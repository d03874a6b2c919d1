// SPDX-License-Identifier: MIT OR Apache-2.0

//! Class-structured synthetic activations and a linear softmax head, so the
//! whole pipeline runs without an exported model.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{store_dataset, ActivationDataset, HeadWeights, TensorBundle, ACTIVATIONS, LABELS, TRAIN_ACTIVATIONS, TRAIN_LABELS};
use crate::error::{Error, Result};
use crate::eval::predict_all;
use crate::tensor::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Activation dimension `M`.
    pub dim: usize,
    /// Width of each class's concept support; supports are disjoint.
    pub support: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Value of every support coordinate of a concept vector.
    pub strength: f32,
    /// Noise standard deviation.
    pub noise: f32,
    /// Fold noise to `|g|` so activations stay non-negative.
    pub nonnegative: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            support: 4,
            train_per_class: 200,
            test_per_class: 50,
            strength: 3.0,
            noise: 0.3,
            nonnegative: true,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim < self.classes {
            return Err(Error::Config(format!(
                "dimension {} smaller than class count {}",
                self.dim, self.classes
            )));
        }
        if self.support == 0 || self.classes * self.support > self.dim {
            return Err(Error::Config(format!(
                "{} disjoint supports of width {} do not fit in dimension {}",
                self.classes, self.support, self.dim
            )));
        }
        if !(self.strength.is_finite() && self.strength > 0.0) {
            return Err(Error::Config(format!("strength must be positive, got {}", self.strength)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("sample counts per class must be positive".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|k| format!("class_{k}")).collect()
    }

    /// Concept vector `u_k`.
    pub fn concept(&self, k: usize) -> Vec<f32> {
        let mut u = vec![0.0f32; self.dim];
        u[k * self.support..(k + 1) * self.support].fill(self.strength);
        u
    }
}

fn sample_split(cfg: &SynthConfig, per_class: usize, rng: &mut RngState) -> Result<ActivationDataset> {
    let n = cfg.classes * per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..cfg.classes {
        let u = cfg.concept(k);
        for _ in 0..per_class {
            for &base in &u {
                let g = rng.normal() as f32;
                let g = if cfg.nonnegative { g.abs() } else { g };
                data.push(base + cfg.noise * g);
            }
            labels.push(k);
        }
    }
    ActivationDataset::new(Matrix::from_vec(n, cfg.dim, data)?, labels, cfg.class_names())
}

/// Train and test splits, rows grouped by class. The train split is drawn
/// first from the same stream.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<(ActivationDataset, ActivationDataset)> {
    cfg.validate()?;
    let mut rng = RngState::new(cfg.seed);
    let train = sample_split(cfg, cfg.train_per_class, &mut rng)?;
    let test = sample_split(cfg, cfg.test_per_class, &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self { lr: 0.1, epochs: 300 }
    }
}

/// Mean softmax cross-entropy of `head` on `dataset`.
pub fn cross_entropy(head: &HeadWeights, dataset: &ActivationDataset) -> f64 {
    let (probs, _) = softmax_rows(head, dataset);
    let n = dataset.num_samples();
    let c = head.num_classes();
    let total: f64 = dataset
        .labels
        .iter()
        .enumerate()
        .map(|(i, &k)| -probs[i * c + k].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / n as f64
}

fn softmax_rows(head: &HeadWeights, dataset: &ActivationDataset) -> (Vec<f64>, usize) {
    let c = head.num_classes();
    let mut probs = Vec::with_capacity(dataset.num_samples() * c);
    for n in 0..dataset.num_samples() {
        let x = dataset.x.row(n);
        let logits: Vec<f64> = (0..c)
            .map(|i| crate::tensor::dot(head.w.row(i), x) + f64::from(head.b[i]))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / s));
    }
    (probs, c)
}

/// Full-batch gradient descent on softmax cross-entropy from a zero head.
/// Returns the head and the loss before the first step and after each epoch.
pub fn train_linear_head_traced(
    train: &ActivationDataset,
    cfg: &HeadTrainConfig,
) -> Result<(HeadWeights, Vec<f64>)> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let counts = train.class_counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {k} empty")));
    }
    let (n, m, c) = (train.num_samples(), train.num_features(), train.num_classes());
    let mut w = vec![0.0f64; c * m];
    let mut b = vec![0.0f64; c];
    let to_head = |w: &[f64], b: &[f64]| {
        HeadWeights::new(
            Matrix::from_vec(c, m, w.iter().map(|v| *v as f32).collect())?,
            b.iter().map(|v| *v as f32).collect(),
        )
    };
    let mut head = to_head(&w, &b)?;
    let mut trace = vec![cross_entropy(&head, train)];
    for _ in 0..cfg.epochs {
        let (mut delta, _) = softmax_rows(&head, train);
        for (i, &k) in train.labels.iter().enumerate() {
            delta[i * c + k] -= 1.0;
        }
        let mut gw = vec![0.0f64; c * m];
        let mut gb = vec![0.0f64; c];
        for i in 0..n {
            let x = train.x.row(i);
            for k in 0..c {
                let d = delta[i * c + k];
                gb[k] += d;
                for (g, xv) in gw[k * m..(k + 1) * m].iter_mut().zip(x) {
                    *g += d * f64::from(*xv);
                }
            }
        }
        let scale = cfg.lr / n as f64;
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= scale * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= scale * g);
        head = to_head(&w, &b)?;
        trace.push(cross_entropy(&head, train));
    }
    Ok((head, trace))
}

pub fn train_linear_head(train: &ActivationDataset, cfg: &HeadTrainConfig) -> Result<HeadWeights> {
    train_linear_head_traced(train, cfg).map(|(h, _)| h)
}

/// Fraction of rows predicted correctly.
pub fn accuracy(head: &HeadWeights, dataset: &ActivationDataset) -> Result<f64> {
    let preds = predict_all(head, &dataset.x)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / dataset.num_samples().max(1) as f64)
}

/// Everything `synth` produces.
#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub config: SynthConfig,
    pub head_config: HeadTrainConfig,
    pub train: ActivationDataset,
    pub test: ActivationDataset,
    pub head: HeadWeights,
}

impl SynthBenchmark {
    pub fn build(config: &SynthConfig, head_config: &HeadTrainConfig) -> Result<Self> {
        let (train, test) = generate_synthetic_dataset(config)?;
        let head = train_linear_head(&train, head_config)?;
        Ok(Self {
            config: config.clone(),
            head_config: *head_config,
            train,
            test,
            head,
        })
    }

    /// Dataset bundle: test split as `activations`, train split as
    /// `train_activations`, plus the head.
    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let mut bundle = TensorBundle::with_manifest(&json!({
            "class_names": self.config.class_names(),
            "source": "synthetic",
            "synth": self.config,
            "head_training": self.head_config,
        }));
        store_dataset(&mut bundle, &self.test, ACTIVATIONS, LABELS)?;
        store_dataset(&mut bundle, &self.train, TRAIN_ACTIVATIONS, TRAIN_LABELS)?;
        self.head.store(&mut bundle)?;
        Ok(bundle)
    }
}
