// SPDX-License-Identifier: MIT OR Apache-2.0

//! Class-conditional latent statistics and feature selection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-class mean latent activation `mu[k] = mean of Z rows labelled k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLatentProfile {
    pub mu: Matrix,
    pub counts: Vec<usize>,
}

impl ClassLatentProfile {
    pub fn num_classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn mean(&self, k: usize, l: usize) -> f32 {
        self.mu.get(k, l)
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.num_classes() {
            return Err(Error::Index(format!(
                "class {k} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Writes the profile as CSV: a `class` column, then one column per
    /// latent.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["class".to_owned()];
        header.extend((0..self.latent_dim()).map(|l| format!("latent_{l}")));
        w.write_record(&header)?;
        for k in 0..self.num_classes() {
            let mut rec = vec![k.to_string()];
            rec.extend(self.mu.row(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn class_conditional_means(
    z: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassLatentProfile> {
    if labels.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} latent rows",
            labels.len(),
            z.rows()
        )));
    }
    let d = z.cols();
    let mut sums = vec![0.0f64; num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (n, &k) in labels.iter().enumerate() {
        if k >= num_classes {
            return Err(Error::Data(format!(
                "label {k} of sample {n} out of range for {num_classes} classes"
            )));
        }
        counts[k] += 1;
        for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(z.row(n)) {
            *s += f64::from(*v);
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {k} empty")));
    }
    let mu = sums
        .chunks(d.max(1))
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |s| (s / c as f64) as f32))
        .collect::<Vec<_>>();
    Ok(ClassLatentProfile {
        mu: Matrix::from_raw(num_classes, d, if d == 0 { Vec::new() } else { mu }),
        counts,
    })
}

/// Latent with the largest `|mu[k, j]|`; ties go to the lowest index.
pub fn dominant_feature(profile: &ClassLatentProfile, k: usize) -> Result<usize> {
    profile.check_class(k)?;
    let row = profile.mu.row(k);
    if row.is_empty() {
        return Err(Error::Index("profile has no latents".into()));
    }
    let mut best = 0usize;
    for (j, v) in row.iter().enumerate().skip(1) {
        if v.abs() > row[best].abs() {
            best = j;
        }
    }
    Ok(best)
}

/// Dominant latent of one class and its mean activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominantFeature {
    pub class: usize,
    pub latent: usize,
    pub mean: f32,
    /// `|mean|` over the next-largest magnitude in the same class row.
    pub dominance_ratio: f64,
}

/// Dominant latent of every class.
pub fn dominant_features(profile: &ClassLatentProfile) -> Result<Vec<DominantFeature>> {
    (0..profile.num_classes())
        .map(|k| {
            let latent = dominant_feature(profile, k)?;
            let mean = profile.mean(k, latent);
            let runner_up = profile
                .mu
                .row(k)
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != latent)
                .map(|(_, v)| f64::from(v.abs()))
                .fold(0.0f64, f64::max);
            let dominance_ratio = if runner_up == 0.0 {
                f64::INFINITY
            } else {
                f64::from(mean.abs()) / runner_up
            };
            Ok(DominantFeature {
                class: k,
                latent,
                mean,
                dominance_ratio,
            })
        })
        .collect()
}

/// Ordering used to rank samples for one latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ActivationRank {
    /// Raw signed value, largest first.
    #[default]
    Signed,
    /// Absolute value, largest first.
    Magnitude,
}

/// Indices of the `k` samples with the largest activation of latent `l`
/// (descending; ties by lowest index). `k` is clipped to the sample count.
pub fn top_activating_samples(
    z: &Matrix,
    l: usize,
    k: usize,
    rank: ActivationRank,
) -> Result<Vec<usize>> {
    if l >= z.cols() {
        return Err(Error::Index(format!(
            "latent {l} out of range for {} latents",
            z.cols()
        )));
    }
    let key = |n: usize| {
        let v = z.get(n, l);
        match rank {
            ActivationRank::Signed => v,
            ActivationRank::Magnitude => v.abs(),
        }
    };
    let mut idx: Vec<usize> = (0..z.rows()).collect();
    // Stable sort keeps lower indices first among equal keys.
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(rows: &[&[f32]]) -> ClassLatentProfile {
        ClassLatentProfile {
            mu: Matrix::from_rows(rows).unwrap(),
            counts: vec![1; rows.len()],
        }
    }

    #[test]
    fn mean_of_two_rows() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [3.0, 0.0]]).unwrap();
        let p = class_conditional_means(&z, &[0, 0], 1).unwrap();
        assert_eq!(p.mu.row(0), &[2.0, 0.0]);
        assert_eq!(p.counts, vec![2]);
    }

    #[test]
    fn single_sample_per_class() {
        let z = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = class_conditional_means(&z, &[1, 0], 2).unwrap();
        assert_eq!(p.mu.row(0), &[3.0, 4.0]);
        assert_eq!(p.mu.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn empty_class_named() {
        let z = Matrix::zeros(2, 1);
        match class_conditional_means(&z, &[0, 0], 2) {
            Err(Error::Data(m)) => assert_eq!(m, "class 1 empty"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dominant_cases() {
        assert_eq!(dominant_feature(&profile(&[&[0.1, 5.0, 0.3]]), 0).unwrap(), 1);
        assert_eq!(dominant_feature(&profile(&[&[-4.0, 2.0]]), 0).unwrap(), 0);
        assert_eq!(dominant_feature(&profile(&[&[2.0, 2.0]]), 0).unwrap(), 0);
        assert!(matches!(
            dominant_feature(&profile(&[&[2.0, 2.0]]), 1),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn dominance_ratio() {
        let p = profile(&[&[1.0, -6.0, 2.0], &[0.0, 0.0, 3.0]]);
        let d = dominant_features(&p).unwrap();
        assert_eq!(d[0].latent, 1);
        assert_eq!(d[0].mean, -6.0);
        assert_eq!(d[0].dominance_ratio, 3.0);
        assert!(d[1].dominance_ratio.is_infinite());
    }

    #[test]
    fn top_activating() {
        let z = Matrix::from_rows(&[[0.1], [0.9], [0.5]]).unwrap();
        assert_eq!(top_activating_samples(&z, 0, 2, ActivationRank::Signed).unwrap(), vec![1, 2]);
        assert!(top_activating_samples(&z, 0, 0, ActivationRank::Signed).unwrap().is_empty());
        assert_eq!(
            top_activating_samples(&z, 0, 10, ActivationRank::Signed).unwrap(),
            vec![1, 2, 0]
        );
        assert!(matches!(
            top_activating_samples(&z, 1, 1, ActivationRank::Signed),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn top_activating_ties_and_magnitude() {
        let z = Matrix::from_rows(&[[1.0], [-3.0], [1.0]]).unwrap();
        assert_eq!(top_activating_samples(&z, 0, 3, ActivationRank::Signed).unwrap(), vec![0, 2, 1]);
        assert_eq!(
            top_activating_samples(&z, 0, 1, ActivationRank::Magnitude).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn profile_csv_shape() {
        let p = profile(&[&[1.0, 2.0], &[3.0, 4.5]]);
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "class,latent_0,latent_1\n0,1,2\n1,3,4.5\n");
    }
}
