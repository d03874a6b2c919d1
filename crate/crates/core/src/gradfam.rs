// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-weighted feature activation maps for SAE latents, and the
//! total-variation penalty used by feature visualization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bundle::Tensor;
use crate::error::{Error, Result};

/// `K` channels of `H×W` maps, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMapStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "feature maps need K, H, W ≥ 1, got {channels}×{height}×{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}×{height}×{width} stack",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature maps".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a stack from nested `[channel][row][col]` arrays.
    pub fn from_channels<C, R>(channels: &[C]) -> Result<Self>
    where
        C: AsRef<[R]>,
        R: AsRef<[f32]>,
    {
        let k = channels.len();
        let h = channels.first().map_or(0, |c| c.as_ref().len());
        let w = channels
            .first()
            .and_then(|c| c.as_ref().first())
            .map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(k * h * w);
        for c in channels {
            if c.as_ref().len() != h {
                return Err(Error::Shape("channels differ in height".into()));
            }
            for r in c.as_ref() {
                if r.as_ref().len() != w {
                    return Err(Error::Shape("rows differ in width".into()));
                }
                data.extend_from_slice(r.as_ref());
            }
        }
        Self::new(k, h, w, data)
    }

    /// Stack whose channel `k` is the constant `values[k]`.
    pub fn constant_channels(values: &[f32], height: usize, width: usize) -> Result<Self> {
        let data = values
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, height * width))
            .collect();
        Self::new(values.len(), height, width, data)
    }

    /// Reads a `K×H×W` bundle tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            &[k, h, w] => Self::new(k, h, w, t.data.clone()),
            other => Err(Error::Shape(format!("expected a K×H×W tensor, got shape {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[k * p..(k + 1) * p]
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f32 {
        self.data[(k * self.height + i) * self.width + j]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Non-negative `H×W` map normalized so its maximum is 1 (or all zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Heatmap {
    /// Normalizes a raw non-negative map by its maximum.
    fn normalized(height: usize, width: usize, raw: Vec<f64>) -> Self {
        let max = raw.iter().copied().fold(0.0f64, f64::max);
        let data = if max > 0.0 {
            raw.iter().map(|v| (v / max) as f32).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.width + j]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f32>> {
        self.data.chunks(self.width).map(<[f32]>::to_vec).collect()
    }

    /// Position of the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (n, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = n;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.clone(),
        }
    }

    /// CSV grid: one line per row, no header.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        for row in self.data.chunks(self.width) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `|Σ_k β_k F_k|` with `β_k` the spatial mean of `G_k`, max-normalized.
pub fn gradfam_from_gradients(f: &FeatureMapStack, g: &FeatureMapStack) -> Result<Heatmap> {
    if f.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "feature maps {:?} vs gradients {:?}",
            f.shape(),
            g.shape()
        )));
    }
    let p = (f.height * f.width) as f64;
    let betas: Vec<f64> = (0..g.channels)
        .map(|k| g.channel(k).iter().map(|v| f64::from(*v)).sum::<f64>() / p)
        .collect();
    Ok(combine(f, &betas))
}

fn combine(f: &FeatureMapStack, betas: &[f64]) -> Heatmap {
    let mut raw = vec![0.0f64; f.height * f.width];
    for (k, beta) in betas.iter().enumerate() {
        for (r, v) in raw.iter_mut().zip(f.channel(k)) {
            *r += beta * f64::from(*v);
        }
    }
    raw.iter_mut().for_each(|r| *r = r.abs());
    Heatmap::normalized(f.height, f.width, raw)
}

/// Heatmap of an SAE latent fed by global average pooling: the gradient of
/// the latent w.r.t. every pixel of channel `k` is `enc_row[k] / P`.
pub fn gradfam_avgpool_analytic(f: &FeatureMapStack, enc_row: &[f32]) -> Result<Heatmap> {
    if enc_row.len() != f.channels {
        return Err(Error::Shape(format!(
            "encoder row of length {} for {} channels",
            enc_row.len(),
            f.channels
        )));
    }
    let p = (f.height * f.width) as f64;
    let betas: Vec<f64> = enc_row.iter().map(|e| f64::from(*e) / p).collect();
    Ok(combine(f, &betas))
}

/// Gradient stack `G_k ≡ enc_row[k] / P` matching the analytic path.
pub fn avgpool_gradients(enc_row: &[f32], height: usize, width: usize) -> Result<FeatureMapStack> {
    let p = (height * width) as f32;
    let vals: Vec<f32> = enc_row.iter().map(|e| e / p).collect();
    FeatureMapStack::constant_channels(&vals, height, width)
}

/// Isotropic total variation summed over channels and interior pixels.
pub fn tv_loss(image: &FeatureMapStack) -> f64 {
    let (c, h, w) = image.shape();
    let mut total = 0.0f64;
    for k in 0..c {
        for i in 0..h.saturating_sub(1) {
            for j in 0..w.saturating_sub(1) {
                let x = f64::from(image.get(k, i, j));
                let dv = f64::from(image.get(k, i + 1, j)) - x;
                let dh = f64::from(image.get(k, i, j + 1)) - x;
                total += (dv * dv + dh * dh).sqrt();
            }
        }
    }
    total
}
