// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear sparse autoencoder and its minibatch Adam trainer.
//!
//! The encoder and decoder are affine maps with no nonlinearity:
//!
//! ```text
//! Z = X·Eᵀ + b_enc        (N×d)
//! Â = Z·Dᵀ + b_dec        (N×M)
//! L = (1/N)·‖X − Â‖²_F + λ₁·(1/N)·‖Z‖₁
//! ```
//!
//! Column `l` of the decoder `D` is the direction of latent `l` in
//! activation space.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{Tensor, TensorBundle};
use crate::error::{Error, Result};
use crate::tensor::{matmul, xavier_uniform, AdamConfig, AdamState, Matrix, RngState};

pub const ENC_W: &str = "enc_w";
pub const ENC_B: &str = "enc_b";
pub const DEC_W: &str = "dec_w";
pub const DEC_B: &str = "dec_b";

/// Encoder/decoder weights. `enc_w` is d×M, `dec_w` is M×d.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub enc_w: Matrix,
    pub enc_b: Vec<f32>,
    pub dec_w: Matrix,
    pub dec_b: Vec<f32>,
}

impl SaeParams {
    pub fn new(enc_w: Matrix, enc_b: Vec<f32>, dec_w: Matrix, dec_b: Vec<f32>) -> Result<Self> {
        let (d, m) = enc_w.shape();
        if dec_w.shape() != (m, d) || enc_b.len() != d || dec_b.len() != m {
            return Err(Error::Shape(format!(
                "inconsistent SAE shapes: enc_w {:?}, enc_b {}, dec_w {:?}, dec_b {}",
                enc_w.shape(),
                enc_b.len(),
                dec_w.shape(),
                dec_b.len()
            )));
        }
        Ok(Self {
            enc_w,
            enc_b,
            dec_w,
            dec_b,
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(input_dim: usize, latent_dim: usize, rng: &mut RngState) -> Self {
        let enc_w = xavier_uniform(latent_dim, input_dim, rng);
        let dec_w = xavier_uniform(input_dim, latent_dim, rng);
        Self {
            enc_w,
            enc_b: vec![0.0; latent_dim],
            dec_w,
            dec_b: vec![0.0; input_dim],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.enc_w.cols()
    }

    /// Serializes the weights; `manifest` is stored verbatim.
    pub fn to_bundle(&self, manifest: &serde_json::Value) -> Result<TensorBundle> {
        let mut b = TensorBundle::with_manifest(manifest);
        b.insert_matrix(ENC_W, &self.enc_w)?;
        b.insert_vector(ENC_B, &self.enc_b)?;
        b.insert_matrix(DEC_W, &self.dec_w)?;
        b.insert_vector(DEC_B, &self.dec_b)?;
        Ok(b)
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let mat = |name: &str| -> Result<Matrix> {
            let t = bundle.require(name)?;
            if t.shape.len() != 2 {
                return Err(Error::Data(format!("\"{name}\" must be 2-D")));
            }
            t.to_matrix()
        };
        let vec1 = |name: &str| -> Result<Vec<f32>> {
            let t: &Tensor = bundle.require(name)?;
            if t.shape.len() != 1 {
                return Err(Error::Data(format!("\"{name}\" must be 1-D")));
            }
            Ok(t.data.clone())
        };
        Self::new(mat(ENC_W)?, vec1(ENC_B)?, mat(DEC_W)?, vec1(DEC_B)?)
            .map_err(|e| Error::Data(e.to_string()))
    }
}

/// Hyperparameters for [`train_sae`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub latent_dim: usize,
    pub lambda1: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            lambda1: 1e-3,
            lr: 1e-3,
            epochs: 1000,
            batch_size: 32,
            seed: 0,
            lr_decay_factor: 0.8,
            lr_decay_every: 200,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config("lambda1 must be finite and >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config("lr_decay_factor must be finite and > 0".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Step-decay learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Losses on the full training matrix after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub total: f64,
    pub recon: f64,
    pub l1: f64,
    pub lr: f64,
}

pub type TrainTrace = Vec<EpochRecord>;

/// Loss terms, per-sample normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaeLoss {
    pub total: f64,
    pub recon: f64,
    pub l1: f64,
}

pub fn encode(params: &SaeParams, x: &Matrix) -> Result<Matrix> {
    x.matmul_transposed(&params.enc_w)?
        .add_row_broadcast(&params.enc_b)
}

pub fn decode(params: &SaeParams, z: &Matrix) -> Result<Matrix> {
    z.matmul_transposed(&params.dec_w)?
        .add_row_broadcast(&params.dec_b)
}

/// `recon = Σ(A−Â)²/N`, `l1 = Σ|Z|/N`, `total = recon + λ₁·l1`.
pub fn sae_loss(a: &Matrix, a_hat: &Matrix, z: &Matrix, lambda1: f64) -> Result<SaeLoss> {
    if a.shape() != a_hat.shape() {
        return Err(Error::Shape(format!(
            "A {:?} vs Â {:?}",
            a.shape(),
            a_hat.shape()
        )));
    }
    if z.rows() != a.rows() {
        return Err(Error::Shape(format!(
            "Z has {} rows, A has {}",
            z.rows(),
            a.rows()
        )));
    }
    let n = a.rows().max(1) as f64;
    let sq: f64 = a
        .as_slice()
        .iter()
        .zip(a_hat.as_slice())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    let abs: f64 = z.as_slice().iter().map(|v| f64::from(v.abs())).sum();
    let recon = sq / n;
    let l1 = abs / n;
    Ok(SaeLoss {
        total: recon + lambda1 * l1,
        recon,
        l1,
    })
}

/// Forward pass plus loss on `x`.
pub fn evaluate(params: &SaeParams, x: &Matrix, lambda1: f64) -> Result<SaeLoss> {
    let z = encode(params, x)?;
    let a_hat = decode(params, &z)?;
    sae_loss(x, &a_hat, &z, lambda1)
}

/// Gradients of the normalized loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub enc_w: Matrix,
    pub enc_b: Vec<f32>,
    pub dec_w: Matrix,
    pub dec_b: Vec<f32>,
}

fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut sums = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += f64::from(*v);
        }
    }
    sums.into_iter().map(|s| s as f32).collect()
}

/// Closed-form gradients of [`sae_loss`] on the batch `x`. The ℓ1 term
/// uses the subgradient `sign(z)` with `sign(0) = 0`.
pub fn sae_gradients(params: &SaeParams, x: &Matrix, lambda1: f64) -> Result<SaeGrads> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, SAE expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let n = x.rows().max(1) as f64;
    let z = encode(params, x)?;
    let a_hat = decode(params, &z)?;

    // dL/dÂ = 2(Â − A)/N
    let scale = 2.0 / n;
    let g: Vec<f32> = a_hat
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(p, t)| ((f64::from(*p) - f64::from(*t)) * scale) as f32)
        .collect();
    let g = Matrix::from_raw(x.rows(), x.cols(), g);

    let dec_w = matmul(&g.transpose(), &z)?;
    let dec_b = column_sums(&g);

    let l1_scale = lambda1 / n;
    let mut dz = matmul(&g, &params.dec_w)?;
    for (d, zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
        if *zv > 0.0 {
            *d = (f64::from(*d) + l1_scale) as f32;
        } else if *zv < 0.0 {
            *d = (f64::from(*d) - l1_scale) as f32;
        }
    }
    let enc_w = matmul(&dz.transpose(), x)?;
    let enc_b = column_sums(&dz);
    Ok(SaeGrads {
        enc_w,
        enc_b,
        dec_w,
        dec_b,
    })
}

/// `Σ a_i b_i` in `f32` with eight independent accumulators so the loop
/// vectorizes.
#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `y += a·x`.
#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Reusable buffers for minibatch forward/backward passes.
struct Workspace {
    m: usize,
    d: usize,
    z: Vec<f32>,
    g: Vec<f32>,
    dz: Vec<f32>,
    grad_enc_w: Matrix,
    grad_enc_b: Matrix,
    grad_dec_w: Matrix,
    grad_dec_b: Matrix,
}

impl Workspace {
    fn new(m: usize, d: usize, batch: usize) -> Self {
        Self {
            m,
            d,
            z: vec![0.0; batch * d],
            g: vec![0.0; batch * m],
            dz: vec![0.0; batch * d],
            grad_enc_w: Matrix::zeros(d, m),
            grad_enc_b: Matrix::zeros(1, d),
            grad_dec_w: Matrix::zeros(m, d),
            grad_dec_b: Matrix::zeros(1, m),
        }
    }

    /// Fills the gradient buffers for the rows `batch` of `x`. Same maths as
    /// [`sae_gradients`] with `f32` accumulation.
    fn gradients(&mut self, params: &SaeParams, x: &Matrix, batch: &[usize], lambda1: f64) {
        let (m, d) = (self.m, self.d);
        let b = batch.len();
        let scale = 2.0 / b as f32;
        let l1 = (lambda1 / b as f64) as f32;
        for (n, &row) in batch.iter().enumerate() {
            let xr = x.row(row);
            let z = &mut self.z[n * d..(n + 1) * d];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = dot_f32(xr, params.enc_w.row(j)) + params.enc_b[j];
            }
            let g = &mut self.g[n * m..(n + 1) * m];
            for (i, gi) in g.iter_mut().enumerate() {
                let a_hat = dot_f32(z, params.dec_w.row(i)) + params.dec_b[i];
                *gi = (a_hat - xr[i]) * scale;
            }
        }
        let gdw = self.grad_dec_w.as_mut_slice();
        gdw.fill(0.0);
        let gdb = self.grad_dec_b.as_mut_slice();
        gdb.fill(0.0);
        for n in 0..b {
            let z = &self.z[n * d..(n + 1) * d];
            let g = &self.g[n * m..(n + 1) * m];
            for (i, &gi) in g.iter().enumerate() {
                axpy(&mut gdw[i * d..(i + 1) * d], gi, z);
            }
            axpy(gdb, 1.0, g);
        }
        for n in 0..b {
            let dz = &mut self.dz[n * d..(n + 1) * d];
            dz.fill(0.0);
            for (i, &gi) in self.g[n * m..(n + 1) * m].iter().enumerate() {
                axpy(dz, gi, params.dec_w.row(i));
            }
            for (v, zv) in dz.iter_mut().zip(&self.z[n * d..(n + 1) * d]) {
                if *zv > 0.0 {
                    *v += l1;
                } else if *zv < 0.0 {
                    *v -= l1;
                }
            }
        }
        let gew = self.grad_enc_w.as_mut_slice();
        gew.fill(0.0);
        let geb = self.grad_enc_b.as_mut_slice();
        geb.fill(0.0);
        for (n, &row) in batch.iter().enumerate() {
            let xr = x.row(row);
            let dz = &self.dz[n * d..(n + 1) * d];
            for (j, &dj) in dz.iter().enumerate() {
                axpy(&mut gew[j * m..(j + 1) * m], dj, xr);
            }
            axpy(geb, 1.0, dz);
        }
    }

    /// Loss on every row of `x`, accumulated in `f64`.
    fn full_loss(&mut self, params: &SaeParams, x: &Matrix, lambda1: f64) -> SaeLoss {
        let (m, d) = (self.m, self.d);
        let mut sq = 0.0f64;
        let mut abs = 0.0f64;
        let z = &mut self.z[..d];
        for r in 0..x.rows() {
            let xr = x.row(r);
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = dot_f32(xr, params.enc_w.row(j)) + params.enc_b[j];
                abs += f64::from(zj.abs());
            }
            for i in 0..m {
                let diff = dot_f32(z, params.dec_w.row(i)) + params.dec_b[i] - xr[i];
                sq += f64::from(diff) * f64::from(diff);
            }
        }
        let n = x.rows().max(1) as f64;
        let (recon, l1) = (sq / n, abs / n);
        SaeLoss {
            total: recon + lambda1 * l1,
            recon,
            l1,
        }
    }
}

/// Trains an SAE on the rows of `x`.
///
/// Deterministic in `(x, cfg)`: one RNG seeded from `cfg.seed` drives the
/// initialization and then the per-epoch row shuffles. The final partial
/// minibatch of each epoch is used.
pub fn train_sae(x: &Matrix, cfg: &SaeTrainConfig) -> Result<(SaeParams, TrainTrace)> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Data("cannot train an SAE on zero samples".into()));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut params = SaeParams::init(x.cols(), cfg.latent_dim, &mut rng);

    let adam = AdamConfig::with_lr(cfg.lr);
    let (d, m) = (cfg.latent_dim, x.cols());
    let mut st_enc_w = AdamState::new(d, m, adam);
    let mut st_enc_b = AdamState::new(1, d, adam);
    let mut st_dec_w = AdamState::new(m, d, adam);
    let mut st_dec_b = AdamState::new(1, m, adam);
    let mut ws = Workspace::new(m, d, cfg.batch_size.min(x.rows()));
    let mut enc_b = Matrix::zeros(1, d);
    let mut dec_b = Matrix::zeros(1, m);

    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for st in [&mut st_enc_w, &mut st_enc_b, &mut st_dec_w, &mut st_dec_b] {
            st.config.lr = lr;
        }
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            ws.gradients(&params, x, batch, cfg.lambda1);
            st_enc_w.step(&mut params.enc_w, &ws.grad_enc_w)?;
            st_dec_w.step(&mut params.dec_w, &ws.grad_dec_w)?;
            enc_b.as_mut_slice().copy_from_slice(&params.enc_b);
            st_enc_b.step(&mut enc_b, &ws.grad_enc_b)?;
            params.enc_b.copy_from_slice(enc_b.as_slice());
            dec_b.as_mut_slice().copy_from_slice(&params.dec_b);
            st_dec_b.step(&mut dec_b, &ws.grad_dec_b)?;
            params.dec_b.copy_from_slice(dec_b.as_slice());
        }
        let loss = ws.full_loss(&params, x, cfg.lambda1);
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "SAE loss diverged at epoch {epoch}"
            )));
        }
        trace.push(EpochRecord {
            total: loss.total,
            recon: loss.recon,
            l1: loss.l1,
            lr,
        });
    }
    if params
        .enc_w
        .as_slice()
        .iter()
        .chain(params.dec_w.as_slice())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("SAE weights became non-finite".into()));
    }
    Ok((params, trace))
}

/// Manifest stored alongside trained SAE weights.
pub fn sae_manifest(cfg: &SaeTrainConfig, trace: &TrainTrace) -> serde_json::Value {
    json!({
        "kind": "sae",
        "config": cfg,
        "final_loss": trace.last(),
    })
}
