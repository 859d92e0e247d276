//! Classification head trained on cached embeddings.
//!
//! `[adapter] → linear → batch norm → ReLU → linear → log-softmax`, trained with
//! mean negative log-likelihood. Class 0 is palm, class 1 is non-palm.
//!
//! Everything is generic over [`Scalar`] so the same code trains in `f32` and
//! runs gradient checks in `f64`.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingCache;
use crate::dataset::{stratified_kfold, Label, Scale};
use crate::error::{Error, Result};
use crate::util::{read_u32, substream};

pub const NNODES_CHOICES: [usize; 3] = [64, 128, 256];
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const MAGIC: &[u8; 4] = b"PMLP";
const VERSION: u32 = 1;
const FLAG_ADAPTER: u32 = 1;

// Substream tags so shuffles and view picks never share a stream.
const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_VIEW: u64 = 0x5649_4557;

pub trait Scalar: Float + FromPrimitive + LinalgScalar + ScalarOperand + Send + Sync + fmt::Debug {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn c<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

/// Trainable `D → D` affine map applied before the first linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T = f32> {
    pub adapter: Option<Adapter<T>>,
    /// `D × nnodes`.
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: T,
    pub momentum: T,
    /// `nnodes × 2`.
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub mode: Mode,
}

/// Gradients of the mean loss, shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub adapter: Option<Adapter<T>>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    /// Gradient with respect to the input batch.
    pub input: Array2<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Parameter gradients in the order of [`MlpHead::params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut v = Vec::with_capacity(8);
        if let Some(a) = &self.adapter {
            v.push(a.w.as_slice().unwrap());
            v.push(a.b.as_slice().unwrap());
        }
        v.push(self.w1.as_slice().unwrap());
        v.push(self.b1.as_slice().unwrap());
        v.push(self.gamma.as_slice().unwrap());
        v.push(self.beta.as_slice().unwrap());
        v.push(self.w2.as_slice().unwrap());
        v.push(self.b2.as_slice().unwrap());
        v
    }
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub u: Array2<T>,
    pub mean: Array1<T>,
    /// Biased batch variance.
    pub var: Array1<T>,
    pub xhat: Array2<T>,
    pub y: Array2<T>,
    pub h: Array2<T>,
    pub logp: Array2<T>,
}

fn uniform_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || c(rng.gen_range(-bound..bound)))
}

fn log_softmax<T: Scalar>(logits: &mut Array2<T>) {
    for mut row in logits.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.fold(T::zero(), |a, &b| a + (b - m).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }
}

impl<T: Scalar> MlpHead<T> {
    /// Fan-in scaled uniform weights, zero biases, identity batch norm.
    pub fn new(dim: usize, nnodes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || nnodes == 0 {
            return Err(Error::invalid(format!("head shape {dim}x{nnodes} has a zero side")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform_matrix(&mut rng, dim, nnodes);
        let w2 = uniform_matrix(&mut rng, nnodes, 2);
        Ok(MlpHead {
            adapter: None,
            w1,
            b1: Array1::zeros(nnodes),
            gamma: Array1::ones(nnodes),
            beta: Array1::zeros(nnodes),
            running_mean: Array1::zeros(nnodes),
            running_var: Array1::ones(nnodes),
            eps: c(BN_EPSILON),
            momentum: c(BN_MOMENTUM),
            w2,
            b2: Array1::zeros(2),
            mode: Mode::Training,
        })
    }

    /// Add an adapter initialized to the identity map.
    pub fn with_adapter(mut self) -> Self {
        let d = self.dim();
        self.adapter = Some(Adapter {
            w: Array2::eye(d),
            b: Array1::zeros(d),
        });
        self
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn nnodes(&self) -> usize {
        self.w1.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&[T]> {
        let mut v = Vec::with_capacity(8);
        if let Some(a) = &self.adapter {
            v.push(a.w.as_slice().unwrap());
            v.push(a.b.as_slice().unwrap());
        }
        v.push(self.w1.as_slice().unwrap());
        v.push(self.b1.as_slice().unwrap());
        v.push(self.gamma.as_slice().unwrap());
        v.push(self.beta.as_slice().unwrap());
        v.push(self.w2.as_slice().unwrap());
        v.push(self.b2.as_slice().unwrap());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::with_capacity(8);
        if let Some(a) = &mut self.adapter {
            v.push(a.w.as_slice_mut().unwrap());
            v.push(a.b.as_slice_mut().unwrap());
        }
        v.push(self.w1.as_slice_mut().unwrap());
        v.push(self.b1.as_slice_mut().unwrap());
        v.push(self.gamma.as_slice_mut().unwrap());
        v.push(self.beta.as_slice_mut().unwrap());
        v.push(self.w2.as_slice_mut().unwrap());
        v.push(self.b2.as_slice_mut().unwrap());
        v
    }

    /// Convert to another precision.
    pub fn cast<U: Scalar>(&self) -> MlpHead<U> {
        let m1 = |a: &Array1<T>| a.mapv(|v| U::from(v).unwrap());
        let m2 = |a: &Array2<T>| a.mapv(|v| U::from(v).unwrap());
        MlpHead {
            adapter: self.adapter.as_ref().map(|a| Adapter { w: m2(&a.w), b: m1(&a.b) }),
            w1: m2(&self.w1),
            b1: m1(&self.b1),
            gamma: m1(&self.gamma),
            beta: m1(&self.beta),
            running_mean: m1(&self.running_mean),
            running_var: m1(&self.running_var),
            eps: U::from(self.eps).unwrap(),
            momentum: U::from(self.momentum).unwrap(),
            w2: m2(&self.w2),
            b2: m1(&self.b2),
            mode: self.mode,
        }
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::invalid(format!(
                "feature length {} does not match head input {}",
                x.ncols(),
                self.dim()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    fn pre_norm(&self, x: &ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let u = match &self.adapter {
            Some(a) => x.dot(&a.w) + &a.b,
            None => x.to_owned(),
        };
        let z = u.dot(&self.w1) + &self.b1;
        (u, z)
    }

    fn post_norm(&self, y: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let h = y.mapv(|v| v.max(T::zero()));
        let mut logits = h.dot(&self.w2) + &self.b2;
        log_softmax(&mut logits);
        (h, logits)
    }

    /// Inference-mode log-probabilities (running statistics), `B × 2`.
    pub fn forward_inference(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let (_, z) = self.pre_norm(&x);
        let scale = self.running_var.mapv(|v| (v + self.eps).sqrt().recip()) * &self.gamma;
        let y = (z - &self.running_mean) * &scale + &self.beta;
        Ok(self.post_norm(&y).1)
    }

    /// Training-mode forward pass with batch statistics; does not touch the
    /// running statistics.
    pub fn forward_train(&self, x: ArrayView2<T>) -> Result<ForwardCache<T>> {
        self.check_input(&x)?;
        if x.nrows() < 2 {
            return Err(Error::invalid("training-mode batch norm needs at least 2 rows"));
        }
        let (u, z) = self.pre_norm(&x);
        // Shifted by the first row so identical rows center to exactly zero.
        let shift = z.row(0).to_owned();
        let offset = (&z - &shift).mean_axis(Axis(0)).unwrap();
        let mean = shift + &offset;
        let centered = &z - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let inv_std = var.mapv(|v| (v + self.eps).sqrt().recip());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        let (h, logp) = self.post_norm(&y);
        Ok(ForwardCache {
            u,
            mean,
            var,
            xhat,
            y,
            h,
            logp,
        })
    }

    /// Forward in the current mode.
    pub fn forward(&mut self, x: ArrayView2<T>) -> Result<Array2<T>> {
        match self.mode {
            Mode::Inference => self.forward_inference(x),
            Mode::Training => {
                let cache = self.forward_train(x.view())?;
                self.update_running(&cache, x.nrows());
                Ok(cache.logp)
            }
        }
    }

    /// Momentum update of the running statistics; the running variance tracks
    /// the unbiased batch variance.
    pub fn update_running(&mut self, cache: &ForwardCache<T>, batch: usize) {
        let m = self.momentum;
        let keep = T::one() - m;
        let unbias = c::<T>(batch as f64 / (batch as f64 - 1.0));
        self.running_mean.zip_mut_with(&cache.mean, |r, &b| *r = keep * *r + m * b);
        self.running_var
            .zip_mut_with(&cache.var, |r, &b| *r = keep * *r + m * b * unbias);
    }

    /// Mean NLL and analytic gradients of a training-mode forward pass.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<T>,
        labels: &[usize],
    ) -> Result<(T, Gradients<T>, ForwardCache<T>)> {
        let cache = self.forward_train(x.view())?;
        let loss = nll_loss(&cache.logp, labels)?;
        let b = x.nrows();
        let inv_b = c::<T>(1.0 / b as f64);

        // d loss / d logits = (softmax - onehot) / B
        let mut dlogits = cache.logp.mapv(|v| v.exp());
        for (mut row, &l) in dlogits.rows_mut().into_iter().zip(labels) {
            row[l] = row[l] - T::one();
            row.mapv_inplace(|v| v * inv_b);
        }
        let dw2 = cache.h.t().dot(&dlogits);
        let db2 = dlogits.sum_axis(Axis(0));
        let mut dy = dlogits.dot(&self.w2.t());
        dy.zip_mut_with(&cache.y, |d, &y| {
            if y <= T::zero() {
                *d = T::zero();
            }
        });
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));

        // Batch-norm backward through the batch mean and variance.
        let dxhat = &dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let inv_std = cache.var.mapv(|v| (v + self.eps).sqrt().recip());
        let bt = c::<T>(b as f64);
        let dz = (dxhat.mapv(|v| v * bt) - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat))
            * &(inv_std * inv_b);

        let dw1 = cache.u.t().dot(&dz);
        let db1 = dz.sum_axis(Axis(0));
        let du = dz.dot(&self.w1.t());
        let (adapter, input) = match &self.adapter {
            Some(a) => (
                Some(Adapter {
                    w: x.t().dot(&du),
                    b: du.sum_axis(Axis(0)),
                }),
                du.dot(&a.w.t()),
            ),
            None => (None, du),
        };
        let grads = Gradients {
            adapter,
            w1: dw1,
            b1: db1,
            gamma: dgamma,
            beta: dbeta,
            w2: dw2,
            b2: db2,
            input,
        };
        Ok((loss, grads, cache))
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn backward_and_step(
        &mut self,
        opt: &mut Optimizer<T>,
        x: ArrayView2<T>,
        labels: &[usize],
    ) -> Result<T> {
        if self.mode != Mode::Training {
            return Err(Error::invalid("backward_and_step needs a head in training mode"));
        }
        let (loss, grads, cache) = self.loss_and_gradients(x.view(), labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                detail: format!("loss {loss:?} on a batch of {}", labels.len()),
            });
        }
        self.update_running(&cache, x.nrows());
        opt.step(self, &grads);
        Ok(loss)
    }
}

/// Mean of `-logp[i, label_i]`.
pub fn nll_loss<T: Scalar>(logp: &Array2<T>, labels: &[usize]) -> Result<T> {
    if logp.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "{} rows of log-probabilities for {} labels",
            logp.nrows(),
            labels.len()
        )));
    }
    let mut sum = T::zero();
    for (row, &l) in logp.rows().into_iter().zip(labels) {
        if l > 1 {
            return Err(Error::invalid(format!("class index {l} is not 0 or 1")));
        }
        sum = sum - row[l];
    }
    Ok(sum / c(labels.len() as f64))
}

impl MlpHead<f32> {
    /// Probability of palm for each row of a row-major `n × D` buffer.
    pub fn predict_proba_batch(&self, rows: &[f32]) -> Result<Vec<f64>> {
        if self.mode != Mode::Inference {
            return Err(Error::invalid("prediction needs a head in inference mode"));
        }
        let d = self.dim();
        if !rows.len().is_multiple_of(d) || rows.is_empty() {
            return Err(Error::invalid(format!("{} values is not a multiple of D = {d}", rows.len())));
        }
        let x = ArrayView2::from_shape((rows.len() / d, d), rows).unwrap();
        let logp = self.forward_inference(x)?;
        Ok(logp
            .column(Label::Palm.class_index())
            .iter()
            .map(|&v| f64::from(v.exp()).clamp(0.0, 1.0))
            .collect())
    }

    pub fn predict_proba(&self, features: &[f32]) -> Result<f64> {
        if features.len() != self.dim() {
            return Err(Error::invalid(format!(
                "feature length {} does not match head input {}",
                features.len(),
                self.dim()
            )));
        }
        Ok(self.predict_proba_batch(features)?[0])
    }

    /// Versioned little-endian container with a trailing CRC-32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let flags = if self.adapter.is_some() { FLAG_ADAPTER } else { 0 };
        for h in [VERSION, self.dim() as u32, self.nnodes() as u32, flags] {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        buf.extend_from_slice(&self.eps.to_le_bytes());
        buf.extend_from_slice(&self.momentum.to_le_bytes());
        let stats = [
            self.running_mean.as_slice().unwrap(),
            self.running_var.as_slice().unwrap(),
        ];
        for arr in self.params().into_iter().chain(stats) {
            for v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// Parse [`to_bytes`](Self::to_bytes) output; the head comes back in
    /// inference mode.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 16 + 8;
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::Magic("head file".into()));
        }
        if buf.len() < HEADER + 4 {
            return Err(Error::Checksum("head file (truncated header)".into()));
        }
        let version = read_u32(buf, 4);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != read_u32(tail, 0) {
            return Err(Error::Checksum("head file".into()));
        }
        let (dim, nnodes) = (read_u32(buf, 8) as usize, read_u32(buf, 12) as usize);
        let flags = read_u32(buf, 16);
        let f = |at: usize| f32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        let mut head = MlpHead::<f32>::new(dim, nnodes, 0)?;
        if flags & FLAG_ADAPTER != 0 {
            head = head.with_adapter();
        }
        head.eps = f(20);
        head.momentum = f(24);
        let expected = HEADER + 4 * (head.parameter_count() + 2 * nnodes);
        if body.len() != expected {
            return Err(Error::CorruptContainer(format!(
                "head body is {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut at = HEADER;
        let mut fill = |dst: &mut [f32]| {
            for v in dst {
                *v = f(at);
                at += 4;
            }
        };
        for p in head.params_mut() {
            fill(p);
        }
        fill(head.running_mean.as_slice_mut().unwrap());
        fill(head.running_var.as_slice_mut().unwrap());
        head.mode = Mode::Inference;
        Ok(head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Palm when `p >= 0.5`.
pub fn decide(p_palm: f64) -> Label {
    if p_palm >= 0.5 {
        Label::Palm
    } else {
        Label::NonPalm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Optimizer with per-parameter state laid out like [`MlpHead::params`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, head: &MlpHead<T>) -> Self {
        let zeros: Vec<Vec<T>> = head.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Optimizer {
            kind,
            lr: c(lr),
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, head: &mut MlpHead<T>, grads: &Gradients<T>) {
        self.t += 1;
        let lr = self.lr;
        let params = head.params_mut();
        let grads = grads.slices();
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (c::<T>(beta1), c::<T>(beta2), c::<T>(eps));
                let bc1 = T::one() - b1.powi(self.t);
                let bc2 = T::one() - b2.powi(self.t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = c::<T>(momentum);
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.m) {
                    for i in 0..p.len() {
                        buf[i] = mu * buf[i] + g[i];
                        p[i] = p[i] - lr * buf[i];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub nnodes: usize,
    #[serde(default)]
    pub adapter: bool,
    /// Draw training rows from augmented views when the data has them.
    #[serde(default = "yes")]
    pub augment: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// 500 epochs for fine patches, 200 for coarse, batches of 64.
    pub fn for_scale(scale: Scale, nnodes: usize) -> Self {
        TrainConfig {
            epochs: match scale {
                Scale::Fine40 => 500,
                Scale::Coarse100 => 200,
            },
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            nnodes,
            adapter: false,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !NNODES_CHOICES.contains(&self.nnodes) {
            return Err(Error::invalid(format!(
                "nnodes {} not in {NNODES_CHOICES:?}",
                self.nnodes
            )));
        }
        Ok(())
    }

    fn init_head(&self, dim: usize) -> Result<MlpHead<f32>> {
        let head = MlpHead::new(dim, self.nnodes, self.seed)?;
        Ok(if self.adapter { head.with_adapter() } else { head })
    }
}

/// Embeddings with labels; view 0 is raw, further views are augmented copies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    labels: Vec<Label>,
    views: Vec<Vec<f32>>,
}

impl FeatureSet {
    /// Single raw view from a row-major `labels.len() × dim` buffer.
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<Label>) -> Result<Self> {
        Self::with_views(dim, vec![features], labels)
    }

    pub fn with_views(dim: usize, views: Vec<Vec<f32>>, labels: Vec<Label>) -> Result<Self> {
        if dim == 0 || views.is_empty() {
            return Err(Error::invalid("feature set needs D > 0 and at least one view"));
        }
        if let Some(v) = views.iter().find(|v| v.len() != dim * labels.len()) {
            return Err(Error::invalid(format!(
                "view has {} values, expected {} x {dim}",
                v.len(),
                labels.len()
            )));
        }
        Ok(FeatureSet { dim, labels, views })
    }

    pub fn from_cache(cache: &EmbeddingCache) -> Result<Self> {
        Self::with_views(cache.dim, cache.views.clone(), cache.labels.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn row(&self, view: usize, i: usize) -> &[f32] {
        &self.views[view][i * self.dim..(i + 1) * self.dim]
    }

    /// Raw view as one row-major buffer.
    pub fn raw(&self) -> &[f32] {
        &self.views[0]
    }

    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            views: (0..self.views.len())
                .map(|v| indices.iter().flat_map(|&i| self.row(v, i)).copied().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub folds: Vec<FoldHistory>,
    pub selected_fold: usize,
    /// Zero-based epoch with the lowest validation loss.
    pub selected_epoch: usize,
    pub selected_val_loss: f64,
    #[serde(default)]
    pub final_loss: Vec<f64>,
}

/// Batches of one epoch: shuffled indices, last partial batch kept, a trailing
/// single row folded into the previous batch (batch norm needs two rows).
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, TAG_SHUFFLE, epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn pick_view(data: &FeatureSet, config: &TrainConfig, epoch: usize, item: usize) -> usize {
    let augmented = data.view_count() - 1;
    if !config.augment || augmented == 0 {
        return 0;
    }
    1 + substream(config.seed ^ TAG_VIEW, epoch as u64, item as u64).gen_range(0..augmented)
}

fn class_indices(labels: &[Label]) -> Vec<usize> {
    labels.iter().map(|l| l.class_index()).collect()
}

/// Train `head` for `epochs`, calling `on_epoch(epoch, head, train_loss)`.
fn run_epochs(
    head: &mut MlpHead<f32>,
    data: &FeatureSet,
    config: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(usize, &MlpHead<f32>, f64) -> Result<()>,
) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::invalid("training needs at least 2 items"));
    }
    head.set_mode(Mode::Training);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, head);
    let labels = class_indices(&data.labels);
    let d = data.dim();
    let mut xbuf = Vec::with_capacity(config.batch_size * d * 2);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for (bi, batch) in epoch_batches(data.len(), config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            xbuf.clear();
            for &i in batch {
                xbuf.extend_from_slice(data.row(pick_view(data, config, epoch, i), i));
            }
            let x = ArrayView2::from_shape((batch.len(), d), &xbuf).unwrap();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = head.backward_and_step(&mut opt, x, &y).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail,
                },
                e => e,
            })?;
            total += f64::from(loss) * batch.len() as f64;
        }
        on_epoch(epoch, head, total / data.len() as f64)?;
    }
    Ok(())
}

/// Mean NLL of a head in inference mode over the raw view.
pub fn evaluate_loss(head: &MlpHead<f32>, data: &FeatureSet) -> Result<f64> {
    let x = ArrayView2::from_shape((data.len(), data.dim()), data.raw())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let logp = head.forward_inference(x)?;
    Ok(f64::from(nll_loss(&logp, &class_indices(&data.labels))?))
}

/// Train a fresh head for `epochs`; returns it in inference mode with its loss curve.
pub fn train_head(data: &FeatureSet, config: &TrainConfig, epochs: usize) -> Result<(MlpHead<f32>, Vec<f64>)> {
    config.validate()?;
    let mut head = config.init_head(data.dim())?;
    let mut curve = Vec::with_capacity(epochs);
    run_epochs(&mut head, data, config, epochs, |_, _, loss| {
        curve.push(loss);
        Ok(())
    })?;
    head.set_mode(Mode::Inference);
    Ok((head, curve))
}

fn train_fold(data: &FeatureSet, val_idx: &[usize], config: &TrainConfig) -> Result<FoldHistory> {
    let train = data.select(&crate::dataset::complement(data.len(), val_idx));
    let val = data.select(val_idx);
    let mut head = config.init_head(data.dim())?;
    let mut hist = FoldHistory {
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
    };
    run_epochs(&mut head, &train, config, config.epochs, |_, head, loss| {
        let mut probe = head.clone();
        probe.set_mode(Mode::Inference);
        hist.train_loss.push(loss);
        hist.val_loss.push(evaluate_loss(&probe, &val)?);
        Ok(())
    })?;
    Ok(hist)
}

/// Global argmin over `(epoch, fold)`; ties go to the smaller epoch, then fold.
pub fn select_best(folds: &[FoldHistory]) -> Option<(usize, usize, f64)> {
    let epochs = folds.iter().map(|f| f.val_loss.len()).max()?;
    let mut best: Option<(usize, usize, f64)> = None;
    for e in 0..epochs {
        for (f, fold) in folds.iter().enumerate() {
            if let Some(&loss) = fold.val_loss.get(e) {
                if best.is_none_or(|(_, _, b)| loss < b) {
                    best = Some((f, e, loss));
                }
            }
        }
    }
    best
}

/// k-fold cross-validation over stratified folds; folds train concurrently.
pub fn cross_validate(data: &FeatureSet, k: usize, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    let folds = stratified_kfold(&data.labels, k, config.seed)?;
    let histories: Vec<FoldHistory> = folds
        .par_iter()
        .map(|val| train_fold(data, val, config))
        .collect::<Result<_>>()?;
    let (selected_fold, selected_epoch, selected_val_loss) =
        select_best(&histories).ok_or_else(|| Error::invalid("no validation losses recorded"))?;
    Ok(TrainHistory {
        config: config.clone(),
        folds: histories,
        selected_fold,
        selected_epoch,
        selected_val_loss,
        final_loss: Vec::new(),
    })
}

/// Refit on the whole training split for `selected_epoch + 1` epochs.
pub fn fit_final(data: &FeatureSet, history: &mut TrainHistory) -> Result<MlpHead<f32>> {
    let (head, curve) = train_head(data, &history.config, history.selected_epoch + 1)?;
    history.final_loss = curve;
    Ok(head)
}

/// Cross-validate, then refit.
pub fn train(data: &FeatureSet, k: usize, config: &TrainConfig) -> Result<(MlpHead<f32>, TrainHistory)> {
    let mut history = cross_validate(data, k, config)?;
    let head = fit_final(data, &mut history)?;
    Ok((head, history))
}
