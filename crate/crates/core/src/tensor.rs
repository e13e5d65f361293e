//! Dense rank-1..4 numeric arrays in a fixed NCHW layout, with the
//! elementwise, pooling, normalization, and affine primitives the network
//! needs.
//!
//! All reductions accumulate in double precision in a fixed iteration order,
//! whatever the storage dtype, so results are bitwise reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Storage scalar. Implemented for `f32` and `f64`.
pub trait Scalar: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor. Row-major, NCHW for rank-4: index (n,c,h,w) maps to offset
/// `((n*C + c)*H + h)*W + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("extents must be >= 1, got {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![T::ZERO; n])
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extent along axis `i`, or 1 when the axis is absent.
    pub fn extent(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// out[i] = max(0, x[i]).
    pub fn relu(&self) -> Tensor<T> {
        self.map(|v| if v > T::ZERO { v } else { T::ZERO })
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| T::from_f64(a.to_f64() + b.to_f64()))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Max pooling over non-overlapping or strided windows.
    /// Output extents are floor((H - win)/stride) + 1.
    pub fn max_pool2d(&self, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor<T>> {
        Ok(self.max_pool2d_with_indices(window, stride)?.0)
    }

    /// Max pooling that also reports, per output element, the flat input
    /// offset of the maximum (first occurrence wins ties).
    pub fn max_pool2d_with_indices(
        &self,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<(Tensor<T>, Vec<u32>)> {
        if self.rank() != 4 {
            return Err(Error::Shape(format!(
                "max_pool2d expects rank 4, got {:?}",
                self.shape
            )));
        }
        let (wh, ww) = window;
        let (sh, sw) = stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArg("pool window/stride must be >= 1".into()));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if wh > h || ww > w {
            return Err(Error::Shape(format!(
                "pool window {wh}x{ww} larger than input {h}x{w}"
            )));
        }
        let oh = (h - wh) / sh + 1;
        let ow = (w - ww) / sw + 1;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut idx = Vec::with_capacity(n * c * oh * ow);
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = self.data[plane + oy * sh * w + ox * sw];
                        let mut best_at = plane + oy * sh * w + ox * sw;
                        for ky in 0..wh {
                            for kx in 0..ww {
                                let at = plane + (oy * sh + ky) * w + (ox * sw + kx);
                                let v = self.data[at];
                                if v > best {
                                    best = v;
                                    best_at = at;
                                }
                            }
                        }
                        out.push(best);
                        idx.push(best_at as u32);
                    }
                }
            }
        }
        Ok((
            Tensor {
                shape: vec![n, c, oh, ow],
                data: out,
            },
            idx,
        ))
    }

    /// Mean over the spatial plane, per (n, c). Output shape (N, C, 1, 1).
    ///
    /// The mean is computed relative to the plane's first element so a
    /// constant plane reproduces that constant exactly.
    pub fn global_avg_pool2d(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::Shape(format!(
                "global_avg_pool2d expects rank 4, got {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        for ni in 0..n {
            for ci in 0..c {
                let plane = &self.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let base = plane[0].to_f64();
                let mut acc = 0.0f64;
                for &v in plane {
                    acc += v.to_f64() - base;
                }
                out.push(T::from_f64(base + acc / hw as f64));
            }
        }
        Ok(Tensor {
            shape: vec![n, c, 1, 1],
            data: out,
        })
    }

    /// out = x . weight + bias with x (N, D), weight (D, K), bias (K).
    pub fn affine(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 {
            return Err(Error::Shape(format!(
                "affine expects x rank 2, weight rank 2, bias rank 1; got {:?} {:?} {:?}",
                self.shape, weight.shape, bias.shape
            )));
        }
        let (n, d) = (self.shape[0], self.shape[1]);
        let (dw, k) = (weight.shape[0], weight.shape[1]);
        if d != dw || bias.shape[0] != k {
            return Err(Error::Shape(format!(
                "affine extents disagree: x (N,{d}), weight ({dw},{k}), bias ({})",
                bias.shape[0]
            )));
        }
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &self.data[r * d..(r + 1) * d];
            for col in 0..k {
                let mut acc = 0.0f64;
                for (i, &x) in row.iter().enumerate() {
                    acc += x.to_f64() * weight.data[i * k + col].to_f64();
                }
                out.push(T::from_f64(acc + bias.data[col].to_f64()));
            }
        }
        Ok(Tensor {
            shape: vec![n, k],
            data: out,
        })
    }

    /// Squeezes (N, C, 1, 1) to (N, C).
    pub fn squeeze_spatial(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 || self.shape[2] != 1 || self.shape[3] != 1 {
            return Err(Error::Shape(format!(
                "squeeze_spatial expects (N, C, 1, 1), got {:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: vec![self.shape[0], self.shape[1]],
            data: self.data.clone(),
        })
    }
}

/// Running statistics carried by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

fn check_bn_args<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    channels_in_state: usize,
    eps: f64,
) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "batch_norm expects rank 4, got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    if gamma.len() != c || beta.len() != c || channels_in_state != c {
        return Err(Error::Shape(format!(
            "batch_norm per-channel extents disagree: x has {c} channels, gamma {}, beta {}, state {}",
            gamma.len(),
            beta.len(),
            channels_in_state
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArg(format!("epsilon must be > 0, got {eps}")));
    }
    Ok((x.shape()[0], c, x.shape()[2], x.shape()[3]))
}

/// Per-channel mean and population (biased) variance over batch and spatial
/// axes, in fixed iteration order.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "channel_stats expects rank 4, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            let plane = x.offset4(ni, ci, 0, 0);
            for &v in &x.data()[plane..plane + h * w] {
                acc += v.to_f64();
            }
        }
        mean[ci] = acc / m;
        let mut acc2 = 0.0;
        for ni in 0..n {
            let plane = x.offset4(ni, ci, 0, 0);
            for &v in &x.data()[plane..plane + h * w] {
                let d = v.to_f64() - mean[ci];
                acc2 += d * d;
            }
        }
        var[ci] = acc2 / m;
    }
    Ok((mean, var))
}

/// Train-mode batch normalization: normalizes by the batch statistics
/// (population variance), applies gamma/beta, and folds the batch statistics
/// into `state` by exponential moving average.
///
/// Returns the output plus the per-channel batch mean and variance that the
/// backward pass needs.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = check_bn_args(x, gamma, beta, state.running_mean.len(), eps)?;
    let (mean, var) = channel_stats(x)?;
    let mut out = vec![T::ZERO; x.len()];
    for ci in 0..c {
        let g = gamma.data()[ci].to_f64();
        let b = beta.data()[ci].to_f64();
        let inv = 1.0 / (var[ci] + eps).sqrt();
        for ni in 0..n {
            let plane = x.offset4(ni, ci, 0, 0);
            for i in plane..plane + h * w {
                let xhat = (x.data()[i].to_f64() - mean[ci]) * inv;
                out[i] = T::from_f64(g * xhat + b);
            }
        }
    }
    for ci in 0..c {
        state.running_mean[ci] = (1.0 - momentum) * state.running_mean[ci] + momentum * mean[ci];
        state.running_var[ci] = (1.0 - momentum) * state.running_var[ci] + momentum * var[ci];
    }
    let shape = x.shape().to_vec();
    Ok((Tensor { shape, data: out }, mean, var))
}

/// Inference-mode batch normalization using the recorded running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_bn_args(x, gamma, beta, state.running_mean.len(), eps)?;
    let mut out = vec![T::ZERO; x.len()];
    for ci in 0..c {
        let g = gamma.data()[ci].to_f64();
        let b = beta.data()[ci].to_f64();
        let inv = 1.0 / (state.running_var[ci] + eps).sqrt();
        let mu = state.running_mean[ci];
        for ni in 0..n {
            let plane = x.offset4(ni, ci, 0, 0);
            for i in plane..plane + h * w {
                out[i] = T::from_f64(g * ((x.data()[i].to_f64() - mu) * inv) + b);
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok(Tensor { shape, data: out })
}
