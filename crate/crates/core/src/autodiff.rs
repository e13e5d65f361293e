//! Reverse-mode differentiation over a recorded tape, plus the central
//! finite-difference checker used to validate every primitive.
//!
//! The tape is define-by-run: each operation executes eagerly in double
//! precision, records what its adjoint needs, and returns a [`ValueId`].
//! Gradient accumulation at fan-out points happens in reverse node order,
//! so identical tapes produce bitwise-identical gradients.

use std::collections::BTreeMap;

use crate::conv::{conv2d, conv2d_grad, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{scce_loss, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Node {
    Leaf,
    Relu {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Sum {
        x: ValueId,
    },
    Conv2d {
        x: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        spec: ConvSpec,
    },
    Affine {
        x: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    SqueezeSpatial {
        x: ValueId,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        /// True when mean/var are the batch statistics (differentiated
        /// through); false when they are frozen running statistics.
        train_stats: bool,
    },
    SoftmaxScce {
        logits: ValueId,
        labels: Vec<usize>,
        /// Per-class loss weights; empty means unweighted (plain mean).
        class_weights: Vec<f64>,
    },
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor<f64>>,
    params: Vec<(String, ValueId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, node: Node, value: Tensor<f64>) -> ValueId {
        self.nodes.push(node);
        self.values.push(value);
        ValueId(self.nodes.len() - 1)
    }

    /// A constant or input: participates in the graph but is not reported
    /// as a parameter.
    pub fn leaf(&mut self, value: Tensor<f64>) -> ValueId {
        self.push(Node::Leaf, value)
    }

    /// A named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor<f64>) -> Result<ValueId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArg(format!("duplicate parameter {name:?}")));
        }
        let id = self.push(Node::Leaf, value);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<f64> {
        &self.values[id.0]
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.values[x.0].relu();
        self.push(Node::Relu { x }, v)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(Node::Add { a, b }, v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Node::Mul { a, b }, v))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let mut acc = 0.0f64;
        for &v in self.values[x.0].data() {
            acc += v;
        }
        self.push(Node::Sum { x }, Tensor::scalar(acc))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        spec: ConvSpec,
    ) -> Result<ValueId> {
        let v = conv2d(
            &self.values[x.0],
            &self.values[kernel.0],
            bias.map(|b| &self.values[b.0]),
            &spec,
        )?;
        Ok(self.push(Node::Conv2d { x, kernel, bias, spec }, v))
    }

    pub fn affine(&mut self, x: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let v = self.values[x.0].affine(&self.values[weight.0], &self.values[bias.0])?;
        Ok(self.push(Node::Affine { x, weight, bias }, v))
    }

    pub fn max_pool2d(
        &mut self,
        x: ValueId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<ValueId> {
        let (v, argmax) = self.values[x.0].max_pool2d_with_indices(window, stride)?;
        Ok(self.push(Node::MaxPool { x, argmax }, v))
    }

    pub fn global_avg_pool2d(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.values[x.0].global_avg_pool2d()?;
        Ok(self.push(Node::GlobalAvgPool { x }, v))
    }

    pub fn squeeze_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.values[x.0].squeeze_spatial()?;
        Ok(self.push(Node::SqueezeSpatial { x }, v))
    }

    /// Batch normalization with explicit statistics. When `train_stats` is
    /// true the statistics must be the batch's own mean/variance and the
    /// adjoint differentiates through them; otherwise they are treated as
    /// constants (running statistics).
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        train_stats: bool,
    ) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.rank() != 4 {
            return Err(Error::Shape(format!(
                "batch_norm expects rank 4, got {:?}",
                xv.shape()
            )));
        }
        let c = xv.shape()[1];
        if mean.len() != c
            || var.len() != c
            || self.values[gamma.0].len() != c
            || self.values[beta.0].len() != c
        {
            return Err(Error::Shape(format!(
                "batch_norm per-channel extents disagree for {c} channels"
            )));
        }
        let (n, h, w) = (xv.shape()[0], xv.shape()[2], xv.shape()[3]);
        let mut out = vec![0.0f64; xv.len()];
        for ci in 0..c {
            let g = self.values[gamma.0].data()[ci];
            let b = self.values[beta.0].data()[ci];
            let inv = 1.0 / (var[ci] + eps).sqrt();
            for ni in 0..n {
                let plane = xv.offset4(ni, ci, 0, 0);
                for i in plane..plane + h * w {
                    out[i] = g * ((xv.data()[i] - mean[ci]) * inv) + b;
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Node::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train_stats,
            },
            v,
        ))
    }

    /// Fused softmax + mean sparse categorical cross-entropy, producing a
    /// 1-element tensor.
    pub fn softmax_scce(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        self.softmax_scce_weighted(logits, labels, None)
    }

    /// Like [`softmax_scce`](Self::softmax_scce) but with optional per-class
    /// weights: loss = Σ w(yᵣ)·(−log pᵣ) / Σ w(yᵣ).
    pub fn softmax_scce_weighted(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<ValueId> {
        let lv = &self.values[logits.0];
        let probs = softmax(lv)?;
        let c = lv.shape()[1];
        let loss = match class_weights {
            None => scce_loss(&probs, labels)?,
            Some(w) => {
                if w.len() != c {
                    return Err(Error::Shape(format!(
                        "{} class weights for {c} classes",
                        w.len()
                    )));
                }
                if probs.shape()[0] != labels.len() {
                    return Err(Error::Shape(format!(
                        "{} labels for batch of {}",
                        labels.len(),
                        probs.shape()[0]
                    )));
                }
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for (r, &label) in labels.iter().enumerate() {
                    if label >= c {
                        return Err(Error::InvalidArg(format!(
                            "label {label} out of range for {c} classes"
                        )));
                    }
                    let p = probs.data()[r * c + label].max(1e-12);
                    num += w[label] * -p.ln();
                    den += w[label];
                }
                if den <= 0.0 {
                    return Err(Error::InvalidArg(
                        "class weights must have positive total over the batch".into(),
                    ));
                }
                num / den
            }
        };
        Ok(self.push(
            Node::SoftmaxScce {
                logits,
                labels: labels.to_vec(),
                class_weights: class_weights.map(|w| w.to_vec()).unwrap_or_default(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from `output`, seeded with `seed_grad` (shaped like the
    /// output value). Returns gradients for every node; parameters the
    /// output does not depend on get zeros.
    pub fn backward(&self, output: ValueId, seed_grad: &Tensor<f64>) -> Result<Gradients> {
        if seed_grad.shape() != self.values[output.0].shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed_grad.shape(),
                self.values[output.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed_grad.clone());

        for i in (0..=output.0).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i] {
                Node::Leaf => {}
                Node::Relu { x } => {
                    let xv = &self.values[x.0];
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Node::Mul { a, b } => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    let da = vb
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gi)| y * gi)
                        .collect();
                    let db = va
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| x * gi)
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), da)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vb.shape().to_vec(), db)?)?;
                }
                Node::Sum { x } => {
                    let gv = g.data()[0];
                    let xv = &self.values[x.0];
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::filled(xv.shape().to_vec(), gv)?,
                    )?;
                }
                Node::Conv2d { x, kernel, bias, spec } => {
                    let (ig, kg, bg) =
                        conv2d_grad(&self.values[x.0], &self.values[kernel.0], spec, &g)?;
                    accumulate(&mut grads, *x, ig)?;
                    accumulate(&mut grads, *kernel, kg)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, bg)?;
                    }
                }
                Node::Affine { x, weight, bias } => {
                    let xv = &self.values[x.0];
                    let wv = &self.values[weight.0];
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let k = wv.shape()[1];
                    let mut dx = vec![0.0f64; n * d];
                    let mut dw = vec![0.0f64; d * k];
                    let mut db = vec![0.0f64; k];
                    for r in 0..n {
                        for c in 0..k {
                            let gv = g.data()[r * k + c];
                            db[c] += gv;
                            for i in 0..d {
                                dx[r * d + i] += gv * wv.data()[i * k + c];
                                dw[i * k + c] += gv * xv.data()[r * d + i];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, d], dx)?)?;
                    accumulate(&mut grads, *weight, Tensor::new(vec![d, k], dw)?)?;
                    accumulate(&mut grads, *bias, Tensor::new(vec![k], db)?)?;
                }
                Node::MaxPool { x, argmax } => {
                    let xv = &self.values[x.0];
                    let mut dx = vec![0.0f64; xv.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g.data()[o];
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Node::GlobalAvgPool { x } => {
                    let xv = &self.values[x.0];
                    let (n, c, h, w) = (
                        xv.shape()[0],
                        xv.shape()[1],
                        xv.shape()[2],
                        xv.shape()[3],
                    );
                    let hw = (h * w) as f64;
                    let mut dx = vec![0.0f64; xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g.data()[ni * c + ci] / hw;
                            let plane = xv.offset4(ni, ci, 0, 0);
                            for d in dx[plane..plane + h * w].iter_mut() {
                                *d = gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Node::SqueezeSpatial { x } => {
                    let xv = &self.values[x.0];
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), g.data().to_vec())?,
                    )?;
                }
                Node::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    train_stats,
                } => {
                    let xv = &self.values[x.0];
                    let (n, c, h, w) = (
                        xv.shape()[0],
                        xv.shape()[1],
                        xv.shape()[2],
                        xv.shape()[3],
                    );
                    let m = (n * h * w) as f64;
                    let mut dx = vec![0.0f64; xv.len()];
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for ci in 0..c {
                        let inv = 1.0 / (var[ci] + eps).sqrt();
                        let gam = self.values[gamma.0].data()[ci];
                        // s1 = Σ g, s2 = Σ g·x̂ over the channel.
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for ni in 0..n {
                            let plane = xv.offset4(ni, ci, 0, 0);
                            for i in plane..plane + h * w {
                                let xhat = (xv.data()[i] - mean[ci]) * inv;
                                s1 += g.data()[i];
                                s2 += g.data()[i] * xhat;
                            }
                        }
                        dbeta[ci] = s1;
                        dgamma[ci] = s2;
                        for ni in 0..n {
                            let plane = xv.offset4(ni, ci, 0, 0);
                            for i in plane..plane + h * w {
                                if *train_stats {
                                    let xhat = (xv.data()[i] - mean[ci]) * inv;
                                    dx[i] = gam * inv * (g.data()[i] - s1 / m - xhat * s2 / m);
                                } else {
                                    dx[i] = gam * inv * g.data()[i];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?)?;
                }
                Node::SoftmaxScce {
                    logits,
                    labels,
                    class_weights,
                } => {
                    let lv = &self.values[logits.0];
                    let (n, c) = (lv.shape()[0], lv.shape()[1]);
                    let probs = softmax(lv)?;
                    let gv = g.data()[0];
                    let mut dl = probs.into_data();
                    for (r, &label) in labels.iter().enumerate() {
                        dl[r * c + label] -= 1.0;
                    }
                    if class_weights.is_empty() {
                        for d in dl.iter_mut() {
                            *d *= gv / n as f64;
                        }
                    } else {
                        let den: f64 = labels.iter().map(|&l| class_weights[l]).sum();
                        for (r, &label) in labels.iter().enumerate() {
                            let scale = gv * class_weights[label] / den;
                            for d in dl[r * c..(r + 1) * c].iter_mut() {
                                *d *= scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![n, c], dl)?)?;
                }
            }
        }

        let shapes = self.values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes,
        })
    }
}

fn accumulate(
    grads: &mut [Option<Tensor<f64>>],
    id: ValueId,
    g: Tensor<f64>,
) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot => *slot = Some(g),
    }
    Ok(())
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
    params: Vec<(String, ValueId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient at any tape value, if the output depends on it.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient per named parameter; parameters the output does not reach
    /// get zero tensors of the parameter's shape.
    pub fn param_grads(&self) -> Result<BTreeMap<String, Tensor<f64>>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &self.grads[id.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.shapes[id.0].clone())?,
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Max relative errors between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    /// "name[index]" of the worst element, empty when there are no params.
    pub worst: String,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Checks `f`'s analytic gradients against central finite differences
/// (f(p+h) − f(p−h)) / 2h, elementwise over every parameter.
///
/// `f` must build its computation on the given tape from the parameter ids
/// (supplied in the same order as `params`) and return a scalar output.
pub fn gradient_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    step: f64,
) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArg(format!(
            "step must be in [1e-7, 1e-3], got {step}"
        )));
    }
    let eval = |vals: &[Tensor<f64>]| -> Result<(Tape, ValueId, Vec<ValueId>)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(vals.len());
        for ((name, _), v) in params.iter().zip(vals) {
            ids.push(tape.param(name, v.clone())?);
        }
        let out = f(&mut tape, &ids)?;
        if tape.value(out).len() != 1 {
            return Err(Error::InvalidArg(format!(
                "objective must be scalar, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok((tape, out, ids))
    };

    let base_vals: Vec<Tensor<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let (tape, out, _) = eval(&base_vals)?;
    let analytic = tape.backward(out, &Tensor::scalar(1.0))?.param_grads()?;

    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (pi, (name, _)) in params.iter().enumerate() {
        let a = &analytic[name];
        let mut param_max = 0.0f64;
        for e in 0..a.len() {
            let mut plus = base_vals.clone();
            plus[pi].data_mut()[e] += step;
            let mut minus = base_vals.clone();
            minus[pi].data_mut()[e] -= step;
            let (tp, op, _) = eval(&plus)?;
            let (tm, om, _) = eval(&minus)?;
            let fd = (tp.value(op).data()[0] - tm.value(om).data()[0]) / (2.0 * step);
            let err = rel_error(a.data()[e], fd);
            if err > param_max {
                param_max = err;
            }
            if err > max_rel {
                max_rel = err;
                worst = format!("{name}[{e}]");
            }
        }
        per_param.insert(name.clone(), param_max);
    }
    Ok(GradientReport {
        per_param,
        max_rel_error: max_rel,
        worst,
    })
}
