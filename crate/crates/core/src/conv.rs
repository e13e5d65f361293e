//! 2-D convolution (normal and dilated), its gradients, and the closed-form
//! geometry calculators: output extents, effective kernel, receptive field.
//!
//! Convention: cross-correlation (no kernel flip), zero padding, isotropic
//! dilation. Accumulation is always f64 in a fixed order — for every output
//! element the taps are summed over (channel, row, col) sequentially and the
//! bias is added last — so results are bitwise reproducible and independent
//! of the internal blocking.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of one convolution (or pooling) layer. Channel counts live in
/// the kernel tensor, not here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    /// Dilation factor l, applied to both axes. 1 means normal convolution.
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        dilation: usize,
    ) -> Result<Self> {
        let s = Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            dilation,
        };
        s.validate()?;
        Ok(s)
    }

    /// Square kernel, equal strides and pads on both axes.
    pub fn square(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Result<Self> {
        Self::new((kernel, kernel), (stride, stride), (pad, pad), dilation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArg("kernel extents must be >= 1".into()));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::InvalidArg("strides must be >= 1".into()));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidArg("dilation must be >= 1".into()));
        }
        Ok(())
    }

    /// k_eff = k + (k - 1)(l - 1) per axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.kernel_h + (self.kernel_h - 1) * (self.dilation - 1),
            self.kernel_w + (self.kernel_w - 1) * (self.dilation - 1),
        )
    }
}

/// Per-layer geometry. `receptive_field` and `jump` are measured in input
/// pixels of the *first* layer when produced by [`receptive_field_of_network`];
/// for a single layer they reduce to the effective kernel and the stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub output_h: usize,
    pub output_w: usize,
    pub effective_kernel: (usize, usize),
    pub receptive_field: (usize, usize),
    pub jump: (usize, usize),
}

fn out_extent(input: usize, k_eff: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if k_eff > padded {
        return Err(Error::Shape(format!(
            "effective kernel {k_eff} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k_eff) / stride + 1)
}

/// Closed-form geometry of a single layer applied to an input of the given
/// spatial extents.
pub fn layer_geometry(input_hw: (usize, usize), spec: &ConvSpec) -> Result<LayerGeometry> {
    spec.validate()?;
    let (keh, kew) = spec.effective_kernel();
    Ok(LayerGeometry {
        output_h: out_extent(input_hw.0, keh, spec.stride_h, spec.pad_h)?,
        output_w: out_extent(input_hw.1, kew, spec.stride_w, spec.pad_w)?,
        effective_kernel: (keh, kew),
        receptive_field: (keh, kew),
        jump: (spec.stride_h, spec.stride_w),
    })
}

/// Composes the receptive-field recurrence through a stack of layers:
/// rf' = rf + (k_eff − 1)·jump, jump' = jump·stride, starting from rf = 1
/// and jump = 1 at the network input. Pooling layers participate as specs
/// with dilation 1. Returns one geometry per layer, in order.
pub fn receptive_field_of_network(
    input_hw: (usize, usize),
    layers: &[ConvSpec],
) -> Result<Vec<LayerGeometry>> {
    if layers.is_empty() {
        return Err(Error::InvalidArg("empty layer list".into()));
    }
    let (mut h, mut w) = input_hw;
    let (mut rf_h, mut rf_w) = (1usize, 1usize);
    let (mut j_h, mut j_w) = (1usize, 1usize);
    let mut out = Vec::with_capacity(layers.len());
    for spec in layers {
        spec.validate()?;
        let (keh, kew) = spec.effective_kernel();
        h = out_extent(h, keh, spec.stride_h, spec.pad_h)?;
        w = out_extent(w, kew, spec.stride_w, spec.pad_w)?;
        rf_h += (keh - 1) * j_h;
        rf_w += (kew - 1) * j_w;
        j_h *= spec.stride_h;
        j_w *= spec.stride_w;
        out.push(LayerGeometry {
            output_h: h,
            output_w: w,
            effective_kernel: (keh, kew),
            receptive_field: (rf_h, rf_w),
            jump: (j_h, j_w),
        });
    }
    Ok(out)
}

/// Expands a kernel to its dilated footprint: inserts l−1 zero rows/columns
/// between taps, producing a (Cout, Cin, k_eff_h, k_eff_w) kernel that is
/// equivalent under dilation 1.
pub fn spread_kernel<T: Scalar>(kernel: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    if kernel.rank() != 4 {
        return Err(Error::Shape(format!(
            "spread_kernel expects rank 4, got {:?}",
            kernel.shape()
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidArg("dilation must be >= 1".into()));
    }
    let (co, ci, kh, kw) = dims4(kernel);
    let keh = kh + (kh - 1) * (dilation - 1);
    let kew = kw + (kw - 1) * (dilation - 1);
    let mut out = Tensor::zeros(vec![co, ci, keh, kew])?;
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = out.offset4(o, i, ky * dilation, kx * dilation);
                    out.data_mut()[dst] = kernel.at4(o, i, ky, kx);
                }
            }
        }
    }
    Ok(out)
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    (t.extent(0), t.extent(1), t.extent(2), t.extent(3))
}

fn check_conv_args<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<LayerGeometry> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if kernel.extent(1) != input.extent(1) {
        return Err(Error::Shape(format!(
            "channel mismatch: input has {}, kernel expects {}",
            input.extent(1),
            kernel.extent(1)
        )));
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.len() != kernel.extent(0) {
            return Err(Error::Shape(format!(
                "bias must be rank 1 with {} entries, got {:?}",
                kernel.extent(0),
                b.shape()
            )));
        }
    }
    layer_geometry((input.extent(2), input.extent(3)), spec)
}

/// Output positions processed per microkernel panel. Eight independent f64
/// accumulator chains let the compiler use SIMD lanes without reassociating
/// any single output's sum.
const LANES: usize = 8;

/// out(n,co,t,u) = bias(co) + Σ_ci Σ_τ Σ_φ x(n,ci, t·s + l·τ − pad, u·s + l·φ − pad) · g(co,ci,τ,φ)
/// with x treated as zero outside its bounds.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let geom = check_conv_args(input, kernel, bias, spec)?;
    let (n, cin, _, _) = dims4(input);
    let (cout, _, kh, kw) = dims4(kernel);
    let (oh, ow) = (geom.output_h, geom.output_w);
    let p = oh * ow;
    let k_len = cin * kh * kw;
    let n_panels = (p + LANES - 1) / LANES;

    let wf: Vec<f64> = kernel.data().iter().map(|v| v.to_f64()).collect();
    let bf: Vec<f64> = match bias {
        Some(b) => b.data().iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; cout],
    };

    let mut col = vec![0.0f64; n_panels * k_len * LANES];
    let mut out = vec![T::ZERO; n * cout * p];

    for ni in 0..n {
        gather_panels(input, ni, spec, (oh, ow), &mut col);
        for co in 0..cout {
            let wrow = &wf[co * k_len..(co + 1) * k_len];
            let b = bf[co];
            let out_plane = &mut out[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            for pi in 0..n_panels {
                let block = &col[pi * k_len * LANES..(pi + 1) * k_len * LANES];
                let mut acc = [0.0f64; LANES];
                for (t, &wv) in wrow.iter().enumerate() {
                    let c = &block[t * LANES..t * LANES + LANES];
                    for l in 0..LANES {
                        acc[l] += wv * c[l];
                    }
                }
                let base = pi * LANES;
                let take = LANES.min(p - base);
                for (l, &a) in acc.iter().enumerate().take(take) {
                    out_plane[base + l] = T::from_f64(a + b);
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Fills `col` with the patches for image `ni`, interleaved so that tap `t`
/// of the eight positions in panel `pi` sits at `col[(pi·K + t)·8 + lane]`.
/// Out-of-bounds (padding) taps and tail lanes are zero.
fn gather_panels<T: Scalar>(
    x: &Tensor<T>,
    ni: usize,
    spec: &ConvSpec,
    out_hw: (usize, usize),
    col: &mut [f64],
) {
    let (_, cin, h, w) = dims4(x);
    let (oh, ow) = out_hw;
    let p = oh * ow;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let l = spec.dilation;
    let n_panels = (p + LANES - 1) / LANES;
    col.fill(0.0);
    let data = x.data();
    let mut ys = [0isize; LANES];
    let mut xs = [0isize; LANES];
    for pi in 0..n_panels {
        let take = LANES.min(p - pi * LANES);
        for lane in 0..take {
            let pos = pi * LANES + lane;
            ys[lane] = (pos / ow * spec.stride_h) as isize - spec.pad_h as isize;
            xs[lane] = (pos % ow * spec.stride_w) as isize - spec.pad_w as isize;
        }
        let block = &mut col[pi * k_len_of(cin, kh, kw) * LANES..];
        let mut t = 0usize;
        for ci in 0..cin {
            let chan = x.offset4(ni, ci, 0, 0);
            for ky in 0..kh {
                let dy = (ky * l) as isize;
                for kx in 0..kw {
                    let dx = (kx * l) as isize;
                    let row = &mut block[t * LANES..t * LANES + LANES];
                    for lane in 0..take {
                        let y = ys[lane] + dy;
                        let xx = xs[lane] + dx;
                        if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                            row[lane] = data[chan + y as usize * w + xx as usize].to_f64();
                        }
                    }
                    t += 1;
                }
            }
        }
    }
}

fn k_len_of(cin: usize, kh: usize, kw: usize) -> usize {
    cin * kh * kw
}

/// Gradients of Σ(upstream ⊙ conv2d(input, kernel, ·, spec)) with respect to
/// input, kernel, and bias.
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let geom = check_conv_args(input, kernel, None, spec)?;
    let (n, cin, _, _) = dims4(input);
    let (cout, _, kh, kw) = dims4(kernel);
    let (oh, ow) = (geom.output_h, geom.output_w);
    if upstream.shape() != [n, cout, oh, ow] {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match conv output ({n}, {cout}, {oh}, {ow})",
            upstream.shape()
        )));
    }
    let p = oh * ow;
    let k_len = cin * kh * kw;

    let wf: Vec<f64> = kernel.data().iter().map(|v| v.to_f64()).collect();
    let mut ig = vec![0.0f64; input.len()];
    let mut kg = vec![0.0f64; kernel.len()];
    let mut bg = vec![0.0f64; cout];

    // Position-major patch matrix: tap t of position pos at colt[pos·K + t].
    let mut colt = vec![0.0f64; p * k_len];
    let mut dcol = vec![0.0f64; p * k_len];

    for ni in 0..n {
        gather_positions(input, ni, spec, (oh, ow), &mut colt);
        dcol.fill(0.0);
        for co in 0..cout {
            let wrow = &wf[co * k_len..(co + 1) * k_len];
            let up_plane = &upstream.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            let krow = &mut kg[co * k_len..(co + 1) * k_len];
            let mut bacc = 0.0f64;
            for (pos, uv) in up_plane.iter().enumerate() {
                let uv = uv.to_f64();
                bacc += uv;
                if uv == 0.0 {
                    continue;
                }
                let crow = &colt[pos * k_len..(pos + 1) * k_len];
                let drow = &mut dcol[pos * k_len..(pos + 1) * k_len];
                for t in 0..k_len {
                    krow[t] += uv * crow[t];
                    drow[t] += uv * wrow[t];
                }
            }
            bg[co] += bacc;
        }
        scatter_positions(&dcol, ni, spec, (oh, ow), cin, &mut ig, input.shape());
    }

    let to_tensor = |shape: &[usize], v: Vec<f64>| {
        Tensor::new(shape.to_vec(), v.into_iter().map(T::from_f64).collect())
    };
    Ok((
        to_tensor(input.shape(), ig)?,
        to_tensor(kernel.shape(), kg)?,
        to_tensor(&[cout], bg)?,
    ))
}

fn gather_positions<T: Scalar>(
    x: &Tensor<T>,
    ni: usize,
    spec: &ConvSpec,
    out_hw: (usize, usize),
    colt: &mut [f64],
) {
    let (_, cin, h, w) = dims4(x);
    let (oh, ow) = out_hw;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let l = spec.dilation;
    let k_len = cin * kh * kw;
    colt.fill(0.0);
    let data = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut colt[(oy * ow + ox) * k_len..(oy * ow + ox + 1) * k_len];
            let y0 = (oy * spec.stride_h) as isize - spec.pad_h as isize;
            let x0 = (ox * spec.stride_w) as isize - spec.pad_w as isize;
            let mut t = 0usize;
            for ci in 0..cin {
                let chan = x.offset4(ni, ci, 0, 0);
                for ky in 0..kh {
                    let y = y0 + (ky * l) as isize;
                    if y < 0 || y as usize >= h {
                        t += kw;
                        continue;
                    }
                    let base = chan + y as usize * w;
                    for kx in 0..kw {
                        let xx = x0 + (kx * l) as isize;
                        if xx >= 0 && (xx as usize) < w {
                            row[t] = data[base + xx as usize].to_f64();
                        }
                        t += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of `gather_positions`: adds each patch-matrix entry back into the
/// input pixel it was read from, skipping padding.
fn scatter_positions(
    dcol: &[f64],
    ni: usize,
    spec: &ConvSpec,
    out_hw: (usize, usize),
    cin: usize,
    ig: &mut [f64],
    in_shape: &[usize],
) {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = out_hw;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let l = spec.dilation;
    let k_len = cin * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcol[(oy * ow + ox) * k_len..(oy * ow + ox + 1) * k_len];
            let y0 = (oy * spec.stride_h) as isize - spec.pad_h as isize;
            let x0 = (ox * spec.stride_w) as isize - spec.pad_w as isize;
            let mut t = 0usize;
            for ci in 0..cin {
                let chan = (ni * cin + ci) * h * w;
                for ky in 0..kh {
                    let y = y0 + (ky * l) as isize;
                    if y < 0 || y as usize >= h {
                        t += kw;
                        continue;
                    }
                    let base = chan + y as usize * w;
                    for kx in 0..kw {
                        let xx = x0 + (kx * l) as isize;
                        if xx >= 0 && (xx as usize) < w {
                            ig[base + xx as usize] += row[t];
                        }
                        t += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<T: crate::tensor::Scalar>(shape: &[usize], v: &[f64]) -> Tensor<T> {
        Tensor::from_f64s(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn scalar_product() {
        let x = t::<f64>(&[1, 1, 1, 1], &[2.0]);
        let k = t::<f64>(&[1, 1, 1, 1], &[3.0]);
        let spec = ConvSpec::square(1, 1, 0, 1).unwrap();
        let y = conv2d(&x, &k, None, &spec).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn diagonal_two_by_two_kernel() {
        let x = t::<f64>(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = t::<f64>(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let spec = ConvSpec::square(2, 1, 0, 1).unwrap();
        let y = conv2d(&x, &k, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn dilated_taps_skip_rows_and_cols() {
        let vals: Vec<f64> = (0..25).map(|i| (i / 5 * 5 + i % 5) as f64).collect();
        let x = t::<f64>(&[1, 1, 5, 5], &vals);
        let k = Tensor::<f64>::filled(vec![1, 1, 3, 3], 1.0).unwrap();
        let spec = ConvSpec::square(3, 1, 0, 2).unwrap();
        let y = conv2d(&x, &k, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[108.0]);
    }

    #[test]
    fn bias_is_added_once_per_output() {
        let x = Tensor::<f64>::filled(vec![1, 1, 3, 3], 1.0).unwrap();
        let k = Tensor::<f64>::filled(vec![2, 1, 3, 3], 1.0).unwrap();
        let b = t::<f64>(&[2], &[10.0, -10.0]);
        let spec = ConvSpec::square(3, 1, 1, 1).unwrap();
        let y = conv2d(&x, &k, Some(&b), &spec).unwrap();
        // Center output of channel 0: 9 ones + 10.
        assert_eq!(y.at4(0, 0, 1, 1), 19.0);
        assert_eq!(y.at4(0, 1, 1, 1), -1.0);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 3, 3]).unwrap();
        let k = Tensor::<f64>::zeros(vec![1, 3, 2, 2]).unwrap();
        let spec = ConvSpec::square(2, 1, 0, 1).unwrap();
        assert!(conv2d(&x, &k, None, &spec).is_err());
    }

    #[test]
    fn oversized_effective_kernel_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]).unwrap();
        let k = Tensor::<f64>::zeros(vec![1, 1, 3, 3]).unwrap();
        // k_eff = 5 > 4 with no padding.
        let spec = ConvSpec::square(3, 1, 0, 2).unwrap();
        assert!(conv2d(&x, &k, None, &spec).is_err());
        // pad 1 makes the padded extent 6.
        let spec = ConvSpec::square(3, 1, 1, 2).unwrap();
        assert!(conv2d(&x, &k, None, &spec).is_ok());
    }

    #[test]
    fn geometry_examples() {
        let g = layer_geometry((224, 224), &ConvSpec::square(7, 2, 3, 1).unwrap()).unwrap();
        assert_eq!((g.output_h, g.output_w), (112, 112));

        let s = ConvSpec::square(3, 1, 3, 3).unwrap();
        assert_eq!(s.effective_kernel(), (7, 7));
        let g = layer_geometry((14, 14), &s).unwrap();
        assert_eq!((g.output_h, g.output_w), (14, 14));
    }

    #[test]
    fn receptive_field_recurrence() {
        let one = vec![ConvSpec::square(3, 1, 1, 1).unwrap()];
        let g = receptive_field_of_network((32, 32), &one).unwrap();
        assert_eq!(g[0].receptive_field, (3, 3));
        assert_eq!(g[0].jump, (1, 1));

        let two = vec![
            ConvSpec::square(3, 1, 1, 1).unwrap(),
            ConvSpec::square(3, 1, 1, 1).unwrap(),
        ];
        let g = receptive_field_of_network((32, 32), &two).unwrap();
        assert_eq!(g[1].receptive_field, (5, 5));
    }

    #[test]
    fn receptive_field_monotone_over_random_stacks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let depth = rng.gen_range(1..6);
            let mut layers = Vec::new();
            for _ in 0..depth {
                let k = rng.gen_range(1..4);
                let l = rng.gen_range(1..3);
                layers.push(ConvSpec::square(k, rng.gen_range(1..3), 3, l).unwrap());
            }
            let gs = receptive_field_of_network((64, 64), &layers).unwrap();
            let mut prev = (1, 1);
            for g in gs {
                assert!(g.receptive_field.0 >= prev.0 && g.receptive_field.1 >= prev.1);
                prev = g.receptive_field;
            }
        }
    }

    #[test]
    fn geometry_matches_actual_output_shape() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let h = rng.gen_range(1..12);
            let w = rng.gen_range(1..12);
            let kh = rng.gen_range(1..4);
            let kw = rng.gen_range(1..4);
            let spec = ConvSpec::new(
                (kh, kw),
                (rng.gen_range(1..3), rng.gen_range(1..3)),
                (rng.gen_range(0..3), rng.gen_range(0..3)),
                rng.gen_range(1..4),
            )
            .unwrap();
            let x = Tensor::<f64>::zeros(vec![1, 1, h, w]).unwrap();
            let k = Tensor::<f64>::zeros(vec![2, 1, kh, kw]).unwrap();
            match layer_geometry((h, w), &spec) {
                Ok(g) => {
                    let y = conv2d(&x, &k, None, &spec).unwrap();
                    assert_eq!(y.shape(), &[1, 2, g.output_h, g.output_w]);
                }
                Err(_) => assert!(conv2d(&x, &k, None, &spec).is_err()),
            }
        }
    }

    #[test]
    fn spread_kernel_places_taps_at_multiples() {
        let k = t::<f64>(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = spread_kernel(&k, 3).unwrap();
        assert_eq!(s.shape(), &[1, 1, 4, 4]);
        assert_eq!(s.at4(0, 0, 0, 0), 1.0);
        assert_eq!(s.at4(0, 0, 0, 3), 2.0);
        assert_eq!(s.at4(0, 0, 3, 0), 3.0);
        assert_eq!(s.at4(0, 0, 3, 3), 4.0);
        let nonzero = s.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn grad_zero_upstream_gives_zero_grads() {
        let x = Tensor::<f64>::filled(vec![1, 2, 4, 4], 0.7).unwrap();
        let k = Tensor::<f64>::filled(vec![3, 2, 3, 3], 0.3).unwrap();
        let spec = ConvSpec::square(3, 1, 1, 1).unwrap();
        let up = Tensor::<f64>::zeros(vec![1, 3, 4, 4]).unwrap();
        let (ig, kg, bg) = conv2d_grad(&x, &k, &spec, &up).unwrap();
        assert!(ig.data().iter().all(|&v| v == 0.0));
        assert!(kg.data().iter().all(|&v| v == 0.0));
        assert!(bg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_scalar_case() {
        let x = t::<f64>(&[1, 1, 1, 1], &[2.0]);
        let k = t::<f64>(&[1, 1, 1, 1], &[3.0]);
        let spec = ConvSpec::square(1, 1, 0, 1).unwrap();
        let up = t::<f64>(&[1, 1, 1, 1], &[1.0]);
        let (ig, kg, bg) = conv2d_grad(&x, &k, &spec, &up).unwrap();
        assert_eq!(ig.data(), &[3.0]);
        assert_eq!(kg.data(), &[2.0]);
        assert_eq!(bg.data(), &[1.0]);
    }

    #[test]
    fn grad_matches_finite_differences_small() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &l in &[1usize, 2, 3] {
            let x_vals: Vec<f64> = (0..2 * 2 * 7 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k_vals: Vec<f64> = (0..3 * 2 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = t::<f64>(&[2, 2, 7, 7], &x_vals);
            let k = t::<f64>(&[3, 2, 2, 2], &k_vals);
            let spec = ConvSpec::square(2, 1, l, l).unwrap();
            let y = conv2d(&x, &k, None, &spec).unwrap();
            let up_vals: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let up = t::<f64>(y.shape(), &up_vals);
            let (ig, kg, _) = conv2d_grad(&x, &k, &spec, &up).unwrap();

            let objective = |xv: &[f64], kv: &[f64]| -> f64 {
                let x = t::<f64>(&[2, 2, 7, 7], xv);
                let k = t::<f64>(&[3, 2, 2, 2], kv);
                let y = conv2d(&x, &k, None, &spec).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for probe in [0, 17, 95] {
                let mut plus = x_vals.clone();
                let mut minus = x_vals.clone();
                plus[probe] += h;
                minus[probe] -= h;
                let fd = (objective(&plus, &k_vals) - objective(&minus, &k_vals)) / (2.0 * h);
                assert!(
                    (fd - ig.data()[probe]).abs() < 1e-6,
                    "input grad l={l} idx={probe}: fd {fd} vs {}",
                    ig.data()[probe]
                );
            }
            for probe in [0, 11, 23] {
                let mut plus = k_vals.clone();
                let mut minus = k_vals.clone();
                plus[probe] += h;
                minus[probe] -= h;
                let fd = (objective(&x_vals, &plus) - objective(&x_vals, &minus)) / (2.0 * h);
                assert!(
                    (fd - kg.data()[probe]).abs() < 1e-6,
                    "kernel grad l={l} idx={probe}: fd {fd} vs {}",
                    kg.data()[probe]
                );
            }
        }
    }
}
