//! Saliency methods: activation maps, Grad-CAM, RISE and LIME, plus the
//! PGM/PPM renderings the CLI writes.
//!
//! Every method returns a [`SaliencyMap`] normalized to `[0, 1]` with the raw
//! range recorded; a flat raw map normalizes to all zeros and is flagged
//! degenerate. All sampling draws from named sub-streams of the run seed, so
//! results are reproducible bit for bit.

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::resnet::{Mode, Network};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::softmax;
use crate::Tape;

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub method: String,
    /// Class the explanation targets; `None` for class-free activation maps.
    pub target_class: Option<usize>,
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub raw_min: f64,
    pub raw_max: f64,
    /// Raw map was flat; `values` is all zeros.
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn from_raw(
        method: &str,
        target_class: Option<usize>,
        width: usize,
        height: usize,
        raw: Vec<f64>,
    ) -> SaliencyMap {
        let (values, raw_min, raw_max, degenerate) = normalize(raw);
        SaliencyMap {
            method: method.to_string(),
            target_class,
            width,
            height,
            values,
            raw_min,
            raw_max,
            degenerate,
        }
    }
}

/// Min-max normalize; a flat input maps to all zeros with the degenerate flag.
fn normalize(raw: Vec<f64>) -> (Vec<f64>, f64, f64, bool) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if !(span > 1e-12) {
        let n = raw.len();
        return (vec![0.0; n], lo, hi, true);
    }
    let values = raw.iter().map(|&v| (v - lo) / span).collect();
    (values, lo, hi, false)
}

/// Bilinear upsample of a scalar field with half-pixel centers — the same
/// alignment the image resizer uses, kept in f64.
pub fn resize_field(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = vec![0.0; out_w * out_h];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * tx;
            let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * tx;
            out[oy * out_w + ox] = top + (bot - top) * ty;
        }
    }
    out
}

fn check_single(x: &Tensor<f64>) -> Result<(usize, usize)> {
    if x.rank() != 4 || x.extent(0) != 1 {
        return Err(Error::InvalidArg(format!(
            "explanations take one image (1,C,H,W), got {:?}",
            x.shape()
        )));
    }
    Ok((x.extent(2), x.extent(3)))
}

// ---------------------------------------------------------------------------
// Activation map.

/// Channel-mean of a captured activation, rectified, upsampled to the input
/// size and normalized. `layer` defaults to the last residual output.
pub fn activation_map(net: &Network, x: &Tensor<f64>, layer: Option<&str>) -> Result<SaliencyMap> {
    let (in_h, in_w) = check_single(x)?;
    let trace = net.forward(x, true, Mode::Infer)?;
    let name = layer.unwrap_or("last_conv");
    let act = trace.activations.get(name).ok_or_else(|| {
        let mut have: Vec<&String> = trace.activations.keys().collect();
        have.sort();
        Error::InvalidArg(format!("no activation {name:?}; have {have:?}"))
    })?;
    let (c, h, w) = (act.extent(1), act.extent(2), act.extent(3));
    let mut raw = vec![0.0; h * w];
    for (i, r) in raw.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ci in 0..c {
            acc += act.data()[ci * h * w + i];
        }
        *r = (acc / c as f64).max(0.0);
    }
    let up = resize_field(&raw, w, h, in_w, in_h);
    Ok(SaliencyMap::from_raw("activation", None, in_w, in_h, up))
}

// ---------------------------------------------------------------------------
// Grad-CAM.

/// The Grad-CAM combination: per-channel weights are the spatial means of the
/// gradient, the map is the rectified weighted sum of activation channels.
pub fn gradcam_core(activation: &Tensor<f64>, grad: &Tensor<f64>) -> Result<Vec<f64>> {
    if activation.shape() != grad.shape() || activation.rank() != 4 {
        return Err(Error::Shape(format!(
            "activation {:?} and gradient {:?} must be equal rank-4 shapes",
            activation.shape(),
            grad.shape()
        )));
    }
    let (c, h, w) = (activation.extent(1), activation.extent(2), activation.extent(3));
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for ci in 0..c {
        let g = &grad.data()[ci * plane..(ci + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        let a = &activation.data()[ci * plane..(ci + 1) * plane];
        for (cv, &av) in cam.iter_mut().zip(a) {
            *cv += alpha * av;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    Ok(cam)
}

/// Grad-CAM against the last residual output, in inference mode (frozen
/// batch-norm statistics).
pub fn gradcam(net: &Network, x: &Tensor<f64>, class: usize) -> Result<SaliencyMap> {
    let (in_h, in_w) = check_single(x)?;
    if class >= net.arch.class_count {
        return Err(Error::InvalidArg(format!(
            "class {class} out of range 0..{}",
            net.arch.class_count
        )));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let tf = net.forward_taped(&mut tape, xid, Mode::Infer, true)?;
    let target = tf.named["last_conv"];

    let mut seed = Tensor::zeros(tape.value(tf.logits).shape().to_vec())?;
    seed.data_mut()[class] = 1.0;
    let grads = tape.backward(tf.logits, &seed)?;
    let grad = grads
        .wrt(target)
        .ok_or_else(|| Error::Numeric("no gradient reached the last conv".into()))?;
    let act = tape.value(target);

    let (h, w) = (act.extent(2), act.extent(3));
    let cam = gradcam_core(act, grad)?;
    let up = resize_field(&cam, w, h, in_w, in_h);
    Ok(SaliencyMap::from_raw("gradcam", Some(class), in_w, in_h, up))
}

// ---------------------------------------------------------------------------
// RISE.

#[derive(Debug, Clone)]
pub struct RiseConfig {
    /// Number of random masks.
    pub mask_count: usize,
    /// Side of the coarse Bernoulli grid.
    pub grid: usize,
    /// Probability a grid cell stays on.
    pub keep_prob: f64,
}

impl Default for RiseConfig {
    fn default() -> RiseConfig {
        RiseConfig { mask_count: 4000, grid: 7, keep_prob: 0.5 }
    }
}

impl RiseConfig {
    fn validate(&self) -> Result<()> {
        if self.mask_count == 0 || self.grid == 0 {
            return Err(Error::InvalidArg("mask count and grid must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::InvalidArg(format!(
                "keep probability {} outside (0, 1)",
                self.keep_prob
            )));
        }
        Ok(())
    }
}

/// Bilinear upsample of a `g`x`g` cell grid to `out_h`x`out_w`, with the
/// sample lattice shifted by `(jy, jx)` grid cells (each in `[0, 1)`). Border
/// cells clamp, so values stay inside the grid's range.
pub fn upsample_shifted(
    grid: &[f64],
    g: usize,
    out_h: usize,
    out_w: usize,
    jy: f64,
    jx: f64,
) -> Vec<f64> {
    let sy = g as f64 / out_h as f64;
    let sx = g as f64 / out_w as f64;
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5 + jy).clamp(0.0, (g - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(g - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5 + jx).clamp(0.0, (g - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(g - 1);
            let tx = fx - x0 as f64;
            let top = grid[y0 * g + x0] + (grid[y0 * g + x1] - grid[y0 * g + x0]) * tx;
            let bot = grid[y1 * g + x0] + (grid[y1 * g + x1] - grid[y1 * g + x0]) * tx;
            out[y * out_w + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// Draw the full mask set for a run: Bernoulli grids, upsampled with a random
/// sub-cell shift per mask.
pub fn generate_rise_masks(
    cfg: &RiseConfig,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "rise");
    let g = cfg.grid;
    let mut masks = Vec::with_capacity(cfg.mask_count);
    for _ in 0..cfg.mask_count {
        let mut grid = vec![0.0; g * g];
        for cell in grid.iter_mut() {
            if rng.gen::<f64>() < cfg.keep_prob {
                *cell = 1.0;
            }
        }
        let jy: f64 = rng.gen::<f64>();
        let jx: f64 = rng.gen::<f64>();
        masks.push(upsample_shifted(&grid, g, h, w, jy, jx));
    }
    Ok(masks)
}

/// The RISE estimator: `S = (1/(p·N)) Σ score_i · M_i`, accumulated in mask
/// order.
pub fn rise_accumulate(
    masks: &[Vec<f64>],
    scores: &[f64],
    keep_prob: f64,
    pixels: usize,
) -> Result<Vec<f64>> {
    if masks.len() != scores.len() || masks.is_empty() {
        return Err(Error::InvalidArg(
            "need equally many masks and scores, at least one".into(),
        ));
    }
    let mut sal = vec![0.0; pixels];
    for (mask, &score) in masks.iter().zip(scores) {
        if mask.len() != pixels {
            return Err(Error::Shape(format!(
                "mask has {} pixels, want {pixels}",
                mask.len()
            )));
        }
        for (s, &m) in sal.iter_mut().zip(mask) {
            *s += score * m;
        }
    }
    let norm = keep_prob * masks.len() as f64;
    for s in sal.iter_mut() {
        *s /= norm;
    }
    Ok(sal)
}

/// RISE with an arbitrary batched scorer (one score per masked image).
pub fn rise_with_scorer<F>(
    x: &Tensor<f64>,
    cfg: &RiseConfig,
    seed: u64,
    mut score_batch: F,
) -> Result<SaliencyMap>
where
    F: FnMut(&Tensor<f64>) -> Result<Vec<f64>>,
{
    let (h, w) = check_single(x)?;
    let masks = generate_rise_masks(cfg, h, w, seed)?;
    let c = x.extent(1);
    let plane = h * w;

    let mut scores = Vec::with_capacity(masks.len());
    const CHUNK: usize = 32;
    for chunk in masks.chunks(CHUNK) {
        let b = chunk.len();
        let mut batch = Tensor::zeros(vec![b, c, h, w])?;
        for (bi, mask) in chunk.iter().enumerate() {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    batch.data_mut()[base + i] = x.data()[ci * plane + i] * mask[i];
                }
            }
        }
        let got = score_batch(&batch)?;
        if got.len() != b {
            return Err(Error::InvalidArg(format!(
                "scorer returned {} scores for a batch of {b}",
                got.len()
            )));
        }
        scores.extend(got);
    }

    let raw = rise_accumulate(&masks, &scores, cfg.keep_prob, plane)?;
    Ok(SaliencyMap::from_raw("rise", None, w, h, raw))
}

/// RISE scored by the network's softmax probability of `class`.
pub fn rise(
    net: &Network,
    x: &Tensor<f64>,
    class: usize,
    cfg: &RiseConfig,
    seed: u64,
) -> Result<SaliencyMap> {
    if class >= net.arch.class_count {
        return Err(Error::InvalidArg(format!(
            "class {class} out of range 0..{}",
            net.arch.class_count
        )));
    }
    let mut map = rise_with_scorer(x, cfg, seed, |batch| class_probs(net, batch, class))?;
    map.target_class = Some(class);
    Ok(map)
}

fn class_probs(net: &Network, batch: &Tensor<f64>, class: usize) -> Result<Vec<f64>> {
    let trace = net.forward(batch, false, Mode::Infer)?;
    let probs = softmax(&trace.logits)?;
    let k = probs.extent(1);
    Ok((0..probs.extent(0))
        .map(|r| probs.data()[r * k + class])
        .collect())
}

// ---------------------------------------------------------------------------
// LIME.

#[derive(Debug, Clone)]
pub struct LimeConfig {
    /// Side of the superpixel grid (`grid`² segments).
    pub grid: usize,
    /// Number of perturbed samples; must be at least the segment count.
    pub samples: usize,
    /// Width of the exponential proximity kernel.
    pub kernel_width: f64,
    /// Ridge penalty on segment weights (the intercept is not penalized).
    pub ridge: f64,
}

impl Default for LimeConfig {
    fn default() -> LimeConfig {
        LimeConfig { grid: 7, samples: 300, kernel_width: 0.25, ridge: 1e-4 }
    }
}

impl LimeConfig {
    fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::InvalidArg("grid must be positive".into()));
        }
        if self.samples < self.grid * self.grid {
            return Err(Error::InvalidArg(format!(
                "{} samples cannot cover {} segments",
                self.samples,
                self.grid * self.grid
            )));
        }
        if !(self.kernel_width > 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::InvalidArg(
                "kernel width must be positive and ridge non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-segment linear weights from a LIME fit. Segment `s` covers grid cell
/// `(s / grid, s % grid)`.
#[derive(Debug, Clone)]
pub struct LimeExplanation {
    pub grid: usize,
    pub target_class: Option<usize>,
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl LimeExplanation {
    /// Segments by descending weight (ties keep the lower index first).
    pub fn ranked(&self) -> Vec<(usize, f64)> {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| {
            self.weights[b]
                .partial_cmp(&self.weights[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.into_iter().map(|s| (s, self.weights[s])).collect()
    }

    /// `segment,row,col,weight` rows in segment order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("segment,row,col,weight\n");
        for (i, wgt) in self.weights.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", i, i / self.grid, i % self.grid, wgt));
        }
        s
    }

    /// Paint positive weights onto the image plane (negatives clip to zero
    /// for display; `weights` keeps them).
    pub fn saliency(&self, width: usize, height: usize) -> SaliencyMap {
        let g = self.grid;
        let mut raw = vec![0.0; width * height];
        for (s, &wgt) in self.weights.iter().enumerate() {
            let (r, c) = (s / g, s % g);
            let (x0, x1) = (c * width / g, (c + 1) * width / g);
            let (y0, y1) = (r * height / g, (r + 1) * height / g);
            for y in y0..y1 {
                for x in x0..x1 {
                    raw[y * width + x] = wgt.max(0.0);
                }
            }
        }
        let mut map = SaliencyMap::from_raw("lime", self.target_class, width, height, raw);
        map.target_class = self.target_class;
        map
    }
}

/// Weighted ridge regression with intercept: minimizes
/// `Σ w_i (y_i - b0 - z_i·β)² + λ|β|²`. Returns `(β, b0)`.
pub fn lime_fit(
    presence: &[Vec<f64>],
    scores: &[f64],
    sample_weights: &[f64],
    ridge: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = presence.len();
    if n == 0 || n != scores.len() || n != sample_weights.len() {
        return Err(Error::InvalidArg(
            "presence, scores and weights must be equally many".into(),
        ));
    }
    let s = presence[0].len();
    let d = s + 1; // intercept first
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut row = vec![0.0; d];
    for i in 0..n {
        if presence[i].len() != s {
            return Err(Error::InvalidArg("ragged presence matrix".into()));
        }
        row[0] = 1.0;
        row[1..].copy_from_slice(&presence[i]);
        let wi = sample_weights[i];
        for p in 0..d {
            let wp = wi * row[p];
            for q in 0..d {
                a[p * d + q] += wp * row[q];
            }
            b[p] += wp * scores[i];
        }
    }
    for p in 1..d {
        a[p * d + p] += ridge;
    }
    let sol = solve_dense(&mut a, &mut b, d)?;
    Ok((sol[1..].to_vec(), sol[0]))
}

/// Gaussian elimination with partial pivoting on a dense `n`x`n` system.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular system in linear fit".into()));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col * n + c] * x[c];
        }
        x[col] = acc / a[col * n + col];
    }
    Ok(x)
}

/// Sample presence vectors: the first is all-ones, the rest are fair coin
/// flips per segment.
pub fn lime_presence_samples(segments: usize, samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "lime");
    let mut out = Vec::with_capacity(samples);
    out.push(vec![1.0; segments]);
    for _ in 1..samples {
        out.push((0..segments).map(|_| f64::from(rng.gen::<bool>())).collect());
    }
    out
}

/// LIME with an arbitrary batched scorer.
pub fn lime_with_scorer<F>(
    x: &Tensor<f64>,
    cfg: &LimeConfig,
    seed: u64,
    mut score_batch: F,
) -> Result<LimeExplanation>
where
    F: FnMut(&Tensor<f64>) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let (h, w) = check_single(x)?;
    let g = cfg.grid;
    if g > h || g > w {
        return Err(Error::InvalidArg(format!(
            "{g}x{g} segments do not fit a {h}x{w} image"
        )));
    }
    let segments = g * g;
    let c = x.extent(1);
    let plane = h * w;

    // Disabled segments fall back to the image's mean color.
    let mut mean = vec![0.0; c];
    for (ci, m) in mean.iter_mut().enumerate() {
        *m = x.data()[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64;
    }

    let presence = lime_presence_samples(segments, cfg.samples, seed);
    let mut scores = Vec::with_capacity(cfg.samples);
    const CHUNK: usize = 32;
    for chunk in presence.chunks(CHUNK) {
        let b = chunk.len();
        let mut batch = Tensor::zeros(vec![b, c, h, w])?;
        for (bi, z) in chunk.iter().enumerate() {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for y in 0..h {
                    for xx in 0..w {
                        let seg = (y * g / h) * g + (xx * g / w);
                        let i = y * w + xx;
                        batch.data_mut()[base + i] = if z[seg] == 1.0 {
                            x.data()[ci * plane + i]
                        } else {
                            mean[ci]
                        };
                    }
                }
            }
        }
        scores.extend(score_batch(&batch)?);
    }
    if scores.len() != presence.len() {
        return Err(Error::InvalidArg("scorer returned a wrong batch size".into()));
    }

    // Proximity to the unperturbed image: normalized Hamming distance through
    // an exponential kernel.
    let kernel: Vec<f64> = presence
        .iter()
        .map(|z| {
            let off = z.iter().filter(|&&v| v == 0.0).count() as f64 / segments as f64;
            (-off * off / (cfg.kernel_width * cfg.kernel_width)).exp()
        })
        .collect();

    let (weights, intercept) = lime_fit(&presence, &scores, &kernel, cfg.ridge)?;
    Ok(LimeExplanation {
        grid: g,
        target_class: None,
        intercept,
        weights,
    })
}

/// LIME scored by the network's softmax probability of `class`.
pub fn lime(
    net: &Network,
    x: &Tensor<f64>,
    class: usize,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<LimeExplanation> {
    if class >= net.arch.class_count {
        return Err(Error::InvalidArg(format!(
            "class {class} out of range 0..{}",
            net.arch.class_count
        )));
    }
    let mut exp = lime_with_scorer(x, cfg, seed, |batch| class_probs(net, batch, class))?;
    exp.target_class = Some(class);
    Ok(exp)
}

// ---------------------------------------------------------------------------
// Rendering.

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Grayscale rendering: 255·value, rounded half-up.
pub fn to_pgm(map: &SaliencyMap) -> Image {
    let data = map.values.iter().map(|&v| quantize(v)).collect();
    Image::gray(map.width, map.height, data).expect("map dimensions are valid")
}

/// Black→red→yellow→white heat ramp.
fn heat(v: f64) -> [f64; 3] {
    [
        (3.0 * v).clamp(0.0, 1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Equal blend of the image and the heat-colored map, rounded half-up.
pub fn overlay_ppm(map: &SaliencyMap, img: &Image) -> Result<Image> {
    if img.width() != map.width || img.height() != map.height {
        return Err(Error::InvalidArg(format!(
            "overlay size mismatch: image {}x{}, map {}x{}",
            img.width(),
            img.height(),
            map.width,
            map.height
        )));
    }
    let (w, h) = (map.width, map.height);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let hv = heat(map.at(x, y));
            for (c, &hc) in hv.iter().enumerate() {
                let src = if img.channels() == 3 {
                    img.at(x, y, c)
                } else {
                    img.at(x, y, 0)
                } as f64;
                data.push((0.5 * src + 0.5 * 255.0 * hc + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::rgb(w, h, data)
}
