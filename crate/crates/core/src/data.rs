//! Image I/O (binary PPM/PGM), bilinear resize, dataset manifests, stratified
//! splits and the synthetic fundus-style corpus used for smoke training.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::rng;
use crate::tensor::Tensor;

/// Fixed label order. Index into this array is the class id used everywhere.
pub const CLASS_NAMES: [&str; 8] = [
    "normal",
    "cataract",
    "diabetic retinopathy",
    "glaucoma",
    "AMD",
    "myopia",
    "hypertension",
    "other abnormalities",
];

pub const CLASS_COUNT: usize = CLASS_NAMES.len();

/// 8-bit raster, interleaved row-major. `channels` is 1 (gray) or 3 (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArg("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArg(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        let want = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArg("image size overflows".into()))?;
        if data.len() != want {
            return Err(Error::InvalidArg(format!(
                "expected {} bytes for {}x{}x{}, got {}",
                want,
                width,
                height,
                channels,
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Image> {
        Image::new(width, height, 3, data)
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Image> {
        Image::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

// ---------------------------------------------------------------------------
// Netpbm codecs (binary P6 / P5, maxval 255).

struct PnmCursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> PnmCursor<'a> {
    fn skip_space(&mut self) {
        while self.at < self.bytes.len() {
            let b = self.bytes[self.at];
            if b.is_ascii_whitespace() {
                self.at += 1;
            } else if b == b'#' {
                while self.at < self.bytes.len() && self.bytes[self.at] != b'\n' {
                    self.at += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.at;
        while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_digit() {
            self.at += 1;
        }
        if self.at == start {
            return Err(Error::Decode(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode(format!("bad {what} in header")))
    }
}

fn decode_pnm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Decode(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut cur = PnmCursor { bytes, at: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Decode(format!("unsupported maxval {maxval}, want 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.at >= bytes.len() || !bytes[cur.at].is_ascii_whitespace() {
        return Err(Error::Decode("missing separator after maxval".into()));
    }
    cur.at += 1;
    if width == 0 || height == 0 {
        return Err(Error::Decode("zero image dimension".into()));
    }
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Decode("image size overflows".into()))?;
    let raster = &bytes[cur.at..];
    if raster.len() < want {
        return Err(Error::Decode(format!(
            "truncated raster: want {want} bytes, have {}",
            raster.len()
        )));
    }
    if raster.len() > want {
        return Err(Error::Decode(format!(
            "trailing bytes after raster: want {want}, have {}",
            raster.len()
        )));
    }
    Image::new(width, height, channels, raster.to_vec()).map_err(|e| Error::Decode(e.to_string()))
}

/// Decode a binary PPM (P6).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    decode_pnm(bytes, b"P6", 3)
}

/// Decode a binary PGM (P5).
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    decode_pnm(bytes, b"P5", 1)
}

/// Decode by magic: P6 -> RGB, P5 -> gray.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    match bytes.get(..2) {
        Some(b"P6") => decode_ppm(bytes),
        Some(b"P5") => decode_pgm(bytes),
        _ => Err(Error::Decode("not a binary PPM/PGM (want P6 or P5)".into())),
    }
}

/// Encode with the canonical header `P6\n<w> <h>\n255\n` (P5 for gray).
pub fn encode_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{}\n{} {}\n255\n", magic, img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_image(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_image(img))
}

// ---------------------------------------------------------------------------
// Resize.

/// Bilinear resize with half-pixel centers: the source coordinate of output
/// pixel `i` is `(i + 0.5) * in/out - 0.5`, clamped to the valid range.
/// Interpolation runs in f64 and results round half-up to u8.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArg("resize target must be positive".into()));
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut data = vec![0u8; out_w * out_h * ch];
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
            for c in 0..ch {
                let p00 = img.at(x0, y0, c) as f64;
                let p10 = img.at(x1, y0, c) as f64;
                let p01 = img.at(x0, y1, c) as f64;
                let p11 = img.at(x1, y1, c) as f64;
                let top = p00 + (p10 - p00) * tx;
                let bot = p01 + (p11 - p01) * tx;
                let v = top + (bot - top) * ty;
                data[(oy * out_w + ox) * ch + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(out_w, out_h, ch, data)
}

/// Normalize to `[0,1]` as an NCHW tensor with batch 1. Gray images are
/// replicated across the three channels.
pub fn to_tensor(img: &Image) -> Tensor<f64> {
    let (w, h) = (img.width, img.height);
    let mut t = Tensor::zeros(vec![1, 3, h, w]).expect("valid shape");
    for c in 0..3 {
        let src = if img.channels == 3 { c } else { 0 };
        for y in 0..h {
            for x in 0..w {
                let v = img.at(x, y, src) as f64 / 255.0;
                t.data_mut()[(c * h + y) * w + x] = v;
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Manifests.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,label\n");
        for e in &self.entries {
            s.push_str(&format!("{},{}\n", e.path, e.label));
        }
        s
    }

    /// Count of entries per class.
    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0usize; CLASS_COUNT];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Pick one label from a multi-label row: the first disease in class order
/// wins; `normal` only survives when it is the sole label.
pub fn reduce_labels(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::InvalidArg("empty label set".into()));
    }
    for &l in labels {
        if l >= CLASS_COUNT {
            return Err(Error::InvalidArg(format!(
                "label {l} out of range 0..{CLASS_COUNT}"
            )));
        }
    }
    Ok(labels.iter().copied().filter(|&l| l != 0).min().unwrap_or(0))
}

/// Parse manifest CSV. Header must be `path,label`. The label field is either
/// one class index or several separated by `;` (reduced via [`reduce_labels`]).
/// Paths must be unique. Errors carry 1-based line numbers.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == "path,label" => {}
        Some((_, h)) => {
            return Err(Error::Manifest {
                line: 1,
                msg: format!("bad header {h:?}, want \"path,label\""),
            })
        }
        None => return Err(Error::Manifest { line: 1, msg: "empty manifest".into() }),
    }
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        // Split on the last comma so paths containing commas survive.
        let (path, label_field) = row.rsplit_once(',').ok_or(Error::Manifest {
            line,
            msg: "missing label column".into(),
        })?;
        if path.is_empty() {
            return Err(Error::Manifest { line, msg: "empty path".into() });
        }
        let mut labels = Vec::new();
        for piece in label_field.split(';') {
            let l: usize = piece.trim().parse().map_err(|_| Error::Manifest {
                line,
                msg: format!("bad label {piece:?}"),
            })?;
            labels.push(l);
        }
        let label = reduce_labels(&labels).map_err(|e| Error::Manifest {
            line,
            msg: e.to_string(),
        })?;
        if !seen.insert(path.to_string()) {
            return Err(Error::Manifest {
                line,
                msg: format!("duplicate path {path:?}"),
            });
        }
        entries.push(ManifestEntry { path: path.to_string(), label });
    }
    Ok(Manifest { entries })
}

/// Load a manifest; relative image paths are kept as written (callers resolve
/// them against the manifest's directory).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_manifest(&text)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(path, manifest.to_csv().as_bytes())
}

/// Stratified split: per class, entries are shuffled with the seeded `split`
/// stream and the first `floor(fraction * n)` go to the first half. Every
/// entry lands in exactly one half.
pub fn split(manifest: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArg(format!(
            "split fraction {fraction} outside [0, 1]"
        )));
    }
    let mut rng = rng::stream(seed, "split");
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..CLASS_COUNT {
        let mut idx: Vec<usize> = (0..manifest.entries.len())
            .filter(|&i| manifest.entries[i].label == class)
            .collect();
        // Fisher-Yates, in-order draws from the shared stream.
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let take = (fraction * idx.len() as f64).floor() as usize;
        for (k, &i) in idx.iter().enumerate() {
            if k < take {
                first.push(manifest.entries[i].clone());
            } else {
                second.push(manifest.entries[i].clone());
            }
        }
    }
    Ok((Manifest { entries: first }, Manifest { entries: second }))
}

// ---------------------------------------------------------------------------
// Synthetic corpus.

/// Parameters for the generated corpus. Class `k` plants a colored disc in
/// region `k` of a 3x3 grid (the center cell stays empty) over a noisy,
/// vessel-textured background.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub per_class: usize,
    /// Peak brightness added by the class disc.
    pub disc_brightness: f64,
    /// Dark vessel-like strokes drawn per image.
    pub stroke_count: usize,
    /// 3x3 box blur passes applied at the end.
    pub blur_passes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 64,
            per_class: 100,
            disc_brightness: 170.0,
            stroke_count: 6,
            blur_passes: 1,
            seed: 0,
        }
    }
}

/// Distinct disc colors, one per class (unit mix per channel).
const DISC_COLORS: [[f64; 3]; CLASS_COUNT] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, 0.2],
    [0.2, 1.0, 1.0],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 0.6, 0.2],
    [1.0, 0.4, 0.6],
];

/// Grid cell that class `k` occupies: 3x3 cells in row-major order with the
/// center skipped.
fn class_cell(class: usize) -> (usize, usize) {
    let slot = if class < 4 { class } else { class + 1 };
    (slot % 3, slot / 3)
}

/// Pixel bounds `(x0, y0, x1, y1)` of the class region, end-exclusive.
pub fn class_region(image_size: usize, class: usize) -> (usize, usize, usize, usize) {
    let (cx, cy) = class_cell(class);
    let x0 = cx * image_size / 3;
    let y0 = cy * image_size / 3;
    let x1 = (cx + 1) * image_size / 3;
    let y1 = (cy + 1) * image_size / 3;
    (x0, y0, x1, y1)
}

/// Render one corpus image. Deterministic in `(spec.seed, class, index)`.
pub fn synthesize(spec: &SyntheticSpec, class: usize, index: usize) -> Result<Image> {
    if class >= CLASS_COUNT {
        return Err(Error::InvalidArg(format!("class {class} out of range")));
    }
    if spec.image_size < 16 {
        return Err(Error::InvalidArg("image_size must be at least 16".into()));
    }
    let s = spec.image_size;
    let mut rng = rng::stream(spec.seed, &format!("synth.c{class}.i{index}"));
    let mut buf = vec![0f64; s * s * 3];

    // Reddish fundus-like background with per-pixel noise.
    let base = [62.0, 34.0, 24.0];
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let n: f64 = rng.gen_range(-12.0..12.0);
                buf[(y * s + x) * 3 + c] = base[c] + n;
            }
        }
    }

    // Vessel strokes: short dark random walks.
    for _ in 0..spec.stroke_count {
        let mut x = rng.gen_range(0.0..s as f64);
        let mut y = rng.gen_range(0.0..s as f64);
        let mut dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let steps = rng.gen_range(s / 2..s + s / 2);
        for _ in 0..steps {
            dir += rng.gen_range(-0.35..0.35);
            x += dir.cos();
            y += dir.sin();
            let (xi, yi) = (x.round() as isize, y.round() as isize);
            if xi < 0 || yi < 0 || xi >= s as isize || yi >= s as isize {
                break;
            }
            let p = (yi as usize * s + xi as usize) * 3;
            buf[p] -= 28.0;
            buf[p + 1] -= 18.0;
            buf[p + 2] -= 10.0;
        }
    }

    // Class disc with smooth falloff, jittered inside its grid cell.
    let (x0, y0, x1, y1) = class_region(s, class);
    let cell = (x1 - x0).min(y1 - y0) as f64;
    let radius = cell * rng.gen_range(0.30..0.38);
    let jitter = cell * 0.12;
    let cx = (x0 + x1) as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = (y0 + y1) as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let color = DISC_COLORS[class];
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let r2 = radius * radius;
            if d2 < r2 {
                let fall = 1.0 - d2 / r2;
                for c in 0..3 {
                    buf[(y * s + x) * 3 + c] += spec.disc_brightness * color[c] * fall;
                }
            }
        }
    }

    for _ in 0..spec.blur_passes {
        box_blur3(&mut buf, s, s);
    }

    let data = buf
        .iter()
        .map(|&v| (v + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    Image::rgb(s, s, data)
}

/// In-place 3x3 box blur with edge clamp, per channel.
fn box_blur3(buf: &mut [f64], w: usize, h: usize) {
    let src = buf.to_vec();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        acc += src[(sy * w + sx) * 3 + c];
                    }
                }
                buf[(y * w + x) * 3 + c] = acc / 9.0;
            }
        }
    }
}

/// Write the full corpus (`c<class>_<index>.ppm` plus `manifest.csv`) into
/// `dir` and return the manifest. Regenerating with the same spec produces
/// byte-identical files.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for class in 0..CLASS_COUNT {
        for index in 0..spec.per_class {
            let img = synthesize(spec, class, index)?;
            let name = format!("c{class}_{index:04}.ppm");
            save_image(&dir.join(&name), &img)?;
            entries.push(ManifestEntry { path: name, label: class });
        }
    }
    let manifest = Manifest { entries };
    save_manifest(&dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

/// Mean intensity (all channels) inside each class region; the fixed
/// brightest-region rule `argmax_k mean_k` doubles as a quality gate for the
/// corpus in tests.
pub fn region_means(img: &Image) -> [f64; CLASS_COUNT] {
    let mut means = [0.0; CLASS_COUNT];
    for (class, mean) in means.iter_mut().enumerate() {
        let (x0, y0, x1, y1) = class_region(img.width, class);
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..img.channels {
                    acc += img.at(x, y, c) as f64;
                    n += 1;
                }
            }
        }
        *mean = acc / n as f64;
    }
    means
}

/// Load every manifest entry as a normalized tensor batch, resizing to
/// `side` x `side`. Paths resolve against `root`.
pub fn load_dataset(root: &Path, manifest: &Manifest, side: usize) -> Result<crate::train::Dataset> {
    if manifest.is_empty() {
        return Err(Error::InvalidArg("empty manifest".into()));
    }
    let n = manifest.len();
    let mut images = Tensor::zeros(vec![n, 3, side, side])?;
    let mut labels = Vec::with_capacity(n);
    let plane = 3 * side * side;
    for (i, e) in manifest.entries.iter().enumerate() {
        let img = load_image(&root.join(&e.path))?;
        let img = if img.width() == side && img.height() == side {
            img
        } else {
            resize_bilinear(&img, side, side)?
        };
        let t = to_tensor(&img);
        images.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(t.data());
        labels.push(e.label);
    }
    crate::train::Dataset::new(images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let img = Image::rgb(3, 2, (0u8..18).collect()).unwrap();
        let bytes = encode_image(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_image(&back), bytes);
    }

    #[test]
    fn pgm_roundtrip_is_bit_exact() {
        let img = Image::gray(4, 3, (10u8..22).collect()).unwrap();
        let bytes = encode_image(&img);
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn decoder_accepts_comments_and_odd_whitespace() {
        let mut bytes = b"P6 # a comment\n# another\n 2\t1 # width height\n255 ".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn decoder_rejects_garbage() {
        assert!(decode_ppm(b"P5\n1 1\n255\nx").is_err()); // wrong magic for ppm
        assert!(decode_ppm(b"P6\n1 1\n65535\n..").is_err()); // maxval
        assert!(decode_ppm(b"P6\n2 2\n255\nxx").is_err()); // truncated
        let mut long = b"P6\n1 1\n255\n".to_vec();
        long.extend_from_slice(&[0; 10]);
        assert!(decode_ppm(&long).is_err()); // trailing bytes
        assert!(decode_image(b"BM...").is_err());
    }

    #[test]
    fn resize_average_example() {
        let img = Image::gray(2, 2, vec![0, 0, 10, 10]).unwrap();
        let out = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(out.data(), &[5]);
    }

    #[test]
    fn resize_upsample_example() {
        let img = Image::gray(2, 1, vec![0, 10]).unwrap();
        let out = resize_bilinear(&img, 4, 1).unwrap();
        // Half-pixel sources -0.25, 0.25, 0.75, 1.25 -> clamp -> 0, 2.5, 7.5, 10.
        assert_eq!(out.data(), &[0, 3, 8, 10]);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = Image::rgb(5, 4, (0u8..60).collect()).unwrap();
        let out = resize_bilinear(&img, 5, 4).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn tensor_conversion_scales_and_replicates() {
        let img = Image::gray(2, 1, vec![0, 255]).unwrap();
        let t = to_tensor(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        for c in 0..3 {
            assert_eq!(t.data()[c * 2], 0.0);
            assert_eq!(t.data()[c * 2 + 1], 1.0);
        }
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let m = parse_manifest("path,label\na.ppm,0\nb.ppm,7\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].label, 7);
        assert_eq!(parse_manifest(&m.to_csv()).unwrap(), m);

        let err = parse_manifest("path,label\na.ppm,9\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        let err = parse_manifest("path,label\nnolabel\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }));
        let err = parse_manifest("wrong,header\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
        let err = parse_manifest("path,label\na.ppm,1\na.ppm,2\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }));
    }

    #[test]
    fn manifest_path_may_contain_commas() {
        let m = parse_manifest("path,label\ndir,with,commas/x.ppm,3\n").unwrap();
        assert_eq!(m.entries[0].path, "dir,with,commas/x.ppm");
        assert_eq!(m.entries[0].label, 3);
    }

    #[test]
    fn multilabel_rows_reduce_to_first_disease() {
        assert_eq!(reduce_labels(&[0]).unwrap(), 0);
        assert_eq!(reduce_labels(&[0, 3, 2]).unwrap(), 2);
        assert_eq!(reduce_labels(&[5]).unwrap(), 5);
        assert_eq!(reduce_labels(&[7, 0]).unwrap(), 7);
        assert!(reduce_labels(&[]).is_err());
        assert!(reduce_labels(&[8]).is_err());

        let m = parse_manifest("path,label\na.ppm,0;4;1\n").unwrap();
        assert_eq!(m.entries[0].label, 1);
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let mut entries = Vec::new();
        for class in 0..CLASS_COUNT {
            for i in 0..10 {
                entries.push(ManifestEntry { path: format!("c{class}_{i}.ppm"), label: class });
            }
        }
        let m = Manifest { entries };
        let (train, test) = split(&m, 0.8, 42).unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 16);
        assert_eq!(train.class_counts(), [8; CLASS_COUNT]);
        assert_eq!(test.class_counts(), [2; CLASS_COUNT]);

        // Partition: every path exactly once across both halves.
        let mut all: Vec<&str> = train
            .entries
            .iter()
            .chain(test.entries.iter())
            .map(|e| e.path.as_str())
            .collect();
        all.sort_unstable();
        let mut want: Vec<String> = m.entries.iter().map(|e| e.path.clone()).collect();
        want.sort_unstable();
        assert_eq!(all, want.iter().map(|s| s.as_str()).collect::<Vec<_>>());

        // Same seed, same split; different seed, (almost surely) different.
        let (train2, _) = split(&m, 0.8, 42).unwrap();
        assert_eq!(train, train2);
        let (train3, _) = split(&m, 0.8, 43).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn split_fraction_bounds() {
        let m = parse_manifest("path,label\na.ppm,0\n").unwrap();
        assert!(split(&m, -0.1, 0).is_err());
        assert!(split(&m, 1.5, 0).is_err());
        let (a, b) = split(&m, 1.0, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 0));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SyntheticSpec { per_class: 2, ..SyntheticSpec::default() };
        let a = synthesize(&spec, 3, 1).unwrap();
        let b = synthesize(&spec, 3, 1).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&spec, 3, 0).unwrap();
        assert_ne!(a, c);
        let d = synthesize(&SyntheticSpec { seed: 9, ..spec }, 3, 1).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn regions_tile_without_center() {
        let mut seen = std::collections::HashSet::new();
        for class in 0..CLASS_COUNT {
            let r = class_region(64, class);
            assert!(seen.insert(r));
            assert_ne!(r, (21, 21, 42, 42), "center cell must stay free");
        }
    }

    #[test]
    fn brightest_region_identifies_the_class() {
        let spec = SyntheticSpec { per_class: 12, ..SyntheticSpec::default() };
        let mut hits = 0usize;
        let mut total = 0usize;
        for class in 0..CLASS_COUNT {
            for index in 0..spec.per_class {
                let img = synthesize(&spec, class, index).unwrap();
                let means = region_means(&img);
                let best = (0..CLASS_COUNT)
                    .max_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap())
                    .unwrap();
                hits += usize::from(best == class);
                total += 1;
            }
        }
        assert!(
            hits as f64 / total as f64 > 0.9,
            "region rule solved only {hits}/{total}"
        );
    }

    #[test]
    fn corpus_generation_writes_everything_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { per_class: 2, image_size: 32, ..SyntheticSpec::default() };
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(m.len(), 16);
        let loaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, m);
        let img = load_image(&dir.path().join(&m.entries[0].path)).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (32, 32, 3));

        let before = std::fs::read(dir.path().join("c3_0001.ppm")).unwrap();
        generate_synthetic(&spec, dir.path()).unwrap();
        let after = std::fs::read(dir.path().join("c3_0001.ppm")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn load_dataset_resizes_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { per_class: 1, image_size: 24, ..SyntheticSpec::default() };
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path(), &m, 16).unwrap();
        assert_eq!(ds.images.shape(), &[8, 3, 16, 16]);
        assert_eq!(ds.labels, (0..8).collect::<Vec<_>>());
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
