//! Labeled image datasets: IDX ingestion, a synthetic glyph generator with
//! shared and class-exclusive factors of variation, and seeded minibatching.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, height: usize, width: usize) -> Result<Self> {
        let (n, d) = images.dims2()?;
        if d != height * width {
            return Err(Error::shape("Dataset::new", &[n, height * width], images.shape()));
        }
        if labels.len() != n {
            return Err(Error::shape("Dataset::new labels", &[n], &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: y,
                len: classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            height,
            width,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `D`, the flattened image size.
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row_slice(i)
    }

    /// Rows `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Dataset::new(images, labels, self.classes, self.height, self.width)
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle, then the first `test` examples go to the second part.
    pub fn split(&self, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if test > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {test} of {} examples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[rng::label::SHUFFLE]));
        let (a, b) = idx.split_at(test);
        Ok((self.subset(b)?, self.subset(a)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses an IDX file with the expected magic number, returning its
/// dimension sizes and unsigned-byte payload.
fn parse_idx(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, "truncated header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(
            path,
            format!("bad magic number {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank)
        .map(|i| word(i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 * (rank + 1);
    let expected: usize = dims.iter().product();
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(format_err(
            path,
            format!("truncated payload: {} bytes, expected {expected}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(format_err(
            path,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    Ok((dims, payload.to_vec()))
}

/// Loads an image/label IDX pair. Paths ending in `.gz` are decompressed.
/// The class count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (idims, pixels) = parse_idx(ip, &read_all(ip)?, IMAGE_MAGIC)?;
    let (ldims, labels) = parse_idx(lp, &read_all(lp)?, LABEL_MAGIC)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(format_err(
            lp,
            format!("{} labels for {n} images in {}", ldims[0], ip.display()),
        ));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = pixels.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Dataset::new(Tensor::new(&[n, h * w], data)?, labels, classes, h, w)
}

fn write_bytes(path: &Path, header: &[u32], payload: &[u8]) -> Result<()> {
    let mut raw = Vec::with_capacity(4 * header.len() + payload.len());
    for h in header {
        raw.extend_from_slice(&h.to_be_bytes());
    }
    raw.extend_from_slice(payload);
    let io = |e| Error::io(path, e);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).map_err(io)?;
        raw = enc.finish().map_err(io)?;
    }
    std::fs::write(path, raw).map_err(io)
}

/// Writes pixels as `round(255·v)`. Datasets whose pixels already lie on
/// the `k/255` grid (everything produced by this module) reload exactly.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    if dataset.classes > 256 {
        return Err(Error::InvalidArgument("IDX labels hold at most 256 classes".into()));
    }
    let n = dataset.len() as u32;
    let pixels: Vec<u8> = dataset.images.data().iter().map(|&v| to_byte(v)).collect();
    write_bytes(
        images_path.as_ref(),
        &[IMAGE_MAGIC, n, dataset.height as u32, dataset.width as u32],
        &pixels,
    )?;
    let labels: Vec<u8> = dataset.labels.iter().map(|&y| y as u8).collect();
    write_bytes(labels_path.as_ref(), &[LABEL_MAGIC, n], &labels)
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Standard file names inside an MNIST-style directory.
pub fn idx_paths(dir: impl AsRef<Path>, split: &str) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let pick = |stem: String| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (
        pick(format!("{split}-images-idx3-ubyte")),
        pick(format!("{split}-labels-idx1-ubyte")),
    )
}

/// Factors that act on every class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SharedFactor {
    /// Multiplies the whole image by a uniform draw from `[min, max]`.
    Intensity { min: f64, max: f64 },
    /// Horizontal sub-pixel shift, uniform in `[−max, max]` pixels.
    ShiftX { max: f64 },
    /// Vertical sub-pixel shift, uniform in `[−max, max]` pixels.
    ShiftY { max: f64 },
}

/// Border strip reserved for an exclusive mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Top,
    Bottom,
    Left,
    Right,
}

/// Factors only one class exhibits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExclusiveFactor {
    /// A bar in the given border strip whose length is uniform in
    /// `[0, 1]` of the strip.
    Bar { edge: Edge },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub side: usize,
    pub samples: usize,
    pub shared: Vec<SharedFactor>,
    /// One list per class.
    pub exclusive: Vec<Vec<ExclusiveFactor>>,
    pub seed: u64,
}

/// Largest class count with a distinct built-in glyph.
pub const MAX_SYNTHETIC_CLASSES: usize = 6;
const MARGIN: usize = 2;

impl SyntheticSpec {
    /// Every factor is shared; the class blocks have nothing to explain.
    pub fn shared_only(classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            classes,
            side: 16,
            samples,
            shared: vec![
                SharedFactor::Intensity { min: 0.5, max: 1.0 },
                SharedFactor::ShiftX { max: 1.5 },
                SharedFactor::ShiftY { max: 1.5 },
            ],
            exclusive: vec![Vec::new(); classes],
            seed,
        }
    }

    /// Intensity is shared; each class (up to four) gets its own bar.
    pub fn class_exclusive(classes: usize, samples: usize, seed: u64) -> Self {
        let edges = [Edge::Bottom, Edge::Top, Edge::Left, Edge::Right];
        Self {
            classes,
            side: 16,
            samples,
            shared: vec![SharedFactor::Intensity { min: 0.5, max: 1.0 }],
            exclusive: (0..classes)
                .map(|c| match edges.get(c) {
                    Some(&edge) => vec![ExclusiveFactor::Bar { edge }],
                    None => Vec::new(),
                })
                .collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes == 0 || self.classes > MAX_SYNTHETIC_CLASSES {
            return bad(format!("classes must be in 1..={MAX_SYNTHETIC_CLASSES}"));
        }
        if self.side < 12 {
            return bad(format!("side must be at least 12, got {}", self.side));
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if self.exclusive.len() != self.classes {
            return bad(format!(
                "{} exclusive-factor lists for {} classes",
                self.exclusive.len(),
                self.classes
            ));
        }
        if self.shared.is_empty() && self.exclusive.iter().all(Vec::is_empty) {
            return bad("at least one factor is required".into());
        }
        let mut used = Vec::new();
        for f in self.exclusive.iter().flatten() {
            let ExclusiveFactor::Bar { edge } = f;
            if used.contains(edge) {
                return bad(format!("edge {edge:?} is used by more than one exclusive factor"));
            }
            used.push(*edge);
        }
        for f in &self.shared {
            match *f {
                SharedFactor::Intensity { min, max } if !(0.0 < min && min <= max && max <= 1.0) => {
                    return bad(format!("intensity range [{min}, {max}] must lie in (0, 1]"));
                }
                SharedFactor::ShiftX { max } | SharedFactor::ShiftY { max } if !(0.0..=1.5).contains(&max) => {
                    return bad(format!("shift {max} must lie in [0, 1.5]"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Pixels covered by an edge strip, excluding the corners shared with the
/// neighbouring strips, in bar-fill order.
pub fn edge_pixels(edge: Edge, side: usize) -> Vec<(usize, usize)> {
    let inner = MARGIN..side - MARGIN;
    let mut out = Vec::new();
    for k in inner {
        for t in 0..MARGIN {
            out.push(match edge {
                Edge::Top => (t, k),
                Edge::Bottom => (side - 1 - t, k),
                Edge::Left => (k, t),
                Edge::Right => (k, side - 1 - t),
            });
        }
    }
    out
}

/// Base glyph for `class` drawn inside the central region, values in {0, 1}.
fn glyph(class: usize, side: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let lo = MARGIN + 2;
    let hi = side - MARGIN - 3;
    let mid = (lo + hi) / 2;
    let c = (lo + hi) as f64 / 2.0;
    let radius = (hi - lo) as f64 / 2.0;
    for r in lo..=hi {
        for col in lo..=hi {
            let on = match class {
                0 => r == lo || r == hi || col == lo || col == hi,
                1 => r == mid || col == mid,
                2 => r == col || r + col == lo + hi,
                3 => {
                    let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                    d <= radius * 0.6
                }
                4 => r == lo || r == hi || r == mid,
                _ => col == lo || col == hi || col == mid,
            };
            if on {
                img[r * side + col] = 1.0;
            }
        }
    }
    img
}

/// Bilinear sample of `img` at fractional coordinates; zero outside.
fn sample(img: &[f64], side: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor();
    let c0 = c.floor();
    let (fr, fc) = (r - r0, c - c0);
    let px = |ri: f64, ci: f64| {
        if ri < 0.0 || ci < 0.0 || ri >= side as f64 || ci >= side as f64 {
            0.0
        } else {
            img[ri as usize * side + ci as usize]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1.0))
        + fr * ((1.0 - fc) * px(r0 + 1.0, c0) + fc * px(r0 + 1.0, c0 + 1.0))
}

/// Renders a dataset of class glyphs with the requested factors. Labels are
/// balanced round-robin and pixels are quantized to the `k/255` grid.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let side = spec.side;
    let mut rng = rng::stream(spec.seed, &[rng::label::DATA]);
    let glyphs: Vec<Vec<f64>> = (0..spec.classes).map(|c| glyph(c, side)).collect();
    let mut data = Vec::with_capacity(spec.samples * side * side);
    let mut labels = Vec::with_capacity(spec.samples);

    for i in 0..spec.samples {
        let y = i % spec.classes;
        let (mut gain, mut dx, mut dy) = (1.0, 0.0, 0.0);
        for f in &spec.shared {
            match *f {
                SharedFactor::Intensity { min, max } => gain = rng.random_range(min..=max),
                SharedFactor::ShiftX { max } => dx = rng.random_range(-max..=max),
                SharedFactor::ShiftY { max } => dy = rng.random_range(-max..=max),
            }
        }
        let mut img = vec![0.0; side * side];
        for r in 0..side {
            for c in 0..side {
                img[r * side + c] = sample(&glyphs[y], side, r as f64 - dy, c as f64 - dx);
            }
        }
        for f in &spec.exclusive[y] {
            let ExclusiveFactor::Bar { edge } = *f;
            let strip = edge_pixels(edge, side);
            let length = rng.random_range(0.0..=1.0) * (strip.len() / MARGIN) as f64;
            for (k, &(r, c)) in strip.iter().enumerate() {
                let cover = (length - (k / MARGIN) as f64).clamp(0.0, 1.0);
                img[r * side + c] = cover;
            }
        }
        data.extend(img.iter().map(|v| f64::from(to_byte(v * gain)) / 255.0));
        labels.push(y);
    }
    Dataset::new(
        Tensor::new(&[spec.samples, side * side], data)?,
        labels,
        spec.classes,
        side,
        side,
    )
}

/// Seeded minibatch order over `len` examples; every epoch is a fresh
/// permutation and the last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl Batches {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn num_batches(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng::stream(self.seed, &[rng::label::SHUFFLE, epoch as u64]));
        idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub fn split_and_batch(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Batches> {
    Batches::new(dataset.len(), batch_size, seed)
}
