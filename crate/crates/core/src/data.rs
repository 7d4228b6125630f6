//! Synthetic colored-shapes dataset and its on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SHADDSET"
//! version  u32      1
//! n        u32      sample count
//! img      u32      image side
//! channels u32
//! classes  u32
//! dtype    u8       0 = f32
//! masks    u8       1 if foreground masks follow
//! images   n·img·img·channels f32
//! labels   n u32
//! masks    n·img·img u8 (optional)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SHADDSET";
pub const DATASET_VERSION: u32 = 1;
pub const MAX_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub img: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub noise_std: f32,
    /// Draw each sample's color from the palette independently of its class,
    /// so only the shape identifies the label.
    pub random_colors: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            img: 16,
            channels: 3,
            classes: 6,
            samples_per_class: 64,
            seed: 0,
            noise_std: 0.1,
            random_colors: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.img < 4 || self.channels == 0 || self.samples_per_class == 0 {
            return Err(Error::Invalid(format!(
                "dataset extents must be positive (img ≥ 4): img={} channels={} samples={}",
                self.img, self.channels, self.samples_per_class
            )));
        }
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::Invalid(format!(
                "unsupported class count {} (1..={MAX_CLASSES})",
                self.classes
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Invalid(format!("noise_std {} must be ≥ 0", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × img × img × channels`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-pixel foreground flags, `N × img × img`.
    pub masks: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, masks: Option<Vec<u8>>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != shape[2] {
            return Err(Error::dim("dataset", format!("images must be N×s×s×c, got {shape:?}")));
        }
        if labels.len() != shape[0] {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for {} images", labels.len(), shape[0]),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(m) = &masks {
            if m.len() != shape[0] * shape[1] * shape[2] {
                return Err(Error::dim("dataset", "mask length does not match images"));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn img(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    /// Images `idx` stacked as `len × img × img × channels`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = self.img() * self.img() * self.channels();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let s = self.img();
        Tensor::new([idx.len(), s, s, self.channels()], data).expect("non-empty batch")
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let px = self.img() * self.img();
        Dataset {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            masks: self.masks.as_ref().map(|m| {
                idx.iter()
                    .flat_map(|&i| m[i * px..(i + 1) * px].iter().copied())
                    .collect()
            }),
        }
    }

    /// Per-token foreground flags for `patch × patch` tokens: a token is
    /// foreground when any of its pixels is.
    pub fn token_foreground(&self, patch: usize) -> Option<Vec<Vec<bool>>> {
        let masks = self.masks.as_ref()?;
        let s = self.img();
        let g = s / patch;
        Some(
            (0..self.len())
                .map(|i| {
                    let m = &masks[i * s * s..(i + 1) * s * s];
                    (0..g * g)
                        .map(|t| {
                            let (ty, tx) = (t / g, t % g);
                            (0..patch).any(|dy| (0..patch).any(|dx| m[(ty * patch + dy) * s + tx * patch + dx] != 0))
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

const PALETTE: [[f32; 3]; MAX_CLASSES] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.3, 1.0],
    [0.2, 1.0, 1.0],
    [1.0, 0.6, 0.1],
    [0.6, 0.3, 1.0],
    [0.9, 0.9, 0.9],
    [0.5, 1.0, 0.5],
];

/// Whether pixel `(y, x)` of an `s × s` box belongs to the class pattern.
fn pattern(class: usize, s: usize, y: usize, x: usize) -> bool {
    let last = s - 1;
    let mid = s / 2;
    match class {
        0 => true,                                                 // solid square
        1 => y == mid || x == mid || y + 1 == mid || x + 1 == mid, // cross
        2 => y.is_multiple_of(2),                                  // horizontal stripes
        3 => x.is_multiple_of(2),                                  // vertical stripes
        4 => y == x || y == x + 1,                                 // diagonal
        5 => y == 0 || x == 0 || y == last || x == last,           // frame
        6 => (y + x).is_multiple_of(2),                            // checkerboard
        7 => {
            let c = last as f32 / 2.0;
            let (dy, dx) = (y as f32 - c, x as f32 - c);
            dy * dy + dx * dx <= c * c + 0.5 // disk
        }
        8 => x <= y,                                         // triangle
        _ => y == last || x == 0 || y == last - 1 || x == 1, // L-shape
    }
}

/// Generates `classes × samples_per_class` images, class-major, each holding
/// its class pattern in the class color (or a random palette color) at a seed-determined position on a
/// zero background, plus Gaussian noise.
pub fn gen_shapes(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (s, c) = (spec.img, spec.channels);
    let side = (s / 2).max(3);
    let n = spec.classes * spec.samples_per_class;
    let mut rng = Rng::new(spec.seed);
    let mut images = vec![0.0f32; n * s * s * c];
    let mut masks = vec![0u8; n * s * s];
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for k in 0..spec.samples_per_class {
            let i = class * spec.samples_per_class + k;
            labels.push(class);
            let color = if spec.random_colors {
                PALETTE[rng.below(MAX_CLASSES)]
            } else {
                PALETTE[class]
            };
            let oy = rng.below(s - side + 1);
            let ox = rng.below(s - side + 1);
            let img = &mut images[i * s * s * c..(i + 1) * s * s * c];
            let mask = &mut masks[i * s * s..(i + 1) * s * s];
            for y in 0..side {
                for x in 0..side {
                    if pattern(class, side, y, x) {
                        let p = (oy + y) * s + ox + x;
                        mask[p] = 1;
                        for ch in 0..c {
                            img[p * c + ch] = color[ch % 3];
                        }
                    }
                }
            }
            if spec.noise_std > 0.0 {
                for v in img.iter_mut() {
                    *v += spec.noise_std * rng.normal();
                }
            }
        }
    }
    Dataset::new(Tensor::new([n, s, s, c], images)?, labels, spec.classes, Some(masks))
}

/// Deterministic split: every `k`-th sample (k = round(1/fraction)) goes to
/// the second set.
pub fn split(ds: &Dataset, test_every: usize) -> Result<(Dataset, Dataset)> {
    if test_every < 2 {
        return Err(Error::Invalid("test_every must be ≥ 2".into()));
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| i % test_every == test_every - 1);
    if test.is_empty() {
        return Err(Error::Invalid("split leaves the test set empty".into()));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Invalid(format!("extent {v} exceeds u32")));
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u32::<LittleEndian>(dim(ds.len())?)?;
    w.write_u32::<LittleEndian>(dim(ds.img())?)?;
    w.write_u32::<LittleEndian>(dim(ds.channels())?)?;
    w.write_u32::<LittleEndian>(dim(ds.classes)?)?;
    w.write_u8(0)?;
    w.write_u8(u8::from(ds.masks.is_some()))?;
    for &v in ds.images.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    for &l in &ds.labels {
        w.write_u32::<LittleEndian>(dim(l)?)?;
    }
    if let Some(m) = &ds.masks {
        w.write_all(m)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Tracks the byte offset so format errors can point at the failure.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            msg: msg.into(),
        }
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| self.fail(format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.exact(&mut buf, what)?;
        let mut out = vec![0.0f32; n];
        (&buf[..]).read_f32_into::<LittleEndian>(&mut out)?;
        Ok(out)
    }
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut cur = Cursor { inner: r, offset: 0 };
    let mut magic = [0u8; 8];
    cur.exact(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n = cur.u32("sample count")? as usize;
    let s = cur.u32("image side")? as usize;
    let c = cur.u32("channels")? as usize;
    let classes = cur.u32("classes")? as usize;
    if n == 0 || s == 0 || c == 0 || classes == 0 {
        return Err(cur.fail("zero extent in header"));
    }
    let dtype = cur.u8("dtype")?;
    if dtype != 0 {
        return Err(cur.fail(format!("unknown dtype {dtype}")));
    }
    let has_masks = cur.u8("mask flag")?;
    if has_masks > 1 {
        return Err(cur.fail(format!("bad mask flag {has_masks}")));
    }
    let total = n
        .checked_mul(s * s * c)
        .filter(|&t| t < (1 << 31))
        .ok_or_else(|| cur.fail("header extents overflow"))?;
    let images = cur.f32s(total, "images")?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = cur.offset;
        let l = cur.u32("labels")? as usize;
        if l >= classes {
            return Err(Error::Format {
                offset: at,
                msg: format!("label {l} ≥ classes {classes}"),
            });
        }
        labels.push(l);
    }
    let masks = if has_masks == 1 {
        let mut m = vec![0u8; n * s * s];
        cur.exact(&mut m, "masks")?;
        Some(m)
    } else {
        None
    };
    Dataset::new(Tensor::new([n, s, s, c], images)?, labels, classes, masks)
}
