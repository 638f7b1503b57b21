//! Labeled 28x28 digit sources: MNIST IDX files or a procedural stroke font.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DIGIT_SIZE: usize = 28;
const DIGIT_PIXELS: usize = DIGIT_SIZE * DIGIT_SIZE;

pub const IMAGES_FILE: &str = "train-images-idx3-ubyte";
pub const LABELS_FILE: &str = "train-labels-idx1-ubyte";

/// A labeled set of 28x28 grayscale digits, pixels in `0..=255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigitSet {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl DigitSet {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * DIGIT_PIXELS {
            return Err(Error::Argument(format!(
                "{} pixels do not make {} digits of 28x28",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Argument(format!("digit label {l} out of range")));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * DIGIT_PIXELS..(i + 1) * DIGIT_PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Hex SHA-256 over labels and pixels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update(&self.labels);
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    /// Loads the MNIST training split from `dir`, accepting plain or `.gz` files.
    pub fn load_mnist(dir: &Path) -> Result<Self> {
        let images = read_idx(&find_idx(dir, IMAGES_FILE)?, 0x0803)?;
        let labels = read_idx(&find_idx(dir, LABELS_FILE)?, 0x0801)?;
        if images.dims.len() != 3 || images.dims[1] != DIGIT_SIZE || images.dims[2] != DIGIT_SIZE {
            return Err(Error::Format {
                path: dir.join(IMAGES_FILE),
                message: format!("expected N x 28 x 28 images, found {:?}", images.dims),
            });
        }
        if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
            return Err(Error::Format {
                path: dir.join(LABELS_FILE),
                message: format!(
                    "{} labels for {} images",
                    labels.dims.first().copied().unwrap_or(0),
                    images.dims[0]
                ),
            });
        }
        Self::new(images.data, labels.data)
    }

    /// Writes uncompressed IDX files under the MNIST names.
    pub fn write_idx(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.len() as u32;
        let mut img = vec![0, 0, 8, 3];
        for d in [n, DIGIT_SIZE as u32, DIGIT_SIZE as u32] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(&self.pixels);
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(&self.labels);
        for (name, bytes) in [(IMAGES_FILE, img), (LABELS_FILE, lab)] {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// `n` procedurally drawn digits, labels cycling through 0..=9.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * DIGIT_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            pixels.extend_from_slice(&draw_digit(label, &mut rng));
            labels.push(label);
        }
        Self { pixels, labels }
    }
}

fn find_idx(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::io(
        &plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "file not found (also tried .gz)"),
    ))
}

struct Idx {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn read_idx(path: &Path, magic: u32) -> Result<Idx> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header".into()))
    };
    let found = word(0)?;
    if found != magic {
        return Err(bad(format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 * (rank + 1);
    let len: usize = dims.iter().product();
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| bad(format!("expected {len} data bytes")))?
        .to_vec();
    Ok(Idx { dims, data })
}

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let n = 24;
    (0..=n)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / n as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Strokes of each glyph in a unit box, y pointing down.
fn glyph(label: u8) -> Vec<Stroke> {
    match label {
        0 => vec![arc(0.5, 0.5, 0.3, 0.45, 0.0, 360.0)],
        1 => vec![vec![(0.32, 0.2), (0.52, 0.05), (0.52, 0.95)]],
        2 => {
            let mut s = arc(0.5, 0.3, 0.26, 0.25, 180.0, 390.0);
            s.extend([(0.2, 0.95), (0.82, 0.95)]);
            vec![s]
        }
        3 => vec![
            arc(0.5, 0.28, 0.23, 0.22, 200.0, 450.0),
            arc(0.5, 0.71, 0.26, 0.24, 270.0, 520.0),
        ],
        4 => vec![vec![(0.66, 0.95), (0.66, 0.05), (0.15, 0.66), (0.86, 0.66)]],
        5 => {
            let mut s = vec![(0.76, 0.05), (0.32, 0.05), (0.28, 0.46)];
            s.extend(arc(0.48, 0.68, 0.27, 0.26, 220.0, 500.0));
            vec![s]
        }
        6 => vec![
            vec![(0.72, 0.06), (0.45, 0.25), (0.29, 0.52), (0.26, 0.7)],
            arc(0.5, 0.7, 0.24, 0.24, 0.0, 360.0),
        ],
        7 => vec![vec![(0.18, 0.05), (0.82, 0.05), (0.42, 0.95)]],
        8 => vec![
            arc(0.5, 0.27, 0.21, 0.21, 0.0, 360.0),
            arc(0.5, 0.71, 0.26, 0.24, 0.0, 360.0),
        ],
        _ => vec![
            arc(0.5, 0.3, 0.24, 0.24, 0.0, 360.0),
            vec![(0.74, 0.3), (0.62, 0.95)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Draws one anti-aliased, randomly jittered digit.
pub fn draw_digit<R: Rng + ?Sized>(label: u8, rng: &mut R) -> [u8; DIGIT_PIXELS] {
    let height = rng.random_range(17.0..21.0);
    let width = height * rng.random_range(0.6..0.85);
    let slant = rng.random_range(-0.25..0.25);
    let rot: f64 = rng.random_range(-0.15..0.15);
    let (cs, sn) = (rot.cos(), rot.sin());
    let center = (
        14.0 + rng.random_range(-1.0..1.0),
        14.0 + rng.random_range(-1.0..1.0),
    );
    let radius = rng.random_range(0.9..1.8);
    let strokes: Vec<Stroke> = glyph(label)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(u, v)| {
                    let u = u + rng.random_range(-0.02..0.02);
                    let v = v + rng.random_range(-0.02..0.02);
                    let x = (u - 0.5) * width + slant * (0.5 - v) * height;
                    let y = (v - 0.5) * height;
                    (center.0 + cs * x - sn * y, center.1 + sn * x + cs * y)
                })
                .collect()
        })
        .collect();
    let mut out = [0u8; DIGIT_PIXELS];
    for (k, px) in out.iter_mut().enumerate() {
        let p = ((k % DIGIT_SIZE) as f64 + 0.5, (k / DIGIT_SIZE) as f64 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let ink = (radius + 0.5 - d).clamp(0.0, 1.0);
        *px = (ink * 255.0).round() as u8;
    }
    out
}
