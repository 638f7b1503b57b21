//! Synthetic multi-digit scenes and their on-disk format.
//!
//! A split directory holds `manifest.json`, `annotations.jsonl` (one scene
//! per line) and `images/<id>.png` (8-bit RGB, grayscale replicated).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digits::{DigitSet, DIGIT_SIZE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

/// Ink above this fraction of full intensity defines a digit's box.
pub const INK_THRESHOLD: f64 = 0.05;

/// Scene layout parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub image_size: usize,
    pub max_objects: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            image_size: 128,
            max_objects: 10,
        }
    }
}

/// One scene in memory: grayscale pixels plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub pixels: Vec<u8>,
    /// `(x_min, y_min, x_max, y_max)` in pixels.
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u8>,
}

/// Draws one scene: `n ~ U{1..max_objects}` digits with replacement, each
/// fully inside the canvas at a uniform position, composited by max.
pub fn generate_scene<R: Rng + ?Sized>(source: &DigitSet, layout: &SceneLayout, rng: &mut R) -> Result<Scene> {
    if source.is_empty() {
        return Err(Error::Argument("digit source is empty".into()));
    }
    let s = layout.image_size;
    if s < DIGIT_SIZE || layout.max_objects == 0 {
        return Err(Error::Argument(format!(
            "scenes need image_size >= {DIGIT_SIZE} and max_objects >= 1"
        )));
    }
    let n = rng.random_range(1..=layout.max_objects);
    let cutoff = (INK_THRESHOLD * 255.0) as u8;
    let mut pixels = vec![0u8; s * s];
    let mut boxes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..source.len());
        let ox = rng.random_range(0..=s - DIGIT_SIZE);
        let oy = rng.random_range(0..=s - DIGIT_SIZE);
        let digit = source.image(idx);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..DIGIT_SIZE {
            for c in 0..DIGIT_SIZE {
                let v = digit[r * DIGIT_SIZE + c];
                let p = &mut pixels[(oy + r) * s + ox + c];
                *p = (*p).max(v);
                if v > cutoff {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        if x0 == usize::MAX {
            // A blank digit has no extent; fall back to its frame.
            (x0, y0, x1, y1) = (0, 0, DIGIT_SIZE, DIGIT_SIZE);
        }
        boxes.push([
            (ox + x0) as f64,
            (oy + y0) as f64,
            (ox + x1) as f64,
            (oy + y1) as f64,
        ]);
        labels.push(source.label(idx));
    }
    Ok(Scene {
        size: s,
        pixels,
        boxes,
        labels,
    })
}

/// One annotation line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub count: usize,
    pub source_checksum: String,
    pub seed: u64,
    pub image_size: usize,
    pub max_objects: usize,
}

/// A loaded scene: image `(3, H, W)` in `[0, 1]` plus annotations.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u8>,
}

/// Per-scene generator: the scene index selects a ChaCha stream, so scenes
/// can be produced in any order.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn scene_id(split: &str, index: usize) -> String {
    format!("{split}_{index:06}")
}

/// Writes `n_scenes` scenes and returns the manifest.
pub fn generate_multimnist(
    source: &DigitSet,
    n_scenes: usize,
    seed: u64,
    out_dir: &Path,
    split: &str,
    layout: &SceneLayout,
) -> Result<DatasetManifest> {
    if source.is_empty() {
        return Err(Error::Argument("digit source is empty".into()));
    }
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    let file = File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut ann = BufWriter::new(file);
    for i in 0..n_scenes {
        let scene = generate_scene(source, layout, &mut scene_rng(seed, i as u64))?;
        let id = scene_id(split, i);
        let rgb: Vec<u8> = scene.pixels.iter().flat_map(|&p| [p, p, p]).collect();
        write_png_rgb(&images.join(format!("{id}.png")), scene.size, scene.size, &rgb)?;
        let line = Annotation {
            id,
            boxes: scene.boxes,
            labels: scene.labels,
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Argument(e.to_string()))?;
        writeln!(ann, "{text}").map_err(|e| Error::io(&ann_path, e))?;
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        split: split.to_string(),
        count: n_scenes,
        source_checksum: source.checksum(),
        seed,
        image_size: layout.image_size,
        max_objects: layout.max_objects,
    };
    let mpath = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Argument(e.to_string()))?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// A split on disk; images are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub annotations: Vec<Annotation>,
}

/// Opens a split from its directory or its `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (dir, mpath) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (dir, path.to_path_buf())
    };
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    let apath = dir.join(ANNOTATIONS_FILE);
    let file = File::open(&apath).map_err(|e| Error::io(&apath, e))?;
    let mut annotations = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&apath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: apath.clone(),
            message: format!("line {}: {e}", n + 1),
        })?;
        if a.boxes.len() != a.labels.len() {
            return Err(Error::Format {
                path: apath.clone(),
                message: format!("line {}: {} boxes but {} labels", n + 1, a.boxes.len(), a.labels.len()),
            });
        }
        annotations.push(a);
    }
    if annotations.len() != manifest.count {
        return Err(Error::Format {
            path: apath,
            message: format!(
                "{} annotations but the manifest lists {}",
                annotations.len(),
                manifest.count
            ),
        });
    }
    for a in &annotations {
        let p = dir.join(IMAGES_DIR).join(format!("{}.png", a.id));
        if !p.is_file() {
            return Err(Error::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
            ));
        }
    }
    Ok(Dataset {
        dir,
        manifest,
        annotations,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.dir
            .join(IMAGES_DIR)
            .join(format!("{}.png", self.annotations[i].id))
    }

    /// Image `i` as `(3, H, W)` in `[0, 1]`.
    pub fn image(&self, i: usize, dtype: DType) -> Result<Tensor> {
        load_image(&self.image_path(i), dtype)
    }

    pub fn record(&self, i: usize) -> Result<SceneRecord> {
        let a = &self.annotations[i];
        Ok(SceneRecord {
            id: a.id.clone(),
            image: self.image(i, DType::F32)?,
            boxes: a.boxes.clone(),
            labels: a.labels.clone(),
        })
    }

    /// Record order: file order without a seed, a seeded shuffle otherwise.
    pub fn order(&self, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx
    }

    pub fn iter(&self, shuffle_seed: Option<u64>) -> impl Iterator<Item = Result<SceneRecord>> + '_ {
        self.order(shuffle_seed).into_iter().map(|i| self.record(i))
    }

    /// Stacks images into `(B, 3, H, W)`.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let imgs = indices
            .iter()
            .map(|&i| self.image(i, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&imgs, 0)?)
    }
}

/// Writes 8-bit RGB pixels (row-major, interleaved) as PNG.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fmt)?;
    w.write_image_data(rgb).map_err(fmt)?;
    w.finish().map_err(fmt)?;
    Ok(())
}

/// Reads a PNG as interleaved 8-bit RGB; returns `(width, height, pixels)`.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(fmt)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&p| [p, p, p]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "palette images are not supported".into(),
            })
        }
    };
    Ok((w, h, rgb))
}

/// Reads a PNG as a `(3, H, W)` tensor in `[0, 1]`.
pub fn load_image(path: &Path, dtype: DType) -> Result<Tensor> {
    let (w, h, rgb) = read_png_rgb(path)?;
    let v: Vec<f32> = rgb.iter().map(|&p| p as f32 / 255.0).collect();
    let t = Tensor::from_vec(v, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?;
    Ok(t.contiguous()?.to_dtype(dtype)?)
}

/// Converts a `(3, H, W)` tensor in `[0, 1]` to interleaved 8-bit RGB.
pub fn tensor_to_rgb8(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (_, h, w) = image.dims3()?;
    let v: Vec<f32> = image
        .to_dtype(DType::F32)?
        .permute((1, 2, 0))?
        .flatten_all()?
        .to_vec1()?;
    let rgb = v
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((w, h, rgb))
}
