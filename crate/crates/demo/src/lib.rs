//! Browser bindings. Every operation has a plain Rust form (tested natively)
//! and a thin `wasm_bindgen` wrapper that flattens the result for JS.

use candle_core::{Device, Tensor};
use mixscene::datasets::{generate_scene, scene_rng, SceneLayout};
use mixscene::digits::DigitSet;
use mixscene::generation::composite;
use mixscene::latents::gumbel_softmax;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const DIGIT_POOL: usize = 200;

pub struct DemoScene {
    pub size: usize,
    /// RGBA, row-major, ready for `ImageData`.
    pub rgba: Vec<u8>,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u8>,
}

pub fn make_scene(seed: u64, size: usize, max_objects: usize) -> Result<DemoScene, String> {
    let digits = DigitSet::synthetic(DIGIT_POOL, seed);
    let layout = SceneLayout {
        image_size: size,
        max_objects,
    };
    let scene = generate_scene(&digits, &layout, &mut scene_rng(seed, 0)).map_err(|e| e.to_string())?;
    let rgba = scene.pixels.iter().flat_map(|&v| [v, v, v, 255]).collect();
    Ok(DemoScene {
        size: scene.size,
        rgba,
        boxes: scene.boxes,
        labels: scene.labels,
    })
}

/// Averages `samples` Gumbel-softmax draws. With `hard` the result is the
/// empirical category frequency, which should approach `softmax(logits)`.
pub fn gumbel_average(logits: &[f64], temperature: f64, samples: usize, hard: bool, seed: u64) -> Result<Vec<f64>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; logits.len()];
    for _ in 0..samples {
        let y = gumbel_softmax(logits, temperature, &mut rng, hard).map_err(|e| e.to_string())?;
        for (a, v) in acc.iter_mut().zip(y) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / samples.max(1) as f64).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Two overlapping objects, a red square on the left and a blue disc on the
/// right, composited with the model's depth-weighted rule.
pub fn composite_pair(size: usize, depth: [f64; 2], pres: [f64; 2], alpha: f64) -> Result<Vec<u8>, String> {
    let err = |e: candle_core::Error| e.to_string();
    let n = size * size;
    let s = size as f64;
    let mut rgb = vec![0f32; 2 * 3 * n];
    let mut a = vec![0f32; 2 * n];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * size + x;
            if (fx - 0.4 * s).abs() < 0.22 * s && (fy - 0.5 * s).abs() < 0.22 * s {
                rgb[i] = 0.9;
                rgb[n + i] = 0.2;
                rgb[2 * n + i] = 0.1;
                a[i] = alpha as f32;
            }
            if (fx - 0.6 * s).hypot(fy - 0.5 * s) < 0.25 * s {
                rgb[3 * n + i] = 0.1;
                rgb[4 * n + i] = 0.4;
                rgb[5 * n + i] = 0.95;
                a[n + i] = alpha as f32;
            }
        }
    }
    let dev = Device::Cpu;
    let rgb = Tensor::from_vec(rgb, (1, 2, 3, size, size), &dev).map_err(err)?;
    let a = Tensor::from_vec(a, (1, 2, 1, size, size), &dev).map_err(err)?;
    let pres = Tensor::from_vec(pres.map(|v| v as f32).to_vec(), (1, 2), &dev).map_err(err)?;
    let depth = Tensor::from_vec(depth.map(|v| v as f32).to_vec(), (1, 2), &dev).map_err(err)?;
    let img = composite(&rgb, &a, &pres, &depth).map_err(|e| e.to_string())?;
    let v: Vec<f32> = img.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((v[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}

#[wasm_bindgen]
pub struct SceneView {
    inner: DemoScene,
}

#[wasm_bindgen]
impl SceneView {
    pub fn size(&self) -> usize {
        self.inner.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.inner.rgba.clone()
    }

    /// Boxes flattened as `x_min, y_min, x_max, y_max` per object.
    pub fn boxes(&self) -> Vec<f64> {
        self.inner.boxes.iter().flatten().copied().collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }
}

#[wasm_bindgen]
pub fn scene(seed: u64, size: usize, max_objects: usize) -> Result<SceneView, JsError> {
    make_scene(seed, size, max_objects)
        .map(|inner| SceneView { inner })
        .map_err(|e| JsError::new(&e))
}

/// Returns the averaged samples followed by `softmax(logits)`.
#[wasm_bindgen]
pub fn gumbel_histogram(logits: Vec<f64>, temperature: f64, samples: usize, hard: bool, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut out = gumbel_average(&logits, temperature, samples, hard, seed).map_err(|e| JsError::new(&e))?;
    out.extend(softmax(&logits));
    Ok(out)
}

#[wasm_bindgen]
pub fn composite_demo(size: usize, depth_a: f64, depth_b: f64, pres_a: f64, pres_b: f64, alpha: f64) -> Result<Vec<u8>, JsError> {
    composite_pair(size, [depth_a, depth_b], [pres_a, pres_b], alpha).map_err(|e| JsError::new(&e))
}
