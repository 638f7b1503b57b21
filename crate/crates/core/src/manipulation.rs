//! Test-time latent editing: category swaps, local style variation, object
//! shuffling, and latent export for visualization.
//!
//! An object's appearance splits into the mean of its cluster, `z_avg`, and
//! the residual `z_local = z_what - z_avg`. Edits act on these parts and
//! [`recompose`] writes them back into a grid for rendering.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::EvalConfig;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::inference::Mode;
use crate::latents::{LatentGrid, MixturePrior};
use crate::metrics::{correct_detections, detect_cells, BoxXyxy, Detection};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLatent {
    pub scene: usize,
    pub cell: usize,
    pub cluster: usize,
    pub z_avg: Vec<f64>,
    pub z_local: Vec<f64>,
    pub z_where: [f64; 4],
    pub z_depth: f64,
}

impl ObjectLatent {
    pub fn z_what(&self) -> Vec<f64> {
        self.z_avg.iter().zip(&self.z_local).map(|(a, l)| a + l).collect()
    }
}

/// Posterior modes for a batch `(B, 3, H, W)` or a single image `(3, H, W)`.
pub fn deterministic_infer(model: &Model, x: &Tensor) -> Result<LatentGrid> {
    let x = if x.rank() == 3 { x.unsqueeze(0)? } else { x.clone() };
    // Deterministic mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(model.encoder.infer(&x.to_dtype(model.dtype())?, Mode::Deterministic, &mut rng)?.latents)
}

/// Plain copies of a grid's tensors, indexed `[scene][cell][dim]`.
struct GridData {
    dtype: DType,
    pres: Vec<Vec<f64>>,
    what: Vec<Vec<Vec<f64>>>,
    cat: Vec<Vec<Vec<f64>>>,
    where_: Vec<Vec<Vec<f64>>>,
    depth: Vec<Vec<f64>>,
}

impl GridData {
    fn read(grid: &LatentGrid) -> Result<Self> {
        let v2 = |t: &Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2()?) };
        let v3 = |t: &Tensor| -> Result<Vec<Vec<Vec<f64>>>> { Ok(t.to_dtype(DType::F64)?.to_vec3()?) };
        Ok(Self {
            dtype: grid.z_what.dtype(),
            pres: v2(&grid.z_pres)?,
            what: v3(&grid.z_what)?,
            cat: v3(&grid.z_cat)?,
            where_: v3(&grid.z_where)?,
            depth: v2(&grid.z_depth)?,
        })
    }

    fn write(&self) -> Result<LatentGrid> {
        let dev = candle_core::Device::Cpu;
        let t2 = |v: &Vec<Vec<f64>>| -> Result<Tensor> { Ok(Tensor::new(v.clone(), &dev)?.to_dtype(self.dtype)?) };
        let t3 = |v: &Vec<Vec<Vec<f64>>>| -> Result<Tensor> {
            Ok(Tensor::new(v.clone(), &dev)?.to_dtype(self.dtype)?)
        };
        Ok(LatentGrid {
            z_pres: t2(&self.pres)?,
            z_what: t3(&self.what)?,
            z_cat: t3(&self.cat)?,
            z_where: t3(&self.where_)?,
            z_depth: t2(&self.depth)?,
        })
    }

    fn present(&self, scene: usize) -> Vec<usize> {
        (0..self.pres[scene].len())
            .filter(|&c| self.pres[scene][c] >= 0.5)
            .collect()
    }
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let ones: Vec<usize> = (0..row.len()).filter(|&k| row[k] == 1.0).collect();
    let zeros = row.iter().filter(|&&v| v == 0.0).count();
    (ones.len() == 1 && zeros + 1 == row.len()).then(|| ones[0])
}

/// Splits every present object into cluster mean and residual.
pub fn decompose(grid: &LatentGrid, mp: &MixturePrior) -> Result<Vec<ObjectLatent>> {
    let data = GridData::read(grid)?;
    let (mu, _) = mp.to_vecs()?;
    let mut out = Vec::new();
    for s in 0..data.pres.len() {
        for c in data.present(s) {
            let k = one_hot_index(&data.cat[s][c]).ok_or_else(|| {
                Error::Precondition(
                    "z_cat is not one-hot; obtain latents with deterministic_infer".into(),
                )
            })?;
            let z_avg = mu[k].clone();
            let z_local = data.what[s][c].iter().zip(&z_avg).map(|(w, a)| w - a).collect();
            let w = &data.where_[s][c];
            out.push(ObjectLatent {
                scene: s,
                cell: c,
                cluster: k,
                z_avg,
                z_local,
                z_where: [w[0], w[1], w[2], w[3]],
                z_depth: data.depth[s][c],
            });
        }
    }
    Ok(out)
}

/// Writes objects back into a copy of `grid`.
pub fn recompose(grid: &LatentGrid, objs: &[ObjectLatent]) -> Result<LatentGrid> {
    let mut data = GridData::read(grid)?;
    for o in objs {
        if o.scene >= data.pres.len() || o.cell >= data.pres[o.scene].len() {
            return Err(Error::Shape(format!(
                "object at scene {} cell {} is outside the grid",
                o.scene, o.cell
            )));
        }
        data.what[o.scene][o.cell] = o.z_what();
        let row = &mut data.cat[o.scene][o.cell];
        row.iter_mut().for_each(|v| *v = 0.0);
        row[o.cluster] = 1.0;
        data.where_[o.scene][o.cell] = o.z_where.to_vec();
        data.depth[o.scene][o.cell] = o.z_depth;
    }
    data.write()
}

/// Moves object `i` to cluster `clusters[i]`, keeping its residual.
pub fn assign_clusters(objs: &[ObjectLatent], clusters: &[usize], mp: &MixturePrior) -> Result<Vec<ObjectLatent>> {
    if clusters.len() != objs.len() {
        return Err(Error::Argument(format!(
            "{} clusters for {} objects",
            clusters.len(),
            objs.len()
        )));
    }
    let (mu, _) = mp.to_vecs()?;
    objs.iter()
        .zip(clusters)
        .map(|(o, &k)| {
            let z_avg = mu
                .get(k)
                .ok_or_else(|| Error::Argument(format!("cluster {k} out of range (C = {})", mu.len())))?
                .clone();
            Ok(ObjectLatent {
                cluster: k,
                z_avg,
                ..o.clone()
            })
        })
        .collect()
}

/// Sets every object's mean to cluster `target_k`.
pub fn swap_category(objs: &[ObjectLatent], target_k: usize, mp: &MixturePrior) -> Result<Vec<ObjectLatent>> {
    assign_clusters(objs, &vec![target_k; objs.len()], mp)
}

/// Replaces every residual with fresh `N(0, noise_scale^2)` noise.
pub fn vary_local<R: Rng + ?Sized>(objs: &[ObjectLatent], noise_scale: f64, rng: &mut R) -> Result<Vec<ObjectLatent>> {
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::Argument(format!(
            "noise scale must be finite and nonnegative, got {noise_scale}"
        )));
    }
    let mut out = objs.to_vec();
    for o in &mut out {
        if noise_scale == 0.0 {
            o.z_local.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let d = Normal::new(0.0, noise_scale).map_err(|e| Error::Argument(e.to_string()))?;
            o.z_local.iter_mut().for_each(|v| *v = d.sample(rng));
        }
    }
    Ok(out)
}

/// Permutes `(z_what, z_depth, z_cat)` among the present cells of scene
/// `scene`: the object in present cell `perm[i]` moves to present cell `i`.
pub fn permute_objects(grid: &LatentGrid, scene: usize, perm: &[usize]) -> Result<LatentGrid> {
    let mut data = GridData::read(grid)?;
    let cells = data.present(scene);
    let mut seen = vec![false; cells.len()];
    if perm.len() != cells.len() || perm.iter().any(|&p| p >= cells.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Argument(format!(
            "expected a permutation of {} present objects",
            cells.len()
        )));
    }
    let what: Vec<Vec<f64>> = cells.iter().map(|&c| data.what[scene][c].clone()).collect();
    let cat: Vec<Vec<f64>> = cells.iter().map(|&c| data.cat[scene][c].clone()).collect();
    let depth: Vec<f64> = cells.iter().map(|&c| data.depth[scene][c]).collect();
    for (i, &c) in cells.iter().enumerate() {
        data.what[scene][c] = what[perm[i]].clone();
        data.cat[scene][c] = cat[perm[i]].clone();
        data.depth[scene][c] = depth[perm[i]];
    }
    data.write()
}

/// Randomly shuffles objects within each scene.
pub fn shuffle_objects<R: Rng + ?Sized>(grid: &LatentGrid, rng: &mut R) -> Result<LatentGrid> {
    let data = GridData::read(grid)?;
    let counts: Vec<usize> = (0..data.pres.len()).map(|s| data.present(s).len()).collect();
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Precondition("no present objects to shuffle".into()));
    }
    let mut out = grid.clone();
    for (s, &n) in counts.iter().enumerate() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out = permute_objects(&out, s, &perm)?;
    }
    Ok(out)
}

/// One exported row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub scene_id: String,
    pub cluster: usize,
    pub class: u8,
    pub z: Vec<f64>,
}

/// Writes appearance latents of every correct detection; returns the row count.
pub fn export_latents(
    model: &Model,
    dataset: &Dataset,
    out_path: &Path,
    eval: &EvalConfig,
    batch_size: usize,
) -> Result<usize> {
    let a = model.config.model.what_dim;
    let file = File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = ["scene_id", "cluster", "class"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..a).map(|d| format!("dim_{d}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(out_path, e))?;
    let mut rows = 0;
    let order: Vec<usize> = (0..dataset.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let images = dataset.batch(chunk, model.dtype())?;
        let cd = detect_cells(model, &images, eval)?;
        let what: Vec<Vec<Vec<f64>>> = cd.output.latents.z_what.to_dtype(DType::F64)?.to_vec3()?;
        let dets: Vec<Vec<Detection>> = cd
            .scenes
            .iter()
            .map(|s| s.iter().map(|(_, d)| *d).collect())
            .collect();
        let gts: Vec<Vec<BoxXyxy>> = chunk.iter().map(|&i| dataset.annotations[i].boxes.clone()).collect();
        let labels: Vec<Vec<u8>> = chunk.iter().map(|&i| dataset.annotations[i].labels.clone()).collect();
        for c in correct_detections(&dets, &gts, &labels) {
            let (cell, d) = cd.scenes[c.scene][c.index];
            let id = &dataset.annotations[chunk[c.scene]].id;
            let z: Vec<String> = what[c.scene][cell].iter().map(|v| v.to_string()).collect();
            writeln!(w, "{id},{},{},{}", d.cluster, c.class, z.join(",")).map_err(|e| Error::io(out_path, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(out_path, e))?;
    Ok(rows)
}

/// Reads a file written by [`export_latents`].
pub fn read_latent_export(path: &Path) -> Result<Vec<LatentRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["scene_id", "cluster", "class"] {
        return Err(bad("header must start with scene_id,cluster,class".into()));
    }
    let dims = cols.len() - 3;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dims + 3 {
            return Err(bad(format!("row {} has {} fields, expected {}", n + 2, f.len(), dims + 3)));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("row {}: bad number `{s}`", n + 2))) };
        rows.push(LatentRow {
            scene_id: f[0].to_string(),
            cluster: f[1].parse().map_err(|_| bad(format!("row {}: bad cluster", n + 2)))?,
            class: f[2].parse().map_err(|_| bad(format!("row {}: bad class", n + 2)))?,
            z: f[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
