//! Detection and clustering metrics.
//!
//! Localization is scored by class-agnostic average precision at one IoU
//! threshold. Clustering is scored on the "correct" detections only, each
//! paired with the class of the ground-truth box it overlaps most.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::inference::{decode_where, Mode};
use crate::model::{ForwardOutput, Model};

/// Box as `(x_min, y_min, x_max, y_max)` in pixels.
pub type BoxXyxy = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
    pub score: f64,
    pub cluster: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub acc: f64,
    pub nmi: f64,
    pub n_correct_boxes: usize,
    pub n_detections: usize,
    pub n_ground_truth: usize,
    pub n_scenes: usize,
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &BoxXyxy| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Shrinks a detection to the part of its glimpse where `alpha` exceeds
/// `threshold`. `alpha` is row-major `gh x gw`; the box is unchanged when no
/// pixel passes.
pub fn refine_box(d: &Detection, alpha: &[f64], gh: usize, gw: usize, threshold: f64) -> Detection {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..gh {
        for c in 0..gw {
            if alpha[r * gw + c] > threshold {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r + 1);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 == usize::MAX {
        return *d;
    }
    let [x0, y0, x1, y1] = d.bbox;
    let (sx, sy) = ((x1 - x0) / gw as f64, (y1 - y0) / gh as f64);
    Detection {
        bbox: [
            x0 + c0 as f64 * sx,
            y0 + r0 as f64 * sy,
            x0 + c1 as f64 * sx,
            y0 + r1 as f64 * sy,
        ],
        ..*d
    }
}

/// Class-agnostic average precision with greedy one-to-one matching and
/// all-points interpolation. `dets[s]` and `gts[s]` belong to scene `s`.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BoxXyxy>], iou_threshold: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| (0..ds.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (k, &(s, i)) in order.iter().enumerate() {
        let d = &dets[s][i];
        let best = gts[s]
            .iter()
            .enumerate()
            .filter(|(j, _)| !matched[s][*j])
            .map(|(j, g)| (j, iou(&d.bbox, g)))
            .filter(|&(_, v)| v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            matched[s][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    all_points_area(&recall, &precision)
}

/// Area under the precision envelope, sampled at every recall change.
fn all_points_area(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Keeps detections whose best IoU is at least 0.5 and pairs each with the
/// class of that best-overlapping ground truth.
pub fn filter_correct(dets: &[Vec<Detection>], gts: &[Vec<BoxXyxy>], labels: &[Vec<u8>]) -> Vec<(usize, u8)> {
    correct_detections(dets, gts, labels)
        .into_iter()
        .map(|c| (dets[c.scene][c.index].cluster, c.class))
        .collect()
}

/// A detection that passed [`filter_correct`], by position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectDetection {
    pub scene: usize,
    pub index: usize,
    pub class: u8,
}

pub fn correct_detections(dets: &[Vec<Detection>], gts: &[Vec<BoxXyxy>], labels: &[Vec<u8>]) -> Vec<CorrectDetection> {
    let mut out = Vec::new();
    for (s, ds) in dets.iter().enumerate() {
        for (i, d) in ds.iter().enumerate() {
            let best = gts[s]
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, v)) = best {
                if v >= 0.5 {
                    out.push(CorrectDetection {
                        scene: s,
                        index: i,
                        class: labels[s][j],
                    });
                }
            }
        }
    }
    out
}

/// Clustering accuracy: each cluster counts its plurality class.
pub fn clustering_acc(pairs: &[(usize, u8)], num_clusters: usize, num_classes: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty assignment".into()));
    }
    if let Some(&(k, j)) = pairs
        .iter()
        .find(|(k, j)| *k >= num_clusters || *j as usize >= num_classes)
    {
        return Err(Error::Argument(format!(
            "pair ({k}, {j}) outside {num_clusters} clusters x {num_classes} classes"
        )));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_clusters];
    for &(k, j) in pairs {
        counts[k][j as usize] += 1;
    }
    let hits: usize = counts.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Normalized mutual information `2 I(G, P) / (H(G) + H(P))`, natural log.
pub fn clustering_nmi(pairs: &[(usize, u8)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("NMI of an empty assignment".into()));
    }
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(usize, u8), f64> = BTreeMap::new();
    let mut pk: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pj: BTreeMap<u8, f64> = BTreeMap::new();
    for &(k, j) in pairs {
        *joint.entry((k, j)).or_default() += 1.0 / n;
        *pk.entry(k).or_default() += 1.0 / n;
        *pj.entry(j).or_default() += 1.0 / n;
    }
    let entropy = |m: &mut dyn Iterator<Item = f64>| -> f64 { m.map(|p| -p * p.ln()).sum() };
    let hk = entropy(&mut pk.values().copied());
    let hj = entropy(&mut pj.values().copied());
    if hk + hj == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(k, j), &p)| p * (p / (pk[&k] * pj[&j])).ln())
        .sum();
    Ok((2.0 * mi / (hk + hj)).clamp(0.0, 1.0))
}

/// Anything that turns a batch of scenes into detections.
pub trait Detector {
    /// `images` is `(B, 3, H, W)`; `ids` names each scene.
    fn detect(&mut self, images: &Tensor, ids: &[String]) -> Result<Vec<Vec<Detection>>>;
}

/// Emits the annotated boxes with score 1 and the true class as cluster.
pub struct OracleDetector {
    truth: HashMap<String, (Vec<BoxXyxy>, Vec<u8>)>,
}

impl OracleDetector {
    pub fn new(dataset: &Dataset) -> Self {
        let truth = dataset
            .annotations
            .iter()
            .map(|a| (a.id.clone(), (a.boxes.clone(), a.labels.clone())))
            .collect();
        Self { truth }
    }
}

impl Detector for OracleDetector {
    fn detect(&mut self, _images: &Tensor, ids: &[String]) -> Result<Vec<Vec<Detection>>> {
        ids.iter()
            .map(|id| {
                let (boxes, labels) = self
                    .truth
                    .get(id)
                    .ok_or_else(|| Error::Argument(format!("no annotation for scene `{id}`")))?;
                Ok(boxes
                    .iter()
                    .zip(labels)
                    .map(|(b, &l)| Detection {
                        bbox: *b,
                        score: 1.0,
                        cluster: l as usize,
                    })
                    .collect())
            })
            .collect()
    }
}

/// Deterministic-mode model detections.
pub struct ModelDetector<'a> {
    pub model: &'a Model,
    pub eval: EvalConfig,
}

/// Detections of one batch together with the grid cell each came from.
pub struct CellDetections {
    pub output: ForwardOutput,
    /// Per scene: `(cell, detection)`.
    pub scenes: Vec<Vec<(usize, Detection)>>,
}

/// Runs deterministic inference and turns kept cells into detections.
pub fn detect_cells(model: &Model, images: &Tensor, eval: &EvalConfig) -> Result<CellDetections> {
    let cfg = &model.config.model;
    // Deterministic mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(images, Mode::Deterministic, &mut rng)?;
    let b = images.dim(0)?;
    let g = cfg.num_cells();
    let boxes = decode_where(&out.latents.z_where, cfg)?.to_rows()?;
    let f64v = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?) };
    let pres = f64v(&out.posterior.pres_prob)?;
    let clusters: Vec<u32> = out.latents.z_cat.argmax(2)?.flatten_all()?.to_vec1()?;
    let alpha = if eval.refine_boxes {
        Some(f64v(&out.decoded.alpha)?)
    } else {
        None
    };
    let (gh, gw) = (cfg.glimpse_h, cfg.glimpse_w);
    let mut scenes = Vec::with_capacity(b);
    for s in 0..b {
        let mut ds = Vec::new();
        for c in 0..g {
            let n = s * g + c;
            if pres[n] < eval.pres_threshold {
                continue;
            }
            let [cx, cy, w, h] = boxes[n];
            let mut d = Detection {
                bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
                score: pres[n],
                cluster: clusters[n] as usize,
            };
            if let Some(a) = &alpha {
                d = refine_box(&d, &a[n * gh * gw..(n + 1) * gh * gw], gh, gw, eval.alpha_threshold);
            }
            ds.push((c, d));
        }
        scenes.push(ds);
    }
    Ok(CellDetections { output: out, scenes })
}

impl Detector for ModelDetector<'_> {
    fn detect(&mut self, images: &Tensor, _ids: &[String]) -> Result<Vec<Vec<Detection>>> {
        let cd = detect_cells(self.model, images, &self.eval)?;
        Ok(cd
            .scenes
            .into_iter()
            .map(|s| s.into_iter().map(|(_, d)| d).collect())
            .collect())
    }
}

/// Per-scene detections in annotation-line form plus scores and clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionLine {
    pub id: String,
    pub boxes: Vec<BoxXyxy>,
    pub labels: Vec<usize>,
    pub score: Vec<f64>,
    pub cluster: Vec<usize>,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub detections: Vec<Vec<Detection>>,
}

/// Runs `detector` over `dataset` in file order and scores the result.
pub fn evaluate(
    detector: &mut dyn Detector,
    dataset: &Dataset,
    eval: &EvalConfig,
    num_clusters: usize,
    batch_size: usize,
    dtype: DType,
) -> Result<Evaluation> {
    let n = dataset.len();
    let mut detections = Vec::with_capacity(n);
    let order: Vec<usize> = (0..n).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let images = dataset.batch(chunk, dtype)?;
        let ids: Vec<String> = chunk.iter().map(|&i| dataset.annotations[i].id.clone()).collect();
        let ds = detector.detect(&images, &ids)?;
        detections.extend(ds);
    }
    let gts: Vec<Vec<BoxXyxy>> = dataset.annotations.iter().map(|a| a.boxes.clone()).collect();
    let labels: Vec<Vec<u8>> = dataset.annotations.iter().map(|a| a.labels.clone()).collect();
    let ap = average_precision(&detections, &gts, eval.iou_threshold);
    let pairs = filter_correct(&detections, &gts, &labels);
    let clusters = num_clusters.max(1 + pairs.iter().map(|p| p.0).max().unwrap_or(0));
    let (acc, nmi) = if pairs.is_empty() {
        (0.0, 0.0)
    } else {
        (clustering_acc(&pairs, clusters, 10)?, clustering_nmi(&pairs)?)
    };
    let report = EvalReport {
        ap,
        acc,
        nmi,
        n_correct_boxes: pairs.len(),
        n_detections: detections.iter().map(Vec::len).sum(),
        n_ground_truth: gts.iter().map(Vec::len).sum(),
        n_scenes: n,
    };
    Ok(Evaluation { report, detections })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Argument(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_detections(dataset: &Dataset, detections: &[Vec<Detection>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (a, ds) in dataset.annotations.iter().zip(detections) {
        let line = DetectionLine {
            id: a.id.clone(),
            boxes: ds.iter().map(|d| d.bbox).collect(),
            labels: ds.iter().map(|d| d.cluster).collect(),
            score: ds.iter().map(|d| d.score).collect(),
            cluster: ds.iter().map(|d| d.cluster).collect(),
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Argument(e.to_string()))?;
        writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
