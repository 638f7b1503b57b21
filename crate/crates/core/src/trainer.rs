//! Training loop, optimizer and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, TrainConfig};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::inference::Mode;
use crate::metrics::{evaluate, write_report, EvalReport, ModelDetector};
use crate::model::{Model, DECODER_PREFIX, ENCODER_PREFIX, PRIOR_PREFIX};
use crate::objective::{total_loss, LossBreakdown};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Adam without weight decay, one learning-rate multiplier per parameter group.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Learning-rate multiplier of the group a parameter belongs to.
pub fn lr_multiplier(name: &str, cfg: &TrainConfig) -> f64 {
    if name.starts_with(ENCODER_PREFIX) {
        cfg.lr_mult_encoder
    } else if name.starts_with(DECODER_PREFIX) {
        cfg.lr_mult_decoder
    } else if name.starts_with(PRIOR_PREFIX) {
        cfg.lr_mult_prior
    } else {
        1.0
    }
}

impl Adam {
    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, model: &Model, grads: &GradStore, cfg: &TrainConfig) -> Result<f64> {
        let params = model.store.trainable();
        let mut sq = 0.0;
        for (_, var) in &params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.detach().to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in &params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their autograd graph; keep it out of the moments.
            let g = (g.detach() * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let lr = cfg.learning_rate * lr_multiplier(name, cfg);
            if lr != 0.0 {
                let denom = ((&v / bc2)?.sqrt()? + cfg.adam_eps)?;
                let update = ((&m / bc1)? / denom)?;
                var.set(&(var.as_tensor() - (update * lr)?)?)?;
            }
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

/// Which scenes make up each batch: one seeded permutation per epoch over
/// an endless stream, so the batch at a step depends only on the seed.
pub struct DataOrder {
    seed: u64,
    n: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl DataOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        Self { seed, n, cached: None }
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(e) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(2 + e);
            let mut p: Vec<usize> = (0..self.n).collect();
            p.shuffle(&mut rng);
            self.cached = Some((e, p));
        }
        &self.cached.as_ref().expect("set above").1
    }

    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        let n = self.n as u64;
        (0..batch_size as u64)
            .map(|i| {
                let pos = step * batch_size as u64 + i;
                self.epoch(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

/// Everything needed to continue training.
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        let model = Model::new(config)?;
        Ok(Self {
            step: 0,
            model,
            optimizer: Adam::default(),
            rng: noise_rng(config.train.seed),
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }
}

/// Generator for sampling noise; stream 1 keeps it apart from parameter
/// initialization (stream 0) and data order (streams 2 and up).
pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLogRow {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub pres_prior: f64,
    pub alpha_overlap: f64,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricsLogRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(rows)
}

/// Per-step losses of a run plus its final state.
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<(u64, LossBreakdown)>,
    pub report: Option<EvalReport>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    loss: &'a LossBreakdown,
    scene_ids: Vec<&'a str>,
}

/// Trains from scratch.
pub fn train(config: &Config, data: &Dataset, out_dir: &Path, eval_data: Option<&Dataset>) -> Result<TrainOutcome> {
    train_from(TrainState::new(config)?, data, out_dir, eval_data, None)
}

/// Continues `state` until `total_steps` (or `stop_at`, if given and sooner).
pub fn train_from(
    mut state: TrainState,
    data: &Dataset,
    out_dir: &Path,
    eval_data: Option<&Dataset>,
    stop_at: Option<u64>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    let cfg = state.model.config.clone();
    let m = &cfg.model;
    if data.manifest.image_size != m.image_height || data.manifest.image_size != m.image_width {
        return Err(Error::Argument(format!(
            "dataset images are {0}x{0} but the model expects {1}x{2}",
            data.manifest.image_size, m.image_height, m.image_width
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_FILE);
    truncate_log(&log_path, state.step)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let t = &cfg.train;
    let end = stop_at.map_or(t.total_steps, |s| s.min(t.total_steps));
    let mut order = DataOrder::new(t.seed, data.len());
    let mut window = Vec::new();
    let mut history = Vec::new();
    let mut report = None;
    let dtype = state.model.dtype();
    while state.step < end {
        let step = state.step;
        let idx = order.batch(step, t.batch_size);
        let x = data.batch(&idx, dtype)?;
        let out = state.model.forward(&x, Mode::Train, &mut state.rng)?;
        let prior = state.model.prior_at(step);
        let weights = cfg.weights_at(step);
        let (total, breakdown) = total_loss(&out, &prior, &weights, m.recon_std)?;
        if !breakdown.is_finite() {
            let dump = out_dir.join(format!("nan_dump_{step}.json"));
            let d = NanDump {
                step,
                loss: &breakdown,
                scene_ids: idx.iter().map(|&i| data.annotations[i].id.as_str()).collect(),
            };
            let text = serde_json::to_string_pretty(&d).map_err(|e| Error::Argument(e.to_string()))?;
            fs::write(&dump, text).map_err(|e| Error::io(&dump, e))?;
            return Err(Error::NumericalAbort { step, dump });
        }
        let grads = total.backward()?;
        state.optimizer.step(&state.model, &grads, t)?;
        state.step += 1;
        window.push(breakdown);
        history.push((step, breakdown));

        let s = state.step;
        let log_now = t.log_every > 0 && s % t.log_every == 0;
        let eval_now = eval_data.is_some() && t.eval_every > 0 && s % t.eval_every == 0;
        if log_now || eval_now {
            let mut row = MetricsLogRow {
                step: s,
                loss: LossBreakdown::mean(&window),
                pres_prior: cfg.pres_prior_at(s),
                alpha_overlap: cfg.weights_at(s).alpha_overlap,
                learning_rate: t.learning_rate,
                ap: None,
                acc: None,
                nmi: None,
            };
            if let (true, Some(ev)) = (eval_now, eval_data) {
                let r = run_eval(&state.model, ev)?;
                row.ap = Some(r.ap);
                row.acc = Some(r.acc);
                row.nmi = Some(r.nmi);
                report = Some(r);
            }
            window.clear();
            let text = serde_json::to_string(&row).map_err(|e| Error::Argument(e.to_string()))?;
            writeln!(log, "{text}").map_err(|e| Error::io(&log_path, e))?;
        }
        if t.checkpoint_every > 0 && s % t.checkpoint_every == 0 {
            save_checkpoint(&state, &checkpoint_path(out_dir, s))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let last = checkpoint_path(out_dir, state.step);
    if !last.exists() {
        save_checkpoint(&state, &last)?;
    }
    if let Some(ev) = eval_data {
        let r = match report {
            Some(r) if state.step % t.eval_every.max(1) == 0 => r,
            _ => run_eval(&state.model, ev)?,
        };
        write_report(&r, &out_dir.join(REPORT_FILE))?;
        report = Some(r);
    }
    Ok(TrainOutcome {
        state,
        history,
        report,
    })
}

fn run_eval(model: &Model, data: &Dataset) -> Result<EvalReport> {
    let mut det = ModelDetector {
        model,
        eval: model.config.eval.clone(),
    };
    let bs = model.config.train.batch_size;
    Ok(evaluate(&mut det, data, &model.config.eval, model.config.model.num_clusters, bs, model.dtype())?.report)
}

/// Drops rows past `step` so a resumed run keeps the log increasing.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = read_metrics_log(path)?;
    if rows.iter().all(|r| r.step <= step) {
        return Ok(());
    }
    let mut text = String::new();
    for r in rows.iter().filter(|r| r.step <= step) {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Argument(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step}"))
}

fn tensor_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn tensor_from_bytes(dtype: StDtype, shape: &[usize], data: &[u8]) -> Result<Tensor> {
    let dev = Device::Cpu;
    Ok(match dtype {
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Shape(format!("unsupported tensor dtype {other:?}"))),
    })
}

fn digest(tensors: &BTreeMap<String, (StDtype, Vec<usize>, Vec<u8>)>, meta: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, (dt, shape, bytes)) in tensors {
        h.update(name.as_bytes());
        h.update(format!("{dt:?}{shape:?}").as_bytes());
        h.update(bytes);
    }
    for (k, v) in meta {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    save_checkpoint_versioned(state, path, CHECKPOINT_VERSION)
}

/// As [`save_checkpoint`] with an explicit format version.
#[doc(hidden)]
pub fn save_checkpoint_versioned(state: &TrainState, path: &Path, version: u32) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, var) in state.model.store.vars() {
        let (dt, bytes) = tensor_bytes(var.as_tensor())?;
        tensors.insert(format!("param/{name}"), (dt, var.dims().to_vec(), bytes));
    }
    for (prefix, map) in [("adam_m", &state.optimizer.m), ("adam_v", &state.optimizer.v)] {
        for (name, t) in map {
            let (dt, bytes) = tensor_bytes(t)?;
            tensors.insert(format!("{prefix}/{name}"), (dt, t.dims().to_vec(), bytes));
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("format_version".to_string(), version.to_string());
    meta.insert("step".to_string(), state.step.to_string());
    meta.insert("adam_t".to_string(), state.optimizer.t.to_string());
    meta.insert("config".to_string(), state.model.config.to_toml_string());
    meta.insert("rng_seed".to_string(), hex::encode(state.rng.get_seed()));
    meta.insert("rng_stream".to_string(), state.rng.get_stream().to_string());
    meta.insert("rng_word_pos".to_string(), state.rng.get_word_pos().to_string());
    let checksum = digest(&tensors, &meta);
    let mut info: HashMap<String, String> = meta.into_iter().collect();
    info.insert("checksum".to_string(), checksum);

    let views = tensors
        .iter()
        .map(|(k, (dt, shape, bytes))| Ok((k.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(st_err(path))?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(info)).map_err(st_err(path))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn st_err(path: &Path) -> impl Fn(safetensors::SafeTensorError) -> Error + '_ {
    move |e| Error::Integrity {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Restores a training state saved by [`save_checkpoint`].
pub fn resume(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let integrity = |message: String| Error::Integrity {
        path: path.to_path_buf(),
        message,
    };
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(st_err(path))?;
    let mut meta: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .ok_or_else(|| integrity("no metadata".into()))?
        .into_iter()
        .collect();
    let field = |meta: &BTreeMap<String, String>, k: &str| -> Result<String> {
        meta.get(k).cloned().ok_or_else(|| integrity(format!("missing `{k}`")))
    };
    let version: u32 = field(&meta, "format_version")?
        .parse()
        .map_err(|_| integrity("unreadable format version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let checksum = meta
        .remove("checksum")
        .ok_or_else(|| integrity("missing checksum".into()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(st_err(path))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, (view.dtype(), view.shape().to_vec(), view.data().to_vec()));
    }
    if digest(&tensors, &meta) != checksum {
        return Err(integrity("checksum mismatch".into()));
    }

    let num = |k: &str| -> Result<u64> {
        field(&meta, k)?
            .parse()
            .map_err(|_| integrity(format!("unreadable `{k}`")))
    };
    let config = Config::from_toml_str(&field(&meta, "config")?, &[])?;
    let model = Model::new(&config)?;
    let mut params = HashMap::new();
    let mut adam = Adam {
        t: num("adam_t")?,
        ..Adam::default()
    };
    for (name, (dt, shape, data)) in &tensors {
        let t = tensor_from_bytes(*dt, shape, data)?.to_dtype(model.dtype())?;
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam_m/") {
            adam.m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam_v/") {
            adam.v.insert(p.to_string(), t);
        }
    }
    model.store.load(&params)?;

    let seed_hex = field(&meta, "rng_seed")?;
    let seed: [u8; 32] = hex::decode(&seed_hex)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| integrity("unreadable rng seed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(num("rng_stream")?);
    let word_pos: u128 = field(&meta, "rng_word_pos")?
        .parse()
        .map_err(|_| integrity("unreadable rng position".into()))?;
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        step: num("step")?,
        model,
        optimizer: adam,
        rng,
    })
}
