//! Seeded parameter storage and thin constructors for candle layers.
//!
//! candle's CPU generator cannot be seeded, so every initial value is drawn
//! here from a ChaCha stream. Parameters are keyed by module path
//! (`encoder.backbone.stem.weight`, ...) in a sorted map, which keeps
//! iteration order and therefore optimizer updates reproducible.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{
    BatchNorm, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, GroupNorm, Linear,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    /// All variables, running statistics included.
    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.vars.borrow().clone()
    }

    pub fn is_statistic(name: &str) -> bool {
        name.ends_with("running_mean") || name.ends_with("running_var")
    }

    /// Variables updated by gradient descent.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| !Self::is_statistic(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every variable from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.borrow();
        for (name, var) in vars.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.borrow().contains_key(&name) {
            return Err(Error::Shape(format!("parameter `{name}` created twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let data: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut *rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name, var);
        Ok(out)
    }
}

#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }
}

pub fn linear(in_dim: usize, out_dim: usize, p: &ParamPath) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = p.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
    let b = p.var("bias", &[out_dim], Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv2d(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    p: &ParamPath,
) -> Result<Conv2d> {
    let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
    let w = p.var("weight", &[out_c, in_c, kernel, kernel], Init::Uniform(bound))?;
    let b = if bias {
        Some(p.var("bias", &[out_c], Init::Uniform(bound))?)
    } else {
        None
    };
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, b, cfg))
}

/// 1x1 output convolution whose bias starts at `bias_init` for every channel.
pub fn conv1x1_biased(in_c: usize, out_c: usize, bias_init: f64, p: &ParamPath) -> Result<Conv2d> {
    let bound = 1.0 / (in_c as f64).sqrt();
    let w = p.var("weight", &[out_c, in_c, 1, 1], Init::Uniform(bound))?;
    let b = p.var("bias", &[out_c], Init::Const(bias_init))?;
    Ok(Conv2d::new(w, Some(b), Conv2dConfig::default()))
}

/// Transposed convolution with kernel 4, stride 2, padding 1: doubles H and W.
pub fn upsample2x(in_c: usize, out_c: usize, p: &ParamPath) -> Result<ConvTranspose2d> {
    let k = 4;
    let bound = 1.0 / ((out_c * k * k) as f64).sqrt();
    let w = p.var("weight", &[in_c, out_c, k, k], Init::Uniform(bound))?;
    let b = p.var("bias", &[out_c], Init::Uniform(bound))?;
    let cfg = ConvTranspose2dConfig {
        padding: 1,
        output_padding: 0,
        stride: 2,
        dilation: 1,
    };
    Ok(ConvTranspose2d::new(w, Some(b), cfg))
}

pub fn batch_norm(channels: usize, p: &ParamPath) -> Result<BatchNorm> {
    let mean = p.var("running_mean", &[channels], Init::Const(0.0))?;
    let var = p.var("running_var", &[channels], Init::Const(1.0))?;
    let w = p.var("weight", &[channels], Init::Const(1.0))?;
    let b = p.var("bias", &[channels], Init::Const(0.0))?;
    Ok(BatchNorm::new(channels, mean, var, w, b, 1e-5)?)
}

pub fn group_norm(groups: usize, channels: usize, p: &ParamPath) -> Result<GroupNorm> {
    let w = p.var("weight", &[channels], Init::Const(1.0))?;
    let b = p.var("bias", &[channels], Init::Const(0.0))?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Largest divisor of `channels` not exceeding `preferred`, halving from it.
pub fn norm_groups(channels: usize, preferred: usize) -> usize {
    let mut g = preferred.max(1);
    while g > 1 && channels % g != 0 {
        g /= 2;
    }
    g
}

/// A stack of linear layers with ReLU between them.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize, p: &ParamPath) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(w[0], w[1], &p.pp(format!("l{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_core::Module;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}
