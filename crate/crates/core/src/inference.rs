//! The encoder `q(z | x)`.
//!
//! A backbone turns the scene into one feature vector per grid cell. Three
//! convolutional heads read presence, depth and location posteriors from the
//! features; glimpses cropped at each cell's box then feed the category
//! encoder, and the glimpse together with the sampled category feeds the
//! appearance encoder. Sampling follows the factorization order: location,
//! then category (through the glimpse), then appearance.

use candle_core::{Module, ModuleT, Tensor, D};
use candle_nn::{BatchNorm, Conv2d, ConvTranspose2d};
use rand::Rng;

use crate::config::{Backbone as BackboneKind, ModelConfig};
use crate::error::{Error, Result};
use crate::latents::{
    one_hot_argmax, sample_gaussian, sample_gumbel_softmax, sample_relaxed_bernoulli,
    LatentGrid, PosteriorParams,
};
use crate::nn::{batch_norm, conv2d, upsample2x, Mlp, ParamPath};
use crate::spatial::{self, Boxes};

/// How latents are produced during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Reparameterized samples; batch norm uses and updates batch statistics.
    Train,
    /// Reparameterized samples with frozen batch-norm statistics.
    Sample,
    /// Posterior modes and means with frozen batch-norm statistics.
    Deterministic,
}

impl Mode {
    fn train_bn(self) -> bool {
        matches!(self, Mode::Train)
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        p: &ParamPath,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv2d(in_c, out_c, k, stride, pad, false, &p.pp("conv"))?,
            bn: batch_norm(out_c, &p.pp("bn"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?)
    }
}

struct BasicBlock {
    c1: ConvBn,
    c2: ConvBn,
    down: Option<ConvBn>,
}

impl BasicBlock {
    fn new(in_c: usize, out_c: usize, stride: usize, p: &ParamPath) -> Result<Self> {
        let down = if stride != 1 || in_c != out_c {
            Some(ConvBn::new(in_c, out_c, 1, stride, 0, &p.pp("down"))?)
        } else {
            None
        };
        Ok(Self {
            c1: ConvBn::new(in_c, out_c, 3, stride, 1, &p.pp("c1"))?,
            c2: ConvBn::new(out_c, out_c, 3, 1, 1, &p.pp("c2"))?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.c1.forward(x, train)?.relu()?;
        let h = self.c2.forward(&h, train)?;
        let skip = match &self.down {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

struct UpBn {
    up: ConvTranspose2d,
    bn: BatchNorm,
}

impl UpBn {
    fn new(in_c: usize, out_c: usize, p: &ParamPath) -> Result<Self> {
        Ok(Self {
            up: upsample2x(in_c, out_c, &p.pp("up"))?,
            bn: batch_norm(out_c, &p.pp("bn"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.up.forward(x)?, train)?.relu()?)
    }
}

enum BackboneNet {
    Resnet18 {
        stem: ConvBn,
        blocks: Vec<BasicBlock>,
        up: Vec<UpBn>,
    },
    Compact {
        layers: Vec<ConvBn>,
    },
}

/// Image to `(B, D, grid_h, grid_w)` features.
pub struct Backbone {
    net: BackboneNet,
    image_hw: (usize, usize),
    grid_hw: (usize, usize),
    channels: usize,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, p: &ParamPath) -> Result<Self> {
        let net = match cfg.backbone {
            BackboneKind::Resnet18 => {
                let stem = ConvBn::new(3, 64, 7, 2, 3, &p.pp("stem"))?;
                let plan = [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
                let mut blocks = Vec::new();
                for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
                    let lp = p.pp(format!("layer{}", i + 1));
                    blocks.push(BasicBlock::new(cin, cout, stride, &lp.pp("0"))?);
                    blocks.push(BasicBlock::new(cout, cout, 1, &lp.pp("1"))?);
                }
                let up = vec![
                    UpBn::new(512, 128, &p.pp("deconv1"))?,
                    UpBn::new(128, cfg.feature_channels, &p.pp("deconv2"))?,
                ];
                BackboneNet::Resnet18 { stem, blocks, up }
            }
            BackboneKind::Compact => {
                let stride = cfg.image_height / cfg.grid_h;
                let stages = stride.trailing_zeros() as usize;
                let base = cfg.compact_channels;
                let mut layers = vec![ConvBn::new(3, base, 3, 1, 1, &p.pp("stem"))?];
                let mut cin = base;
                for s in 0..stages {
                    let cout = base << (s + 1).min(2);
                    layers.push(ConvBn::new(cin, cout, 3, 2, 1, &p.pp(format!("down{s}")))?);
                    cin = cout;
                }
                layers.push(ConvBn::new(
                    cin,
                    cfg.feature_channels,
                    1,
                    1,
                    0,
                    &p.pp("proj"),
                )?);
                BackboneNet::Compact { layers }
            }
        };
        Ok(Self {
            net,
            image_hw: (cfg.image_height, cfg.image_width),
            grid_hw: (cfg.grid_h, cfg.grid_w),
            channels: cfg.feature_channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || (h, w) != self.image_hw {
            return Err(Error::Shape(format!(
                "expected (B, 3, {}, {}) images, got {:?}",
                self.image_hw.0,
                self.image_hw.1,
                x.dims()
            )));
        }
        let f = match &self.net {
            BackboneNet::Resnet18 { stem, blocks, up } => {
                let h = stem.forward(x, train)?.relu()?;
                // Zero padding is safe for max pooling after a ReLU.
                let h = h
                    .pad_with_zeros(2, 1, 1)?
                    .pad_with_zeros(3, 1, 1)?
                    .max_pool2d_with_stride(3, 2)?;
                let mut h = h;
                for b in blocks {
                    h = b.forward(&h, train)?;
                }
                for u in up {
                    h = u.forward(&h, train)?;
                }
                h
            }
            BackboneNet::Compact { layers } => {
                let mut h = x.clone();
                for l in layers {
                    h = l.forward(&h, train)?.relu()?;
                }
                h
            }
        };
        let (_, d, gh, gw) = f.dims4()?;
        debug_assert_eq!((d, gh, gw), (self.channels, self.grid_hw.0, self.grid_hw.1));
        Ok(f)
    }
}

/// Shared head shape: 3x3 conv trunk, a 1x1 mean output and an optional
/// parallel 1x1 log-std output.
pub struct Head {
    trunk: Vec<Conv2d>,
    mean: Conv2d,
    log_std: Option<Conv2d>,
}

impl Head {
    pub fn new(
        in_c: usize,
        hidden: usize,
        layers: usize,
        out: usize,
        with_std: bool,
        p: &ParamPath,
    ) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut c = in_c;
        for i in 0..layers {
            trunk.push(conv2d(c, hidden, 3, 1, 1, true, &p.pp(format!("hidden{i}")))?);
            c = hidden;
        }
        let mean = conv2d(c, out, 1, 1, 0, true, &p.pp("out"))?;
        let log_std = if with_std {
            Some(conv2d(c, out, 1, 1, 0, true, &p.pp("out_std"))?)
        } else {
            None
        };
        Ok(Self {
            trunk,
            mean,
            log_std,
        })
    }

    /// Returns per-cell `(B, G, out)` tensors for the mean and, if present, log-std.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut h = f.clone();
        for c in &self.trunk {
            h = c.forward(&h)?.relu()?;
        }
        let mean = cells(&self.mean.forward(&h)?)?;
        let log_std = match &self.log_std {
            Some(c) => Some(cells(&c.forward(&h)?)?),
            None => None,
        };
        Ok((mean, log_std))
    }
}

/// `(B, K, H, W)` to `(B, H*W, K)`.
fn cells(x: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?.reshape((b, h * w, k))?)
}

/// Head outputs before any sampling.
pub struct HeadOutputs {
    pub pres_logit: Tensor,
    pub where_mean: Tensor,
    pub where_log_std: Tensor,
    pub depth_mean: Tensor,
    pub depth_log_std: Tensor,
}

/// Maps raw location latents `(B, G, 4)` to pixel boxes, one per cell.
///
/// The center is `(col + sigmoid(raw_x)) * cell_w`, so it never leaves its
/// cell; the size is the anchor scaled by `exp(clamp(raw_w))`.
pub fn decode_where(raw: &Tensor, cfg: &ModelConfig) -> Result<Boxes> {
    let (b, g, k) = raw.dims3()?;
    if k != 4 || g != cfg.num_cells() {
        return Err(Error::Shape(format!(
            "expected (B, {}, 4) location latents, got {:?}",
            cfg.num_cells(),
            raw.dims()
        )));
    }
    let dev = raw.device();
    let dt = raw.dtype();
    let cols: Vec<f64> = (0..g).map(|i| (i % cfg.grid_w) as f64).collect();
    let rows: Vec<f64> = (0..g).map(|i| (i / cfg.grid_w) as f64).collect();
    let cols = Tensor::from_vec(cols, (1, g), dev)?.to_dtype(dt)?;
    let rows = Tensor::from_vec(rows, (1, g), dev)?.to_dtype(dt)?;
    let part = |i: usize| -> Result<Tensor> { Ok(raw.narrow(2, i, 1)?.squeeze(2)?) };
    let c = cfg.where_scale_clamp;
    let cx = (candle_nn::ops::sigmoid(&part(0)?)?.broadcast_add(&cols)? * cfg.cell_w())?;
    let cy = (candle_nn::ops::sigmoid(&part(1)?)?.broadcast_add(&rows)? * cfg.cell_h())?;
    let w = (part(2)?.clamp(-c, c)?.exp()? * cfg.anchor_w)?;
    let h = (part(3)?.clamp(-c, c)?.exp()? * cfg.anchor_h)?;
    let n = b * g;
    Ok(Boxes {
        cx: cx.reshape(n)?,
        cy: cy.reshape(n)?,
        w: w.reshape(n)?,
        h: h.reshape(n)?,
    })
}

/// Scalar form of [`decode_where`] for one cell; returns `(cx, cy, w, h)`.
pub fn decode_where_cell(raw: [f64; 4], row: usize, col: usize, cfg: &ModelConfig) -> [f64; 4] {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let c = cfg.where_scale_clamp;
    [
        (col as f64 + sig(raw[0])) * cfg.cell_w(),
        (row as f64 + sig(raw[1])) * cfg.cell_h(),
        cfg.anchor_w * raw[2].clamp(-c, c).exp(),
        cfg.anchor_h * raw[3].clamp(-c, c).exp(),
    ]
}

/// Crops one glimpse per box: `(B*G, 3, glimpse_h, glimpse_w)`.
pub fn extract_glimpses(x: &Tensor, boxes: &Boxes, cfg: &ModelConfig) -> Result<Tensor> {
    spatial::crop(x, boxes, cfg.glimpse_h, cfg.glimpse_w)
}

pub struct Encoder {
    cfg: ModelConfig,
    backbone: Backbone,
    pres_head: Head,
    depth_head: Head,
    where_head: Head,
    cat_encoder: Mlp,
    what_encoder: Mlp,
}

/// Everything the encoder produces in one pass.
pub struct Inference {
    pub posterior: PosteriorParams,
    pub latents: LatentGrid,
    /// `(B*G, 3, gh, gw)` crops fed to the category and appearance encoders.
    pub glimpses: Tensor,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, p: &ParamPath) -> Result<Self> {
        let d = cfg.feature_channels;
        let (hc, hl) = (cfg.head_channels, cfg.head_layers);
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(cfg, &p.pp("backbone"))?,
            pres_head: Head::new(d, hc, hl, 1, false, &p.pp("pres_head"))?,
            depth_head: Head::new(d, hc, hl, 1, true, &p.pp("depth_head"))?,
            where_head: Head::new(d, hc, hl, 4, true, &p.pp("where_head"))?,
            cat_encoder: Mlp::new(
                cfg.glimpse_len(),
                &cfg.encoder_hidden,
                cfg.num_clusters,
                &p.pp("cat_encoder"),
            )?,
            what_encoder: Mlp::new(
                cfg.glimpse_len() + cfg.num_clusters,
                &cfg.encoder_hidden,
                2 * cfg.what_dim,
                &p.pp("what_encoder"),
            )?,
        })
    }

    pub fn extract_features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.backbone.forward(x, train)
    }

    pub fn predict_heads(&self, f: &Tensor) -> Result<HeadOutputs> {
        let (lo, hi) = (self.cfg.log_std_min, self.cfg.log_std_max);
        let (pres, _) = self.pres_head.forward(f)?;
        let (depth_mean, depth_ls) = self.depth_head.forward(f)?;
        let (where_mean, where_ls) = self.where_head.forward(f)?;
        let missing = || Error::Shape("head without a log-std branch".into());
        Ok(HeadOutputs {
            pres_logit: pres.squeeze(2)?,
            where_mean,
            where_log_std: where_ls.ok_or_else(missing)?.clamp(lo, hi)?,
            depth_mean: depth_mean.squeeze(2)?,
            depth_log_std: depth_ls.ok_or_else(missing)?.squeeze(2)?.clamp(lo, hi)?,
        })
    }

    /// Category logits `(N, C)` for flattened glimpses `(N, 3, gh, gw)`.
    pub fn encode_cat(&self, glimpses: &Tensor) -> Result<Tensor> {
        let n = glimpses.dim(0)?;
        self.cat_encoder.forward(&glimpses.reshape((n, ()))?)
    }

    /// Appearance posterior `(mean, log_std)`, each `(N, A)`.
    pub fn encode_what(&self, glimpses: &Tensor, z_cat: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = glimpses.dim(0)?;
        let input = Tensor::cat(&[&glimpses.reshape((n, ()))?, z_cat], 1)?;
        let out = self.what_encoder.forward(&input)?;
        let a = self.cfg.what_dim;
        let mean = out.narrow(1, 0, a)?;
        let log_std = out
            .narrow(1, a, a)?
            .clamp(self.cfg.log_std_min, self.cfg.log_std_max)?;
        Ok((mean, log_std))
    }

    /// Full encoder pass over a batch `(B, 3, H, W)`.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Inference> {
        let cfg = &self.cfg;
        let b = x.dim(0)?;
        let g = cfg.num_cells();
        let n = b * g;
        let deterministic = mode == Mode::Deterministic;
        let temp = cfg.gumbel_temperature;

        let f = self.extract_features(x, mode.train_bn())?;
        let heads = self.predict_heads(&f)?;
        let pres_prob = candle_nn::ops::sigmoid(&heads.pres_logit)?;

        let (z_pres, z_where, z_depth) = if deterministic {
            (
                pres_prob.ge(0.5)?.to_dtype(x.dtype())?,
                heads.where_mean.clone(),
                heads.depth_mean.clone(),
            )
        } else {
            let z_pres = sample_relaxed_bernoulli(&heads.pres_logit, temp, rng, cfg.hard_pres)?;
            let z_where = sample_gaussian(&heads.where_mean, &heads.where_log_std, rng)?;
            let z_depth = sample_gaussian(&heads.depth_mean, &heads.depth_log_std, rng)?;
            (z_pres, z_where, z_depth)
        };

        let glimpse_where = if cfg.sample_where_for_glimpse && !deterministic {
            &z_where
        } else {
            &heads.where_mean
        };
        let boxes = decode_where(glimpse_where, cfg)?;
        let glimpses = extract_glimpses(x, &boxes, cfg)?;

        let cat_logits = self.encode_cat(&glimpses)?;
        let z_cat = if deterministic {
            one_hot_argmax(&cat_logits)?
        } else {
            sample_gumbel_softmax(&cat_logits, temp, rng, cfg.hard_cat)?
        };

        let (what_mean, what_log_std) = self.encode_what(&glimpses, &z_cat)?;
        let z_what = if deterministic {
            what_mean.clone()
        } else {
            sample_gaussian(&what_mean, &what_log_std, rng)?
        };

        let c = cfg.num_clusters;
        let a = cfg.what_dim;
        let posterior = PosteriorParams {
            pres_logit: heads.pres_logit,
            pres_prob,
            where_mean: heads.where_mean,
            where_log_std: heads.where_log_std,
            depth_mean: heads.depth_mean,
            depth_log_std: heads.depth_log_std,
            cat_logits: cat_logits.reshape((b, g, c))?,
            what_mean: what_mean.reshape((b, g, a))?,
            what_log_std: what_log_std.reshape((b, g, a))?,
        };
        let latents = LatentGrid {
            z_pres,
            z_what: z_what.reshape((b, g, a))?,
            z_cat: z_cat.reshape((b, g, c))?,
            z_where,
            z_depth,
        };
        debug_assert_eq!(glimpses.dim(0)?, n);
        Ok(Inference {
            posterior,
            latents,
            glimpses,
        })
    }
}

/// Probability of each category from logits `(…, C)`.
pub fn cat_probs(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}
