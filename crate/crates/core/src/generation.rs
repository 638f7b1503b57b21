//! The decoder `p(x | z)`: glimpse decoding, pasting and depth-weighted
//! compositing on a black background.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, ConvTranspose2d, GroupNorm, Linear};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::inference::decode_where;
use crate::latents::LatentGrid;
use crate::nn::{conv1x1_biased, conv2d, group_norm, linear, norm_groups, upsample2x, ParamPath};
use crate::spatial::{self, Boxes};

/// Floor on the summed compositing weight before normalizing colors.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Initial pre-sigmoid bias of the glimpse color and alpha channels. Glimpses
/// start nearly dark and transparent, so switching an object on costs little
/// reconstruction error before the decoder has learned anything. A grey
/// start pushes presence off within a few hundred steps.
pub const GLIMPSE_BIAS_INIT: f64 = -2.0;

/// Decoded glimpses for `N` objects.
#[derive(Debug, Clone)]
pub struct DecodedGlimpse {
    /// `(N, 3, gh, gw)` in `[0, 1]`.
    pub rgb: Tensor,
    /// `(N, 1, gh, gw)` in `[0, 1]`.
    pub alpha: Tensor,
}

struct UpStage {
    up: ConvTranspose2d,
    norm: GroupNorm,
}

pub struct GlimpseDecoder {
    input: Linear,
    input_dim: usize,
    stages: Vec<UpStage>,
    refine: (Conv2d, GroupNorm),
    out: Conv2d,
    what_dim: usize,
}

impl GlimpseDecoder {
    pub fn new(cfg: &ModelConfig, p: &ParamPath) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = cfg.decoder_input;
        let n = cfg.decoder_channels.len();
        let mut refine = None;
        for (i, &c) in cfg.decoder_channels.iter().enumerate() {
            if i + 1 == n {
                let sp = p.pp("refine");
                refine = Some((
                    conv2d(cin, cin, 3, 1, 1, true, &sp.pp("conv"))?,
                    group_norm(norm_groups(cin, 8), cin, &sp.pp("norm"))?,
                ));
            }
            let sp = p.pp(format!("stage{i}"));
            let groups = norm_groups(c, if i + 1 == n { 4 } else { 8 });
            stages.push(UpStage {
                up: upsample2x(cin, c, &sp.pp("up"))?,
                norm: group_norm(groups, c, &sp.pp("norm"))?,
            });
            cin = c;
        }
        let refine = refine.ok_or_else(|| Error::validation("model.decoder_channels", "empty"))?;
        Ok(Self {
            input: linear(cfg.what_dim, cfg.decoder_input, &p.pp("input"))?,
            input_dim: cfg.decoder_input,
            stages,
            refine,
            out: conv1x1_biased(cin, 4, GLIMPSE_BIAS_INIT, &p.pp("out"))?,
            what_dim: cfg.what_dim,
        })
    }

    /// Decodes `(N, A)` appearance latents.
    pub fn decode(&self, z_what: &Tensor) -> Result<DecodedGlimpse> {
        let (n, a) = z_what.dims2()?;
        if a != self.what_dim {
            return Err(Error::Shape(format!(
                "expected (N, {}) appearance latents, got {:?}",
                self.what_dim,
                z_what.dims()
            )));
        }
        let mut h = self
            .input
            .forward(z_what)?
            .relu()?
            .reshape((n, self.input_dim, 1, 1))?;
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            if i == last {
                h = self.refine.1.forward(&self.refine.0.forward(&h)?)?.relu()?;
            }
            h = s.norm.forward(&s.up.forward(&h)?)?.relu()?;
        }
        let out = candle_nn::ops::sigmoid(&self.out.forward(&h)?)?;
        Ok(DecodedGlimpse {
            rgb: out.narrow(1, 0, 3)?,
            alpha: out.narrow(1, 3, 1)?,
        })
    }
}

/// Pastes glimpses into full-size canvases, returning `(rgb, alpha)` of
/// shapes `(N, 3, H, W)` and `(N, 1, H, W)`.
pub fn paste_glimpse(
    g: &DecodedGlimpse,
    boxes: &Boxes,
    canvas_h: usize,
    canvas_w: usize,
) -> Result<(Tensor, Tensor)> {
    let both = Tensor::cat(&[&g.rgb, &g.alpha], 1)?;
    let c = spatial::paste(&both, boxes, canvas_h, canvas_w)?;
    Ok((c.narrow(1, 0, 3)?, c.narrow(1, 3, 1)?))
}

/// Composites per-object canvases.
///
/// `rgb` is `(B, G, 3, H, W)`, `alpha` is `(B, G, 1, H, W)`, `z_pres` and
/// `z_depth` are `(B, G)`. Object `i` gets weight
/// `w_i = z_pres_i * alpha_i * sigmoid(z_depth_i)`; the color is the
/// weight-normalized mix and the pixel is that color times the coverage
/// `min(sum_i z_pres_i * alpha_i, 1)`.
pub fn composite(rgb: &Tensor, alpha: &Tensor, z_pres: &Tensor, z_depth: &Tensor) -> Result<Tensor> {
    let (b, g) = z_pres.dims2()?;
    let per_object = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape((b, g, 1, 1, 1))?) };
    let pres = per_object(z_pres)?;
    let depth = per_object(&candle_nn::ops::sigmoid(z_depth)?)?;
    let visible = alpha.broadcast_mul(&pres)?;
    let w = visible.broadcast_mul(&depth)?;
    let num = rgb.broadcast_mul(&w)?.sum(1)?;
    let den = w.sum(1)?.maximum(WEIGHT_FLOOR)?;
    let coverage = visible.sum(1)?.minimum(1.0)?;
    Ok(num.broadcast_div(&den)?.broadcast_mul(&coverage)?)
}

/// A rendered batch together with the per-object canvases.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// `(B, 3, H, W)`.
    pub image: Tensor,
    /// `(B, G, 3, H, W)`.
    pub rgb: Tensor,
    /// `(B, G, 1, H, W)`.
    pub alpha: Tensor,
}

/// Renders a scene from per-cell decoded glimpses and the latent grid.
pub fn render_scene(glimpses: &DecodedGlimpse, grid: &LatentGrid, cfg: &ModelConfig) -> Result<Rendered> {
    let (b, g) = grid.z_pres.dims2()?;
    let boxes = decode_where(&grid.z_where, cfg)?;
    let (h, w) = (cfg.image_height, cfg.image_width);
    let (rgb, alpha) = paste_glimpse(glimpses, &boxes, h, w)?;
    let rgb = rgb.reshape((b, g, 3, h, w))?;
    let alpha = alpha.reshape((b, g, 1, h, w))?;
    let image = composite(&rgb, &alpha, &grid.z_pres, &grid.z_depth)?;
    Ok(Rendered { image, rgb, alpha })
}

/// Mean over pixels, channels and batch of `sum_i c_i - max_i c_i` with
/// `c_i = pres_i * rgb_i`. `rgb` is `(B, G, 3, H, W)`, `pres` is `(B, G)`.
pub fn overlap_penalty(rgb: &Tensor, pres: &Tensor) -> Result<Tensor> {
    let (b, g) = pres.dims2()?;
    let c = rgb.broadcast_mul(&pres.reshape((b, g, 1, 1, 1))?)?;
    let excess = (c.sum(1)? - c.max(1)?)?;
    Ok(excess.mean_all()?)
}

/// Per-image variant of [`overlap_penalty`], shape `(B,)`.
pub fn overlap_per_image(rgb: &Tensor, pres: &Tensor) -> Result<Tensor> {
    let (b, g) = pres.dims2()?;
    let c = rgb.broadcast_mul(&pres.reshape((b, g, 1, 1, 1))?)?;
    let excess = (c.sum(1)? - c.max(1)?)?;
    Ok(excess.flatten_from(1)?.mean(D::Minus1)?)
}
