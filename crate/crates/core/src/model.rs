//! Encoder, decoder and learnable mixture prior under one parameter store.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::generation::{render_scene, DecodedGlimpse, GlimpseDecoder, Rendered};
use crate::inference::{Encoder, Mode};
use crate::latents::{LatentGrid, MixturePrior, PosteriorParams, PriorParams};
use crate::nn::{Init, ParamStore};

/// Parameter-name prefixes of the three optimizer groups.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const PRIOR_PREFIX: &str = "prior.";

pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: GlimpseDecoder,
    pub mixture: MixturePrior,
}

/// Everything computed by one forward pass.
pub struct ForwardOutput {
    /// The images the pass reconstructs; with `M > 1` Monte Carlo samples
    /// each input appears `M` times (whole batch repeated).
    pub input: Tensor,
    pub posterior: PosteriorParams,
    pub latents: LatentGrid,
    pub glimpses: Tensor,
    pub decoded: DecodedGlimpse,
    pub rendered: Rendered,
}

impl Model {
    /// Builds a freshly initialized model; the seed is `config.train.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        Self::with_dtype(config, config.train.dtype()?)
    }

    pub fn with_dtype(config: &Config, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(dtype, config.train.seed);
        let root = store.root();
        let m = &config.model;
        let encoder = Encoder::new(m, &root.pp("encoder"))?;
        let decoder = GlimpseDecoder::new(m, &root.pp("decoder"))?;
        let prior = root.pp("prior");
        let shape = [m.num_clusters, m.what_dim];
        let mixture = MixturePrior {
            mu: prior.var("mu", &shape, Init::Normal(m.mixture_init_std))?,
            log_sigma: prior.var("log_sigma", &shape, Init::Const(0.0))?,
            log_sigma_min: m.log_std_min,
            log_sigma_max: m.log_std_max,
        };
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            mixture,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn prior_at(&self, step: u64) -> PriorParams {
        PriorParams::at_step(&self.config, self.mixture.clone(), step)
    }

    /// Encodes, decodes and renders a batch `(B, 3, H, W)`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
        let x = x.to_dtype(self.dtype())?;
        let m = self.config.model.mc_samples;
        let input = if m > 1 && mode != Mode::Deterministic {
            x.repeat((m, 1, 1, 1))?
        } else {
            x
        };
        let inf = self.encoder.infer(&input, mode, rng)?;
        let (decoded, rendered) = self.render(&inf.latents)?;
        Ok(ForwardOutput {
            input,
            posterior: inf.posterior,
            latents: inf.latents,
            glimpses: inf.glimpses,
            decoded,
            rendered,
        })
    }

    /// Decodes every cell's appearance and renders the grid.
    pub fn render(&self, grid: &LatentGrid) -> Result<(DecodedGlimpse, Rendered)> {
        let (b, g, a) = grid.z_what.dims3()?;
        if a != self.config.model.what_dim || g != self.config.model.num_cells() {
            return Err(Error::Shape(format!(
                "latent grid {:?} does not fit this model",
                grid.z_what.dims()
            )));
        }
        let decoded = self.decoder.decode(&grid.z_what.reshape((b * g, a))?)?;
        let rendered = render_scene(&decoded, grid, &self.config.model)?;
        Ok((decoded, rendered))
    }
}
