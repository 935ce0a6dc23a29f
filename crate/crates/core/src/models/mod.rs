//! Image-to-image network families.
//!
//! All families map a batch of images `[B, H, W, ch]` (or a single image
//! `[H, W, ch]`) to an output of the same shape. For denoising the output is
//! read as the predicted noise residual.

mod img2img;
mod layers;
mod layout;
mod linear_mixer;
mod multires;
mod original;
mod vit;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::io::KvConfig;
use crate::params::{BoundParams, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use img2img::{mixer_block, patch_embed, patch_expand};
pub use layers::{linear, patchify, unpatchify};
pub use layout::{count_params, count_params_by_group, init_params, layout, Init, ParamGroup, ParamSpec};
pub use linear_mixer::linear_mixer_block;
pub use multires::{multires_transform, MultiresDirection};
pub use vit::self_attention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Img2ImgMixer,
    OriginalMixer,
    LinearMixer,
    MultiresMixer,
    VitRecon,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Img2ImgMixer,
        Family::OriginalMixer,
        Family::LinearMixer,
        Family::MultiresMixer,
        Family::VitRecon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Img2ImgMixer => "img2img",
            Family::OriginalMixer => "original",
            Family::LinearMixer => "linear",
            Family::MultiresMixer => "multires",
            Family::VitRecon => "vit",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img2img" | "img2img_mixer" => Ok(Family::Img2ImgMixer),
            "original" | "original_mixer" => Ok(Family::OriginalMixer),
            "linear" | "linear_mixer" => Ok(Family::LinearMixer),
            "multires" | "multires_mixer" => Ok(Family::MultiresMixer),
            "vit" | "vit_recon" => Ok(Family::VitRecon),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (valid: img2img, original, linear, multires, vit)"
            ))),
        }
    }
}

pub const SUPPORTED_PATCH_SIZES: [usize; 4] = [1, 2, 4, 8];

/// Architecture family and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub family: Family,
    /// Image height in pixels.
    pub height: usize,
    /// Image width in pixels.
    pub width: usize,
    /// Image channels (1 or 3).
    pub channels: usize,
    /// Patch size `P`.
    pub patch: usize,
    /// Number of mixer blocks (or transformer layers) `N`.
    pub depth: usize,
    /// Embedding dimension `C`.
    pub embed: usize,
    /// MLP hidden expansion factor `f`.
    pub factor: usize,
    /// Attention heads (vit only).
    pub heads: usize,
    /// Merge stages (multires only).
    pub levels: usize,
}

impl ModelConfig {
    pub fn new(family: Family, height: usize, width: usize, channels: usize) -> Self {
        ModelConfig {
            family,
            height,
            width,
            channels,
            patch: 4,
            depth: 16,
            embed: 64,
            factor: 4,
            heads: 4,
            levels: 1,
        }
    }

    pub fn with_arch(mut self, patch: usize, depth: usize, embed: usize, factor: usize) -> Self {
        self.patch = patch;
        self.depth = depth;
        self.embed = embed;
        self.factor = factor;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    /// Patch-grid height `H/P`.
    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    /// Patch-grid width `W/P`.
    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    /// Token count `S = HW/P^2`.
    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Flattened patch length `D = ch * P^2`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !SUPPORTED_PATCH_SIZES.contains(&self.patch) {
            return fail(format!("patch size {} not in {SUPPORTED_PATCH_SIZES:?}", self.patch));
        }
        if self.height == 0 || self.width == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.height,
                self.width,
                p = self.patch
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.depth == 0 || self.embed == 0 || self.factor == 0 {
            return fail("depth, embed and factor must all be at least 1".into());
        }
        match self.family {
            Family::VitRecon => {
                if self.heads == 0 || self.embed % self.heads != 0 {
                    return fail(format!("embed {} not divisible by heads {}", self.embed, self.heads));
                }
            }
            Family::MultiresMixer => {
                let step = 1usize << self.levels;
                if self.levels == 0 || self.grid_h() % step != 0 || self.grid_w() % step != 0 {
                    return fail(format!(
                        "patch grid {}x{} cannot be halved {} times",
                        self.grid_h(),
                        self.grid_w(),
                        self.levels
                    ));
                }
                if self.depth < self.levels + 1 {
                    return fail(format!("depth {} too small for {} levels", self.depth, self.levels));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("family", self.family.name());
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("channels", self.channels);
        kv.set("patch", self.patch);
        kv.set("depth", self.depth);
        kv.set("embed", self.embed);
        kv.set("factor", self.factor);
        kv.set("heads", self.heads);
        kv.set("levels", self.levels);
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let family: Family = kv.require("family")?;
        let mut c = ModelConfig::new(family, kv.require("height")?, kv.require("width")?, kv.require("channels")?);
        c.patch = kv.require("patch")?;
        c.depth = kv.require("depth")?;
        c.embed = kv.require("embed")?;
        c.factor = kv.require("factor")?;
        c.heads = kv.get_or("heads", c.heads)?;
        c.levels = kv.get_or("levels", c.levels)?;
        c.validate()?;
        Ok(c)
    }
}

/// Runs the configured network on a `[B, H, W, ch]` or `[H, W, ch]` input.
pub fn forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    input: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = input.shape();
    let expected = config.image_shape();
    let (batched, single) = match shape.as_slice() {
        [h, w, c] if [*h, *w, *c] == expected => (input.reshape(&[1, *h, *w, *c])?, true),
        [_, h, w, c] if [*h, *w, *c] == expected => (input, false),
        _ => {
            let mut want = vec![0];
            want.extend_from_slice(&expected);
            return Err(Error::shape("forward", &shape, &want));
        }
    };
    let out = match config.family {
        Family::Img2ImgMixer => img2img::forward(config, params, batched)?,
        Family::OriginalMixer => original::forward(config, params, batched)?,
        Family::LinearMixer => linear_mixer::forward(config, params, batched)?,
        Family::MultiresMixer => multires::forward(config, params, batched)?,
        Family::VitRecon => vit::forward(config, params, batched)?,
    };
    if single {
        out.reshape(&shape)
    } else {
        Ok(out)
    }
}

/// Inference without gradient tracking.
pub fn predict<T: Scalar>(config: &ModelConfig, params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let x = tape.constant(input);
    Ok(forward(config, &bound, x)?.value())
}

/// Finite-difference check of `sum(R ⊙ forward(x))` with respect to every
/// parameter tensor and the input, for random `x`, `R` and initial weights.
pub fn grad_check_model(config: &ModelConfig, seed: u64, check: GradCheckConfig) -> Result<GradCheckReport> {
    use rand::Rng as _;
    config.validate()?;
    let params: ModelParams<f64> = init_params(config, seed);
    let mut r = crate::rng::stream(seed, "grad-check-model", 0);
    let mut shape = vec![2];
    shape.extend_from_slice(&config.image_shape());
    let x = Tensor::from_fn(&shape, |_| r.random::<f64>());
    let weights = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0));
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|(_, t)| {
        // break the zero/one symmetry of biases and norm affines
        t.map(|v| v + r.random_range(-0.1..0.1))
    }));
    grad_check(
        &inputs,
        |tape, vars| {
            let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(vars[1..].iter().copied()));
            let out = forward(config, &bound, vars[0])?;
            Ok(out.mul(&tape.constant(&weights))?.sum())
        },
        GradCheckConfig { seed, ..check },
    )
}
