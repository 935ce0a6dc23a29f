use rand::Rng as _;

use super::multires::blocks_per_scale;
use super::{Family, ModelConfig};
use crate::params::ModelParams;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `±sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Coarse role of a parameter, for per-component counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embed,
    Position,
    HeightMix,
    WidthMix,
    TokenMix,
    ChannelMix,
    Attention,
    Norm,
    Resample,
    Expand,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, group: ParamGroup) {
        self.specs.push(ParamSpec { name, shape, init, group });
    }

    /// Weight `[out, in]` and bias `[out]`.
    fn linear(&mut self, prefix: &str, input: usize, output: usize, group: ParamGroup) {
        self.push(format!("{prefix}.weight"), vec![output, input], Init::Uniform { fan_in: input }, group);
        self.push(format!("{prefix}.bias"), vec![output], Init::Zeros, group);
    }

    fn norm(&mut self, prefix: &str, len: usize, group: ParamGroup) {
        self.push(format!("{prefix}.gain"), vec![len], Init::Ones, group);
        self.push(format!("{prefix}.bias"), vec![len], Init::Zeros, group);
    }

    /// Norm plus two-layer MLP, all attributed to `group`.
    fn mlp(&mut self, prefix: &str, len: usize, factor: usize, group: ParamGroup) {
        self.norm(&format!("{prefix}.norm"), len, group);
        self.linear(&format!("{prefix}.fc1"), len, factor * len, group);
        self.linear(&format!("{prefix}.fc2"), factor * len, len, group);
    }

    fn mixer_block(&mut self, prefix: &str, h: usize, w: usize, c: usize, f: usize) {
        self.mlp(&format!("{prefix}.height"), h, f, ParamGroup::HeightMix);
        self.mlp(&format!("{prefix}.width"), w, f, ParamGroup::WidthMix);
        self.mlp(&format!("{prefix}.channel"), c, f, ParamGroup::ChannelMix);
    }

    fn patch_expand(&mut self, config: &ModelConfig) {
        let (c, p2) = (config.embed, config.patch * config.patch);
        self.linear("expand", c, c * p2, ParamGroup::Expand);
        self.linear("combine", c, config.channels, ParamGroup::Expand);
    }
}

/// Every trainable tensor of `config`, in forward order.
pub fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = Builder { specs: Vec::new() };
    let (gh, gw) = (config.grid_h(), config.grid_w());
    let (c, f, d, s) = (config.embed, config.factor, config.patch_dim(), config.tokens());
    b.linear("embed", d, c, ParamGroup::Embed);
    match config.family {
        Family::Img2ImgMixer => {
            for i in 0..config.depth {
                b.mixer_block(&format!("blocks.{i}"), gh, gw, c, f);
            }
            b.patch_expand(config);
        }
        Family::LinearMixer => {
            for i in 0..config.depth {
                let p = format!("blocks.{i}");
                b.norm(&format!("{p}.norm"), c, ParamGroup::Norm);
                b.linear(&format!("{p}.height"), gh, gh, ParamGroup::HeightMix);
                b.linear(&format!("{p}.width"), gw, gw, ParamGroup::WidthMix);
                b.linear(&format!("{p}.fc1"), c, f * c, ParamGroup::ChannelMix);
                b.linear(&format!("{p}.fc2"), f * c, c, ParamGroup::ChannelMix);
            }
            b.patch_expand(config);
        }
        Family::MultiresMixer => {
            for (scale, &n) in blocks_per_scale(config).iter().enumerate() {
                let (h, w, ch) = (gh >> scale, gw >> scale, c << scale);
                if scale > 0 {
                    b.linear(&format!("merge.{scale}"), 2 * ch, ch, ParamGroup::Resample);
                }
                for j in 0..n {
                    b.mixer_block(&format!("stages.{scale}.blocks.{j}"), h, w, ch, f);
                }
            }
            for scale in (1..=config.levels).rev() {
                let ch = c << scale;
                b.linear(&format!("unmerge.{scale}"), ch, 2 * ch, ParamGroup::Resample);
            }
            b.patch_expand(config);
        }
        Family::OriginalMixer => {
            for i in 0..config.depth {
                let p = format!("blocks.{i}");
                b.norm(&format!("{p}.token.norm"), c, ParamGroup::Norm);
                b.linear(&format!("{p}.token.fc1"), s, f * s, ParamGroup::TokenMix);
                b.linear(&format!("{p}.token.fc2"), f * s, s, ParamGroup::TokenMix);
                b.mlp(&format!("{p}.channel"), c, f, ParamGroup::ChannelMix);
            }
            b.linear("proj", c, d, ParamGroup::Head);
        }
        Family::VitRecon => {
            b.push("pos_embed".into(), vec![s, c], Init::Uniform { fan_in: c }, ParamGroup::Position);
            for i in 0..config.depth {
                let p = format!("layers.{i}");
                b.norm(&format!("{p}.attn.norm"), c, ParamGroup::Norm);
                for name in ["q", "k", "v", "out"] {
                    b.linear(&format!("{p}.attn.{name}"), c, c, ParamGroup::Attention);
                }
                b.mlp(&format!("{p}.mlp"), c, f, ParamGroup::ChannelMix);
            }
            b.norm("head.norm", c, ParamGroup::Head);
            b.linear("head.proj", c, d, ParamGroup::Head);
        }
    }
    b.specs
}

/// Exact number of trainable scalars.
pub fn count_params(config: &ModelConfig) -> usize {
    layout(config).iter().map(ParamSpec::numel).sum()
}

/// Trainable scalars per [`ParamGroup`], in first-appearance order.
pub fn count_params_by_group(config: &ModelConfig) -> Vec<(ParamGroup, usize)> {
    let mut out: Vec<(ParamGroup, usize)> = Vec::new();
    for spec in layout(config) {
        match out.iter_mut().find(|(g, _)| *g == spec.group) {
            Some((_, n)) => *n += spec.numel(),
            None => out.push((spec.group, spec.numel())),
        }
    }
    out
}

/// Deterministic initialization; each tensor draws from its own named stream.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut params = ModelParams::new();
    for spec in layout(config) {
        let tensor = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::Uniform { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &format!("init/{}", spec.name), 0);
                Tensor::from_fn(&spec.shape, |_| T::from_f64(r.random_range(-bound..bound)))
            }
        };
        params.insert(spec.name, tensor);
    }
    params
}
