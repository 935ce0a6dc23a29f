use super::img2img::{mixer_block, patch_embed, patch_expand};
use super::layers::linear_named;
use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiresDirection {
    /// `[B, h, w, c]` to `[B, h/2, w/2, 2c]`.
    Merge,
    /// `[B, h, w, 2c]` to `[B, 2h, 2w, c]`.
    Expand,
}

/// Merge groups each 2×2 neighbourhood into one `4c` vector and maps it to `2c`;
/// expand maps `2c` to `4c` and unfolds it back over 2×2 pixels.
pub fn multires_transform<'t, T: Scalar>(
    v: Var<'t, T>,
    direction: MultiresDirection,
    params: &BoundParams<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let s = v.shape();
    let &[b, h, w, c] = s.as_slice() else {
        return Err(Error::shape("multires_transform", &s, &[0, 0, 0, 0]));
    };
    match direction {
        MultiresDirection::Merge => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape("multires merge", &s, &[2, 2]));
            }
            let grouped = v
                .reshape(&[b, h / 2, 2, w / 2, 2, c])?
                .permute(&[0, 1, 3, 2, 4, 5])?
                .reshape(&[b, h / 2, w / 2, 4 * c])?;
            linear_named(grouped, params, prefix)
        }
        MultiresDirection::Expand => {
            let lifted = linear_named(v, params, prefix)?;
            let c_out = lifted.shape()[3] / 4;
            lifted
                .reshape(&[b, h, w, 2, 2, c_out])?
                .permute(&[0, 1, 3, 2, 4, 5])?
                .reshape(&[b, 2 * h, 2 * w, c_out])
        }
    }
}

/// Blocks per scale: `depth / (levels + 1)`, with the remainder at the finest scale.
pub(super) fn blocks_per_scale(config: &ModelConfig) -> Vec<usize> {
    let per = config.depth / (config.levels + 1);
    let mut counts = vec![per; config.levels + 1];
    counts[0] += config.depth - per * (config.levels + 1);
    counts
}

pub(super) fn forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let counts = blocks_per_scale(config);
    let mut v = patch_embed(x, params, config)?;
    for (scale, &n) in counts.iter().enumerate() {
        if scale > 0 {
            v = multires_transform(v, MultiresDirection::Merge, params, &format!("merge.{scale}"))?;
        }
        for j in 0..n {
            v = mixer_block(v, params, &format!("stages.{scale}.blocks.{j}"))?;
        }
    }
    for scale in (1..=config.levels).rev() {
        v = multires_transform(v, MultiresDirection::Expand, params, &format!("unmerge.{scale}"))?;
    }
    patch_expand(v, params, config)
}
