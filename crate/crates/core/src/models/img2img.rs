use super::layers::{linear_named, patchify, residual_mlp_axis1, residual_mlp_last, unpatchify};
use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::scalar::Scalar;

/// `[B, H, W, ch]` to the `[B, H/P, W/P, C]` volume.
pub fn patch_embed<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &BoundParams<'t, T>,
    config: &ModelConfig,
) -> Result<Var<'t, T>> {
    linear_named(patchify(x, config.patch)?, params, "embed")
}

/// Height, width, then channel mixing on `[B, H', W', C]`; each mixing is
/// `u = v + MLP(LN(v))` with the norm over the mixed axis.
pub fn mixer_block<'t, T: Scalar>(v: Var<'t, T>, params: &BoundParams<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let s = v.shape();
    let &[b, h, w, c] = s.as_slice() else {
        return Err(Error::shape("mixer_block", &s, &[0, 0, 0, 0]));
    };
    let v = residual_mlp_axis1(v.reshape(&[b, h, w * c])?, params, &format!("{prefix}.height"))?;
    let v = residual_mlp_axis1(v.reshape(&[b * h, w, c])?, params, &format!("{prefix}.width"))?;
    let v = residual_mlp_last(v.reshape(&[b, h, w, c])?, params, &format!("{prefix}.channel"))?;
    Ok(v)
}

/// `[B, H', W', C]` to `[B, H, W, ch]`: per-patch lift C→C·P², unfold, per-pixel C→ch.
pub fn patch_expand<'t, T: Scalar>(
    v: Var<'t, T>,
    params: &BoundParams<'t, T>,
    config: &ModelConfig,
) -> Result<Var<'t, T>> {
    let lifted = linear_named(v, params, "expand")?;
    let c = lifted.shape()[3] / (config.patch * config.patch);
    let pixels = unpatchify(lifted, config.patch, c)?;
    linear_named(pixels, params, "combine")
}

pub(super) fn forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let mut v = patch_embed(x, params, config)?;
    for i in 0..config.depth {
        v = mixer_block(v, params, &format!("blocks.{i}"))?;
    }
    patch_expand(v, params, config)
}
