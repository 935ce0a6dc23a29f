use super::img2img::{patch_embed, patch_expand};
use super::layers::{linear_axis1, linear_named, norm_named};
use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::scalar::Scalar;

/// `v + fc2(gelu(fc1(width(height(LN(v))))))` on `[B, H', W', C]`, where the
/// height and width maps are single linear layers and LN runs over C.
pub fn linear_mixer_block<'t, T: Scalar>(
    v: Var<'t, T>,
    params: &BoundParams<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let s = v.shape();
    let &[b, h, w, c] = s.as_slice() else {
        return Err(Error::shape("linear_mixer_block", &s, &[0, 0, 0, 0]));
    };
    let u = norm_named(v, 3, params, &format!("{prefix}.norm"))?;
    let u = linear_axis1(
        u.reshape(&[b, h, w * c])?,
        params.get(&format!("{prefix}.height.weight"))?,
        params.get(&format!("{prefix}.height.bias"))?,
    )?;
    let u = linear_axis1(
        u.reshape(&[b * h, w, c])?,
        params.get(&format!("{prefix}.width.weight"))?,
        params.get(&format!("{prefix}.width.bias"))?,
    )?;
    let u = linear_named(u.reshape(&[b, h, w, c])?, params, &format!("{prefix}.fc1"))?.gelu();
    let u = linear_named(u, params, &format!("{prefix}.fc2"))?;
    v.add(&u)
}

pub(super) fn forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let mut v = patch_embed(x, params, config)?;
    for i in 0..config.depth {
        v = linear_mixer_block(v, params, &format!("blocks.{i}"))?;
    }
    patch_expand(v, params, config)
}
