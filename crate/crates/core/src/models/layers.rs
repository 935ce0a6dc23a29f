use crate::autodiff::{Var, LAYER_NORM_EPS};
use crate::error::Result;
use crate::params::BoundParams;
use crate::scalar::Scalar;

/// `x · Wᵀ + b` over the last axis, `W` stored `[out, in]`.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul_nt(&weight)?.add(&bias)
}

pub(crate) fn linear_named<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &BoundParams<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    linear(
        x,
        params.get(&format!("{prefix}.weight"))?,
        params.get(&format!("{prefix}.bias"))?,
    )
}

pub(crate) fn norm_named<'t, T: Scalar>(
    x: Var<'t, T>,
    axis: usize,
    params: &BoundParams<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    x.layer_norm(
        axis,
        &params.get(&format!("{prefix}.gain"))?,
        &params.get(&format!("{prefix}.bias"))?,
        LAYER_NORM_EPS,
    )
}

/// `v + fc2(gelu(fc1(norm(v))))` acting on the last axis of `v`.
pub(crate) fn residual_mlp_last<'t, T: Scalar>(
    v: Var<'t, T>,
    params: &BoundParams<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let axis = v.shape().len() - 1;
    let u = norm_named(v, axis, params, &format!("{prefix}.norm"))?;
    let h = linear_named(u, params, &format!("{prefix}.fc1"))?.gelu();
    let y = linear_named(h, params, &format!("{prefix}.fc2"))?;
    v.add(&y)
}

/// Left multiplication `W · v + b` along axis 1 of `v: [outer, len, inner]`.
/// `b` has shape `[out]` and is broadcast over `inner`.
pub(crate) fn linear_axis1<'t, T: Scalar>(
    v: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let out = bias.shape()[0];
    weight.matmul(&v)?.add(&bias.reshape(&[out, 1])?)
}

/// Residual MLP along axis 1 of `v: [outer, len, inner]`, with the norm over that axis.
pub(crate) fn residual_mlp_axis1<'t, T: Scalar>(
    v: Var<'t, T>,
    params: &BoundParams<'t, T>,
    prefix: &str,
) -> Result<Var<'t, T>> {
    let u = norm_named(v, 1, params, &format!("{prefix}.norm"))?;
    let h = linear_axis1(
        u,
        params.get(&format!("{prefix}.fc1.weight"))?,
        params.get(&format!("{prefix}.fc1.bias"))?,
    )?
    .gelu();
    let y = linear_axis1(
        h,
        params.get(&format!("{prefix}.fc2.weight"))?,
        params.get(&format!("{prefix}.fc2.bias"))?,
    )?;
    v.add(&y)
}

/// `[B, H, W, ch]` to `[B, H/P, W/P, P·P·ch]`, patch vectors ordered (row, col, channel).
pub fn patchify<'t, T: Scalar>(x: Var<'t, T>, patch: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(crate::error::Error::shape("patchify", &s, &[patch, patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    x.reshape(&[b, gh, patch, gw, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, gh, gw, patch * patch * c])
}

/// Inverse of [`patchify`]: `[B, H', W', P·P·c]` to `[B, H'·P, W'·P, c]`.
pub fn unpatchify<'t, T: Scalar>(v: Var<'t, T>, patch: usize, channels: usize) -> Result<Var<'t, T>> {
    let s = v.shape();
    let (b, gh, gw, d) = (s[0], s[1], s[2], s[3]);
    if d != patch * patch * channels {
        return Err(crate::error::Error::shape("unpatchify", &s, &[patch, patch, channels]));
    }
    v.reshape(&[b, gh, gw, patch, patch, channels])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, gh * patch, gw * patch, channels])
}
