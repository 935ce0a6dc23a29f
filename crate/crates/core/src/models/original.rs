use super::layers::{linear_axis1, linear_named, norm_named, patchify, residual_mlp_last, unpatchify};
use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::BoundParams;
use crate::scalar::Scalar;

/// Tokens `[B, S, C]`; token mixing over S, channel mixing over C, both
/// pre-normalized over C.
fn block<'t, T: Scalar>(t: Var<'t, T>, params: &BoundParams<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let u = norm_named(t, 2, params, &format!("{prefix}.token.norm"))?;
    let h = linear_axis1(
        u,
        params.get(&format!("{prefix}.token.fc1.weight"))?,
        params.get(&format!("{prefix}.token.fc1.bias"))?,
    )?
    .gelu();
    let y = linear_axis1(
        h,
        params.get(&format!("{prefix}.token.fc2.weight"))?,
        params.get(&format!("{prefix}.token.fc2.bias"))?,
    )?;
    let t = t.add(&y)?;
    residual_mlp_last(t, params, &format!("{prefix}.channel"))
}

pub(super) fn forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let b = x.shape()[0];
    let (gh, gw) = (config.grid_h(), config.grid_w());
    let tokens = patchify(x, config.patch)?.reshape(&[b, config.tokens(), config.patch_dim()])?;
    let mut t = linear_named(tokens, params, "embed")?;
    for i in 0..config.depth {
        t = block(t, params, &format!("blocks.{i}"))?;
    }
    let rows = linear_named(t, params, "proj")?.reshape(&[b, gh, gw, config.patch_dim()])?;
    unpatchify(rows, config.patch, config.channels)
}
