use super::layers::{linear_named, norm_named, patchify, residual_mlp_last, unpatchify};
use super::ModelConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::scalar::Scalar;

/// Multi-head self-attention on `[B, S, C]` (no residual, no norm).
pub fn self_attention<'t, T: Scalar>(
    u: Var<'t, T>,
    params: &BoundParams<'t, T>,
    prefix: &str,
    heads: usize,
) -> Result<Var<'t, T>> {
    let s = u.shape();
    let &[b, n, c] = s.as_slice() else {
        return Err(Error::shape("self_attention", &s, &[0, 0, 0]));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("embed {c} not divisible by heads {heads}")));
    }
    let dh = c / heads;
    let split = |name: &str| -> Result<Var<'t, T>> {
        linear_named(u, params, &format!("{prefix}.{name}"))?
            .reshape(&[b, n, heads, dh])?
            .permute(&[0, 2, 1, 3])
    };
    let (q, k, v) = (split("q")?, split("k")?, split("v")?);
    let probs = q.matmul_nt(&k)?.scale(1.0 / (dh as f64).sqrt()).softmax(3)?;
    let ctx = probs.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, c])?;
    linear_named(ctx, params, &format!("{prefix}.out"))
}

pub(super) fn forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let b = x.shape()[0];
    let tokens = patchify(x, config.patch)?.reshape(&[b, config.tokens(), config.patch_dim()])?;
    let mut t = linear_named(tokens, params, "embed")?.add(&params.get("pos_embed")?)?;
    for i in 0..config.depth {
        let prefix = format!("layers.{i}");
        let u = norm_named(t, 2, params, &format!("{prefix}.attn.norm"))?;
        t = t.add(&self_attention(u, params, &format!("{prefix}.attn"), config.heads)?)?;
        t = residual_mlp_last(t, params, &format!("{prefix}.mlp"))?;
    }
    let u = norm_named(t, 2, params, "head.norm")?;
    let rows = linear_named(u, params, "head.proj")?.reshape(&[b, config.grid_h(), config.grid_w(), config.patch_dim()])?;
    unpatchify(rows, config.patch, config.channels)
}
