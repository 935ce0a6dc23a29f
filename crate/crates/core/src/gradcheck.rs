//! Finite-difference validation of tape gradients.

use rand::seq::index;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per input tensor (all of them if the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            coords_per_tensor: 64,
            abs_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar program `f` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` on a random subset of
/// coordinates of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::NotScalar(out.shape()));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get_raw(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &vars)?.item()
    };

    let mut rng = rng::stream(config.seed, "grad-check", 0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= config.coords_per_tensor {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, config.coords_per_tensor).into_vec()
        };
        for c in coords {
            let orig = input.data()[c];
            work[ti].data_mut()[c] = orig + config.h;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - config.h;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * config.h);
            let a = analytic[ti][c];
            let err = relative_error(a, numeric, config.abs_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Tolerance for ops that are linear in each input.
pub const LINEAR_TOL: f64 = 1e-6;
/// Tolerance for the remaining elementwise and normalizing ops.
pub const NONLINEAR_TOL: f64 = 1e-4;
/// Tolerance for the composite `1 - SSIM` loss.
pub const SSIM_LOSS_TOL: f64 = 1e-3;

type Program = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// One differentiable op with its input shapes and pass threshold.
pub struct OpCase {
    pub name: &'static str,
    pub tolerance: f64,
    shapes: Vec<Vec<usize>>,
    /// Added to every input coordinate, e.g. to keep a divisor away from zero.
    offsets: Vec<f64>,
    program: Box<Program>,
}

impl std::fmt::Debug for OpCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpCase")
            .field("name", &self.name)
            .field("tolerance", &self.tolerance)
            .field("shapes", &self.shapes)
            .finish()
    }
}

/// Contracts `out` with fixed random weights, so every output coordinate
/// carries a distinct upstream gradient.
fn weighted<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    use rand::Rng as _;
    let mut r = rng::stream(0, "grad-check-weights", 0);
    let w = Tensor::from_fn(&out.shape(), |_| r.random_range(-1.0..1.0));
    Ok(out.mul(&tape.constant(&w))?.sum())
}

fn case<F>(name: &'static str, tolerance: f64, shapes: &[&[usize]], offsets: &[f64], f: F) -> OpCase
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
{
    OpCase {
        name,
        tolerance,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        offsets: (0..shapes.len()).map(|i| offsets.get(i).copied().unwrap_or(0.0)).collect(),
        program: Box::new(f),
    }
}

/// Every differentiable tape op, plus the `1 - SSIM` loss.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", LINEAR_TOL, &[&[4, 5], &[5, 3]], &[], |t, v| weighted(t, v[0].matmul(&v[1])?)),
        case("matmul_batched", LINEAR_TOL, &[&[2, 4, 5], &[5, 3]], &[], |t, v| {
            weighted(t, v[0].matmul(&v[1])?)
        }),
        case("matmul_left_shared", LINEAR_TOL, &[&[3, 4], &[2, 4, 5]], &[], |t, v| {
            weighted(t, v[0].matmul(&v[1])?)
        }),
        case("matmul_nt", LINEAR_TOL, &[&[4, 5], &[3, 5]], &[], |t, v| weighted(t, v[0].matmul_nt(&v[1])?)),
        case("add", LINEAR_TOL, &[&[2, 3, 4], &[2, 3, 4]], &[], |t, v| weighted(t, v[0].add(&v[1])?)),
        case("add_broadcast", LINEAR_TOL, &[&[2, 3], &[3]], &[], |t, v| weighted(t, v[0].add(&v[1])?)),
        case("add_column_bias", LINEAR_TOL, &[&[2, 4, 3], &[4, 1]], &[], |t, v| weighted(t, v[0].add(&v[1])?)),
        case("sub", LINEAR_TOL, &[&[3, 4], &[4]], &[], |t, v| weighted(t, v[0].sub(&v[1])?)),
        case("scale", LINEAR_TOL, &[&[3, 4]], &[], |t, v| weighted(t, v[0].scale(-1.7))),
        case("add_scalar", LINEAR_TOL, &[&[3, 4]], &[], |t, v| weighted(t, v[0].add_scalar(0.3))),
        case("reshape", LINEAR_TOL, &[&[2, 3, 4]], &[], |t, v| weighted(t, v[0].reshape(&[6, 4])?)),
        case("permute", LINEAR_TOL, &[&[2, 3, 4]], &[], |t, v| weighted(t, v[0].permute(&[2, 0, 1])?)),
        case("sum", LINEAR_TOL, &[&[3, 5]], &[], |t, v| weighted(t, v[0].sum())),
        case("mean", LINEAR_TOL, &[&[3, 5]], &[], |t, v| weighted(t, v[0].mean())),
        case("mul", NONLINEAR_TOL, &[&[3, 4], &[3, 4]], &[], |t, v| weighted(t, v[0].mul(&v[1])?)),
        case("mul_broadcast", NONLINEAR_TOL, &[&[3, 4], &[4]], &[], |t, v| weighted(t, v[0].mul(&v[1])?)),
        case("div", NONLINEAR_TOL, &[&[3, 4], &[3, 4]], &[0.0, 2.0], |t, v| weighted(t, v[0].div(&v[1])?)),
        case("gelu", NONLINEAR_TOL, &[&[4, 6]], &[], |t, v| weighted(t, v[0].scale(3.0).gelu())),
        case("layer_norm_last", NONLINEAR_TOL, &[&[3, 8], &[8], &[8]], &[0.0, 1.0], |t, v| {
            weighted(t, v[0].layer_norm(1, &v[1], &v[2], 1e-5)?)
        }),
        case("layer_norm_inner", NONLINEAR_TOL, &[&[2, 5, 3], &[5], &[5]], &[0.0, 1.0], |t, v| {
            weighted(t, v[0].layer_norm(1, &v[1], &v[2], 1e-5)?)
        }),
        case("softmax", NONLINEAR_TOL, &[&[3, 5]], &[], |t, v| weighted(t, v[0].scale(2.0).softmax(1)?)),
        case("softmax_inner", NONLINEAR_TOL, &[&[2, 4, 3]], &[], |t, v| weighted(t, v[0].softmax(1)?)),
        case("mse_loss", NONLINEAR_TOL, &[&[3, 4], &[3, 4]], &[], |t, v| weighted(t, v[0].mse_loss(&v[1])?)),
        case("ssim_loss", SSIM_LOSS_TOL, &[&[1, 12, 13, 1], &[1, 12, 13, 1]], &[0.5, 0.5], |t, v| {
            weighted(t, crate::metrics::ssim_loss(v[0], v[1])?)
        }),
    ]
}

impl OpCase {
    /// Uniform(-1, 1) inputs (plus the case offsets) drawn from `seed`.
    pub fn inputs(&self, seed: u64) -> Vec<Tensor<f64>> {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "grad-check-inputs", 0);
        self.shapes
            .iter()
            .zip(&self.offsets)
            .map(|(s, &o)| Tensor::from_fn(s, |_| o + r.random_range(-1.0..1.0)))
            .collect()
    }

    pub fn check(&self, seed: u64, config: GradCheckConfig) -> Result<GradCheckReport> {
        grad_check(&self.inputs(seed), &*self.program, GradCheckConfig { seed, ..config })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_program_is_exact() {
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.11).cos());
        let report = grad_check(
            &[x, w],
            |_, v| Ok(v[0].matmul_nt(&v[1])?.sum()),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
        assert_eq!(report.coords_checked, 35);
    }

    #[test]
    fn detects_wrong_gradient() {
        // A program that detaches its input yields zero analytic gradient.
        let x = Tensor::from_fn(&[3], |i| i as f64 + 1.0);
        let report = grad_check(
            &[x],
            |tape, v| {
                let detached = tape.constant(&v[0].value());
                Ok(detached.mul(&detached)?.sum())
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn every_op_case_passes_one_seed() {
        for case in op_cases() {
            let report = case.check(0, GradCheckConfig::default()).unwrap();
            assert!(report.max_rel_error <= case.tolerance, "{}: {report:?}", case.name);
        }
    }

    #[test]
    fn non_scalar_program_rejected() {
        let x = Tensor::<f64>::zeros(&[3]);
        let err = grad_check(&[x], |_, v| Ok(v[0]), GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotScalar(_)));
    }
}
