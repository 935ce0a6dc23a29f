//! Fitting an untrained network, fed a fixed random input, to an image,
//! to pure noise, or to their sum by full-batch gradient descent.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::models::{forward, init_params, Family, ModelConfig};
use crate::optim::OptimizerState;
use crate::params::ModelParams;
use crate::rng;
use crate::tensor::Tensor;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e3;
/// Learning rates tried by [`select_lr`].
pub const LR_CANDIDATES: [f64; 3] = [1e-2, 1e-1, 1.0];
/// Noise level whose expected input PSNR is 12.5 dB.
pub fn default_sigma() -> f64 {
    10f64.powf(-12.5 / 20.0)
}

/// Fixed Gaussian noise `sigma * z` for the noise targets, `z` from the `bias-noise` stream.
pub fn noise_realization(shape: &[usize], sigma: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "bias-noise", 0);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        sigma * z
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Img,
    Noise,
    ImgPlusNoise,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Img, TargetKind::Noise, TargetKind::ImgPlusNoise];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Img => "img",
            TargetKind::Noise => "noise",
            TargetKind::ImgPlusNoise => "img_plus_noise",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(TargetKind::Img),
            "noise" => Ok(TargetKind::Noise),
            "img_plus_noise" => Ok(TargetKind::ImgPlusNoise),
            _ => Err(Error::Config(format!("unknown target `{s}` (valid: img, noise, img_plus_noise)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRunSpec {
    pub config: ModelConfig,
    pub target: TargetKind,
    pub iterations: usize,
    pub lr: f64,
    pub input_seed: u64,
    pub init_seed: u64,
    /// `[H, W, ch]` reference image.
    pub clean: Tensor<f64>,
    /// Noise realization of the same shape.
    pub noise: Tensor<f64>,
}

impl BiasRunSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let shape = self.config.image_shape();
        if self.clean.shape() != shape || self.noise.shape() != shape {
            return Err(Error::shape("bias targets", self.clean.shape(), &shape));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// The fixed network input, i.i.d. Uniform(0, 0.1).
    pub fn input(&self) -> Tensor<f64> {
        let mut r = rng::stream(self.input_seed, "bias-input", 0);
        Tensor::from_fn(&self.config.image_shape(), |_| r.random_range(0.0..0.1))
    }

    pub fn signal(&self) -> Tensor<f64> {
        match self.target {
            TargetKind::Img => self.clean.clone(),
            TargetKind::Noise => self.noise.clone(),
            TargetKind::ImgPlusNoise => add(&self.clean, &self.noise),
        }
    }
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).expect("same shape")
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Training objective `½ mean (signal - output)^2`.
    pub loss: f64,
    /// Mean squared error of the output against the clean image.
    pub mse_vs_clean: f64,
    /// Mean squared error of the output against the noise realization.
    pub mse_vs_noise: f64,
    /// PSNR of the output against the clean image.
    pub psnr_db: f64,
}

impl CurvePoint {
    /// The error reported for a target: against the noise for `noise`, else against the clean image.
    pub fn fit_error(&self, target: TargetKind) -> f64 {
        match target {
            TargetKind::Noise => self.mse_vs_noise,
            _ => self.mse_vs_clean,
        }
    }
}

/// Gradient descent on `½ mean (signal - f(input))^2`, logging iterations
/// `0..=spec.iterations` (entry `k` is the output after `k` steps).
pub fn run_bias_fit(spec: &BiasRunSpec) -> Result<Vec<CurvePoint>> {
    spec.validate()?;
    let input = spec.input();
    let signal = spec.signal();
    let mut params: ModelParams<f64> = init_params(&spec.config, spec.init_seed);
    let mut opt = OptimizerState::sgd(spec.lr);
    let mut curve = Vec::with_capacity(spec.iterations + 1);
    for it in 0..=spec.iterations {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let out = forward(&spec.config, &bound, tape.constant(&input))?;
        let value = out.value();
        curve.push(CurvePoint {
            iteration: it,
            loss: 0.5 * mse(&value, &signal),
            mse_vs_clean: mse(&value, &spec.clean),
            mse_vs_noise: mse(&value, &spec.noise),
            psnr_db: psnr(&value, &spec.clean, 1.0)?,
        });
        if it == spec.iterations {
            break;
        }
        let loss = out.mse_loss(&tape.constant(&signal))?;
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, value: lv });
        }
        if lv > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iteration: it,
                loss: lv,
                limit: DIVERGENCE_LIMIT,
            });
        }
        let grads = tape.backward(loss)?;
        params.absorb_grads(&grads, &bound)?;
        opt.step(&mut params)?;
    }
    Ok(curve)
}

/// First iteration of maximal PSNR.
pub fn best_iteration_psnr(curve: &[CurvePoint]) -> Result<(usize, f64)> {
    let first = curve.first().ok_or_else(|| Error::Config("empty curve".into()))?;
    let mut best = (first.iteration, first.psnr_db);
    for p in &curve[1..] {
        if p.psnr_db > best.1 {
            best = (p.iteration, p.psnr_db);
        }
    }
    Ok(best)
}

/// First iteration whose fit error is at most half the iteration-0 error.
pub fn half_error_iteration(curve: &[CurvePoint], target: TargetKind) -> Option<usize> {
    let start = curve.first()?.fit_error(target);
    curve
        .iter()
        .find(|p| p.fit_error(target) <= 0.5 * start)
        .map(|p| p.iteration)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrTrial {
    pub lr: f64,
    /// Final training loss, or `None` if the probe diverged.
    pub final_loss: Option<f64>,
}

/// Probes each candidate on the `img_plus_noise` target for `probe_iters`
/// steps and returns the non-divergent rate with the lowest final loss.
pub fn select_lr(spec: &BiasRunSpec, candidates: &[f64], probe_iters: usize) -> Result<(f64, Vec<LrTrial>)> {
    let mut trials = Vec::new();
    for &lr in candidates {
        let probe = BiasRunSpec {
            target: TargetKind::ImgPlusNoise,
            iterations: probe_iters,
            lr,
            ..spec.clone()
        };
        let final_loss = match run_bias_fit(&probe) {
            Ok(curve) => curve.last().map(|p| p.loss),
            Err(e) if e.is_numerical() => None,
            Err(e) => return Err(e),
        };
        trials.push(LrTrial { lr, final_loss });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.final_loss.filter(|l| l.is_finite()).map(|l| (t.lr, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(lr, _)| lr)
        .ok_or_else(|| Error::Diverged {
            iteration: probe_iters,
            loss: f64::INFINITY,
            limit: DIVERGENCE_LIMIT,
        })?;
    Ok((best, trials))
}

/// `iteration mse` rows, the error measured as in [`CurvePoint::fit_error`].
pub fn write_dat<W: Write>(w: &mut W, curve: &[CurvePoint], target: TargetKind) -> Result<()> {
    for p in curve {
        writeln!(w, "{} {:.9e}", p.iteration, p.fit_error(target))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSummaryRow {
    pub arch: Family,
    pub target: TargetKind,
    pub best_iter: usize,
    pub best_psnr_db: f64,
    pub input_psnr_db: f64,
}

pub const SUMMARY_HEADER: &str = "arch,target,best_iter,best_psnr_db,input_psnr_db";

pub fn write_summary<W: Write>(w: &mut W, rows: &[BiasSummaryRow]) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.4},{:.4}",
            r.arch, r.target, r.best_iter, r.best_psnr_db, r.input_psnr_db
        )?;
    }
    Ok(())
}

/// All three targets for one architecture; writes `<arch>_<target>.dat` into `out_dir`.
pub fn run_all_targets(base: &BiasRunSpec, out_dir: &Path) -> Result<(Vec<Vec<CurvePoint>>, Vec<BiasSummaryRow>)> {
    std::fs::create_dir_all(out_dir)?;
    let input_psnr_db = psnr(&add(&base.clean, &base.noise), &base.clean, 1.0)?;
    let mut curves = Vec::new();
    let mut rows = Vec::new();
    for target in TargetKind::ALL {
        let spec = BiasRunSpec {
            target,
            ..base.clone()
        };
        let curve = run_bias_fit(&spec)?;
        let mut f = std::fs::File::create(out_dir.join(format!("{}_{}.dat", base.config.family, target)))?;
        write_dat(&mut f, &curve, target)?;
        let (best_iter, best_psnr_db) = best_iteration_psnr(&curve)?;
        rows.push(BiasSummaryRow {
            arch: base.config.family,
            target,
            best_iter,
            best_psnr_db,
            input_psnr_db,
        });
        curves.push(curve);
    }
    Ok((curves, rows))
}
