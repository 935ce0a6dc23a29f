//! Gaussian-noise datasets, the training loop and residual inference.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::KvConfig;
use crate::metrics::{psnr, ssim, ssim_loss, SSIM_WINDOW};
use crate::models::{forward, predict, ModelConfig};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::params::ModelParams;
use crate::rng;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Converts a noise level on the 8-bit scale to `[0, 1]` units.
pub fn sigma_from_8bit(sigma: f64) -> f64 {
    sigma / 255.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub clean: Tensor<f64>,
    /// `clean + z`, not clipped.
    pub noisy: Tensor<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub index: u64,
}

impl SamplePair {
    pub fn noise(&self) -> Tensor<f64> {
        Tensor::new(
            self.clean.shape().to_vec(),
            self.noisy.data().iter().zip(self.clean.data()).map(|(y, x)| y - x).collect(),
        )
        .expect("same shape")
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise drawn from the `(seed, index)` stream.
pub fn add_noise(clean: &Tensor<f64>, sigma: f64, seed: u64, index: u64) -> Result<SamplePair> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut r = rng::stream(seed, "noise", index);
    let noisy = if sigma == 0.0 {
        clean.clone()
    } else {
        clean.map(|x| {
            let z: f64 = StandardNormal.sample(&mut r);
            x + sigma * z
        })
    };
    Ok(SamplePair {
        clean: clean.clone(),
        noisy,
        sigma,
        seed,
        index,
    })
}

pub fn synthesize_noisy_set(images: &[Tensor<f64>], sigma: f64, seed: u64) -> Result<Vec<SamplePair>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| add_noise(img, sigma, seed, i as u64))
        .collect()
}

/// Same result as [`synthesize_noisy_set`], produced by `workers` threads
/// feeding a bounded queue.
pub fn synthesize_noisy_set_threaded(
    images: &[Tensor<f64>],
    sigma: f64,
    seed: u64,
    workers: usize,
) -> Result<Vec<SamplePair>> {
    let workers = workers.max(1);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<SamplePair>)>(4 * workers);
    let mut slots: Vec<Option<SamplePair>> = vec![None; images.len()];
    std::thread::scope(|scope| -> Result<()> {
        for wid in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                for i in (wid..images.len()).step_by(workers) {
                    if tx.send((i, add_noise(&images[i], sigma, seed, i as u64))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        for (i, pair) in rx {
            slots[i] = Some(pair?);
        }
        Ok(())
    })?;
    Ok(slots.into_iter().map(|p| p.expect("every index produced")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Network predicts `input - clean`; estimate is `input - f(input)`.
    ResidualMse,
    /// Network predicts `clean` directly; loss is `1 - SSIM`.
    OneMinusSsim,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::ResidualMse => "residual_mse",
            LossKind::OneMinusSsim => "one_minus_ssim",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_mse" => Ok(LossKind::ResidualMse),
            "one_minus_ssim" => Ok(LossKind::OneMinusSsim),
            _ => Err(Error::Config(format!("unknown loss `{s}` (valid: residual_mse, one_minus_ssim)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub precision: DType,
    pub loss: LossKind,
    /// Evaluate every this many iterations (and always at the last one).
    pub eval_interval: usize,
    /// Fraction of training after which the learning rate is multiplied by `decay_factor`.
    pub decay_fraction: f64,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            precision: DType::F64,
            loss: LossKind::ResidualMse,
            eval_interval: 100,
            decay_fraction: 2.0 / 3.0,
            decay_factor: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.eval_interval == 0 {
            return Err(Error::Config("epochs, batch and eval_interval must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_fraction must lie in [0, 1] and decay_factor be positive".into()));
        }
        Ok(())
    }

    pub fn iterations(&self, examples: usize) -> usize {
        self.epochs * examples.div_ceil(self.batch)
    }

    /// Learning rate used at 1-based iteration `it` of `total`.
    pub fn lr_at(&self, it: usize, total: usize) -> f64 {
        if (it - 1) as f64 >= self.decay_fraction * total as f64 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("epochs", self.epochs);
        kv.set("batch", self.batch);
        kv.set("lr", self.lr);
        kv.set("optimizer", self.optimizer);
        kv.set("seed", self.seed);
        kv.set("precision", self.precision);
        kv.set("loss", self.loss);
        kv.set("eval_interval", self.eval_interval);
        kv.set("decay_fraction", self.decay_fraction);
        kv.set("decay_factor", self.decay_factor);
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let tc = TrainConfig {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch: kv.get_or("batch", d.batch)?,
            lr: kv.get_or("lr", d.lr)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            seed: kv.get_or("seed", d.seed)?,
            precision: kv.get_or("precision", d.precision)?,
            loss: kv.get_or("loss", d.loss)?,
            eval_interval: kv.get_or("eval_interval", d.eval_interval)?,
            decay_fraction: kv.get_or("decay_fraction", d.decay_fraction)?,
            decay_factor: kv.get_or("decay_factor", d.decay_factor)?,
        };
        tc.validate()?;
        Ok(tc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// 1-based optimizer step.
    pub iteration: usize,
    pub train_loss: f64,
    pub eval_psnr_db: Option<f64>,
    pub eval_ssim: Option<f64>,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str = "iteration,train_loss,eval_psnr_db,eval_ssim,wall_clock_s";

/// CSV with [`METRICS_HEADER`]; evaluation cells are empty where no evaluation ran.
pub fn write_metrics_csv<W: Write>(w: &mut W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in records {
        writeln!(
            w,
            "{},{:.9e},{},{},{:.3}",
            r.iteration,
            r.train_loss,
            opt(r.eval_psnr_db),
            opt(r.eval_ssim),
            r.wall_clock_s
        )?;
    }
    Ok(())
}

/// One training or evaluation item: network input and the clean image it should recover.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor<f64>,
    pub clean: Tensor<f64>,
}

impl From<&SamplePair> for Example {
    fn from(p: &SamplePair) -> Self {
        Example {
            input: p.noisy.clone(),
            clean: p.clean.clone(),
        }
    }
}

fn stack_cast<T: Scalar>(items: impl Iterator<Item = Tensor<f64>>) -> Result<Tensor<T>> {
    let owned: Vec<Tensor<f64>> = items.collect();
    let refs: Vec<&Tensor<f64>> = owned.iter().collect();
    Ok(Tensor::stack(&refs)?.cast())
}

fn difference(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).expect("same shape")
}

/// `y - f(y)`.
pub fn denoise<T: Scalar>(config: &ModelConfig, params: &ModelParams<T>, noisy: &Tensor<T>) -> Result<Tensor<T>> {
    let residual = predict(config, params, noisy)?;
    Tensor::new(
        noisy.shape().to_vec(),
        noisy.data().iter().zip(residual.data()).map(|(&y, &r)| y - r).collect(),
    )
}

/// The clean-image estimate for each input, in `f64`.
pub fn reconstruct<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    inputs: &[Tensor<f64>],
    loss: LossKind,
    batch: usize,
) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let x: Tensor<T> = stack_cast(chunk.iter().cloned())?;
        let est = match loss {
            LossKind::ResidualMse => denoise(config, params, &x)?,
            LossKind::OneMinusSsim => predict(config, params, &x)?,
        };
        out.extend(est.cast::<f64>().unstack()?);
    }
    Ok(out)
}

/// Mean PSNR and (if the images are large enough) mean SSIM of the
/// reconstructions against the clean images.
pub fn evaluate<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    examples: &[Example],
    loss: LossKind,
    batch: usize,
) -> Result<(f64, Option<f64>)> {
    let inputs: Vec<Tensor<f64>> = examples.iter().map(|e| e.input.clone()).collect();
    let est = reconstruct(config, params, &inputs, loss, batch)?;
    let n = examples.len() as f64;
    let mut p = 0.0;
    let mut s = 0.0;
    let with_ssim = config.height >= SSIM_WINDOW && config.width >= SSIM_WINDOW;
    for (e, x) in examples.iter().zip(&est) {
        p += psnr(x, &e.clean, 1.0)?;
        if with_ssim {
            s += ssim(x, &e.clean)?;
        }
    }
    Ok((p / n, with_ssim.then_some(s / n)))
}

/// Mini-batch training of `params` on `train`, logging one record per step.
/// Each epoch visits the examples in a fresh permutation from the
/// `data-order` stream; evaluation on `eval` runs every `eval_interval` steps
/// and at the final step.
pub fn fit<T: Scalar>(
    config: &ModelConfig,
    mut params: ModelParams<T>,
    train: &[Example],
    eval: &[Example],
    tc: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<MetricsRecord>)> {
    config.validate()?;
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let total = tc.iterations(train.len());
    let mut opt = OptimizerState::<T>::new(tc.optimizer, tc.lr);
    let targets: Vec<Tensor<f64>> = train
        .iter()
        .map(|e| match tc.loss {
            LossKind::ResidualMse => difference(&e.input, &e.clean),
            LossKind::OneMinusSsim => e.clean.clone(),
        })
        .collect();
    let start = Instant::now();
    let mut records = Vec::with_capacity(total);
    let mut it = 0;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(tc.seed, "data-order", epoch as u64));
        for chunk in order.chunks(tc.batch) {
            it += 1;
            opt.set_lr(tc.lr_at(it, total));
            let x: Tensor<T> = stack_cast(chunk.iter().map(|&i| train[i].input.clone()))?;
            let y: Tensor<T> = stack_cast(chunk.iter().map(|&i| targets[i].clone()))?;
            let loss_value = {
                let tape = Tape::new();
                let bound = params.bind(&tape);
                let out = forward(config, &bound, tape.constant(&x))?;
                let target = tape.constant(&y);
                let loss = match tc.loss {
                    LossKind::ResidualMse => out.mse_loss(&target)?,
                    LossKind::OneMinusSsim => ssim_loss(out, target)?,
                };
                let value = loss.item()?.as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { iteration: it, value });
                }
                let grads = tape.backward(loss)?;
                params.absorb_grads(&grads, &bound)?;
                value
            };
            opt.step(&mut params)?;
            let (eval_psnr_db, eval_ssim) = if !eval.is_empty() && (it % tc.eval_interval == 0 || it == total) {
                let (p, s) = evaluate(config, &params, eval, tc.loss, tc.batch)?;
                (Some(p), s)
            } else {
                (None, None)
            };
            records.push(MetricsRecord {
                iteration: it,
                train_loss: loss_value,
                eval_psnr_db,
                eval_ssim,
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    params.zero_grads();
    Ok((params, records))
}

/// Residual-learning training on noisy/clean pairs: minimizes the mean of
/// `½ (f(y) - (y - x))^2`, evaluating `y - f(y)` on `eval`.
pub fn train_denoiser<T: Scalar>(
    config: &ModelConfig,
    params: ModelParams<T>,
    train: &[SamplePair],
    eval: &[SamplePair],
    tc: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<MetricsRecord>)> {
    let tc = TrainConfig {
        loss: LossKind::ResidualMse,
        ..*tc
    };
    let train: Vec<Example> = train.iter().map(Example::from).collect();
    let eval: Vec<Example> = eval.iter().map(Example::from).collect();
    fit(config, params, &train, &eval, &tc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_set;
    use crate::models::{init_params, Family};

    fn tiny() -> ModelConfig {
        ModelConfig::new(Family::Img2ImgMixer, 16, 16, 1).with_arch(4, 1, 8, 2)
    }

    #[test]
    fn zero_sigma_is_exact_and_seed_reproduces() {
        let imgs = synthetic_set(3, 8, 8, 3, 0);
        let pairs = synthesize_noisy_set(&imgs, 0.0, 1).unwrap();
        assert!(pairs.iter().all(|p| p.noisy == p.clean));
        let a = synthesize_noisy_set(&imgs, 0.1, 1).unwrap();
        let b = synthesize_noisy_set(&imgs, 0.1, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize_noisy_set(&imgs, 0.1, 2).unwrap());
        assert!(synthesize_noisy_set(&imgs, -0.1, 1).is_err());
    }

    #[test]
    fn threaded_synthesis_matches_serial() {
        let imgs = synthetic_set(9, 8, 8, 1, 0);
        let serial = synthesize_noisy_set(&imgs, 0.2, 4).unwrap();
        for workers in [1, 2, 4] {
            assert_eq!(synthesize_noisy_set_threaded(&imgs, 0.2, 4, workers).unwrap(), serial);
        }
    }

    #[test]
    fn zero_model_denoise_is_identity() {
        let cfg = tiny();
        let mut params: ModelParams = init_params(&cfg, 0);
        params.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        let y = synthetic_set(1, 16, 16, 1, 0).remove(0);
        assert_eq!(denoise(&cfg, &params, &y).unwrap(), y);
    }

    #[test]
    fn zero_model_loss_is_half_noise_power() {
        let cfg = tiny();
        let mut params: ModelParams = init_params(&cfg, 0);
        params.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        let pairs = synthesize_noisy_set(&synthetic_set(4, 16, 16, 1, 0), 0.1, 3).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch: 4,
            lr: 0.0,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let (after, log) = train_denoiser(&cfg, params.clone(), &pairs, &[], &tc).unwrap();
        assert_eq!(after.max_abs_diff(&params).unwrap(), 0.0);
        let half_power = pairs
            .iter()
            .flat_map(|p| p.noise().into_data())
            .map(|z| 0.5 * z * z)
            .sum::<f64>()
            / (4.0 * 256.0);
        assert_eq!(log.len(), 1);
        assert!((log[0].train_loss - half_power).abs() < 1e-15);
        assert!((half_power / (0.5 * 0.01) - 1.0).abs() < 0.15);
    }

    #[test]
    fn log_bookkeeping() {
        let cfg = tiny();
        let params: ModelParams = init_params(&cfg, 0);
        let pairs = synthesize_noisy_set(&synthetic_set(7, 16, 16, 1, 0), 0.1, 3).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch: 3,
            eval_interval: 4,
            ..TrainConfig::default()
        };
        let (_, log) = train_denoiser(&cfg, params, &pairs[..5], &pairs[5..], &tc).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert_eq!(log.last().unwrap().iteration, 2 * 5usize.div_ceil(3));
        assert!(log[3].eval_psnr_db.is_some() && log[3].eval_ssim.is_some());
        assert!(log[0].eval_psnr_db.is_none());
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &log).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn lr_decays_after_two_thirds() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at(1, 30), 1e-3);
        assert_eq!(tc.lr_at(20, 30), 1e-3);
        assert!((tc.lr_at(21, 30) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn train_config_kv_round_trip() {
        let tc = TrainConfig {
            epochs: 3,
            lr: 0.25,
            precision: DType::F32,
            loss: LossKind::OneMinusSsim,
            ..TrainConfig::default()
        };
        let mut kv = KvConfig::new();
        tc.write_kv(&mut kv);
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), tc);
    }
}
