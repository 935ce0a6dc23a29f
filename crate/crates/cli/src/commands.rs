use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use imgmix::bench::{bench_families, write_bench_table, BenchSettings};
use imgmix::bias::{self, BiasRunSpec, TargetKind, LR_CANDIDATES};
use imgmix::cs::{build_operator, cs_examples, train_cs_refiner, MeasurementOperator, Transform};
use imgmix::data::{convert_channels, load_image_dir, split_holdout, synthetic_image, synthetic_set};
use imgmix::denoise::{
    denoise, reconstruct, sigma_from_8bit, synthesize_noisy_set, train_denoiser, write_metrics_csv, LossKind,
    TrainConfig,
};
use imgmix::gradcheck::{op_cases, GradCheckConfig};
use imgmix::io::{read_image, write_image, KvConfig};
use imgmix::metrics::{psnr, ssim};
use imgmix::models::{count_params, count_params_by_group, grad_check_model, init_params, Family, ModelConfig};
use imgmix::serialize::{load_checkpoint, save_checkpoint};
use imgmix::{DType, ModelParams, Scalar, Tensor};

use crate::settings::{keys, merge, UsageError, DATA_KEYS, MODEL_KEYS, TRAIN_KEYS};
use crate::{Command, Common};

/// A check that ran but did not meet its tolerance (exit code 3).
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn put_path(kv: &mut KvConfig, key: &str, value: &Option<PathBuf>) {
    if let Some(p) = value {
        kv.set(key, p.display());
    }
}

fn require_path(kv: &KvConfig, key: &str) -> Result<PathBuf> {
    kv.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| usage(format!("missing required --{}", key.replace('_', "-"))))
}

/// Starts the flag set with `--seed`.
fn flags(common: &Common) -> KvConfig {
    let mut kv = KvConfig::new();
    crate::settings::put(&mut kv, "seed", &common.seed);
    kv
}

fn write_meta(dir: &Path, command: &str, resolved: &KvConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut kv = KvConfig::new();
    kv.set("command", command);
    kv.merge(resolved);
    kv.save(&dir.join("run.meta")).context("writing run.meta")
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Model config from `kv`, with `fallback` supplying anything unset.
fn resolve_model(kv: &KvConfig, fallback: ModelConfig) -> Result<ModelConfig> {
    let mut full = KvConfig::new();
    fallback.write_kv(&mut full);
    for key in MODEL_KEYS {
        if let Some(v) = kv.get(key) {
            full.set(key, v);
        }
    }
    Ok(ModelConfig::from_kv(&full)?)
}

fn family(kv: &KvConfig) -> Result<Family> {
    match kv.get("family") {
        Some(s) => Ok(s.parse()?),
        None => Ok(Family::Img2ImgMixer),
    }
}

fn families(kv: &KvConfig, default: &[Family]) -> Result<Vec<Family>> {
    match kv.get("family") {
        Some(list) => list.split(',').map(|s| Ok(s.trim().parse::<Family>()?)).collect(),
        None => Ok(default.to_vec()),
    }
}

fn checkpoint_config(checkpoint: &Path) -> Result<(ModelConfig, KvConfig)> {
    let cfg_path = checkpoint.with_extension("cfg");
    let kv = KvConfig::load(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    Ok((ModelConfig::from_kv(&kv)?, kv))
}

fn save_model<T: Scalar>(dir: &Path, config: &ModelConfig, seed: u64, params: &ModelParams<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join("model.ckpt"), params)?;
    let mut kv = KvConfig::new();
    config.write_kv(&mut kv);
    kv.set("seed", seed);
    kv.save(&dir.join("model.cfg"))?;
    Ok(())
}

struct DataSpec {
    data_dir: Option<PathBuf>,
    synthetic: usize,
    size: usize,
    tile: Option<usize>,
    holdout: Option<usize>,
    sigma: f64,
}

impl DataSpec {
    fn resolve(kv: &KvConfig, default_count: usize, default_size: usize) -> Result<Self> {
        Ok(DataSpec {
            data_dir: kv.get("data_dir").map(PathBuf::from),
            synthetic: kv.get_or("synthetic", default_count)?,
            size: kv.get_or("size", default_size)?,
            tile: kv.get("tile").map(str::parse).transpose().map_err(|_| usage("bad --tile"))?,
            holdout: kv.get("holdout").map(str::parse).transpose().map_err(|_| usage("bad --holdout"))?,
            sigma: kv.get_or("sigma", 30.0)?,
        })
    }

    fn write(&self, kv: &mut KvConfig) {
        if let Some(d) = &self.data_dir {
            kv.set("data_dir", d.display());
        } else {
            kv.set("synthetic", self.synthetic);
            kv.set("size", self.size);
        }
        if let Some(t) = self.tile {
            kv.set("tile", t);
        }
        if let Some(h) = self.holdout {
            kv.set("holdout", h);
        }
        kv.set("sigma", self.sigma);
    }

    fn images(&self, channels: usize, seed: u64) -> Result<Vec<Tensor<f64>>> {
        match &self.data_dir {
            Some(dir) => Ok(load_image_dir(dir, channels, self.tile)?),
            None => {
                if self.synthetic == 0 {
                    bail!(usage("--synthetic must be positive"));
                }
                Ok(synthetic_set(self.synthetic, self.size, self.size, channels, seed))
            }
        }
    }

    fn holdout_for(&self, n: usize) -> usize {
        self.holdout.unwrap_or((n / 10).clamp(1, 100)).min(n.saturating_sub(1))
    }
}

/// Aligns the model's spatial size with the data and checks all images agree.
fn fit_model_to_images(kv: &KvConfig, mut model: ModelConfig, images: &[Tensor<f64>]) -> Result<ModelConfig> {
    let shape = images.first().map(|i| i.shape().to_vec()).unwrap_or_default();
    if images.iter().any(|i| i.shape() != shape.as_slice()) {
        bail!(usage("images differ in size; use --tile"));
    }
    if !kv.contains("height") {
        model.height = shape[0];
    }
    if !kv.contains("width") {
        model.width = shape[1];
    }
    if [model.height, model.width, model.channels] != shape[..] {
        bail!(usage(format!(
            "model expects {}x{}x{} images, data is {:?}",
            model.height, model.width, model.channels, shape
        )));
    }
    model.validate()?;
    Ok(model)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            model,
            train,
            data,
            out_dir,
        } => {
            let mut fl = flags(&common);
            model.put(&mut fl);
            train.put(&mut fl);
            data.put(&mut fl);
            put_path(&mut fl, "out_dir", &out_dir);
            let kv = merge(common.config.as_deref(), &fl, &keys(&[MODEL_KEYS, TRAIN_KEYS, DATA_KEYS], &["seed", "out_dir"]))?;
            cmd_train(&kv)
        }
        Command::Denoise {
            common,
            checkpoint,
            input,
            output,
        } => {
            let mut fl = flags(&common);
            put_path(&mut fl, "checkpoint", &checkpoint);
            put_path(&mut fl, "input", &input);
            put_path(&mut fl, "output", &output);
            let kv = merge(common.config.as_deref(), &fl, &["seed", "checkpoint", "input", "output"])?;
            cmd_denoise(&kv)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            csv,
        } => {
            let mut fl = flags(&common);
            put_path(&mut fl, "checkpoint", &checkpoint);
            data.put(&mut fl);
            put_path(&mut fl, "csv", &csv);
            let kv = merge(common.config.as_deref(), &fl, &keys(&[DATA_KEYS], &["seed", "checkpoint", "csv"]))?;
            cmd_eval(&kv)
        }
        Command::CountParams { common, model, out_dir } => {
            let mut fl = flags(&common);
            model.put(&mut fl);
            put_path(&mut fl, "out_dir", &out_dir);
            let kv = merge(common.config.as_deref(), &fl, &keys(&[MODEL_KEYS], &["seed", "out_dir"]))?;
            cmd_count_params(&kv)
        }
        Command::Bias {
            common,
            model,
            image,
            sigma,
            iters,
            lr,
            probe_iters,
            out_dir,
        } => {
            let mut fl = flags(&common);
            model.put(&mut fl);
            put_path(&mut fl, "image", &image);
            crate::settings::put(&mut fl, "sigma", &sigma);
            crate::settings::put(&mut fl, "iters", &iters);
            crate::settings::put(&mut fl, "lr", &lr);
            crate::settings::put(&mut fl, "probe_iters", &probe_iters);
            put_path(&mut fl, "out_dir", &out_dir);
            let kv = merge(
                common.config.as_deref(),
                &fl,
                &keys(&[MODEL_KEYS], &["seed", "image", "sigma", "iters", "lr", "probe_iters", "out_dir"]),
            )?;
            cmd_bias(&kv)
        }
        Command::CsTrain {
            common,
            model,
            train,
            data,
            accel,
            transform,
            out_dir,
        } => {
            let mut fl = flags(&common);
            model.put(&mut fl);
            train.put(&mut fl);
            data.put(&mut fl);
            crate::settings::put(&mut fl, "accel", &accel);
            crate::settings::put(&mut fl, "transform", &transform);
            put_path(&mut fl, "out_dir", &out_dir);
            let kv = merge(
                common.config.as_deref(),
                &fl,
                &keys(&[MODEL_KEYS, TRAIN_KEYS, DATA_KEYS], &["seed", "accel", "transform", "out_dir"]),
            )?;
            cmd_cs_train(&kv)
        }
        Command::CsEval {
            common,
            checkpoint,
            operator,
            data,
            csv,
        } => {
            let mut fl = flags(&common);
            put_path(&mut fl, "checkpoint", &checkpoint);
            put_path(&mut fl, "operator", &operator);
            data.put(&mut fl);
            put_path(&mut fl, "csv", &csv);
            let kv = merge(
                common.config.as_deref(),
                &fl,
                &keys(&[DATA_KEYS], &["seed", "checkpoint", "operator", "csv"]),
            )?;
            cmd_cs_eval(&kv)
        }
        Command::Bench {
            common,
            model,
            batches,
            repeats,
            warmup,
            precision,
            out_dir,
        } => {
            let mut fl = flags(&common);
            model.put(&mut fl);
            crate::settings::put(&mut fl, "batches", &batches);
            crate::settings::put(&mut fl, "repeats", &repeats);
            crate::settings::put(&mut fl, "warmup", &warmup);
            crate::settings::put(&mut fl, "precision", &precision);
            put_path(&mut fl, "out_dir", &out_dir);
            let kv = merge(
                common.config.as_deref(),
                &fl,
                &keys(&[MODEL_KEYS], &["seed", "batches", "repeats", "warmup", "precision", "out_dir"]),
            )?;
            cmd_bench(&kv)
        }
        Command::GradCheck {
            common,
            model,
            tol,
            seeds,
            out_dir,
        } => {
            let mut fl = flags(&common);
            model.put(&mut fl);
            crate::settings::put(&mut fl, "tol", &tol);
            crate::settings::put(&mut fl, "seeds", &seeds);
            put_path(&mut fl, "out_dir", &out_dir);
            let kv = merge(common.config.as_deref(), &fl, &keys(&[MODEL_KEYS], &["seed", "tol", "seeds", "out_dir"]))?;
            cmd_grad_check(&kv)
        }
    }
}

fn cmd_train(kv: &KvConfig) -> Result<()> {
    let out_dir = require_path(kv, "out_dir")?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let tc = TrainConfig {
        seed,
        loss: LossKind::ResidualMse,
        ..TrainConfig::from_kv(kv)?
    };
    let data = DataSpec::resolve(kv, 512, 32)?;
    let family = family(kv)?;
    let base = resolve_model(kv, ModelConfig::new(family, data.size, data.size, 1))?;
    let images = data.images(base.channels, seed)?;
    let model = fit_model_to_images(kv, base, &images)?;
    let pairs = synthesize_noisy_set(&images, sigma_from_8bit(data.sigma), seed)?;
    let (train, eval) = split_holdout(&pairs, data.holdout_for(pairs.len()));

    let mut resolved = KvConfig::new();
    model.write_kv(&mut resolved);
    tc.write_kv(&mut resolved);
    data.write(&mut resolved);
    resolved.set("out_dir", out_dir.display());
    write_meta(&out_dir, "train", &resolved)?;

    let records = match tc.precision {
        DType::F64 => {
            let (p, r) = train_denoiser(&model, init_params::<f64>(&model, seed), &train, &eval, &tc)?;
            save_model(&out_dir, &model, seed, &p)?;
            r
        }
        DType::F32 => {
            let (p, r) = train_denoiser(&model, init_params::<f32>(&model, seed), &train, &eval, &tc)?;
            save_model(&out_dir, &model, seed, &p)?;
            r
        }
    };
    let mut f = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    write_metrics_csv(&mut f, &records)?;
    f.flush()?;
    if let Some(last) = records.last() {
        let noisy: f64 = eval.iter().map(|p| psnr(&p.noisy, &p.clean, 1.0)).sum::<imgmix::Result<f64>>()?
            / eval.len().max(1) as f64;
        println!(
            "trained {} steps: loss {:.4e}, held-out PSNR {:.2} dB (noisy {:.2} dB)",
            last.iteration,
            last.train_loss,
            last.eval_psnr_db.unwrap_or(f64::NAN),
            noisy
        );
    }
    Ok(())
}

fn cmd_denoise(kv: &KvConfig) -> Result<()> {
    let checkpoint = require_path(kv, "checkpoint")?;
    let input = require_path(kv, "input")?;
    let output = require_path(kv, "output")?;
    let (model, _) = checkpoint_config(&checkpoint)?;
    let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
    let img = convert_channels(&read_image(&input)?, model.channels)?;
    if img.shape() != model.image_shape() {
        bail!(usage(format!("input is {:?}, model expects {:?}", img.shape(), model.image_shape())));
    }
    let clean = denoise(&model, &params, &img)?;
    std::fs::create_dir_all(parent_dir(&output))?;
    write_image(&output, &clean)?;
    write_meta(&parent_dir(&output), "denoise", kv)?;
    Ok(())
}

fn cmd_eval(kv: &KvConfig) -> Result<()> {
    let checkpoint = require_path(kv, "checkpoint")?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let (model, _) = checkpoint_config(&checkpoint)?;
    let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
    let data = DataSpec::resolve(kv, 100, model.height)?;
    let images = data.images(model.channels, seed)?;
    fit_model_to_images(&KvConfig::new(), model, &images)?;
    let pairs = synthesize_noisy_set(&images, sigma_from_8bit(data.sigma), seed)?;
    let noisy: Vec<Tensor<f64>> = pairs.iter().map(|p| p.noisy.clone()).collect();
    let est = reconstruct(&model, &params, &noisy, LossKind::ResidualMse, 16)?;
    let with_ssim = model.height >= 11 && model.width >= 11;

    let mut rows = Vec::new();
    for (i, (p, x)) in pairs.iter().zip(&est).enumerate() {
        let (sn, sd) = if with_ssim {
            (ssim(&p.noisy, &p.clean)?, ssim(x, &p.clean)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        rows.push((i, psnr(&p.noisy, &p.clean, 1.0)?, psnr(x, &p.clean, 1.0)?, sn, sd));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&(usize, f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    println!(
        "{} images: PSNR noisy {:.2} dB -> denoised {:.2} dB; SSIM noisy {:.4} -> denoised {:.4}",
        rows.len(),
        mean(|r| r.1),
        mean(|r| r.2),
        mean(|r| r.3),
        mean(|r| r.4)
    );
    let mut resolved = kv.clone();
    data.write(&mut resolved);
    resolved.set("seed", seed);
    if let Some(csv) = kv.get("csv").map(PathBuf::from) {
        std::fs::create_dir_all(parent_dir(&csv))?;
        let mut f = BufWriter::new(File::create(&csv)?);
        writeln!(f, "index,psnr_noisy_db,psnr_denoised_db,ssim_noisy,ssim_denoised")?;
        for r in &rows {
            writeln!(f, "{},{:.6},{:.6},{:.6},{:.6}", r.0, r.1, r.2, r.3, r.4)?;
        }
        f.flush()?;
        write_meta(&parent_dir(&csv), "eval", &resolved)?;
    } else {
        write_meta(Path::new("."), "eval", &resolved)?;
    }
    Ok(())
}

fn meta_dir(kv: &KvConfig) -> PathBuf {
    kv.get("out_dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_count_params(kv: &KvConfig) -> Result<()> {
    let family = family(kv)?;
    let model = resolve_model(kv, ModelConfig::new(family, 256, 256, 3))?;
    println!("{}", count_params(&model));
    for (group, n) in count_params_by_group(&model) {
        println!("  {group:?}: {n}");
    }
    let mut resolved = KvConfig::new();
    model.write_kv(&mut resolved);
    write_meta(&meta_dir(kv), "count-params", &resolved)
}

fn cmd_bias(kv: &KvConfig) -> Result<()> {
    let out_dir = require_path(kv, "out_dir")?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let iters: usize = kv.get_or("iters", 1500)?;
    let probe_iters: usize = kv.get_or("probe_iters", 100)?;
    let sigma8: f64 = kv.get_or("sigma", 255.0 * bias::default_sigma())?;
    let fixed_lr: Option<f64> = kv.get("lr").map(str::parse).transpose().map_err(|_| usage("bad --lr"))?;
    let fams = families(kv, &[Family::Img2ImgMixer, Family::OriginalMixer, Family::VitRecon])?;
    let template = ModelConfig::new(Family::Img2ImgMixer, 64, 64, 1)
        .with_arch(4, 4, 32, 2)
        .with_heads(2)
        .with_levels(1);
    let mut kv_single = kv.clone();
    kv_single.set("family", Family::Img2ImgMixer);
    let template = resolve_model(&kv_single, template)?;
    let clean = match kv.get("image") {
        Some(p) => convert_channels(&read_image(Path::new(p))?, template.channels)?,
        None => synthetic_image(template.height, template.width, template.channels, seed, 0),
    };
    if clean.shape() != template.image_shape() {
        bail!(usage(format!("image is {:?}, expected {:?}", clean.shape(), template.image_shape())));
    }
    let noise = bias::noise_realization(clean.shape(), sigma_from_8bit(sigma8), seed);

    std::fs::create_dir_all(&out_dir)?;
    let mut resolved = KvConfig::new();
    template.write_kv(&mut resolved);
    resolved.set("family", fams.iter().map(|f| f.name()).collect::<Vec<_>>().join(","));
    resolved.set("seed", seed);
    resolved.set("iters", iters);
    resolved.set("probe_iters", probe_iters);
    resolved.set("sigma", sigma8);
    if let Some(p) = kv.get("image") {
        resolved.set("image", p);
    }
    if let Some(lr) = fixed_lr {
        resolved.set("lr", lr);
    }
    resolved.set("out_dir", out_dir.display());

    let mut summary = Vec::new();
    let mut sweep = BufWriter::new(File::create(out_dir.join("lr_sweep.csv"))?);
    writeln!(sweep, "arch,lr,final_loss,selected")?;
    for family in fams {
        let spec = BiasRunSpec {
            config: template.with_family(family),
            target: TargetKind::ImgPlusNoise,
            iterations: iters,
            lr: fixed_lr.unwrap_or(LR_CANDIDATES[0]),
            input_seed: seed,
            init_seed: seed,
            clean: clean.clone(),
            noise: noise.clone(),
        };
        let lr = match fixed_lr {
            Some(lr) => lr,
            None => {
                let (lr, trials) = bias::select_lr(&spec, &LR_CANDIDATES, probe_iters)?;
                for t in &trials {
                    let loss = t.final_loss.map(|l| format!("{l:.9e}")).unwrap_or_else(|| "diverged".into());
                    writeln!(sweep, "{family},{},{loss},{}", t.lr, t.lr == lr)?;
                }
                lr
            }
        };
        let (_, rows) = bias::run_all_targets(&BiasRunSpec { lr, ..spec }, &out_dir)?;
        for row in &rows {
            println!(
                "{} {}: lr {lr}, best PSNR {:.2} dB at iteration {} (input {:.2} dB)",
                row.arch, row.target, row.best_psnr_db, row.best_iter, row.input_psnr_db
            );
        }
        summary.extend(rows);
    }
    sweep.flush()?;
    let mut f = BufWriter::new(File::create(out_dir.join("summary.csv"))?);
    bias::write_summary(&mut f, &summary)?;
    f.flush()?;
    write_meta(&out_dir, "bias", &resolved)
}

fn cmd_cs_train(kv: &KvConfig) -> Result<()> {
    let out_dir = require_path(kv, "out_dir")?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let accel: f64 = kv.get_or("accel", 4.0)?;
    let transform: Transform = kv.get_or("transform", Transform::Hadamard)?;
    let tc = TrainConfig {
        seed,
        loss: LossKind::OneMinusSsim,
        ..TrainConfig::from_kv(kv)?
    };
    let data = DataSpec::resolve(kv, 512, 32)?;
    let family = family(kv)?;
    let base = resolve_model(
        kv,
        ModelConfig::new(family, data.size, data.size, 1).with_arch(4, 4, 32, 2),
    )?;
    if base.channels != 1 {
        bail!(usage("compressive sensing uses single-channel images"));
    }
    let images = data.images(1, seed)?;
    let model = fit_model_to_images(kv, base, &images)?;
    let op = build_operator(model.height, model.width, accel, transform, seed)?;
    let (train, eval) = split_holdout(&images, data.holdout_for(images.len()));

    let mut resolved = KvConfig::new();
    model.write_kv(&mut resolved);
    tc.write_kv(&mut resolved);
    data.write(&mut resolved);
    resolved.set("accel", accel);
    resolved.set("transform", transform);
    resolved.set("out_dir", out_dir.display());
    write_meta(&out_dir, "cs-train", &resolved)?;
    op.save(&out_dir.join("operator.imxo"))?;

    let records = match tc.precision {
        DType::F64 => {
            let (p, r) = train_cs_refiner(&model, init_params::<f64>(&model, seed), &train, &eval, &op, &tc)?;
            save_model(&out_dir, &model, seed, &p)?;
            r
        }
        DType::F32 => {
            let (p, r) = train_cs_refiner(&model, init_params::<f32>(&model, seed), &train, &eval, &op, &tc)?;
            save_model(&out_dir, &model, seed, &p)?;
            r
        }
    };
    let mut f = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    write_metrics_csv(&mut f, &records)?;
    f.flush()?;
    let coarse: f64 = cs_examples(&op, &eval)?
        .iter()
        .map(|e| ssim(&e.input, &e.clean))
        .sum::<imgmix::Result<f64>>()?
        / eval.len().max(1) as f64;
    if let Some(last) = records.last() {
        println!(
            "trained {} steps at {}x acceleration: held-out SSIM {:.4} (coarse {:.4})",
            last.iteration,
            op.acceleration(),
            last.eval_ssim.unwrap_or(f64::NAN),
            coarse
        );
    }
    Ok(())
}

fn cmd_cs_eval(kv: &KvConfig) -> Result<()> {
    let checkpoint = require_path(kv, "checkpoint")?;
    let op_path = require_path(kv, "operator")?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let (model, _) = checkpoint_config(&checkpoint)?;
    let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
    let op = MeasurementOperator::load(&op_path)?;
    let data = DataSpec::resolve(kv, 100, model.height)?;
    let images = data.images(1, seed)?;
    fit_model_to_images(&KvConfig::new(), model, &images)?;
    let examples = cs_examples(&op, &images)?;
    let coarse: Vec<Tensor<f64>> = examples.iter().map(|e| e.input.clone()).collect();
    let refined = reconstruct(&model, &params, &coarse, LossKind::OneMinusSsim, 16)?;
    let mut rows = Vec::new();
    for (i, (e, x)) in examples.iter().zip(&refined).enumerate() {
        rows.push((i, ssim(&e.input, &e.clean)?, ssim(x, &e.clean)?, psnr(&e.input, &e.clean, 1.0)?, psnr(x, &e.clean, 1.0)?));
    }
    let n = rows.len() as f64;
    println!(
        "{} images: SSIM coarse {:.4} -> refined {:.4}; PSNR coarse {:.2} dB -> refined {:.2} dB",
        rows.len(),
        rows.iter().map(|r| r.1).sum::<f64>() / n,
        rows.iter().map(|r| r.2).sum::<f64>() / n,
        rows.iter().map(|r| r.3).sum::<f64>() / n,
        rows.iter().map(|r| r.4).sum::<f64>() / n
    );
    let mut resolved = kv.clone();
    data.write(&mut resolved);
    resolved.set("seed", seed);
    if let Some(csv) = kv.get("csv").map(PathBuf::from) {
        std::fs::create_dir_all(parent_dir(&csv))?;
        let mut f = BufWriter::new(File::create(&csv)?);
        writeln!(f, "index,ssim_coarse,ssim_refined,psnr_coarse_db,psnr_refined_db")?;
        for r in &rows {
            writeln!(f, "{},{:.6},{:.6},{:.6},{:.6}", r.0, r.1, r.2, r.3, r.4)?;
        }
        f.flush()?;
        write_meta(&parent_dir(&csv), "cs-eval", &resolved)?;
    } else {
        write_meta(Path::new("."), "cs-eval", &resolved)?;
    }
    Ok(())
}

fn cmd_bench(kv: &KvConfig) -> Result<()> {
    let seed: u64 = kv.get_or("seed", 0)?;
    let batches: Vec<usize> = kv
        .get("batches")
        .unwrap_or("1,4,16")
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad batch size `{s}`"))))
        .collect::<Result<_>>()?;
    let settings = BenchSettings {
        repeats: kv.get_or("repeats", 20)?,
        warmup: kv.get_or("warmup", 3)?,
        ..BenchSettings::default()
    };
    let precision: DType = kv.get_or("precision", DType::F32)?;
    let fams = families(kv, &Family::ALL)?;
    let mut kv_single = kv.clone();
    kv_single.set("family", Family::Img2ImgMixer);
    let template = resolve_model(
        &kv_single,
        ModelConfig::new(Family::Img2ImgMixer, 32, 32, 3)
            .with_arch(4, 4, 32, 2)
            .with_heads(4)
            .with_levels(1),
    )?;
    let configs: Vec<ModelConfig> = fams.iter().map(|&f| template.with_family(f)).collect();
    let rows = match precision {
        DType::F32 => bench_families::<f32>(&configs, &batches, &settings, seed)?,
        DType::F64 => bench_families::<f64>(&configs, &batches, &settings, seed)?,
    };
    let mut table = Vec::new();
    write_bench_table(&mut table, &rows)?;
    print!("{}", String::from_utf8_lossy(&table));
    let dir = meta_dir(kv);
    if kv.contains("out_dir") {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("bench.csv"), &table)?;
    }
    let mut resolved = KvConfig::new();
    template.write_kv(&mut resolved);
    resolved.set("family", fams.iter().map(|f| f.name()).collect::<Vec<_>>().join(","));
    resolved.set("batches", batches.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","));
    resolved.set("repeats", settings.repeats);
    resolved.set("warmup", settings.warmup);
    resolved.set("precision", precision);
    resolved.set("seed", seed);
    write_meta(&dir, "bench", &resolved)
}

fn cmd_grad_check(kv: &KvConfig) -> Result<()> {
    let seed: u64 = kv.get_or("seed", 0)?;
    let seeds: u64 = kv.get_or("seeds", 10)?;
    let tol: f64 = kv.get_or("tol", 1e-4)?;
    let fams = families(kv, &Family::ALL)?;
    let mut kv_single = kv.clone();
    kv_single.set("family", Family::Img2ImgMixer);
    let template = resolve_model(
        &kv_single,
        ModelConfig::new(Family::Img2ImgMixer, 16, 16, 3)
            .with_arch(4, 2, 8, 2)
            .with_heads(2)
            .with_levels(1),
    )?;
    let mut failures = Vec::new();
    if !kv.contains("family") {
        for case in op_cases() {
            let mut worst = 0.0f64;
            for s in seed..seed + seeds {
                worst = worst.max(case.check(s, GradCheckConfig::default())?.max_rel_error);
            }
            let ok = worst <= case.tolerance;
            println!(
                "op {}: max relative error {worst:.3e} (tol {:e}) [{}]",
                case.name,
                case.tolerance,
                if ok { "ok" } else { "FAIL" }
            );
            if !ok {
                failures.push(case.name.to_string());
            }
        }
    }
    for family in &fams {
        let config = template.with_family(*family);
        let mut worst = 0.0f64;
        for s in seed..seed + seeds {
            let report = grad_check_model(&config, s, GradCheckConfig::default())?;
            worst = worst.max(report.max_rel_error);
        }
        let ok = worst <= tol;
        println!("{family}: max relative error {worst:.3e} over {seeds} seeds [{}]", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(family.to_string());
        }
    }
    let mut resolved = KvConfig::new();
    template.write_kv(&mut resolved);
    resolved.set("family", fams.iter().map(|f| f.name()).collect::<Vec<_>>().join(","));
    resolved.set("seed", seed);
    resolved.set("seeds", seeds);
    resolved.set("tol", tol);
    write_meta(&meta_dir(kv), "grad-check", &resolved)?;
    if !failures.is_empty() {
        bail!(NumericalFailure(format!("gradient check above {tol:e} for {}", failures.join(", "))));
    }
    Ok(())
}

