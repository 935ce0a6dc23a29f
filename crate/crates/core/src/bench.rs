//! Forward-pass throughput measurement.

use std::io::Write;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::models::{init_params, predict, Family, ModelConfig};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub repeats: usize,
    /// Untimed passes before measuring; at least 3.
    pub warmup: usize,
    /// Each timed sample repeats the forward pass until it lasts at least
    /// this long, so short passes are not dominated by timer jitter.
    pub min_sample: Duration,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            repeats: 20,
            warmup: 3,
            min_sample: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub family: Family,
    pub batch: usize,
    /// Images in one forward pass (equals `batch`).
    pub images_per_pass: usize,
    /// Forward passes per timed sample.
    pub passes_per_sample: usize,
    /// Median over samples.
    pub images_per_sec: f64,
    /// Coefficient of variation of the per-sample rates.
    pub cv: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times forward passes of `params` for each batch size.
pub fn bench_throughput<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch_sizes: &[usize],
    settings: &BenchSettings,
) -> Result<Vec<BenchRow>> {
    if settings.repeats == 0 || batch_sizes.contains(&0) {
        return Err(Error::Config("repeats and batch sizes must be positive".into()));
    }
    let warmup = settings.warmup.max(3);
    let mut rows = Vec::new();
    for &batch in batch_sizes {
        let mut shape = vec![batch];
        shape.extend_from_slice(&config.image_shape());
        let x = Tensor::<T>::from_fn(&shape, |i| T::from_f64(((i * 7919) % 1000) as f64 / 1000.0));
        let mut slowest = Duration::ZERO;
        for _ in 0..warmup {
            let t = Instant::now();
            std::hint::black_box(predict(config, params, &x)?);
            slowest = slowest.max(t.elapsed());
        }
        let passes = (settings.min_sample.as_secs_f64() / slowest.as_secs_f64().max(1e-9)).ceil().max(1.0) as usize;
        let mut rates = Vec::with_capacity(settings.repeats);
        for _ in 0..settings.repeats {
            let t = Instant::now();
            for _ in 0..passes {
                std::hint::black_box(predict(config, params, &x)?);
            }
            rates.push((batch * passes) as f64 / t.elapsed().as_secs_f64());
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
        rows.push(BenchRow {
            family: config.family,
            batch,
            images_per_pass: batch,
            passes_per_sample: passes,
            images_per_sec: median(&mut rates),
            cv: var.sqrt() / mean,
        });
    }
    Ok(rows)
}

/// Benchmarks freshly initialized models of every given configuration.
pub fn bench_families<T: Scalar>(
    configs: &[ModelConfig],
    batch_sizes: &[usize],
    settings: &BenchSettings,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for config in configs {
        config.validate()?;
        let params: ModelParams<T> = init_params(config, seed);
        rows.extend(bench_throughput(config, &params, batch_sizes, settings)?);
    }
    Ok(rows)
}

/// Fastest batch size per family, in first-appearance order.
pub fn best_batch(rows: &[BenchRow]) -> Vec<&BenchRow> {
    let mut best: Vec<&BenchRow> = Vec::new();
    for r in rows {
        match best.iter_mut().find(|b| b.family == r.family) {
            Some(b) if r.images_per_sec > b.images_per_sec => *b = r,
            Some(_) => {}
            None => best.push(r),
        }
    }
    best
}

/// Families ordered by their best throughput, fastest first.
pub fn ranking(rows: &[BenchRow]) -> Vec<(Family, f64)> {
    let mut out: Vec<(Family, f64)> = best_batch(rows).iter().map(|r| (r.family, r.images_per_sec)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

pub const BENCH_HEADER: &str = "arch,batch,images_per_sec,cv";

/// Table rows, then one `best` row per family and the relative ordering.
pub fn write_bench_table<W: Write>(w: &mut W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.2},{:.4}", r.family, r.batch, r.images_per_sec, r.cv)?;
    }
    for r in best_batch(rows) {
        writeln!(w, "{},best={},{:.2},{:.4}", r.family, r.batch, r.images_per_sec, r.cv)?;
    }
    let order: Vec<String> = ranking(rows).iter().map(|(f, _)| f.to_string()).collect();
    writeln!(w, "# ordering (fastest first): {}", order.join(" > "))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(family: Family, batch: usize, rate: f64) -> BenchRow {
        BenchRow {
            family,
            batch,
            images_per_pass: batch,
            passes_per_sample: 1,
            images_per_sec: rate,
            cv: 0.0,
        }
    }

    #[test]
    fn best_and_ranking() {
        let rows = vec![
            row(Family::Img2ImgMixer, 1, 10.0),
            row(Family::Img2ImgMixer, 4, 30.0),
            row(Family::VitRecon, 1, 50.0),
            row(Family::VitRecon, 4, 20.0),
        ];
        let best = best_batch(&rows);
        assert_eq!((best[0].batch, best[1].batch), (4, 1));
        assert_eq!(ranking(&rows)[0].0, Family::VitRecon);
        let mut out = Vec::new();
        write_bench_table(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("img2img,best=4") && text.contains("vit > img2img"));
    }

    #[test]
    fn rates_are_positive() {
        let cfg = ModelConfig::new(Family::Img2ImgMixer, 16, 16, 1).with_arch(4, 1, 8, 2);
        let params: ModelParams<f32> = init_params(&cfg, 0);
        let settings = BenchSettings {
            repeats: 3,
            warmup: 3,
            min_sample: Duration::from_millis(1),
        };
        let rows = bench_throughput(&cfg, &params, &[1, 2], &settings).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.images_per_sec.is_finite() && r.images_per_sec > 0.0));
        assert!(rows[1].images_per_pass >= rows[0].images_per_pass);
    }
}
