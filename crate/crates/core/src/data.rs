//! Image sources: procedural scenes, image directories and cached stacks.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::io::{read_image, to_grayscale};
use crate::rng::{self, Rng};
use crate::serialize::{load_tensor, save_tensor};
use crate::tensor::Tensor;

fn colour(r: &mut Rng, ch: usize) -> Vec<f64> {
    (0..ch).map(|_| r.random::<f64>()).collect()
}

/// A piecewise-smooth scene: shaded background, soft-edged disks and
/// rectangles, and a few smooth bumps. Values lie in `[0, 1]`.
pub fn synthetic_image(h: usize, w: usize, ch: usize, seed: u64, index: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "scene", index);
    let (fh, fw) = (h as f64, w as f64);
    let c0 = colour(&mut r, ch);
    let c1 = colour(&mut r, ch);
    let angle = r.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let wave_freq: f64 = r.random_range(0.5..2.0);
    let wave_amp: f64 = r.random_range(0.0..0.15);
    let mut img = vec![0.0; h * w * ch];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 / fh, j as f64 / fw);
            let t = (0.5 + (x - 0.5) * dx + (y - 0.5) * dy).clamp(0.0, 1.0);
            let wave = wave_amp * (std::f64::consts::TAU * wave_freq * (x * dy - y * dx)).sin();
            for k in 0..ch {
                img[(i * w + j) * ch + k] = c0[k] * (1.0 - t) + c1[k] * t + wave;
            }
        }
    }

    let shapes = r.random_range(3..8);
    for _ in 0..shapes {
        let col = colour(&mut r, ch);
        let cy = r.random_range(0.0..fh);
        let cx = r.random_range(0.0..fw);
        let size = r.random_range(0.08..0.35) * fh.min(fw);
        let is_disk = r.random_bool(0.5);
        let aspect: f64 = r.random_range(0.5..2.0);
        for i in 0..h {
            for j in 0..w {
                let (py, px) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                // signed distance to the shape boundary, negative inside
                let d = if is_disk {
                    (py * py + px * px).sqrt() - size
                } else {
                    (py.abs() - size * aspect.sqrt()).max(px.abs() - size / aspect.sqrt())
                };
                let cover = (0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for k in 0..ch {
                        let p = &mut img[(i * w + j) * ch + k];
                        *p = *p * (1.0 - cover) + col[k] * cover;
                    }
                }
            }
        }
    }

    let bumps = r.random_range(1..4);
    for _ in 0..bumps {
        let cy = r.random_range(0.0..fh);
        let cx = r.random_range(0.0..fw);
        let s = r.random_range(0.05..0.25) * fh.max(fw);
        let amp: Vec<f64> = (0..ch).map(|_| r.random_range(-0.3..0.3)).collect();
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * s * s)).exp();
                for k in 0..ch {
                    img[(i * w + j) * ch + k] += amp[k] * g;
                }
            }
        }
    }

    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![h, w, ch], img).expect("scene shape")
}

/// `count` scenes with indices `0..count`.
pub fn synthetic_set(count: usize, h: usize, w: usize, ch: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..count as u64).map(|i| synthetic_image(h, w, ch, seed, i)).collect()
}

/// Converts `[H, W, c]` to `ch` channels (averaging down, replicating up).
pub fn convert_channels(img: &Tensor<f64>, ch: usize) -> Result<Tensor<f64>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::Image(format!("expected [H, W, ch], got {:?}", img.shape())));
    };
    match (c, ch) {
        (a, b) if a == b => Ok(img.clone()),
        (_, 1) => to_grayscale(img),
        (1, _) => Tensor::new(
            vec![h, w, ch],
            img.data().iter().flat_map(|&v| std::iter::repeat_n(v, ch)).collect(),
        ),
        _ => Err(Error::Image(format!("cannot convert {c} channels to {ch}"))),
    }
}

/// Non-overlapping `tile×tile` crops in raster order; partial edge tiles are dropped.
pub fn tile_image(img: &Tensor<f64>, tile: usize) -> Result<Vec<Tensor<f64>>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::Image(format!("expected [H, W, ch], got {:?}", img.shape())));
    };
    let mut out = Vec::new();
    for ti in 0..h / tile {
        for tj in 0..w / tile {
            let mut data = Vec::with_capacity(tile * tile * c);
            for i in 0..tile {
                let row = (ti * tile + i) * w + tj * tile;
                data.extend_from_slice(&img.data()[row * c..(row + tile) * c]);
            }
            out.push(Tensor::new(vec![tile, tile, c], data)?);
        }
    }
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// All PNG/PGM/PPM files of `dir` (sorted by name), converted to `ch`
/// channels and optionally cut into tiles.
pub fn load_image_dir(dir: &Path, ch: usize, tile: Option<usize>) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::new();
    for path in image_files(dir)? {
        let img = convert_channels(&read_image(&path)?, ch)?;
        match tile {
            Some(t) => out.extend(tile_image(&img, t)?),
            None => out.push(img),
        }
    }
    if out.is_empty() {
        return Err(Error::Image(format!("no usable images in {}", dir.display())));
    }
    Ok(out)
}

/// Stores equally shaped images as one stacked tensor file.
pub fn save_dataset(path: &Path, images: &[Tensor<f64>]) -> Result<()> {
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    save_tensor(path, &Tensor::stack(&refs)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Tensor<f64>>> {
    load_tensor::<f64>(path)?.unstack()
}

/// Splits off the last `holdout` items.
pub fn split_holdout<T: Clone>(items: &[T], holdout: usize) -> (Vec<T>, Vec<T>) {
    let cut = items.len().saturating_sub(holdout);
    (items[..cut].to_vec(), items[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_in_range() {
        let a = synthetic_image(32, 24, 3, 5, 0);
        assert_eq!(a, synthetic_image(32, 24, 3, 5, 0));
        assert_ne!(a, synthetic_image(32, 24, 3, 5, 1));
        assert_eq!(a.shape(), &[32, 24, 3]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let spread = a.data().iter().cloned().fold(f64::MIN, f64::max) - a.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.2);
    }

    #[test]
    fn tiles_cover_the_image() {
        let img = synthetic_image(8, 12, 1, 0, 0);
        let tiles = tile_image(&img, 4).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles[4].data()[5], img.data()[(4 + 1) * 12 + 4 + 1]);
    }

    #[test]
    fn channel_conversion() {
        let g = synthetic_image(4, 4, 1, 0, 0);
        let rgb = convert_channels(&g, 3).unwrap();
        assert!(convert_channels(&rgb, 1).unwrap().max_abs_diff(&g).unwrap() < 1e-15);
    }
}
