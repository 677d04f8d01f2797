//! Robust image-patch modeling under salt-and-pepper noise.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictlearn::{learn, LearnConfig};
use crate::error::{Error, Result};
use crate::penalties::Misfit;
use crate::seeds;

/// Grayscale image with pixel values in `[0, 1]`, stored `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pixels: DMatrix<f64>,
}

impl ImageGrid {
    pub fn new(pixels: DMatrix<f64>) -> Result<Self> {
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn clipped(pixels: DMatrix<f64>) -> Self {
        Self {
            pixels: pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> DMatrix<f64> {
        self.pixels
    }
}

fn check_patch_grid(height: usize, width: usize, p: usize) -> Result<()> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
        return Err(Error::dim(format!(
            "{height}x{width} image does not split into {p}x{p} patches"
        )));
    }
    Ok(())
}

/// Non-overlapping `p x p` patches as columns. Patches are ordered left to
/// right, then top to bottom; each patch is vectorized column by column.
pub fn extract_patches(img: &ImageGrid, p: usize) -> Result<DMatrix<f64>> {
    let (h, w) = (img.height(), img.width());
    check_patch_grid(h, w, p)?;
    let per_row = w / p;
    let count = (h / p) * per_row;
    let mut out = DMatrix::zeros(p * p, count);
    for idx in 0..count {
        let (r0, c0) = ((idx / per_row) * p, (idx % per_row) * p);
        let block = img.pixels.view((r0, c0), (p, p));
        out.column_mut(idx).copy_from_slice(block.clone_owned().as_slice());
    }
    Ok(out)
}

/// Inverse of [`extract_patches`]; values are not clipped.
pub fn reassemble_patches(patches: &DMatrix<f64>, height: usize, width: usize, p: usize) -> Result<DMatrix<f64>> {
    check_patch_grid(height, width, p)?;
    let per_row = width / p;
    let count = (height / p) * per_row;
    if patches.shape() != (p * p, count) {
        return Err(Error::dim(format!(
            "expected {}x{count} patch matrix for a {height}x{width} image, got {:?}",
            p * p,
            patches.shape()
        )));
    }
    let mut out = DMatrix::zeros(height, width);
    for idx in 0..count {
        let (r0, c0) = ((idx / per_row) * p, (idx % per_row) * p);
        let block = DMatrix::from_column_slice(p, p, patches.column(idx).as_slice());
        out.view_mut((r0, c0), (p, p)).copy_from(&block);
    }
    Ok(out)
}

/// Corrupts exactly `round(fraction * N)` pixels, chosen without
/// replacement, setting each to 0 or 1 with equal probability. Returns the
/// noisy image and the chosen positions (column-major linear indices).
pub fn salt_pepper_with_positions(img: &ImageGrid, fraction: f64, seed: u64) -> Result<(ImageGrid, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::param(format!("noise fraction must lie in [0, 1], got {fraction}")));
    }
    let n = img.pixels.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = seeds::rng(seed);
    let mut positions = sample(&mut rng, n, count).into_vec();
    let mut pixels = img.pixels.clone();
    for &pos in &positions {
        pixels[pos] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    }
    positions.sort_unstable();
    Ok((ImageGrid { pixels }, positions))
}

pub fn salt_pepper(img: &ImageGrid, fraction: f64, seed: u64) -> Result<ImageGrid> {
    salt_pepper_with_positions(img, fraction, seed).map(|(g, _)| g)
}

/// `10 log10(1 / MSE)` for `[0, 1]` images; `+inf` for identical images.
pub fn psnr(clean: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    if clean.pixels.shape() != test.pixels.shape() {
        return Err(Error::dim(format!(
            "images are {:?} and {:?}",
            clean.pixels.shape(),
            test.pixels.shape()
        )));
    }
    let mse = (&clean.pixels - &test.pixels).map(|v| v * v).mean();
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Deterministic piecewise-smooth test image: a shaded background with a
/// disk, a bar and a ring.
pub fn test_image(size: usize) -> ImageGrid {
    let s = size as f64;
    let pixels = DMatrix::from_fn(size, size, |i, j| {
        let (y, x) = (i as f64 / s, j as f64 / s);
        let mut v = 0.25 + 0.3 * x + 0.1 * y;
        let d1 = ((x - 0.33).powi(2) + (y - 0.35).powi(2)).sqrt();
        if d1 < 0.2 {
            v = 0.85 - 0.5 * d1;
        }
        if (0.6..0.85).contains(&x) && (0.15..0.9).contains(&y) {
            v = 0.15 + 0.2 * y;
        }
        let d2 = ((x - 0.3).powi(2) + (y - 0.75).powi(2)).sqrt();
        if (0.1..0.16).contains(&d2) {
            v = 0.95;
        }
        v.clamp(0.0, 1.0)
    });
    ImageGrid { pixels }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageExperimentConfig {
    pub patch: usize,
    pub atoms: usize,
    pub lam: f64,
    pub outer_max: usize,
    pub outer_rtol: f64,
    /// Number of noise realizations per level.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ImageExperimentConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            atoms: 128,
            lam: 0.01,
            outer_max: 50,
            outer_rtol: 1e-4,
            repeats: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub noise_level: f64,
    /// Misfit spec, or `noisy` for the corrupted input itself.
    pub misfit: String,
    pub repeat: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub rows: Vec<ImageRow>,
}

impl ImageReport {
    /// Mean PSNR over repeats for one (noise level, misfit) series.
    pub fn mean_psnr(&self, noise_level: f64, misfit: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.noise_level == noise_level && r.misfit == misfit)
            .map(|r| r.psnr)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("noise_level,misfit,repeat,psnr\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.noise_level, crate::io::csv_field(&r.misfit), r.repeat, r.psnr);
        }
        out
    }
}

/// Learns a dictionary on the noisy patches for each misfit, rebuilds the
/// image from `D A`, and scores it against the clean image. No denoising
/// step is applied beyond the sparse model itself.
pub fn robust_image_experiment(
    img: &ImageGrid,
    noise_levels: &[f64],
    misfits: &[Misfit],
    config: &ImageExperimentConfig,
) -> Result<ImageReport> {
    check_patch_grid(img.height(), img.width(), config.patch)?;
    let mut report = ImageReport::default();
    for &level in noise_levels {
        for rep in 0..config.repeats {
            let noise_seed = seeds::derive(config.seed, &format!("salt-pepper/{level}/{rep}"));
            let noisy = salt_pepper(img, level, noise_seed)?;
            report.rows.push(ImageRow {
                noise_level: level,
                misfit: "noisy".into(),
                repeat: rep,
                psnr: psnr(img, &noisy)?,
            });
            let patches = extract_patches(&noisy, config.patch)?;
            for misfit in misfits {
                let mut lc = LearnConfig::new(config.atoms, misfit.clone());
                lc.lam = config.lam;
                lc.outer_max = config.outer_max;
                lc.outer_rtol = config.outer_rtol;
                lc.seed = seeds::derive(config.seed, &format!("dictionary/{level}/{rep}"));
                let state = learn(&patches, &lc)?;
                let recon = reassemble_patches(
                    &(&state.dictionary * &state.codes),
                    img.height(),
                    img.width(),
                    config.patch,
                )?;
                report.rows.push(ImageRow {
                    noise_level: level,
                    misfit: misfit.to_string(),
                    repeat: rep,
                    psnr: psnr(img, &ImageGrid::clipped(recon))?,
                });
            }
        }
    }
    Ok(report)
}
