//! Band-wise PSNR and SSIM, reported as their means over bands.

use crate::cube::{HsiCube, RangeTag};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// How [`evaluate`] aggregates PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PsnrAggregation {
    /// Arithmetic mean of per-band PSNR.
    #[default]
    MeanOfBands,
    /// One PSNR from the MSE over every voxel.
    WholeCube,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mpsnr: f64,
    pub mssim: f64,
    pub psnr_per_band: Vec<f64>,
    pub ssim_per_band: Vec<f64>,
}

fn check_shape(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: "metric inputs",
            expected: a,
            got: b,
        });
    }
    Ok(())
}

pub fn mse(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_shape(reference.len(), estimate.len())?;
    Ok(reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `+inf` when the inputs are identical.
pub fn psnr(reference: &[f64], estimate: &[f64], peak: f64) -> Result<f64> {
    let m = mse(reference, estimate)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable Gaussian filter of a column-major `rows x cols` image.
fn filter_valid(img: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let w = taps.len();
    let out_r = rows - w + 1;
    let out_c = cols - w + 1;
    // along rows (contiguous within a column)
    let mut tmp = vec![0.0; out_r * cols];
    for j in 0..cols {
        let col = &img[j * rows..(j + 1) * rows];
        for i in 0..out_r {
            tmp[j * out_r + i] = taps.iter().zip(&col[i..i + w]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; out_r * out_c];
    for j in 0..out_c {
        for i in 0..out_r {
            out[j * out_r + i] = taps
                .iter()
                .enumerate()
                .map(|(d, t)| t * tmp[(j + d) * out_r + i])
                .sum();
        }
    }
    out
}

/// Mean local SSIM of two column-major `rows x cols` images with peak 1.
pub fn ssim(reference: &[f64], estimate: &[f64], rows: usize, cols: usize) -> Result<f64> {
    check_shape(reference.len(), estimate.len())?;
    check_shape(rows * cols, reference.len())?;
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {rows}x{cols}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let taps = gaussian_taps();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        reference.iter().zip(estimate).map(|(a, b)| f(*a, *b)).collect()
    };
    let mu_x = filter_valid(reference, rows, cols, &taps);
    let mu_y = filter_valid(estimate, rows, cols, &taps);
    let xx = filter_valid(&prod(&|a, _| a * a), rows, cols, &taps);
    let yy = filter_valid(&prod(&|_, b| b * b), rows, cols, &taps);
    let xy = filter_valid(&prod(&|a, b| a * b), rows, cols, &taps);
    let n = mu_x.len();
    let mut total = 0.0;
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let vx = xx[p] - mx * mx;
        let vy = yy[p] - my * my;
        let cov = xy[p] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / n as f64)
}

/// Per-band PSNR/SSIM and their means. Bands with infinite PSNR are left out
/// of the mean unless every band is infinite, which reports `+inf`.
pub fn evaluate(reference: &HsiCube, estimate: &HsiCube) -> Result<MetricReport> {
    evaluate_with(reference, estimate, PsnrAggregation::MeanOfBands)
}

pub fn evaluate_with(
    reference: &HsiCube,
    estimate: &HsiCube,
    aggregation: PsnrAggregation,
) -> Result<MetricReport> {
    if reference.dims() != estimate.dims() {
        return Err(Error::Contract(format!(
            "metric cubes differ in shape: {} vs {}",
            reference.dims(),
            estimate.dims()
        )));
    }
    for cube in [reference, estimate] {
        if cube.range() != RangeTag::Unit01 {
            return Err(Error::Contract(format!(
                "metrics expect unit01 cubes, got {}",
                cube.range()
            )));
        }
    }
    let d = reference.dims();
    let mut psnr_per_band = Vec::with_capacity(d.bands);
    let mut ssim_per_band = Vec::with_capacity(d.bands);
    for k in 0..d.bands {
        let a = reference.band(k)?;
        let b = estimate.band(k)?;
        psnr_per_band.push(psnr(a, b, 1.0)?);
        ssim_per_band.push(ssim(a, b, d.height, d.width)?);
    }
    let mpsnr = match aggregation {
        PsnrAggregation::MeanOfBands => {
            let finite: Vec<f64> = psnr_per_band
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .collect();
            if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        }
        PsnrAggregation::WholeCube => psnr(reference.values(), estimate.values(), 1.0)?,
    };
    let mssim = ssim_per_band.iter().sum::<f64>() / d.bands as f64;
    Ok(MetricReport {
        mpsnr,
        mssim,
        psnr_per_band,
        ssim_per_band,
    })
}
