//! Synthetic low-rank ground truth: smooth abundance maps on the simplex mixed
//! with smooth endmember spectra, `X = sum_r S_r o c_r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cube::{Dims, HsiCube, RangeTag};
use crate::error::{Error, Result};
use crate::vs2m::compose_factors;

// sharpness of the softmax that maps blurred fields onto the simplex
const ABUNDANCE_CONTRAST: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub dims: Dims,
    pub rank: usize,
    /// Standard deviation, in pixels, of the Gaussian blur applied to the
    /// random fields behind the abundance maps.
    pub smoothness: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(dims: Dims, rank: usize, seed: u64) -> Self {
        SynthSpec {
            dims,
            rank,
            smoothness: (dims.height.max(dims.width) as f64 / 8.0).max(1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Contract("synthetic rank must be >= 1".into()));
        }
        Dims::new(self.dims.height, self.dims.width, self.dims.bands)?;
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Contract(format!(
                "smoothness must be finite and >= 0, got {}",
                self.smoothness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub cube: HsiCube,
    /// Column-major `I x J` maps; they sum to one at every pixel.
    pub abundances: Vec<Vec<f64>>,
    /// Length-`K` spectra in `[0, 1]`.
    pub endmembers: Vec<Vec<f64>>,
}

pub fn make_synthetic(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let d = spec.dims;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let fields: Vec<Vec<f64>> = (0..spec.rank)
        .map(|_| {
            let raw: Vec<f64> = (0..d.band_len()).map(|_| rng.random_range(0.0..1.0)).collect();
            standardize(blur(&raw, d.height, d.width, spec.smoothness))
        })
        .collect();
    let mut abundances = vec![vec![0.0; d.band_len()]; spec.rank];
    for p in 0..d.band_len() {
        let peak = fields
            .iter()
            .map(|f| f[p])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = fields
            .iter()
            .map(|f| (ABUNDANCE_CONTRAST * (f[p] - peak)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for (a, w) in abundances.iter_mut().zip(&weights) {
            a[p] = w / total;
        }
    }

    let endmembers: Vec<Vec<f64>> = (0..spec.rank)
        .map(|_| smooth_spectrum(d.bands, &mut rng))
        .collect();

    // convex combinations of [0, 1] spectra stay in [0, 1]
    let values: Vec<f64> = compose_factors(d, &abundances, &endmembers)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let cube = HsiCube::new(d, values, RangeTag::Unit01)?;
    Ok(Synthetic {
        cube,
        abundances,
        endmembers,
    })
}

/// Sum of a few Gaussian bumps over a baseline, mapped into a random
/// sub-interval of `[0.05, 0.95]`.
fn smooth_spectrum<R: Rng + ?Sized>(bands: usize, rng: &mut R) -> Vec<f64> {
    let bumps = 3;
    let mut s = vec![0.0; bands];
    for _ in 0..bumps {
        let center = rng.random_range(0.0..1.0) * bands as f64;
        let width = rng.random_range(0.15..0.5) * bands.max(2) as f64;
        let height = rng.random_range(-1.0..1.0);
        for (k, v) in s.iter_mut().enumerate() {
            let z = (k as f64 - center) / width;
            *v += height * (-0.5 * z * z).exp();
        }
    }
    let lo_target = rng.random_range(0.05..0.3);
    let hi_target = rng.random_range(0.6..0.95);
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5 * (lo_target + hi_target); bands];
    }
    s.iter()
        .map(|v| lo_target + (v - lo) / (hi - lo) * (hi_target - lo_target))
        .collect()
}

fn standardize(mut f: Vec<f64>) -> Vec<f64> {
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
    for v in &mut f {
        *v = (*v - mean) * scale;
    }
    f
}

/// Separable Gaussian blur of a column-major image with mirrored borders.
fn blur(img: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // mirror repeatedly for kernels wider than the image
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; img.len()];
    for j in 0..cols {
        for i in 0..rows {
            let mut acc = 0.0;
            for (t, d) in taps.iter().zip(-radius..=radius) {
                acc += t * img[j * rows + reflect(i as isize + d, rows)];
            }
            tmp[j * rows + i] = acc / norm;
        }
    }
    let mut out = vec![0.0; img.len()];
    for j in 0..cols {
        for i in 0..rows {
            let mut acc = 0.0;
            for (t, d) in taps.iter().zip(-radius..=radius) {
                acc += t * tmp[reflect(j as isize + d, cols) * rows + i];
            }
            out[j * rows + i] = acc / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: usize, j: usize, k: usize, rank: usize, seed: u64) -> SynthSpec {
        SynthSpec::new(Dims::new(i, j, k).unwrap(), rank, seed)
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic(&spec(16, 16, 6, 3, 1)).unwrap();
        let b = make_synthetic(&spec(16, 16, 6, 3, 1)).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(&spec(16, 16, 6, 3, 2)).unwrap();
        assert_ne!(a.cube, c.cube);
    }

    #[test]
    fn rank_one_bands_are_proportional() {
        let s = make_synthetic(&spec(8, 8, 5, 1, 3)).unwrap();
        let d = s.cube.dims();
        let b0 = s.cube.band(0).unwrap();
        for k in 1..d.bands {
            let bk = s.cube.band(k).unwrap();
            let ratio = bk[0] / b0[0];
            for (x, y) in b0.iter().zip(bk) {
                assert!((y - ratio * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factors_reconstruct_cube_and_abundances_on_simplex() {
        let s = make_synthetic(&spec(12, 10, 7, 4, 5)).unwrap();
        let d = s.cube.dims();
        for p in 0..d.band_len() {
            let total: f64 = s.abundances.iter().map(|a| a[p]).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(s.abundances.iter().all(|a| a[p] >= 0.0));
        }
        for k in 0..d.bands {
            for j in 0..d.width {
                for i in 0..d.height {
                    let direct: f64 = (0..4)
                        .map(|r| s.abundances[r][j * d.height + i] * s.endmembers[r][k])
                        .sum();
                    assert!((direct - s.cube.get(i, j, k).unwrap()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn values_in_unit_range_over_seed_sweep() {
        for seed in 0..20 {
            let s = make_synthetic(&spec(16, 16, 8, 3, seed)).unwrap();
            assert!(s.cube.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s
                .endmembers
                .iter()
                .flatten()
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cube_has_spatial_structure() {
        let s = make_synthetic(&spec(32, 32, 8, 3, 7)).unwrap();
        let band = s.cube.band(0).unwrap();
        let mean = band.iter().sum::<f64>() / band.len() as f64;
        let sd = (band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / band.len() as f64).sqrt();
        assert!(sd > 0.02, "band 0 nearly flat: sd = {sd}");
    }

    #[test]
    fn invalid_specs() {
        assert!(make_synthetic(&spec(4, 4, 4, 0, 0)).is_err());
        let mut s = spec(4, 4, 4, 1, 0);
        s.smoothness = -1.0;
        assert!(make_synthetic(&s).is_err());
    }
}
