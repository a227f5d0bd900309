//! Diffusion noise schedule: `beta_t`, `alpha_t = 1 - beta_t`, the cumulative
//! product `alpha_bar_t`, and the per-step noise scale `sigma_t`.
//!
//! Steps are 1-based. `alpha_bar(0) = 1` so the recursion is total.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// How `sigma_t` is derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaConvention {
    /// `sigma_t = sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t)`, with
    /// `sigma_1` clamped to `sqrt(beta_1)`.
    PosteriorSqrt,
    /// `sigma_t = sqrt((1 - abar_t) / abar_t)`, the noise level of the
    /// variance-exploding view `x_t / sqrt(abar_t) = x_0 + sigma_t * eps`.
    #[default]
    Snr,
}

impl SigmaConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            SigmaConvention::PosteriorSqrt => "posterior_sqrt",
            SigmaConvention::Snr => "snr",
        }
    }
}

impl std::str::FromStr for SigmaConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior_sqrt" => Ok(SigmaConvention::PosteriorSqrt),
            "snr" => Ok(SigmaConvention::Snr),
            other => Err(Error::Config(format!(
                "unknown sigma convention `{other}` (expected posterior_sqrt or snr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    // index t holds the value for step t; index 0 is the clean level
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    convention: SigmaConvention,
}

impl DiffusionSchedule {
    /// Linear schedule `beta_t = beta_1 + (t-1)/(T-1) * (beta_T - beta_1)`.
    pub fn linear(
        steps: usize,
        beta_1: f64,
        beta_last: f64,
        convention: SigmaConvention,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Contract(format!(
                "linear schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_last && beta_last < 1.0) {
            return Err(Error::Contract(format!(
                "need 0 < beta_1 <= beta_T < 1, got beta_1 = {beta_1}, beta_T = {beta_last}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_1 + (i as f64 / span) * (beta_last - beta_1))
            .collect();
        Self::from_betas(betas, convention)
    }

    /// Arbitrary per-step variances, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>, convention: SigmaConvention) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Contract("schedule needs at least one step".into()));
        }
        if let Some((t, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::Contract(format!(
                "beta_{} = {b} outside (0, 1)",
                t + 1
            )));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let mut sigmas = vec![0.0; betas.len() + 1];
        for t in 1..=betas.len() {
            let ab = alpha_bars[t];
            sigmas[t] = match convention {
                SigmaConvention::PosteriorSqrt => {
                    let var = (1.0 - alpha_bars[t - 1]) / (1.0 - ab) * betas[t - 1];
                    if t == 1 {
                        betas[0].sqrt()
                    } else {
                        var.sqrt()
                    }
                }
                SigmaConvention::Snr => ((1.0 - ab) / ab).sqrt(),
            };
        }
        Ok(DiffusionSchedule {
            betas,
            alpha_bars,
            sigmas,
            convention,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn convention(&self) -> SigmaConvention {
        self.convention
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// Cumulative product; defined for `0..=T` with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Contract(format!("step {t} outside 0..={}", self.steps()))
        })
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigmas[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`, `eps ~ N(0, I)` from `rng`.
    pub fn forward_perturb<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let ab = self.alpha_bar(t)?;
        let signal = ab.sqrt();
        let noise = (1.0 - ab).sqrt();
        Ok(x0
            .iter()
            .map(|x| {
                let eps: f64 = rng.sample(StandardNormal);
                signal * x + noise * eps
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn paper_schedule(convention: SigmaConvention) -> DiffusionSchedule {
        DiffusionSchedule::linear(1000, 1e-4, 2e-3, convention).unwrap()
    }

    #[test]
    fn linear_endpoints_and_midpoint() {
        let s = paper_schedule(SigmaConvention::Snr);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert_eq!(s.beta(1000).unwrap(), 2e-3);
        let mid = 1e-4 + (499.0 / 999.0) * 1.9e-3;
        assert!((s.beta(500).unwrap() - mid).abs() < 1e-18);
    }

    #[test]
    fn alpha_bar_three_term_product() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3], SigmaConvention::Snr).unwrap();
        assert!((s.alpha_bar(3).unwrap() - 0.504).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha(2).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_extended_precision_product() {
        // Regression constant from a compensated product loop over the same betas.
        let s = paper_schedule(SigmaConvention::Snr);
        let mut hi = 1.0f64;
        let mut lo = 0.0f64;
        for t in 1..=1000 {
            let a = 1.0 - (1e-4 + ((t - 1) as f64 / 999.0) * 1.9e-3);
            let p = hi * a;
            let err = hi.mul_add(a, -p);
            lo = lo * a + err;
            hi = p;
        }
        let oracle = hi + lo;
        assert!((s.alpha_bar(1000).unwrap() - oracle).abs() / oracle < 1e-12);
        assert!((oracle - ALPHA_BAR_1000).abs() < 1e-12);
    }

    /// `prod_{t=1}^{1000} (1 - beta_t)` for the linear 1e-4..2e-3 schedule,
    /// evaluated with 50-digit arithmetic.
    const ALPHA_BAR_1000: f64 = 0.349_691_944_363_334_95;

    #[test]
    fn alpha_bar_recursion_and_monotonicity() {
        for conv in [SigmaConvention::Snr, SigmaConvention::PosteriorSqrt] {
            let s = paper_schedule(conv);
            for t in 1..=1000 {
                let ab = s.alpha_bar(t).unwrap();
                let rec = s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap();
                assert!((ab - rec).abs() <= 1e-12 * rec);
                assert!(ab < s.alpha_bar(t - 1).unwrap() && ab > 0.0);
                assert!(s.sigma(t).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn sigma_is_non_decreasing() {
        let snr = paper_schedule(SigmaConvention::Snr);
        for t in 2..=1000 {
            assert!(snr.sigma(t).unwrap() >= snr.sigma(t - 1).unwrap());
        }
        // The clamped sigma_1 sits above sigma_2; monotone from step 2 on.
        let post = paper_schedule(SigmaConvention::PosteriorSqrt);
        for t in 3..=1000 {
            assert!(post.sigma(t).unwrap() >= post.sigma(t - 1).unwrap());
        }
    }

    #[test]
    fn posterior_sigma_values() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2], SigmaConvention::PosteriorSqrt)
            .unwrap();
        assert!((s.sigma(1).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        // sqrt(0.1 / 0.28 * 0.2)
        assert!((s.sigma(2).unwrap() - 0.267_261_241_912_424_4).abs() < 1e-12);
    }

    #[test]
    fn snr_sigma_single_step() {
        let s = DiffusionSchedule::from_betas(vec![0.5], SigmaConvention::Snr).unwrap();
        assert!((s.sigma(1).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parameter_validation() {
        let c = SigmaConvention::Snr;
        assert!(DiffusionSchedule::linear(1, 1e-4, 2e-3, c).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 2e-3, c).is_err());
        assert!(DiffusionSchedule::linear(10, 3e-3, 2e-3, c).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0, c).is_err());
        let s = paper_schedule(c);
        assert!(s.sigma(0).is_err());
        assert!(s.sigma(1001).is_err());
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn forward_perturb_identity_at_level_zero() {
        let s = paper_schedule(SigmaConvention::Snr);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x0 = vec![0.3, -0.7, 0.1];
        assert_eq!(s.forward_perturb(&x0, 0, &mut rng).unwrap(), x0);
    }

    #[test]
    fn forward_perturb_is_deterministic() {
        let s = paper_schedule(SigmaConvention::Snr);
        let x0 = vec![0.5; 16];
        let a = s
            .forward_perturb(&x0, 300, &mut ChaCha20Rng::seed_from_u64(9))
            .unwrap();
        let b = s
            .forward_perturb(&x0, 300, &mut ChaCha20Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_perturb_statistics() {
        let s = paper_schedule(SigmaConvention::Snr);
        let t = 700;
        let ab = s.alpha_bar(t).unwrap();
        let n = 100_000;
        let mut rng = ChaCha20Rng::seed_from_u64(3);

        let zeros = vec![0.0; n];
        let out = s.forward_perturb(&zeros, t, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = (1.0 - ab).sqrt();
        assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt());
        // var of the sample variance for a Gaussian is 2 sigma^4 / (n - 1)
        let var_se = (2.0 / (n - 1) as f64).sqrt() * (1.0 - ab);
        assert!((var - (1.0 - ab)).abs() < 3.0 * var_se);

        let x0 = vec![0.8; n];
        let out = s.forward_perturb(&x0, t, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((mean - ab.sqrt() * 0.8).abs() < 3.0 * sd / (n as f64).sqrt());
    }
}
