//! Variational spatio-spectral module.
//!
//! A cube is modelled as `sum_r S_r o c_r`: `R` untrained hourglass networks
//! produce the abundance maps `S_r` from fixed latents `z_r`, and `R` small
//! fully connected networks produce the endmember spectra `c_r` from fixed
//! latents `w_r`. Each generator owns an independent flat parameter buffer.
//! Fitting minimises `||x_t - a_t * x||^2` (or `||y - H x||^2` for the
//! no-diffusion mode) with Adam, carrying moments across calls.

mod adam;
pub(crate) mod layers;
mod spatial;

use std::hash::{DefaultHasher, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub use adam::{adam_update, AdamHyper, AdamMoments};
use layers::{leaky, Dense, Feature, Layout, LEAKY_SLOPE};
pub use spatial::SpatialArch;
use spatial::SpatialNet;

use crate::cube::Dims;
use crate::degradation::DegradationOperator;
use crate::error::{Error, Result};

/// Upper bound of the uniform distribution the spatial latents are drawn from.
pub const SPATIAL_LATENT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectralArch {
    /// Latent length `N_s`.
    pub latent_len: usize,
    pub hidden: Vec<usize>,
}

impl Default for SpectralArch {
    fn default() -> Self {
        SpectralArch {
            latent_len: 32,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Endmember count `R`.
    pub rank: usize,
    pub spatial: SpatialArch,
    pub spectral: SpectralArch,
}

impl ModelConfig {
    pub fn with_rank(rank: usize) -> Self {
        ModelConfig {
            rank,
            spatial: SpatialArch::default(),
            spectral: SpectralArch::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub iters_per_step: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            iters_per_step: 10,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.iters_per_step == 0 {
            return Err(Error::Contract("iters_per_step must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Contract(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Contract(format!(
                "adam_eps must be > 0, got {}",
                self.adam_eps
            )));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Untrained hourglass generator for one abundance map.
#[derive(Debug, Clone)]
pub struct SpatialGenerator {
    net: SpatialNet,
    latent: Feature,
    params: Vec<f64>,
}

impl SpatialGenerator {
    fn init<R: Rng + ?Sized>(arch: &SpatialArch, height: usize, width: usize, rng: &mut R) -> Self {
        let net = SpatialNet::new(arch);
        let mut params = vec![0.0; net.param_len()];
        net.init(&mut params, rng);
        let mut latent = Feature::zeros(arch.latent_channels, height, width);
        for v in &mut latent.data {
            *v = rng.random_range(0.0..SPATIAL_LATENT_SCALE);
        }
        SpatialGenerator {
            net,
            latent,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent.data
    }

    /// Zeroes the 1x1 output head (weights and bias).
    pub fn zero_output_head(&mut self) {
        for r in self.net.head_ranges() {
            self.params[r].fill(0.0);
        }
    }

    /// Parameter indices of the output head.
    pub fn output_head_indices(&self) -> Vec<usize> {
        self.net.head_ranges().into_iter().flatten().collect()
    }

    /// Abundance map, column-major `I x J` (index `j*I + i`).
    pub fn eval(&self) -> Vec<f64> {
        let (out, _) = self.net.forward(&self.params, &self.latent);
        row_to_col_major(&out.data, out.h, out.w)
    }
}

fn row_to_col_major(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[j * h + i] = data[i * w + j];
        }
    }
    out
}

/// Small fully connected generator for one endmember spectrum.
#[derive(Debug, Clone)]
pub struct SpectralGenerator {
    layers: Vec<Dense>,
    latent: Vec<f64>,
    params: Vec<f64>,
}

struct SpectralCache {
    // inputs[l] feeds layer l; pre[l] is layer l's affine output
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl SpectralGenerator {
    fn init<R: Rng + ?Sized>(arch: &SpectralArch, bands: usize, rng: &mut R) -> Self {
        let mut layout = Layout::default();
        let mut width = arch.latent_len;
        let mut layers = Vec::new();
        for &h in arch.hidden.iter().chain(std::iter::once(&bands)) {
            layers.push(Dense::new(&mut layout, width, h));
            width = h;
        }
        let mut params = vec![0.0; layout.len()];
        for layer in &layers {
            layer.init(&mut params, rng);
        }
        let latent = (0..arch.latent_len)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        SpectralGenerator {
            layers,
            latent,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }

    /// Endmember spectrum of length `K`.
    pub fn eval(&self) -> Vec<f64> {
        self.forward().0
    }

    fn forward(&self) -> (Vec<f64>, SpectralCache) {
        let last = self.layers.len() - 1;
        let mut x = self.latent.clone();
        let mut cache = SpectralCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&self.params, &x);
            let next = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|v| leaky(*v)).collect()
            };
            cache.inputs.push(x);
            cache.pre.push(pre);
            x = next;
        }
        (x, cache)
    }

    fn backward(&self, cache: &SpectralCache, dout: &[f64], grads: &mut [f64]) {
        let last = self.layers.len() - 1;
        let mut d = dout.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l != last {
                for (dv, p) in d.iter_mut().zip(&cache.pre[l]) {
                    if *p <= 0.0 {
                        *dv *= LEAKY_SLOPE;
                    }
                }
            }
            d = layer.backward(&self.params, &cache.inputs[l], &d, grads);
        }
    }
}

/// Gradient of a scalar objective w.r.t. every generator's parameters,
/// laid out like the parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub spatial: Vec<Vec<f64>>,
    pub spectral: Vec<Vec<f64>>,
}

impl ModelGradient {
    pub fn is_finite(&self) -> bool {
        self.spatial
            .iter()
            .chain(&self.spectral)
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Concatenation in model traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (s, c) in self.spatial.iter().zip(&self.spectral) {
            out.extend_from_slice(s);
            out.extend_from_slice(c);
        }
        out
    }
}

/// Adam moments for every generator plus the shared update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub spatial: Vec<AdamMoments>,
    pub spectral: Vec<AdamMoments>,
}

impl OptimizerState {
    pub fn new(model: &Vs2mModel) -> Self {
        OptimizerState {
            step: 0,
            spatial: model
                .spatial
                .iter()
                .map(|g| AdamMoments::zeros(g.params.len()))
                .collect(),
            spectral: model
                .spectral
                .iter()
                .map(|g| AdamMoments::zeros(g.params.len()))
                .collect(),
        }
    }

    pub fn matches(&self, model: &Vs2mModel) -> bool {
        self.spatial.len() == model.spatial.len()
            && self.spectral.len() == model.spectral.len()
            && self
                .spatial
                .iter()
                .zip(&model.spatial)
                .all(|(m, g)| m.len() == g.params.len())
            && self
                .spectral
                .iter()
                .zip(&model.spectral)
                .all(|(m, g)| m.len() == g.params.len())
    }
}

/// Scalar objective of the composed cube `x` together with `d/dx`.
pub trait Objective {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `||target - scale * x||^2`.
#[derive(Debug, Clone, Copy)]
pub struct IterateFit<'a> {
    pub target: &'a [f64],
    pub scale: f64,
}

impl Objective for IterateFit<'_> {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.target.len() {
            return Err(Error::DimensionMismatch {
                context: "iterate fit",
                expected: x.len(),
                got: self.target.len(),
            });
        }
        let mut loss = 0.0;
        let grad = self
            .target
            .iter()
            .zip(x)
            .map(|(t, v)| {
                let r = t - self.scale * v;
                loss += r * r;
                -2.0 * self.scale * r
            })
            .collect();
        Ok((loss, grad))
    }
}

/// `||y - H x||^2`.
#[derive(Debug, Clone, Copy)]
pub struct ObservationFit<'a> {
    pub op: &'a DegradationOperator,
    pub observation: &'a [f64],
}

impl Objective for ObservationFit<'_> {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let hx = self.op.apply(x)?;
        if hx.len() != self.observation.len() {
            return Err(Error::DimensionMismatch {
                context: "observation fit",
                expected: hx.len(),
                got: self.observation.len(),
            });
        }
        let residual: Vec<f64> = self.observation.iter().zip(&hx).map(|(y, h)| y - h).collect();
        let loss = residual.iter().map(|r| r * r).sum();
        let mut grad = self.op.apply_transpose(&residual)?;
        for g in &mut grad {
            *g *= -2.0;
        }
        Ok((loss, grad))
    }
}

/// Per-call summary of [`Vs2mModel::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Loss evaluated before each Adam update.
    pub losses: Vec<f64>,
}

impl FitReport {
    pub fn last_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct Vs2mModel {
    dims: Dims,
    spatial: Vec<SpatialGenerator>,
    spectral: Vec<SpectralGenerator>,
}

impl Vs2mModel {
    /// Random initialisation. Generator `r` draws its weights and latent from
    /// its own ChaCha stream of `seed`, so the `R` sets are independent.
    pub fn init(dims: Dims, config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Contract("endmember count R must be >= 1".into()));
        }
        if config.spatial.widths.is_empty() || config.spectral.latent_len == 0 {
            return Err(Error::Contract("empty generator architecture".into()));
        }
        let mut spatial = Vec::with_capacity(config.rank);
        let mut spectral = Vec::with_capacity(config.rank);
        for r in 0..config.rank as u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(2 * r);
            spatial.push(SpatialGenerator::init(
                &config.spatial,
                dims.height,
                dims.width,
                &mut rng,
            ));
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(2 * r + 1);
            spectral.push(SpectralGenerator::init(&config.spectral, dims.bands, &mut rng));
        }
        Ok(Vs2mModel {
            dims,
            spatial,
            spectral,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial(&self) -> &[SpatialGenerator] {
        &self.spatial
    }

    pub fn spatial_mut(&mut self) -> &mut [SpatialGenerator] {
        &mut self.spatial
    }

    pub fn spectral(&self) -> &[SpectralGenerator] {
        &self.spectral
    }

    pub fn spectral_mut(&mut self) -> &mut [SpectralGenerator] {
        &mut self.spectral
    }

    pub fn param_count(&self) -> usize {
        self.spatial
            .iter()
            .map(|g| g.params.len())
            .chain(self.spectral.iter().map(|g| g.params.len()))
            .sum()
    }

    /// All parameters in traversal order (spatial r, spectral r, for r = 1..R).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (s, c) in self.spatial.iter().zip(&self.spectral) {
            out.extend_from_slice(&s.params);
            out.extend_from_slice(&c.params);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for (s, c) in self.spatial.iter_mut().zip(self.spectral.iter_mut()) {
            let (a, tail) = rest.split_at(s.params.len());
            s.params.copy_from_slice(a);
            let (b, tail) = tail.split_at(c.params.len());
            c.params.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn param_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.flat_params() {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }

    pub fn latent_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (s, c) in self.spatial.iter().zip(&self.spectral) {
            for v in s.latent().iter().chain(c.latent()) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// `vec(sum_r S_r o c_r)` in cube vec order.
    pub fn compose(&self) -> Vec<f64> {
        let maps: Vec<Vec<f64>> = self.spatial.iter().map(SpatialGenerator::eval).collect();
        let spectra: Vec<Vec<f64>> = self.spectral.iter().map(SpectralGenerator::eval).collect();
        compose_factors(self.dims, &maps, &spectra)
    }

    /// `||x_t - a_t * compose()||^2`.
    pub fn loss(&self, x_t: &[f64], a_t: f64) -> Result<f64> {
        check_scale(a_t)?;
        let x = self.compose();
        IterateFit {
            target: x_t,
            scale: a_t,
        }
        .value_and_grad(&x)
        .map(|(l, _)| l)
    }

    /// Exact gradient of the iterate loss; latents are not differentiated.
    pub fn gradient(&self, x_t: &[f64], a_t: f64) -> Result<(f64, ModelGradient)> {
        check_scale(a_t)?;
        self.objective_gradient(&IterateFit {
            target: x_t,
            scale: a_t,
        })
    }

    /// Reverse-mode gradient of any [`Objective`] of the composed cube.
    pub fn objective_gradient(&self, objective: &dyn Objective) -> Result<(f64, ModelGradient)> {
        let dims = self.dims;
        let (h, w, k) = (dims.height, dims.width, dims.bands);
        let spatial_fwd: Vec<_> = self
            .spatial
            .iter()
            .map(|g| g.net.forward(&g.params, &g.latent))
            .collect();
        let spectral_fwd: Vec<_> = self.spectral.iter().map(|g| g.forward()).collect();
        let maps: Vec<Vec<f64>> = spatial_fwd
            .iter()
            .map(|(out, _)| row_to_col_major(&out.data, h, w))
            .collect();
        let spectra: Vec<&Vec<f64>> = spectral_fwd.iter().map(|(c, _)| c).collect();
        let x = compose_factors(dims, &maps, &spectra);
        let (loss, dx) = objective.value_and_grad(&x)?;

        let plane = h * w;
        let mut grad = ModelGradient {
            spatial: Vec::with_capacity(self.rank()),
            spectral: Vec::with_capacity(self.rank()),
        };
        for r in 0..self.rank() {
            // d/dS_r (row-major, matching the network output) and d/dc_r
            let mut dmap = Feature::zeros(1, h, w);
            let mut dspec = vec![0.0; k];
            for (band, c) in spectra[r].iter().enumerate() {
                let dxb = &dx[band * plane..(band + 1) * plane];
                let mut acc = 0.0;
                for j in 0..w {
                    for i in 0..h {
                        let g = dxb[j * h + i];
                        dmap.data[i * w + j] += g * c;
                        acc += g * maps[r][j * h + i];
                    }
                }
                dspec[band] = acc;
            }
            let sg = &self.spatial[r];
            let mut gs = vec![0.0; sg.params.len()];
            sg.net.backward(&sg.params, &spatial_fwd[r].1, &dmap, &mut gs);
            let cg = &self.spectral[r];
            let mut gc = vec![0.0; cg.params.len()];
            cg.backward(&spectral_fwd[r].1, &dspec, &mut gc);
            grad.spatial.push(gs);
            grad.spectral.push(gc);
        }
        Ok((loss, grad))
    }

    /// Runs `cfg.iters_per_step` Adam updates on `objective`. `step` labels
    /// errors with the caller's diffusion step.
    pub fn fit(
        &mut self,
        objective: &dyn Objective,
        cfg: &FitConfig,
        state: &mut OptimizerState,
        step: usize,
    ) -> Result<FitReport> {
        self.fit_iters(objective, cfg, state, step, cfg.iters_per_step)
    }

    pub fn fit_iters(
        &mut self,
        objective: &dyn Objective,
        cfg: &FitConfig,
        state: &mut OptimizerState,
        step: usize,
        iters: usize,
    ) -> Result<FitReport> {
        cfg.validate()?;
        if !state.matches(self) {
            return Err(Error::Contract(
                "optimizer state does not match the model parameter layout".into(),
            ));
        }
        let hyper = cfg.hyper();
        let mut losses = Vec::with_capacity(iters);
        for _ in 0..iters {
            let (loss, grad) = self.objective_gradient(objective)?;
            if !loss.is_finite() {
                return Err(Error::Fit {
                    step,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            if !grad.is_finite() {
                return Err(Error::Fit {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            losses.push(loss);
            state.step += 1;
            for ((g, gr), m) in self
                .spatial
                .iter_mut()
                .zip(&grad.spatial)
                .zip(&mut state.spatial)
            {
                adam_update(&mut g.params, gr, m, &hyper, state.step);
            }
            for ((g, gr), m) in self
                .spectral
                .iter_mut()
                .zip(&grad.spectral)
                .zip(&mut state.spectral)
            {
                adam_update(&mut g.params, gr, m, &hyper, state.step);
            }
        }
        Ok(FitReport { losses })
    }

    /// Debug checkpoint: header line plus `f32` parameters in traversal order.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut out = format!(
            "VS2MCKPT v1 R={} I={} J={} K={} params={}\n",
            self.rank(),
            d.height,
            d.width,
            d.bands,
            self.param_count()
        )
        .into_bytes();
        for v in self.flat_params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Restores parameters written by [`checkpoint_bytes`](Self::checkpoint_bytes)
    /// into a model of the same architecture.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Contract("checkpoint header has no newline".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Contract("checkpoint header is not UTF-8".into()))?;
        let expected = format!(
            "VS2MCKPT v1 R={} I={} J={} K={} params={}",
            self.rank(),
            self.dims.height,
            self.dims.width,
            self.dims.bands,
            self.param_count()
        );
        if header != expected {
            return Err(Error::Contract(format!(
                "checkpoint header `{header}` does not match model `{expected}`"
            )));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != 4 * self.param_count() {
            return Err(Error::TruncatedPayload {
                expected: 4 * self.param_count(),
                found: payload.len(),
            });
        }
        let flat: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        self.set_flat_params(&flat)
    }
}

fn check_scale(a_t: f64) -> Result<()> {
    if !(a_t > 0.0 && a_t.is_finite()) {
        return Err(Error::Contract(format!(
            "signal scale a_t must be > 0, got {a_t}"
        )));
    }
    Ok(())
}

/// `vec(sum_r S_r o c_r)` with `(S o c)(i, j, k) = S(i, j) * c(k)`; each map is
/// column-major `I x J`.
pub fn compose_factors<M, S>(dims: Dims, maps: &[M], spectra: &[S]) -> Vec<f64>
where
    M: AsRef<[f64]>,
    S: AsRef<[f64]>,
{
    let plane = dims.band_len();
    let mut out = vec![0.0; dims.len()];
    for (map, spec) in maps.iter().zip(spectra) {
        let map = map.as_ref();
        for (band, c) in spec.as_ref().iter().enumerate() {
            for (o, s) in out[band * plane..(band + 1) * plane].iter_mut().zip(map) {
                *o += s * c;
            }
        }
    }
    out
}
