//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use hsi_restore::degradation::DegradationOperator;
use hsi_restore::sampler::{init_state, reverse_step, SamplerConfig, SignalScale};
use hsi_restore::schedule::{DiffusionSchedule, SigmaConvention};
use hsi_restore::vs2m::{
    compose_factors, FitConfig, ModelConfig, SpatialArch, SpectralArch, Vs2mModel,
};
use hsi_restore::Dims;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Outcome of one check, with a one-line summary of the worst case seen.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normals(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn dims(i: usize, j: usize, k: usize) -> Dims {
    Dims::new(i, j, k).unwrap()
}

// ---------------------------------------------------------------- operators

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Denoise,
    Completion,
    Sr,
}

/// A random operator of `kind` with `n <= 1000`.
pub fn random_operator(kind: OpKind, rng: &mut ChaCha20Rng) -> DegradationOperator {
    match kind {
        OpKind::Denoise => {
            let d = dims(rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6));
            DegradationOperator::denoise(d)
        }
        OpKind::Completion => {
            let d = dims(rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6));
            let rate = rng.random_range(0.05..0.95);
            let mut mask: Vec<bool> = (0..d.len()).map(|_| rng.random_bool(rate)).collect();
            let pick = rng.random_range(0..d.len());
            mask[pick] = true;
            DegradationOperator::completion(d, &mask).unwrap()
        }
        OpKind::Sr => {
            let p = [2, 4, 8][rng.random_range(0..3)];
            let (bi, bj) = if p == 8 {
                (1, rng.random_range(1..3))
            } else {
                (rng.random_range(1..4), rng.random_range(1..4))
            };
            let max_k = (1000 / (bi * bj * p * p)).clamp(1, 4);
            let d = dims(bi * p, bj * p, rng.random_range(1..=max_k));
            DegradationOperator::sr_block(d, p).unwrap()
        }
    }
}

/// Dense `H` built column by column from `apply` on basis vectors.
pub fn dense_from_apply(op: &DegradationOperator) -> DMatrix<f64> {
    let (m, n) = (op.output_len(), op.input_len());
    let mut h = DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e[c] = 1.0;
        let col = op.apply(&e).unwrap();
        for r in 0..m {
            h[(r, c)] = col[r];
        }
        e[c] = 0.0;
    }
    h
}

/// Columns `v_inverse(e_i)` for the listed V-coordinates.
fn structured_v_columns(op: &DegradationOperator, idx: &[usize]) -> DMatrix<f64> {
    let n = op.input_len();
    let mut v = DMatrix::zeros(n, idx.len());
    let mut e = vec![0.0; n];
    for (c, &i) in idx.iter().enumerate() {
        e[i] = 1.0;
        let col = op.v_inverse(&e).unwrap();
        for r in 0..n {
            v[(r, c)] = col[r];
        }
        e[i] = 0.0;
    }
    v
}

fn structured_u_columns(op: &DegradationOperator, idx: &[usize]) -> DMatrix<f64> {
    let m = op.output_len();
    let mut u = DMatrix::zeros(m, idx.len());
    let mut e = vec![0.0; m];
    for (c, &i) in idx.iter().enumerate() {
        e[i] = 1.0;
        let col = op.u_apply(&e).unwrap();
        for r in 0..m {
            u[(r, c)] = col[r];
        }
        e[i] = 0.0;
    }
    u
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Worst deviations of one operator from its dense SVD.
#[derive(Debug, Default, Clone, Copy)]
pub struct OperatorDeviation {
    pub singular: f64,
    pub right_projector: f64,
    pub left_projector: f64,
    pub pinv: f64,
    pub apply: f64,
    pub factorization: f64,
}

impl OperatorDeviation {
    pub fn worst(&self) -> f64 {
        [
            self.singular,
            self.right_projector,
            self.left_projector,
            self.pinv,
            self.apply,
            self.factorization,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn merge(&mut self, o: &OperatorDeviation) {
        self.singular = self.singular.max(o.singular);
        self.right_projector = self.right_projector.max(o.right_projector);
        self.left_projector = self.left_projector.max(o.left_projector);
        self.pinv = self.pinv.max(o.pinv);
        self.apply = self.apply.max(o.apply);
        self.factorization = self.factorization.max(o.factorization);
    }
}

/// Compares an operator's structured factors with a dense SVD of its matrix.
///
/// Singular vectors of a repeated singular value are only defined up to a
/// rotation inside their subspace, so vectors are compared through the
/// orthogonal projector onto each singular subspace.
pub fn compare_with_dense_svd(op: &DegradationOperator, rng: &mut ChaCha20Rng) -> OperatorDeviation {
    let (m, n) = (op.output_len(), op.input_len());
    let h = dense_from_apply(op);
    let mut dev = OperatorDeviation::default();

    // the materialized matrix must agree with the action of apply
    if n <= 4096 {
        let dm = op.materialize_dense().unwrap();
        for r in 0..m {
            for c in 0..n {
                dev.apply = dev.apply.max((dm.row(r)[c] - h[(r, c)]).abs());
            }
        }
    }

    let svd = h.clone().svd(true, true);
    let mut dense_s: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    dense_s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let structured = op.singulars();
    assert_eq!(structured.len(), n);
    for (idx, s) in structured.iter().enumerate() {
        let d = dense_s.get(idx).map(|p| p.0).unwrap_or(0.0);
        dev.singular = dev.singular.max((s - d).abs());
    }

    let u_dense = svd.u.as_ref().unwrap();
    let vt_dense = svd.v_t.as_ref().unwrap();
    // group by distinct singular value; the zero group is the null space
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, s) in structured.iter().enumerate() {
        match groups.iter_mut().find(|(v, _)| (v - s).abs() < 1e-9) {
            Some((_, g)) => g.push(i),
            None => groups.push((*s, vec![i])),
        }
    }
    for (value, idx) in &groups {
        let dense_idx: Vec<usize> = dense_s
            .iter()
            .filter(|(s, _)| (s - value).abs() < 1e-9)
            .map(|(_, i)| *i)
            .collect();
        let vs = structured_v_columns(op, idx);
        let p_struct = &vs * vs.transpose();
        let p_dense = if *value > 0.0 {
            let mut vd = DMatrix::zeros(n, dense_idx.len());
            for (c, &i) in dense_idx.iter().enumerate() {
                for r in 0..n {
                    vd[(r, c)] = vt_dense[(i, r)];
                }
            }
            &vd * vd.transpose()
        } else {
            // null space: complement of the span of the nonzero right vectors
            let live: Vec<usize> = dense_s.iter().filter(|(s, _)| *s > 1e-9).map(|(_, i)| *i).collect();
            let mut row = DMatrix::zeros(n, live.len());
            for (c, &i) in live.iter().enumerate() {
                for r in 0..n {
                    row[(r, c)] = vt_dense[(i, r)];
                }
            }
            DMatrix::identity(n, n) - &row * row.transpose()
        };
        dev.right_projector = dev.right_projector.max(max_abs(&(p_struct - p_dense)));

        if *value > 0.0 {
            let us = structured_u_columns(op, idx);
            let mut ud = DMatrix::zeros(m, dense_idx.len());
            for (c, &i) in dense_idx.iter().enumerate() {
                for r in 0..m {
                    ud[(r, c)] = u_dense[(r, i)];
                }
            }
            let diff = &us * us.transpose() - &ud * ud.transpose();
            dev.left_projector = dev.left_projector.max(max_abs(&diff));
        }
    }

    let pinv = svd.pseudo_inverse(1e-9).unwrap();
    // actions on random vectors
    for _ in 0..3 {
        let x = normals(n, rng);
        let y = normals(m, rng);
        let hx_dense = &h * DMatrix::from_column_slice(n, 1, &x);
        dev.apply = dev.apply.max(max_abs_diff(op.apply(&x).unwrap().as_slice(), hx_dense.as_slice()));
        let hty_dense = h.transpose() * DMatrix::from_column_slice(m, 1, &y);
        dev.apply = dev.apply.max(max_abs_diff(
            op.apply_transpose(&y).unwrap().as_slice(),
            hty_dense.as_slice(),
        ));
        // H x = U Sigma V^T x through the structured factors
        let via_factors = op
            .u_apply(&op.sigma_apply(&op.v_transform(&x).unwrap()).unwrap())
            .unwrap();
        dev.factorization = dev
            .factorization
            .max(max_abs_diff(&via_factors, hx_dense.as_slice()));
        let round = op.v_inverse(&op.v_transform(&x).unwrap()).unwrap();
        dev.factorization = dev.factorization.max(max_abs_diff(&round, &x));
        // V Sigma^+ U^T y against the dense pseudo-inverse
        let dense = &pinv * DMatrix::from_column_slice(m, 1, &y);
        let structured = op.v_inverse(&op.sigma_pinv_ut(&y).unwrap()).unwrap();
        dev.pinv = dev.pinv.max(max_abs_diff(&structured, dense.as_slice()));
    }
    dev
}

pub fn operator_oracle(instances: usize, seed: u64) -> Verdict {
    let mut r = rng(seed);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [OpKind::Denoise, OpKind::Completion, OpKind::Sr] {
        let mut worst = OperatorDeviation::default();
        let mut max_n = 0;
        for _ in 0..instances {
            let op = random_operator(kind, &mut r);
            max_n = max_n.max(op.input_len());
            let d = compare_with_dense_svd(&op, &mut r);
            worst.merge(&d);
        }
        pass &= worst.worst() < 1e-8 && max_n <= 1000;
        lines.push(format!(
            "{kind:?}: n<={max_n} sv {:.1e} V {:.1e} U {:.1e} pinv {:.1e}",
            worst.singular,
            worst.right_projector,
            worst.left_projector,
            worst.pinv.max(worst.apply).max(worst.factorization)
        ));
    }
    Verdict {
        pass,
        detail: format!("{instances}/kind; {}", lines.join("; ")),
    }
}

// ----------------------------------------------------------------- gradients

/// A target unrelated to the model, so residuals are not small.
pub fn random_target(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    normals(n, rng).into_iter().map(|v| 0.5 * v).collect()
}

/// Agreement of central differences with the reverse-mode gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    /// Largest `|fd - g| / max(|fd|, |g|)` over the probes.
    pub max_rel: f64,
    /// Probes whose relative error exceeded `tol`.
    pub over_tol: usize,
    pub probes: usize,
}

/// Central differences on `count` random parameters drawn from `range`,
/// against the model's reverse-mode gradient. Each probe keeps its best
/// agreement over `steps`: large steps can straddle a rectifier kink, small
/// ones lose digits to roundoff, but a wrong gradient fails at every step.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    model: &Vs2mModel,
    target: &[f64],
    a_t: f64,
    range: std::ops::Range<usize>,
    count: usize,
    steps: &[f64],
    tol: f64,
    rng: &mut ChaCha20Rng,
) -> FdReport {
    let (loss, grad) = model.gradient(target, a_t).unwrap();
    let analytic = grad.flatten();
    let base = model.flat_params();
    let mut probe = model.clone();
    let mut report = FdReport::default();
    for _ in 0..count {
        let idx = rng.random_range(range.clone());
        let g = analytic[idx];
        let mut best = f64::INFINITY;
        for &h in steps {
            // roundoff of the difference quotient, so vanishing gradients are not over-read
            let floor = 64.0 * f64::EPSILON * loss.abs() / h;
            let mut p = base.clone();
            p[idx] = base[idx] + h;
            probe.set_flat_params(&p).unwrap();
            let up = probe.loss(target, a_t).unwrap();
            p[idx] = base[idx] - h;
            probe.set_flat_params(&p).unwrap();
            let down = probe.loss(target, a_t).unwrap();
            let fd = (up - down) / (2.0 * h);
            best = best.min((fd - g).abs() / fd.abs().max(g.abs()).max(floor));
        }
        report.max_rel = report.max_rel.max(best);
        if best >= tol {
            report.over_tol += 1;
        }
        report.probes += 1;
    }
    report
}

/// Parameter ranges of generator `r` inside `flat_params`.
pub fn generator_ranges(model: &Vs2mModel, r: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let mut offset = 0;
    for q in 0..r {
        offset += model.spatial()[q].params().len() + model.spectral()[q].params().len();
    }
    let s = model.spatial()[r].params().len();
    let c = model.spectral()[r].params().len();
    (offset..offset + s, offset + s..offset + s + c)
}

/// Both generator architectures at 16 x 16 x 6 (the smallest size at which
/// every hourglass level keeps more than one pixel), 50 probes each.
pub fn gradient_oracle(seed: u64, steps: &[f64], tol: f64) -> (Verdict, Vec<(String, FdReport)>) {
    let mut r = rng(seed);
    let d = dims(16, 16, 6);
    let cfg = ModelConfig::with_rank(2);
    let model = Vs2mModel::init(d, &cfg, seed).unwrap();
    let target = random_target(d.len(), &mut r);
    let (spatial, spectral) = generator_ranges(&model, 1);
    let reports = vec![
        (
            "hourglass".to_string(),
            finite_difference_check(&model, &target, 0.9, spatial, 50, steps, tol, &mut r),
        ),
        (
            "spectral FCN".to_string(),
            finite_difference_check(&model, &target, 0.9, spectral, 50, steps, tol, &mut r),
        ),
    ];
    let pass = reports.iter().all(|(_, f)| f.over_tol == 0 && f.probes == 50);
    let detail = reports
        .iter()
        .map(|(l, f)| format!("{l}: max rel {:.1e}, {}/{} over {tol:e}", f.max_rel, f.over_tol, f.probes))
        .collect::<Vec<_>>()
        .join("; ");
    (
        Verdict {
            pass,
            detail: format!("h={steps:?}: {detail}"),
        },
        reports,
    )
}

// ----------------------------------------------------- compose / loss oracle

/// Small random architecture so that many instances stay cheap.
pub fn small_model_config(rank: usize) -> ModelConfig {
    ModelConfig {
        rank,
        spatial: SpatialArch {
            latent_channels: 3,
            widths: vec![4, 5, 6],
            attention_reduction: 2,
            latent_skip: true,
        },
        spectral: SpectralArch {
            latent_len: 5,
            hidden: vec![7, 6],
        },
    }
}

/// `X(i, j, k) = sum_r S_r(i, j) c_r(k)` by explicit loops; maps are `I x J`
/// nested as `maps[r][i][j]`.
pub fn quadruple_loop(i_n: usize, j_n: usize, k_n: usize, maps: &[Vec<Vec<f64>>], spectra: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; i_n * j_n * k_n];
    for i in 0..i_n {
        for j in 0..j_n {
            for k in 0..k_n {
                let mut acc = 0.0;
                for r in 0..maps.len() {
                    acc += maps[r][i][j] * spectra[r][k];
                }
                out[k * i_n * j_n + j * i_n + i] = acc;
            }
        }
    }
    out
}

fn nested(col_major: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|i| (0..cols).map(|j| col_major[j * rows + i]).collect())
        .collect()
}

pub fn compose_loss_oracle(cases: usize, seed: u64) -> Verdict {
    let mut r = rng(seed);
    let mut worst_compose: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    for case in 0..cases {
        let (i_n, j_n, k_n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4));
        let rank = r.random_range(1..3);
        let d = dims(i_n, j_n, k_n);
        // plain random factors through compose_factors
        let maps: Vec<Vec<f64>> = (0..rank).map(|_| normals(i_n * j_n, &mut r)).collect();
        let spectra: Vec<Vec<f64>> = (0..rank).map(|_| normals(k_n, &mut r)).collect();
        let fast = compose_factors(d, &maps, &spectra);
        let nested_maps: Vec<_> = maps.iter().map(|m| nested(m, i_n, j_n)).collect();
        let slow = quadruple_loop(i_n, j_n, k_n, &nested_maps, &spectra);
        worst_compose = worst_compose.max(max_abs_diff(&fast, &slow));

        // generator outputs through the model
        let model = Vs2mModel::init(d, &small_model_config(rank), seed + case as u64).unwrap();
        let maps: Vec<Vec<Vec<f64>>> = model
            .spatial()
            .iter()
            .map(|g| nested(&g.eval(), i_n, j_n))
            .collect();
        let spectra: Vec<Vec<f64>> = model.spectral().iter().map(|g| g.eval()).collect();
        let slow = quadruple_loop(i_n, j_n, k_n, &maps, &spectra);
        let composed = model.compose();
        worst_compose = worst_compose.max(max_abs_diff(&composed, &slow));

        let target = normals(d.len(), &mut r);
        let a_t = r.random_range(0.1..1.0);
        let mut explicit = 0.0;
        for (t, x) in target.iter().zip(&slow) {
            explicit += (t - a_t * x) * (t - a_t * x);
        }
        let loss = model.loss(&target, a_t).unwrap();
        worst_loss = worst_loss.max((loss - explicit).abs() / explicit.abs().max(1e-300));
    }
    Verdict {
        pass: worst_compose < 1e-6 && worst_loss < 1e-6,
        detail: format!(
            "{cases} cases: compose max abs err {worst_compose:.1e}, loss max rel err {worst_loss:.1e}"
        ),
    }
}

// ------------------------------------------------------ sampler distributions

/// Summary statistics of standardized residuals of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchStats {
    pub draws: usize,
    /// `|mean residual| / standard error`.
    pub mean_z: f64,
    /// `|empirical var / analytic var - 1|`.
    pub var_rel: f64,
}

impl BranchStats {
    pub fn ok(&self) -> bool {
        self.mean_z < 3.0 && self.var_rel < 0.05
    }
}

fn branch_stats(residuals: &[f64], var: f64) -> BranchStats {
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let emp = residuals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    BranchStats {
        draws: residuals.len(),
        mean_z: mean.abs() / (var / n).sqrt(),
        var_rel: (emp / var - 1.0).abs(),
    }
}

/// 200 x 100 x 10 cube, first half of the voxels observed.
fn half_observed(draws: usize) -> DegradationOperator {
    let d = dims(200, 100, (2 * draws).div_ceil(20_000));
    let mask: Vec<bool> = (0..d.len()).map(|i| i < d.len() / 2).collect();
    DegradationOperator::completion(d, &mask).unwrap()
}

fn tiny_sampler(schedule: DiffusionSchedule, t0: usize, sigma_y: f64, eta: f64, eta_b: f64) -> SamplerConfig {
    SamplerConfig {
        schedule,
        t0,
        eta,
        eta_b,
        sigma_y,
        signal_scale: SignalScale::Unit,
        model: ModelConfig {
            rank: 1,
            spatial: SpatialArch {
                latent_channels: 1,
                widths: vec![2],
                attention_reduction: 1,
                latent_skip: false,
            },
            spectral: SpectralArch {
                latent_len: 2,
                hidden: vec![2],
            },
        },
        fit: FitConfig::default(),
        seed: 17,
    }
}

/// Per-branch statistics for both initialisation branches and all three
/// transition branches, `draws` samples each.
pub fn sampler_distribution_stats(draws: usize) -> Vec<(String, BranchStats)> {
    let op = half_observed(draws);
    let n = op.input_len();
    let m = op.output_len();
    let schedule = DiffusionSchedule::linear(50, 1e-4, 2e-2, SigmaConvention::Snr).unwrap();
    let t0 = 20;
    let s_t0 = schedule.sigma(t0).unwrap();
    let s_prev = schedule.sigma(t0 - 1).unwrap();
    let mut out = Vec::new();
    let y: Vec<f64> = (0..m).map(|i| ((i % 97) as f64 / 97.0) - 0.5).collect();
    // with s = 1 and the first half observed, ybar in V coordinates is y itself
    let ybar_at = |i: usize| if i < m { y[i] } else { 0.0 };
    let observed = |i: usize| i < m;
    let ybar = op.sigma_pinv_ut(&y).unwrap();
    assert!((0..n).all(|i| ybar[i] == ybar_at(i)), "mask layout assumption broken");

    // sigma_y inside (sigma_{t0-1}, sigma_{t0}) forces the noisy-measurement branch
    let sy_case2 = 0.5 * (s_prev + s_t0);
    // well below sigma_{t0-1} forces the clean-measurement branch
    let sy_case3 = 0.3 * s_prev;
    for (label_sy, sigma_y, eta, eta_b) in [
        ("sigma_y high", sy_case2, 0.6, 1.0),
        ("sigma_y low", sy_case3, 0.6, 0.7),
    ] {
        let cfg = tiny_sampler(schedule.clone(), t0, sigma_y, eta, eta_b);
        let mut state = init_state(&op, &y, &cfg).unwrap();
        let init = state.xbar.clone();
        // Eq. 12-style initialisation: observed N(ybar, s_t0^2 - sigma_y^2), unobserved N(0, s_t0^2)
        if label_sy == "sigma_y high" {
            let obs: Vec<f64> = (0..n).filter(|i| observed(*i)).map(|i| init[i] - ybar_at(i)).take(draws).collect();
            out.push((
                "init observed".to_string(),
                branch_stats(&obs, s_t0 * s_t0 - sigma_y * sigma_y),
            ));
            let un: Vec<f64> = (0..n).filter(|i| !observed(*i)).map(|i| init[i]).take(draws).collect();
            out.push(("init unobserved".to_string(), branch_stats(&un, s_t0 * s_t0)));
        }

        // frozen generator estimate
        let x_pred: Vec<f64> = (0..n).map(|i| 0.3 * ((i % 13) as f64 / 13.0) - 0.1).collect();
        reverse_step(&mut state, &x_pred, &op, &cfg).unwrap();
        assert_eq!(state.t, t0 - 1);
        let history = (1.0 - eta * eta).sqrt() * s_prev;
        let pred_bar = op.v_transform(&x_pred).unwrap();
        let mut unobserved = Vec::new();
        let mut measured = Vec::new();
        for i in 0..n {
            let p = pred_bar[i];
            if observed(i) {
                let mean = if sigma_y > s_prev {
                    p + history * (ybar_at(i) - p) / sigma_y
                } else {
                    (1.0 - eta_b) * p + eta_b * ybar_at(i)
                };
                measured.push(state.xbar[i] - mean);
            } else {
                let mean = p + history * (init[i] - p) / s_t0;
                unobserved.push(state.xbar[i] - mean);
            }
        }
        if label_sy == "sigma_y high" {
            measured.truncate(draws);
            out.push((
                "step noisy measurement".to_string(),
                branch_stats(&measured, eta * eta * s_prev * s_prev),
            ));
            unobserved.truncate(draws);
            out.push((
                "step unobserved".to_string(),
                branch_stats(&unobserved, eta * eta * s_prev * s_prev),
            ));
        } else {
            measured.truncate(draws);
            out.push((
                "step clean measurement".to_string(),
                branch_stats(&measured, s_prev * s_prev - sigma_y * sigma_y * eta_b * eta_b),
            ));
        }
        assert_eq!(
            state.counts.noisy_measurement > 0,
            label_sy == "sigma_y high",
            "branch forcing failed"
        );
    }
    out
}

pub fn sampler_distribution_oracle(draws: usize) -> Verdict {
    let stats = sampler_distribution_stats(draws);
    let pass = stats.iter().all(|(_, s)| s.ok() && s.draws >= draws);
    let detail = stats
        .iter()
        .map(|(l, s)| format!("{l} z={:.2} dv={:.3}", s.mean_z, s.var_rel))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict {
        pass,
        detail: format!("{draws} draws/branch: {detail}"),
    }
}
