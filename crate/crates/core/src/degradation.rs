//! Linear degradation operators `H = U diag(s) V^T` for denoising, completion
//! and block-average super-resolution.
//!
//! Each operator exposes its SVD as structured transforms over caller-owned
//! vectors. Singular values are exact by construction (`1`, `0` or `1/p`), so
//! no numerical factorization runs outside the dense test oracle.
//!
//! Coordinate conventions:
//! * original space: vec order of the `I x J x K` cube (length `n`);
//! * spectral space (`V^T x`): singular index order, nonzero singulars first;
//! * observation space: vec order of the degraded cube (length `m`). `U` is
//!   the identity for every kind provided here.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::cube::{Dims, HsiCube, RangeTag};
use crate::error::{Error, Result};

/// Largest `n` accepted by [`DegradationOperator::materialize_dense`].
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Denoise,
    /// Observed voxel indices in increasing vec order.
    Completion { observed: Vec<usize> },
    SrBlock { scale: usize },
}

#[derive(Debug, Clone)]
pub struct DegradationOperator {
    dims: Dims,
    kind: OperatorKind,
    // completion: position of each original coordinate in spectral order
    perm: Vec<usize>,
    // sr_block: row-major p^2 x p^2 orthonormal block basis, row 0 = mean direction
    basis: Vec<f64>,
    singulars: Vec<f64>,
}

impl DegradationOperator {
    pub fn denoise(dims: Dims) -> Self {
        DegradationOperator {
            dims,
            kind: OperatorKind::Denoise,
            perm: Vec::new(),
            basis: Vec::new(),
            singulars: vec![1.0; dims.len()],
        }
    }

    /// Selection of the voxels where `mask` is true (vec order).
    pub fn completion(dims: Dims, mask: &[bool]) -> Result<Self> {
        if mask.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                context: "completion mask",
                expected: dims.len(),
                got: mask.len(),
            });
        }
        let observed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if observed.is_empty() {
            return Err(Error::Contract("completion mask observes no voxel".into()));
        }
        let m = observed.len();
        let mut perm = vec![0usize; dims.len()];
        let (mut seen, mut unseen) = (0usize, m);
        for (idx, &hit) in mask.iter().enumerate() {
            if hit {
                perm[idx] = seen;
                seen += 1;
            } else {
                perm[idx] = unseen;
                unseen += 1;
            }
        }
        let mut singulars = vec![0.0; dims.len()];
        singulars[..m].fill(1.0);
        Ok(DegradationOperator {
            dims,
            kind: OperatorKind::Completion { observed },
            perm,
            basis: Vec::new(),
            singulars,
        })
    }

    /// Completion from a `{0, 1}` mask cube with the same dims.
    pub fn completion_from_cube(mask: &HsiCube) -> Result<Self> {
        let bits = mask
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| match *v {
                v if v == 1.0 => Ok(true),
                v if v == 0.0 => Ok(false),
                v => Err(Error::Contract(format!(
                    "mask value {v} at index {i} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Self::completion(mask.dims(), &bits)
    }

    /// Per-band `p x p` block averaging.
    pub fn sr_block(dims: Dims, scale: usize) -> Result<Self> {
        if !matches!(scale, 2 | 4 | 8) {
            return Err(Error::Contract(format!(
                "super-resolution scale must be 2, 4 or 8, got {scale}"
            )));
        }
        if dims.height % scale != 0 || dims.width % scale != 0 {
            return Err(Error::Contract(format!(
                "spatial size {}x{} not divisible by scale {scale}",
                dims.height, dims.width
            )));
        }
        let m = dims.len() / (scale * scale);
        let mut singulars = vec![0.0; dims.len()];
        singulars[..m].fill(1.0 / scale as f64);
        Ok(DegradationOperator {
            dims,
            kind: OperatorKind::SrBlock { scale },
            perm: Vec::new(),
            basis: block_basis(scale),
            singulars,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    /// Input dimension `n = I*J*K`.
    pub fn input_len(&self) -> usize {
        self.dims.len()
    }

    /// Output dimension `m`.
    pub fn output_len(&self) -> usize {
        match &self.kind {
            OperatorKind::Denoise => self.dims.len(),
            OperatorKind::Completion { observed } => observed.len(),
            OperatorKind::SrBlock { scale } => self.dims.len() / (scale * scale),
        }
    }

    /// Shape of the degraded cube.
    pub fn output_dims(&self) -> Option<Dims> {
        match &self.kind {
            OperatorKind::Denoise => Some(self.dims),
            OperatorKind::Completion { .. } => None,
            OperatorKind::SrBlock { scale } => Some(Dims {
                height: self.dims.height / scale,
                width: self.dims.width / scale,
                bands: self.dims.bands,
            }),
        }
    }

    /// Singular values `s_1 >= ... >= s_n >= 0`, zero-padded to length `n`.
    pub fn singulars(&self) -> &[f64] {
        &self.singulars
    }

    /// Number of nonzero singular values.
    pub fn rank(&self) -> usize {
        self.output_len()
    }

    fn check_len(&self, context: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                got,
            });
        }
        Ok(())
    }

    /// `H x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len("apply", self.input_len(), x.len())?;
        Ok(match &self.kind {
            OperatorKind::Denoise => x.to_vec(),
            OperatorKind::Completion { observed } => observed.iter().map(|&i| x[i]).collect(),
            OperatorKind::SrBlock { scale } => {
                let p = *scale;
                let lo = self.output_dims().unwrap();
                let norm = 1.0 / (p * p) as f64;
                let mut out = vec![0.0; lo.len()];
                for k in 0..lo.bands {
                    for bj in 0..lo.width {
                        for bi in 0..lo.height {
                            let mut acc = 0.0;
                            for dj in 0..p {
                                for di in 0..p {
                                    acc += x[self.dims.index_unchecked(
                                        bi * p + di,
                                        bj * p + dj,
                                        k,
                                    )];
                                }
                            }
                            out[lo.index_unchecked(bi, bj, k)] = acc * norm;
                        }
                    }
                }
                out
            }
        })
    }

    /// `H^T y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len("apply_transpose", self.output_len(), y.len())?;
        Ok(match &self.kind {
            OperatorKind::Denoise => y.to_vec(),
            OperatorKind::Completion { observed } => {
                let mut out = vec![0.0; self.input_len()];
                for (v, &i) in y.iter().zip(observed) {
                    out[i] = *v;
                }
                out
            }
            OperatorKind::SrBlock { scale } => {
                let p = *scale;
                let lo = self.output_dims().unwrap();
                let norm = 1.0 / (p * p) as f64;
                let mut out = vec![0.0; self.input_len()];
                for k in 0..lo.bands {
                    for bj in 0..lo.width {
                        for bi in 0..lo.height {
                            let v = y[lo.index_unchecked(bi, bj, k)] * norm;
                            for dj in 0..p {
                                for di in 0..p {
                                    out[self.dims.index_unchecked(bi * p + di, bj * p + dj, k)] =
                                        v;
                                }
                            }
                        }
                    }
                }
                out
            }
        })
    }

    /// `V^T x`: original coordinates to spectral coordinates.
    pub fn v_transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len("v_transform", self.input_len(), x.len())?;
        Ok(match &self.kind {
            OperatorKind::Denoise => x.to_vec(),
            OperatorKind::Completion { .. } => {
                let mut out = vec![0.0; x.len()];
                for (v, &dst) in x.iter().zip(&self.perm) {
                    out[dst] = *v;
                }
                out
            }
            OperatorKind::SrBlock { scale } => self.block_transform(*scale, x, true),
        })
    }

    /// `V xb`: spectral coordinates back to original coordinates.
    pub fn v_inverse(&self, xb: &[f64]) -> Result<Vec<f64>> {
        self.check_len("v_inverse", self.input_len(), xb.len())?;
        Ok(match &self.kind {
            OperatorKind::Denoise => xb.to_vec(),
            OperatorKind::Completion { .. } => self.perm.iter().map(|&src| xb[src]).collect(),
            OperatorKind::SrBlock { scale } => self.block_transform(*scale, xb, false),
        })
    }

    /// `U^T y`; `U` is the identity for every provided kind.
    pub fn ut_transform(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len("ut_transform", self.output_len(), y.len())?;
        Ok(y.to_vec())
    }

    /// `U yb`.
    pub fn u_apply(&self, yb: &[f64]) -> Result<Vec<f64>> {
        self.check_len("u_apply", self.output_len(), yb.len())?;
        Ok(yb.to_vec())
    }

    /// `diag(s) xb`, truncated to the `m` observation coordinates.
    pub fn sigma_apply(&self, xb: &[f64]) -> Result<Vec<f64>> {
        self.check_len("sigma_apply", self.input_len(), xb.len())?;
        Ok(xb[..self.output_len()]
            .iter()
            .zip(&self.singulars)
            .map(|(v, s)| v * s)
            .collect())
    }

    /// `ybar = Sigma^+ U^T y` in spectral coordinates; zero where `s_i = 0`.
    pub fn sigma_pinv_ut(&self, y: &[f64]) -> Result<Vec<f64>> {
        let uy = self.ut_transform(y)?;
        let mut out = vec![0.0; self.input_len()];
        for ((o, v), s) in out.iter_mut().zip(&uy).zip(&self.singulars) {
            if *s > 0.0 {
                *o = v / s;
            }
        }
        Ok(out)
    }

    /// Explicit `m x n` matrix, row-major. Test oracle only.
    pub fn materialize_dense(&self) -> Result<DenseMatrix> {
        let n = self.input_len();
        if n > DENSE_LIMIT {
            return Err(Error::Contract(format!(
                "refusing to materialize a dense operator with n = {n} > {DENSE_LIMIT}"
            )));
        }
        let m = self.output_len();
        let mut data = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            let col = self.apply(&e)?;
            for (r, v) in col.iter().enumerate() {
                data[r * n + c] = *v;
            }
            e[c] = 0.0;
        }
        Ok(DenseMatrix {
            rows: m,
            cols: n,
            data,
        })
    }

    // Spectral layout: the m block-mean coefficients in low-resolution vec
    // order, then p^2-1 detail coefficients per block in the same order.
    fn block_transform(&self, p: usize, src: &[f64], forward: bool) -> Vec<f64> {
        let q = p * p;
        let lo = self.output_dims().unwrap();
        let m = lo.len();
        let mut out = vec![0.0; src.len()];
        let mut block = vec![0.0; q];
        let mut coeffs = vec![0.0; q];
        for k in 0..lo.bands {
            for bj in 0..lo.width {
                for bi in 0..lo.height {
                    let b = lo.index_unchecked(bi, bj, k);
                    let pixel = |local: usize| {
                        self.dims
                            .index_unchecked(bi * p + local % p, bj * p + local / p, k)
                    };
                    let slot = |row: usize| {
                        if row == 0 {
                            b
                        } else {
                            m + b * (q - 1) + row - 1
                        }
                    };
                    if forward {
                        for (local, v) in block.iter_mut().enumerate() {
                            *v = src[pixel(local)];
                        }
                        for (row, c) in coeffs.iter_mut().enumerate() {
                            let g = &self.basis[row * q..(row + 1) * q];
                            *c = g.iter().zip(&block).map(|(a, b)| a * b).sum();
                        }
                        for (row, c) in coeffs.iter().enumerate() {
                            out[slot(row)] = *c;
                        }
                    } else {
                        for (row, c) in coeffs.iter_mut().enumerate() {
                            *c = src[slot(row)];
                        }
                        block.fill(0.0);
                        for (row, c) in coeffs.iter().enumerate() {
                            let g = &self.basis[row * q..(row + 1) * q];
                            for (v, gv) in block.iter_mut().zip(g) {
                                *v += c * gv;
                            }
                        }
                        for (local, v) in block.iter().enumerate() {
                            out[pixel(local)] = *v;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Orthonormal `p^2 x p^2` basis (row-major) whose first row is the
/// normalized mean direction `(1/p, ..., 1/p)`. The remaining rows come from
/// Gram-Schmidt over the standard basis, run twice per vector.
pub fn block_basis(p: usize) -> Vec<f64> {
    let q = p * p;
    let mut rows: Vec<Vec<f64>> = vec![vec![1.0 / p as f64; q]];
    for e in 0..q {
        if rows.len() == q {
            break;
        }
        let mut v = vec![0.0; q];
        v[e] = 1.0;
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= dot * ri;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows.concat()
}

/// Row-major dense matrix produced by the test oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Gaussian measurement noise, standard deviation in the signed11 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_y: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma_y: f64, seed: u64) -> Result<Self> {
        if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
            return Err(Error::Contract(format!(
                "noise standard deviation must be >= 0, got {sigma_y}"
            )));
        }
        Ok(NoiseSpec { sigma_y, seed })
    }

    /// Builds the spec from a unit01-scale standard deviation (`sigma_y = 2 sigma`).
    pub fn from_unit_sigma(sigma: f64, seed: u64) -> Result<Self> {
        Self::new(2.0 * sigma, seed)
    }

    /// The same noise level on the unit01 scale.
    pub fn unit_sigma(&self) -> f64 {
        0.5 * self.sigma_y
    }
}

/// `y + sigma_y * eps`, deterministic in `spec.seed`.
pub fn add_noise(y: &[f64], spec: &NoiseSpec) -> Vec<f64> {
    if spec.sigma_y == 0.0 {
        return y.to_vec();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    y.iter()
        .map(|v| {
            let eps: f64 = rng.sample(StandardNormal);
            v + spec.sigma_y * eps
        })
        .collect()
}

/// I.i.d. Bernoulli(`rate`) observation mask, retried until non-empty.
pub fn random_mask(dims: Dims, rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Contract(format!(
            "sampling rate must be in (0, 1], got {rate}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    loop {
        let mask: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(rate)).collect();
        if mask.iter().any(|b| *b) {
            return Ok(mask);
        }
    }
}

/// Mask as a `{0, 1}` unit01 cube for the container format.
pub fn mask_to_cube(dims: Dims, mask: &[bool]) -> Result<HsiCube> {
    HsiCube::new(
        dims,
        mask.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        RangeTag::Unit01,
    )
}
