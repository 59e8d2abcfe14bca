//! Finite-dimensional Ornstein–Uhlenbeck realizations of memory kernels and
//! stationary Gaussian noise.
//!
//! A block `(Γ, Σ, M, C)` drives `dβ = −Γβ dt + Σ dW` with stationary
//! covariance `M` (`ΓM + MΓ* = ΣΣ*`) and emits `Cβ`. Its covariance is
//! `R(t) = C e^{−Γt} M C*` for `t ≥ 0` and `R(−t)*` otherwise; the Fourier
//! convention is `S(ω) = ∫ R(t) e^{−iωt} dt`.
//!
//! Two extensions beyond that plain form are supported:
//!
//! * memory-only blocks (`sigma == None`) carry a symmetric but possibly
//!   indefinite `M`; they realize deterministic kernels such as the smooth
//!   tail `−(β²Γ₁/2)e^{−Γ₁|t|}`, which no positive-definite block can produce;
//! * an optional white feedthrough `D` emits `Cβ + D η` where `η` is the
//!   block's own driving white noise. This is how derivative-of-OU noise
//!   (spectral density `β²ω²/(ω²+Γ₁²)`) is represented exactly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GleError, Result};
use crate::matops::{self, Complex64, Matrix, DEFAULT_MARGIN};

type CMatrix = DMatrix<Complex64>;

fn to_complex(m: &Matrix) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

/// How a block was constructed; used to rescale it faithfully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockOrigin {
    Generic,
    Biexp {
        gamma1: Vec<f64>,
        gamma2: Vec<f64>,
        #[serde(with = "crate::serde_matrix")]
        b: Matrix,
    },
    Companion {
        #[serde(with = "crate::serde_matrix")]
        b: Matrix,
        gammas: Vec<Vec<f64>>,
        l: usize,
        /// indices k whose Γ_k multiplies `b` (rescaled together with Γ_k)
        b_scales_with: Vec<usize>,
        mode: CompanionMode,
    },
}

/// Which constraint set the companion construction enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompanionMode {
    /// `Σ = G`, `M` from the Lyapunov equation: spectral density `Φ(iω)Φ(iω)*`.
    SpectralFactor,
    /// `FM + MF* ⪰ 0` with `MH* = G`: the kernel is the impulse response of `Φ`.
    PositiveReal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OUBlock {
    #[serde(with = "crate::serde_matrix")]
    pub gamma: Matrix,
    #[serde(with = "crate::serde_matrix::option", default)]
    pub sigma: Option<Matrix>,
    #[serde(with = "crate::serde_matrix")]
    pub m: Matrix,
    #[serde(with = "crate::serde_matrix")]
    pub c: Matrix,
    #[serde(with = "crate::serde_matrix::option", default)]
    pub d: Option<Matrix>,
    #[serde(default = "generic_origin")]
    pub origin: BlockOrigin,
}

fn generic_origin() -> BlockOrigin {
    BlockOrigin::Generic
}

fn lyapunov_tol(gamma: &Matrix, m: &Matrix) -> f64 {
    1e-10 * (1.0 + gamma.norm() * m.norm())
}

impl OUBlock {
    /// Noise-grade block; `M` is the stationary covariance solved from Γ, Σ.
    pub fn new(gamma: Matrix, sigma: Matrix, c: Matrix) -> Result<Self> {
        check_shapes(&gamma, Some(&sigma), &c)?;
        check_positive_stable(&gamma)?;
        let m = matops::lyapunov_solve(&(-&gamma), &(&sigma * sigma.transpose()))?;
        Self::with_covariance(gamma, sigma, m, c)
    }

    /// Noise-grade block with a given `M`, validated against the Lyapunov
    /// constraint and positive definiteness.
    pub fn with_covariance(gamma: Matrix, sigma: Matrix, m: Matrix, c: Matrix) -> Result<Self> {
        check_shapes(&gamma, Some(&sigma), &c)?;
        if m.shape() != gamma.shape() {
            return Err(GleError::DimensionMismatch("M must match Gamma".into()));
        }
        check_positive_stable(&gamma)?;
        if !matops::is_symmetric(&m, 1e-12) {
            return Err(GleError::NotSymmetric("M".into()));
        }
        let res = (&gamma * &m + &m * gamma.transpose() - &sigma * sigma.transpose()).norm();
        if res > lyapunov_tol(&gamma, &m) {
            return Err(GleError::InvalidBlock(format!("Lyapunov residual {res:.3e}")));
        }
        if gamma.nrows() > 0 && matops::min_sym_eigenvalue(&m) <= 0.0 {
            return Err(GleError::InvalidBlock("M is not positive definite".into()));
        }
        Ok(Self { gamma, sigma: Some(sigma), m, c, d: None, origin: BlockOrigin::Generic })
    }

    /// Deterministic memory block: only `Γ`, symmetric `M` and `C` matter.
    pub fn memory(gamma: Matrix, m: Matrix, c: Matrix) -> Result<Self> {
        check_shapes(&gamma, None, &c)?;
        if m.shape() != gamma.shape() {
            return Err(GleError::DimensionMismatch("M must match Gamma".into()));
        }
        check_positive_stable(&gamma)?;
        if !matops::is_symmetric(&m, 1e-12) {
            return Err(GleError::NotSymmetric("M".into()));
        }
        Ok(Self { gamma, sigma: None, m, c, d: None, origin: BlockOrigin::Generic })
    }

    /// Adds a white feedthrough `D` (output × channels).
    pub fn with_feedthrough(mut self, d: Matrix) -> Result<Self> {
        let k = self.channels();
        if self.sigma.is_none() || d.nrows() != self.out_dim() || d.ncols() != k {
            return Err(GleError::DimensionMismatch("feedthrough must be output x channels".into()));
        }
        self.d = Some(matops::checked(d)?);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Number of driving Wiener channels (0 for memory blocks).
    pub fn channels(&self) -> usize {
        self.sigma.as_ref().map_or(0, |s| s.ncols())
    }

    pub fn is_noise_grade(&self) -> bool {
        self.sigma.is_some()
    }

    /// `MC* + ΣD*`, the right factor of the covariance for `t > 0`.
    fn right_factor(&self) -> Matrix {
        let mut n = &self.m * self.c.transpose();
        if let (Some(s), Some(d)) = (&self.sigma, &self.d) {
            n += s * d.transpose();
        }
        n
    }

    /// Smooth part of the covariance (or kernel) at lag `t`.
    pub fn covariance(&self, t: f64) -> Matrix {
        let e = matops::matrix_exp(&self.gamma, -t.abs()).expect("stable Gamma cannot overflow for t >= 0");
        let r = &self.c * e * self.right_factor();
        if t >= 0.0 {
            r
        } else {
            r.transpose()
        }
    }

    /// Intensity `DD*` of the white component (zero without feedthrough).
    pub fn delta_intensity(&self) -> Matrix {
        match &self.d {
            Some(d) => d * d.transpose(),
            None => Matrix::zeros(self.out_dim(), self.out_dim()),
        }
    }

    /// `C(zI + Γ)^{-1}(MC* + ΣD*)`, the one-sided Laplace transform of the
    /// smooth covariance.
    pub fn laplace(&self, z: Complex64) -> Result<CMatrix> {
        let n = self.dim();
        let shifted = CMatrix::identity(n, n) * z + to_complex(&self.gamma);
        let rhs = to_complex(&self.right_factor());
        let sol = shifted.lu().solve(&rhs).ok_or(GleError::SingularGamma)?;
        Ok(to_complex(&self.c) * sol)
    }

    /// Similarity transform (Γ, Σ, M, C) → (TΓT⁻¹, TΣ, TMT*, CT⁻¹).
    pub fn transformed(&self, t: &Matrix) -> Result<Self> {
        let ti = matops::inverse(t)?;
        Ok(Self {
            gamma: t * &self.gamma * &ti,
            sigma: self.sigma.as_ref().map(|s| t * s),
            m: matops::symmetrize(&(t * &self.m * t.transpose())),
            c: &self.c * &ti,
            d: self.d.clone(),
            origin: BlockOrigin::Generic,
        })
    }

    /// Lyapunov residual ‖ΓM + MΓ* − ΣΣ*‖_F (noise-grade blocks only).
    pub fn lyapunov_residual(&self) -> Option<f64> {
        self.sigma
            .as_ref()
            .map(|s| (&self.gamma * &self.m + &self.m * self.gamma.transpose() - s * s.transpose()).norm())
    }
}

fn check_shapes(gamma: &Matrix, sigma: Option<&Matrix>, c: &Matrix) -> Result<()> {
    if !gamma.is_square() {
        return Err(GleError::DimensionMismatch("Gamma must be square".into()));
    }
    if c.ncols() != gamma.nrows() {
        return Err(GleError::DimensionMismatch("C must have dim(Gamma) columns".into()));
    }
    if let Some(s) = sigma {
        if s.nrows() != gamma.nrows() {
            return Err(GleError::DimensionMismatch("Sigma must have dim(Gamma) rows".into()));
        }
        matops::checked(s.clone())?;
    }
    matops::checked(gamma.clone())?;
    matops::checked(c.clone())?;
    Ok(())
}

fn check_positive_stable(gamma: &Matrix) -> Result<()> {
    if gamma.nrows() == 0 {
        return Ok(());
    }
    let (ok, spec) = matops::is_positive_stable(gamma, DEFAULT_MARGIN)?;
    if ok {
        Ok(())
    } else {
        Err(GleError::NotStable { margin: spec.min_real() })
    }
}

/// Memory kernel `κ(t) = δw·δ(t) + Σ αᵢ κᵢ(t)` from blocks i = 1, 2.
///
/// `delta_weight` is the weight the one-sided convolution `∫₀ᵗ κ(t−s)…ds`
/// picks up at `s = t`, i.e. an instantaneous damping contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRealization {
    pub blocks: [Option<OUBlock>; 2],
    pub alpha: [bool; 2],
    #[serde(with = "crate::serde_matrix::option", default)]
    pub delta_weight: Option<Matrix>,
}

/// Noise `ξ = Σ αⱼ (Cⱼβⱼ + Dⱼηⱼ)` from blocks j = 3, 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRealization {
    pub blocks: [Option<OUBlock>; 2],
    pub alpha: [bool; 2],
}

fn active<'a>(blocks: &'a [Option<OUBlock>; 2], alpha: &'a [bool; 2]) -> impl Iterator<Item = &'a OUBlock> {
    blocks.iter().zip(alpha.iter()).filter_map(|(b, &a)| if a { b.as_ref() } else { None })
}

fn common_out_dim(blocks: &[Option<OUBlock>; 2]) -> Result<Option<usize>> {
    let dims: Vec<usize> = blocks.iter().flatten().map(|b| b.out_dim()).collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(GleError::DimensionMismatch("blocks disagree on output dimension".into()));
    }
    Ok(dims.first().copied())
}

impl KernelRealization {
    pub fn new(blocks: [Option<OUBlock>; 2], alpha: [bool; 2], delta_weight: Option<Matrix>) -> Result<Self> {
        let out = common_out_dim(&blocks)?;
        if let (Some(o), Some(dw)) = (out, &delta_weight) {
            if dw.shape() != (o, o) {
                return Err(GleError::DimensionMismatch("delta weight must be output x output".into()));
            }
        }
        Ok(Self { blocks, alpha, delta_weight })
    }

    pub fn empty() -> Self {
        Self { blocks: [None, None], alpha: [false, false], delta_weight: None }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.blocks.iter().flatten().map(|b| b.out_dim()).next().or(self.delta_weight.as_ref().map(|d| d.nrows()))
    }

    /// Smooth part of κ(t); zero matrix of size `q` if nothing is active.
    pub fn eval(&self, t: f64, q: usize) -> Matrix {
        active(&self.blocks, &self.alpha).fold(Matrix::zeros(q, q), |acc, b| acc + b.covariance(t))
    }

    /// δw (zeros if absent).
    pub fn delta(&self, q: usize) -> Matrix {
        self.delta_weight.clone().unwrap_or_else(|| Matrix::zeros(q, q))
    }

    /// κ̂(z) = δw + Σ αᵢ Cᵢ(zI+Γᵢ)⁻¹MᵢCᵢ*.
    pub fn laplace(&self, z: Complex64, q: usize) -> Result<CMatrix> {
        let mut acc = to_complex(&self.delta(q));
        for b in active(&self.blocks, &self.alpha) {
            acc += b.laplace(z)?;
        }
        Ok(acc)
    }

    /// K⁽ⁿ⁾ of the whole kernel; for n = 1 the delta weight is included.
    pub fn effective_constant(&self, n: i32, q: usize) -> Result<Matrix> {
        let mut acc = if n == 1 { self.delta(q) } else { Matrix::zeros(q, q) };
        for b in active(&self.blocks, &self.alpha) {
            acc += effective_constant(b, n)?;
        }
        Ok(acc)
    }

    /// Spectral density of the even extension of κ, counting the delta weight
    /// twice (one-sided weight, two-sided intensity).
    pub fn spectral_density(&self, omega: f64, q: usize) -> Result<Matrix> {
        let mut acc = self.delta(q) * 2.0;
        for b in active(&self.blocks, &self.alpha) {
            acc += spectral_density(b, omega)?;
        }
        Ok(acc)
    }
}

impl NoiseRealization {
    pub fn new(blocks: [Option<OUBlock>; 2], alpha: [bool; 2]) -> Result<Self> {
        common_out_dim(&blocks)?;
        for b in blocks.iter().flatten() {
            if !b.is_noise_grade() {
                return Err(GleError::InvalidBlock("noise blocks need Sigma".into()));
            }
            if b.dim() > 0 && matops::min_sym_eigenvalue(&b.m) <= 0.0 {
                return Err(GleError::InvalidBlock("noise block M must be positive definite".into()));
            }
        }
        Ok(Self { blocks, alpha })
    }

    pub fn empty() -> Self {
        Self { blocks: [None, None], alpha: [false, false] }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.blocks.iter().flatten().map(|b| b.out_dim()).next()
    }

    /// Smooth part of R(t).
    pub fn eval(&self, t: f64, r: usize) -> Matrix {
        active(&self.blocks, &self.alpha).fold(Matrix::zeros(r, r), |acc, b| acc + b.covariance(t))
    }

    /// Total white intensity Σ αⱼ DⱼDⱼ*.
    pub fn delta_intensity(&self, r: usize) -> Matrix {
        active(&self.blocks, &self.alpha).fold(Matrix::zeros(r, r), |acc, b| acc + b.delta_intensity())
    }

    pub fn spectral_density(&self, omega: f64, r: usize) -> Result<Matrix> {
        let mut acc = Matrix::zeros(r, r);
        for b in active(&self.blocks, &self.alpha) {
            acc += spectral_density(b, omega)?;
        }
        Ok(acc)
    }

    pub fn effective_constant(&self, n: i32, r: usize) -> Result<Matrix> {
        let mut acc = Matrix::zeros(r, r);
        for b in active(&self.blocks, &self.alpha) {
            acc += effective_constant(b, n)?;
        }
        Ok(acc)
    }
}

/// κ(t) of a kernel realization (smooth part).
pub fn kernel_eval(k: &KernelRealization, t: f64) -> Matrix {
    let q = k.out_dim().unwrap_or(0);
    k.eval(t, q)
}

/// R(t) of a noise realization (smooth part; see
/// [`NoiseRealization::delta_intensity`] for the white component).
pub fn covariance_eval(n: &NoiseRealization, t: f64) -> Matrix {
    let r = n.out_dim().unwrap_or(0);
    n.eval(t, r)
}

/// S(ω) of one block: `P + P* + DD*` with `P = C(iωI + Γ)⁻¹(MC* + ΣD*)`.
///
/// Without feedthrough and for commuting Γ, M this is the familiar
/// `2CΓ⁻¹(ω²Γ⁻² + I)⁻¹MC*`. The real part is returned; for matrix-valued
/// outputs the (odd, antisymmetric) imaginary part is dropped.
pub fn spectral_density(b: &OUBlock, omega: f64) -> Result<Matrix> {
    let p = b.laplace(Complex64::new(0.0, omega))?;
    let s = &p + p.adjoint();
    Ok(s.map(|v| v.re) + b.delta_intensity())
}

/// K⁽ⁿ⁾ = CΓ⁻ⁿ(MC* + ΣD*), plus DD*/2 for n = 1.
///
/// For blocks without feedthrough this is `CΓ⁻ⁿMC*`; for n = 1 it equals
/// `∫₀^∞ R(t) dt` including half of the white intensity.
pub fn effective_constant(b: &OUBlock, n: i32) -> Result<Matrix> {
    let dim = b.dim();
    let base = if n >= 0 { matops::inverse(&b.gamma).map_err(|_| GleError::SingularGamma)? } else { b.gamma.clone() };
    let mut pow = Matrix::identity(dim, dim);
    for _ in 0..n.unsigned_abs() {
        pow = &pow * &base;
    }
    let mut k = &b.c * pow * b.right_factor();
    if n == 1 {
        k += b.delta_intensity() * 0.5;
    }
    Ok(k)
}

fn check_diag_positive(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(GleError::OrderingViolation(format!("{name} must be positive")));
    }
    Ok(())
}

/// Bi-exponential block with `C = [B B]` whose kernel is
/// `½ B Γ₂²(Γ₂² − Γ₁²)⁻¹(Γ₂e^{−Γ₂|t|} − Γ₁e^{−Γ₁|t|}) B*`.
///
/// `gamma1`, `gamma2` are the diagonals of Γ₁, Γ₂ (length d/2) and `b` is
/// p × d/2. Every entry of Γ₂ must exceed every entry of Γ₁.
pub fn biexp_realization(gamma1: &[f64], gamma2: &[f64], b: &Matrix) -> Result<OUBlock> {
    let h = gamma1.len();
    if gamma2.len() != h || b.ncols() != h || h == 0 {
        return Err(GleError::DimensionMismatch("biexp: Gamma1, Gamma2, B disagree".into()));
    }
    check_diag_positive("Gamma1", gamma1)?;
    check_diag_positive("Gamma2", gamma2)?;
    let max1 = gamma1.iter().copied().fold(f64::MIN, f64::max);
    let min2 = gamma2.iter().copied().fold(f64::MAX, f64::min);
    if min2 <= max1 {
        return Err(GleError::OrderingViolation(format!("min Gamma2 {min2} <= max Gamma1 {max1}")));
    }
    let d = 2 * h;
    let mut gamma = Matrix::zeros(d, d);
    let mut sigma = Matrix::zeros(d, h);
    let mut m = Matrix::zeros(d, d);
    for k in 0..h {
        let (g1, g2) = (gamma1[k], gamma2[k]);
        let gap2 = (g1 - g2) * (g1 - g2);
        gamma[(k, k)] = g1;
        gamma[(h + k, h + k)] = g2;
        sigma[(k, k)] = -g1 * g2 / (g2 - g1);
        sigma[(h + k, k)] = g2 * g2 / (g2 - g1);
        m[(k, k)] = 0.5 * g1 * g2 * g2 / gap2;
        m[(k, h + k)] = -g1 * g2.powi(3) / ((g1 + g2) * gap2);
        m[(h + k, k)] = m[(k, h + k)];
        m[(h + k, h + k)] = 0.5 * g2.powi(3) / gap2;
    }
    let mut cc = Matrix::zeros(b.nrows(), d);
    cc.view_mut((0, 0), (b.nrows(), h)).copy_from(b);
    cc.view_mut((0, h), (b.nrows(), h)).copy_from(b);
    let mut block = OUBlock::with_covariance(gamma, sigma, m, cc)?;
    block.origin = BlockOrigin::Biexp { gamma1: gamma1.to_vec(), gamma2: gamma2.to_vec(), b: b.clone() };
    Ok(block)
}

/// Elementary symmetric polynomials e_0..e_d of the given values.
fn elementary_symmetric(values: &[f64]) -> Vec<f64> {
    let mut e = vec![1.0];
    for &v in values {
        let mut next = vec![0.0; e.len() + 1];
        for (k, &c) in e.iter().enumerate() {
            next[k] += c;
            next[k + 1] += c * v;
        }
        e = next;
    }
    e
}

/// Companion-form block realizing `Φ(z) = B z^l / Π_k (z + Γ_k)`.
///
/// `gammas[k]` holds the diagonal of Γ_k (length p each) and `b` is p × p.
/// `Γ = F` is the block companion matrix with −I on the superdiagonal and
/// bottom row `[a₀ … a_{d−1}]`, `C = H = [0 … B … 0]` (B in slot l), and
/// `Σ = G = [0 … I]*`, so that `Φ(z) = H(zI + F)⁻¹G`.
pub fn companion_realization(b: &Matrix, gammas: &[Vec<f64>], l: usize, mode: CompanionMode) -> Result<OUBlock> {
    let d = gammas.len();
    let p = b.nrows();
    if !(0 < l && l < d) {
        return Err(GleError::DimensionMismatch(format!("companion: need 0 < l < d, got l={l}, d={d}")));
    }
    if b.ncols() != p || gammas.iter().any(|g| g.len() != p) {
        return Err(GleError::DimensionMismatch("companion: B must be p x p and each Gamma_k of length p".into()));
    }
    for g in gammas {
        check_diag_positive("Gamma_k", g)?;
    }
    let n = p * d;
    let mut f = Matrix::zeros(n, n);
    for k in 0..d - 1 {
        for i in 0..p {
            f[(k * p + i, (k + 1) * p + i)] = -1.0;
        }
    }
    // Q(z) = Π(z + Γ_k) = Σ_j a_j z^j with a_j = e_{d−j}(Γ)
    for i in 0..p {
        let vals: Vec<f64> = gammas.iter().map(|g| g[i]).collect();
        let e = elementary_symmetric(&vals);
        for j in 0..d {
            f[((d - 1) * p + i, j * p + i)] = e[d - j];
        }
    }
    let mut h = Matrix::zeros(p, n);
    h.view_mut((0, l * p), (p, p)).copy_from(b);
    let mut g = Matrix::zeros(n, p);
    g.view_mut(((d - 1) * p, 0), (p, p)).copy_from(&Matrix::identity(p, p));

    let mut block = match mode {
        CompanionMode::SpectralFactor => OUBlock::new(f, g, h)?,
        CompanionMode::PositiveReal => positive_real_block(f, g, h)?,
    };
    block.origin = BlockOrigin::Companion { b: b.clone(), gammas: gammas.to_vec(), l, b_scales_with: vec![], mode };
    Ok(block)
}

/// Symmetric M with MH* = G chosen to minimise ‖FM + MF*‖_F over the
/// solution set (least squares in the null space of the equality), then PSD
/// projection of FM + MF*.
fn positive_real_block(f: Matrix, g: Matrix, h: Matrix) -> Result<OUBlock> {
    let n = f.nrows();
    let p = h.nrows();
    // unknowns: upper triangle of M
    let idx: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let nv = idx.len();
    let mut a = Matrix::zeros(n * p, nv);
    let mut l = Matrix::zeros(n * n, nv);
    for (col, &(i, j)) in idx.iter().enumerate() {
        let mut e = Matrix::zeros(n, n);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        let img = &e * h.transpose();
        for r in 0..n {
            for c in 0..p {
                a[(r * p + c, col)] = img[(r, c)];
            }
        }
        let lyap = &f * &e + &e * f.transpose();
        for r in 0..n {
            for c in 0..n {
                l[(r * n + c, col)] = lyap[(r, c)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_fn(n * p, |k, _| g[(k / p, k % p)]);
    let x0 = a
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| GleError::InfeasibleLmi(format!("least squares failed: {e}")))?;
    // null space of the equality from the small eigenvalues of AᵀA
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max).max(1.0);
    let null: Vec<usize> = (0..nv).filter(|&k| eig.eigenvalues[k] < 1e-12 * top).collect();
    let mut x = x0.clone();
    if !null.is_empty() {
        let nb = Matrix::from_fn(nv, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);
        let ln = &l * &nb;
        let target = -(&l * &x0);
        let z = ln
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| GleError::InfeasibleLmi(format!("least squares failed: {e}")))?;
        x += nb * z;
    }
    let mut m = Matrix::zeros(n, n);
    for (col, &(i, j)) in idx.iter().enumerate() {
        m[(i, j)] = x[col];
        m[(j, i)] = x[col];
    }
    let eq_res = (&m * h.transpose() - &g).norm();
    if eq_res > 1e-8 {
        return Err(GleError::InfeasibleLmi(format!("MH* = G residual {eq_res:.3e}")));
    }
    let x = matops::symmetrize(&(&f * &m + &m * f.transpose()));
    let eig = x.clone().symmetric_eigen();
    let clipped = &eig.eigenvectors
        * Matrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)))
        * eig.eigenvectors.transpose();
    let change = (&clipped - &x).norm();
    if change > 1e-8 {
        return Err(GleError::InfeasibleLmi(format!("PSD projection changed FM + MF* by {change:.3e}")));
    }
    let sigma = matops::psd_sqrt(&clipped);
    if matops::min_sym_eigenvalue(&m) <= 0.0 {
        return Err(GleError::InfeasibleLmi("M is not positive definite".into()));
    }
    OUBlock::with_covariance(f, sigma, m, h)
}

/// Divides the diagonal rates at `fast` by ε, keeping the block's structure.
///
/// Bi-exponential and companion blocks are rebuilt from their parameters so
/// the ε-dependent covariance and noise prefactors follow exactly; generic
/// diagonal blocks scale the fast rows of Γ and Σ by 1/ε.
pub fn rescale_fast_scales(b: &OUBlock, fast: &[usize], eps: f64) -> Result<OUBlock> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(GleError::EpsilonRange(eps));
    }
    let n = b.dim();
    if fast.iter().any(|&k| k >= n) {
        return Err(GleError::DimensionMismatch("fast index out of range".into()));
    }
    if eps == 1.0 {
        return Ok(b.clone());
    }
    match &b.origin {
        BlockOrigin::Biexp { gamma1, gamma2, b: bm } => {
            let h = gamma1.len();
            let (mut g1, mut g2) = (gamma1.clone(), gamma2.clone());
            for &k in fast {
                if k < h {
                    g1[k] /= eps;
                } else {
                    g2[k - h] /= eps;
                }
            }
            let mut out = biexp_realization(&g1, &g2, bm)?;
            out.d = b.d.clone();
            Ok(out)
        }
        BlockOrigin::Companion { b: bm, gammas, l, b_scales_with, mode } => {
            let p = bm.nrows();
            let mut gs = gammas.clone();
            let mut factor = 1.0;
            for &k in fast {
                let (slot, i) = (k / p, k % p);
                gs[slot][i] /= eps;
            }
            let slots: Vec<usize> = fast.iter().map(|k| k / p).collect();
            for s in b_scales_with {
                if slots.contains(s) {
                    factor /= eps;
                }
            }
            let mut out = companion_realization(&(bm * factor), &gs, *l, *mode)?;
            if let BlockOrigin::Companion { b_scales_with: bs, .. } = &mut out.origin {
                *bs = b_scales_with.clone();
            }
            Ok(out)
        }
        BlockOrigin::Generic => {
            let off = b.gamma.clone() - Matrix::from_diagonal(&b.gamma.diagonal());
            if off.amax() != 0.0 {
                return Err(GleError::InvalidBlock("generic rescaling needs a diagonal Gamma".into()));
            }
            let mut p = Matrix::identity(n, n);
            for &k in fast {
                p[(k, k)] = 1.0 / eps;
            }
            let gamma = &p * &b.gamma;
            match &b.sigma {
                Some(s) => {
                    let mut out = OUBlock::new(gamma, &p * s, b.c.clone())?;
                    out.d = b.d.clone();
                    Ok(out)
                }
                None => Err(GleError::InvalidBlock("memory blocks carry no Sigma to rescale".into())),
            }
        }
    }
}

/// Controllability/observability from the PBH rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MinimalityReport {
    pub controllable: bool,
    pub observable: bool,
}

/// Rank threshold: σ_min > 1e-8·σ_max.
fn full_row_rank(m: &CMatrix) -> bool {
    let s = m.clone().svd(false, false).singular_values;
    let max = s.iter().copied().fold(0.0, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    s.len() >= m.nrows() && max > 0.0 && min > 1e-8 * max
}

/// PBH test for every eigenvalue λ of Γ: rank[Γ − λI, Σ] = d and
/// rank[Γ* − λ̄I, C*] = d. Memory blocks use `MC*` as the input map.
pub fn check_minimality(b: &OUBlock) -> Result<MinimalityReport> {
    let n = b.dim();
    let input = b.sigma.clone().unwrap_or_else(|| &b.m * b.c.transpose());
    let spec = matops::spectrum(&b.gamma)?;
    let g = to_complex(&b.gamma);
    let gt = to_complex(&b.gamma.transpose());
    let (mut ctrl, mut obs) = (true, true);
    for lam in &spec.eigenvalues {
        let id = CMatrix::identity(n, n);
        let mut pc = CMatrix::zeros(n, n + input.ncols());
        pc.view_mut((0, 0), (n, n)).copy_from(&(&g - &id * *lam));
        pc.view_mut((0, n), (n, input.ncols())).copy_from(&to_complex(&input));
        ctrl &= full_row_rank(&pc);
        let mut po = CMatrix::zeros(n, n + b.c.nrows());
        po.view_mut((0, 0), (n, n)).copy_from(&(&gt - &id * lam.conj()));
        po.view_mut((0, n), (n, b.c.nrows())).copy_from(&to_complex(&b.c.transpose()));
        obs &= full_row_rank(&po);
    }
    Ok(MinimalityReport { controllable: ctrl, observable: obs })
}

/// Built-in kernel/noise pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", deny_unknown_fields)]
pub enum Preset {
    /// Bi-exponential kernel `β²Γ₂²(Γ₂e^{−Γ₂|t|} − Γ₁e^{−Γ₁|t|})/(2(Γ₂²−Γ₁²))`.
    M1 { gamma_1: f64, gamma_2: f64, beta: f64 },
    /// `(β²/2)(δ(t) − Γ₁e^{−Γ₁|t|})` with derivative-of-OU noise.
    M2 { gamma_1: f64, beta: f64 },
    /// Three-exponential kernel with ω⁴ low-frequency noise spectrum.
    #[serde(rename = "hyper")]
    Hyper { gamma_1: f64, gamma_2: f64, gamma_3: f64, beta: f64 },
    /// Single exponential `(β²Γ₁/2)e^{−Γ₁|t|}`: non-vanishing effective friction.
    #[serde(rename = "exponential")]
    Exponential { gamma_1: f64, beta: f64 },
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::M1 { .. } => "M1",
            Preset::M2 { .. } => "M2",
            Preset::Hyper { .. } => "hyper",
            Preset::Exponential { .. } => "exponential",
        }
    }
}

/// Coefficients c₁, c₂, c₃ of the three-exponential kernel
/// `Σ c_k e^{−Γ_k|t|}`.
pub fn hyper_kernel_coefficients(g1: f64, g2: f64, g3: f64, beta: f64) -> [f64; 3] {
    let s = beta * beta * (g3 * g2 + g3 * g1 + g2 * g1);
    let c3 = s * g3.powi(4) / (2.0 * (g3 * g3 - g2 * g2) * (g3 * g3 - g1 * g1) * (g2 + g1));
    let c2 = -s * g3 * g3 * g2 * g2 / (2.0 * (g3 * g3 - g2 * g2) * (g2 * g2 - g1 * g1) * (g1 + g3));
    let c1 = s * g3 * g3 * g1 * g1 / (2.0 * (g3 * g3 - g1 * g1) * (g2 * g2 - g1 * g1) * (g3 + g2));
    [c1, c2, c3]
}

/// Kernel and noise realizations of a preset.
///
/// M1 and exponential use the same block for kernel and noise (R = κ). M2
/// carries the delta as a weight plus a memory block, and its noise as an
/// OU block with feedthrough. The hyper kernel realizes the three-term
/// exponential sum; its noise is the companion spectral factor
/// `βΓ₃z²/Π(z+Γ_k)` (density `Γ₃²β²ω⁴/Π(ω²+Γ_k²)`), which is not the
/// covariance of that kernel.
pub fn preset(p: &Preset) -> Result<(KernelRealization, NoiseRealization)> {
    let one = matops::scalar(1.0);
    match *p {
        Preset::M1 { gamma_1, gamma_2, beta } => {
            positive(&[beta])?;
            let b = biexp_realization(&[gamma_1], &[gamma_2], &matops::scalar(beta))?;
            Ok((
                KernelRealization::new([None, Some(b.clone())], [false, true], None)?,
                NoiseRealization::new([None, Some(b)], [false, true])?,
            ))
        }
        Preset::M2 { gamma_1, beta } => {
            positive(&[gamma_1, beta])?;
            let g = matops::scalar(gamma_1);
            let mem = OUBlock::memory(g.clone(), matops::scalar(-gamma_1 / 2.0), matops::scalar(beta))?;
            let noise = OUBlock::new(g, matops::scalar(-gamma_1), matops::scalar(beta))?
                .with_feedthrough(matops::scalar(beta))?;
            Ok((
                KernelRealization::new([None, Some(mem)], [false, true], Some(matops::scalar(beta * beta / 2.0)))?,
                NoiseRealization::new([None, Some(noise)], [false, true])?,
            ))
        }
        Preset::Hyper { gamma_1, gamma_2, gamma_3, beta } => {
            positive(&[gamma_1, beta])?;
            if !(gamma_1 < gamma_2 && gamma_2 < gamma_3) {
                return Err(GleError::OrderingViolation("need Gamma1 < Gamma2 < Gamma3".into()));
            }
            let c = hyper_kernel_coefficients(gamma_1, gamma_2, gamma_3, beta);
            let mem = OUBlock::memory(
                matops::diag(&[gamma_1, gamma_2, gamma_3]),
                matops::diag(&c),
                Matrix::from_element(1, 3, 1.0),
            )?;
            let mut noise = companion_realization(
                &matops::scalar(beta * gamma_3),
                &[vec![gamma_1], vec![gamma_2], vec![gamma_3]],
                2,
                CompanionMode::SpectralFactor,
            )?;
            if let BlockOrigin::Companion { b_scales_with, .. } = &mut noise.origin {
                *b_scales_with = vec![2];
            }
            Ok((
                KernelRealization::new([None, Some(mem)], [false, true], None)?,
                NoiseRealization::new([None, Some(noise)], [false, true])?,
            ))
        }
        Preset::Exponential { gamma_1, beta } => {
            positive(&[gamma_1, beta])?;
            let b = OUBlock::new(matops::scalar(gamma_1), matops::scalar(beta * gamma_1), one)?;
            Ok((
                KernelRealization::new([Some(b.clone()), None], [true, false], None)?,
                NoiseRealization::new([Some(b), None], [true, false])?,
            ))
        }
    }
}

fn positive(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite() && *x > 0.0) {
        Ok(())
    } else {
        Err(GleError::OrderingViolation("parameters must be positive".into()))
    }
}

/// All presets with their default parameters.
pub fn preset_catalog() -> Vec<Preset> {
    vec![
        Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.0 },
        Preset::M2 { gamma_1: 1.0, beta: 1.0 },
        Preset::Hyper { gamma_1: 1.0, gamma_2: 2.0, gamma_3: 3.0, beta: 1.0 },
        Preset::Exponential { gamma_1: 1.0, beta: 1.0 },
    ]
}
