//! Homogenized limit equations.
//!
//! Everything here is an instance of the slow–fast reduction
//!
//! ```text
//! dx = a₁v dt + b₁ dt + Σ₁ dW,     ε dv = a₂v dt + b₂ dt + Σ₂ dW,
//! ```
//!
//! whose ε → 0 limit is
//!
//! ```text
//! dX = (B₁ − A₁A₂⁻¹B₂ + S) dt + (Σ₁ − A₁A₂⁻¹Σ₂) dW,
//! S_i = −∂_l[A₁A₂⁻¹]_ij ([A₁]_lk J_jk + [Σ₁Σ₂*]_lj),   A₂J + JA₂* = −Σ₂Σ₂*.
//! ```
//!
//! The last term of `S` is the covariation of the slow and fast noises; it
//! vanishes when the two are driven by independent channels, which is the
//! case for [`general_limit`].
//!
//! The specialised builders write the same limits out in closed form for
//! GLE models. Each [`LimitSystem`] keeps its correction drift separately
//! queryable ([`LimitSystem::correction_at`]).

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GleError, Result};
use crate::matops::{self, Complex64, Matrix, DEFAULT_MARGIN};
use crate::model::{build_markovian_system, init_key, lower_factor, CoefficientField, GLEModel, InitialLaw, MarkovianSystem};
use crate::realization::{biexp_realization, KernelRealization, NoiseRealization, OUBlock};
use crate::simulate::{SdeSystem, StateLayout};

type DVec = DVector<f64>;

/// Which construction produced a [`LimitSystem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Generic slow–fast reduction of user-supplied blocks.
    General,
    /// Small-mass limit of a full GLE model.
    SmallMass,
    /// Simultaneous vanishing of mass and half of the memory/noise scales.
    VanishingDamping,
    /// One-dimensional small-mass limit of the M2-type model.
    SmallMass1d,
    /// One-dimensional vanishing-damping limit of the M1-type model.
    Vanishing1d,
    /// Fluctuation–dissipation reduction (g = h = σ).
    Fdt,
    /// One-dimensional hyper-diffusive limit.
    Hyper1d,
}

/// Coefficients of a limit equation. `base_drift + correction` is the
/// full drift.
pub trait LimitCoefficients: Send + Sync {
    fn base_drift(&self, t: f64, s: &[f64]) -> Result<DVec>;
    /// Noise- and memory-induced drift.
    fn correction(&self, t: f64, s: &[f64]) -> Result<DVec>;
    fn diffusion(&self, t: f64, s: &[f64]) -> Result<Matrix>;
}

/// One term `coeff · N(key)` of an initial state component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitTerm {
    pub index: usize,
    pub key: u32,
    pub coeff: f64,
}

/// Initial state `mean + Σ coeff · N(key)`, with normals shared with any
/// pre-limit system simulated under the same seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialSpec {
    pub mean: Vec<f64>,
    pub terms: Vec<InitTerm>,
}

impl InitialSpec {
    pub fn deterministic(mean: Vec<f64>) -> Self {
        Self { mean, terms: Vec::new() }
    }

    /// Adds `L·N(keys)` on the slice starting at `start`, `L` lower triangular.
    fn add_gaussian(&mut self, start: usize, l: &Matrix, keys: impl Fn(usize) -> u32) {
        for i in 0..l.nrows() {
            for k in 0..=i {
                if l[(i, k)] != 0.0 {
                    self.terms.push(InitTerm { index: start + i, key: keys(k), coeff: l[(i, k)] });
                }
            }
        }
    }
}

/// A homogenized SDE on a named layout.
#[derive(Clone)]
pub struct LimitSystem {
    layout: StateLayout,
    wiener: (usize, usize),
    position: (usize, usize),
    provenance: Provenance,
    coef: Arc<dyn LimitCoefficients>,
    init: InitialSpec,
    /// Hypotheses that were spot-checked and failed without being fatal.
    pub warnings: Vec<String>,
}

impl fmt::Debug for LimitSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LimitSystem")
            .field("provenance", &self.provenance)
            .field("layout", &self.layout)
            .field("wiener", &self.wiener)
            .field("warnings", &self.warnings)
            .finish()
    }
}

impl LimitSystem {
    fn assemble(
        layout: StateLayout,
        wiener: (usize, usize),
        provenance: Provenance,
        coef: Arc<dyn LimitCoefficients>,
        init: InitialSpec,
    ) -> Result<Self> {
        let n = layout.dim();
        let position = layout.slices.first().map_or((0, 0), |s| (s.start, s.len));
        let sys = Self { layout, wiener, position, provenance, coef, init, warnings: Vec::new() };
        if sys.init.mean.len() != n {
            return Err(GleError::DimensionMismatch(format!("initial mean has {} entries, layout {n}", sys.init.mean.len())));
        }
        let s0 = sys.init.mean.clone();
        let f = sys.drift_at(0.0, &s0)?;
        let g = sys.diffusion_at(0.0, &s0)?;
        if f.len() != n || g.shape() != (n, wiener.0 + wiener.1) {
            return Err(GleError::DimensionMismatch(format!(
                "limit coefficients: drift {} and diffusion {:?} for layout {n} with {} channels",
                f.len(),
                g.shape(),
                wiener.0 + wiener.1
            )));
        }
        Ok(sys)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn initial(&self) -> &InitialSpec {
        &self.init
    }

    pub fn with_initial(mut self, init: InitialSpec) -> Result<Self> {
        if init.mean.len() != self.layout.dim() {
            return Err(GleError::DimensionMismatch("initial mean does not match the layout".into()));
        }
        self.init = init;
        Ok(self)
    }

    /// Declares which slice is reported as the position.
    pub fn with_position(mut self, name: &str) -> Result<Self> {
        let s = self.layout.get(name).ok_or_else(|| GleError::InvalidConfig(format!("no slice named {name}")))?;
        self.position = (s.start, s.len);
        Ok(self)
    }

    pub fn drift_at(&self, t: f64, s: &[f64]) -> Result<DVec> {
        Ok(self.coef.base_drift(t, s)? + self.coef.correction(t, s)?)
    }

    pub fn base_drift_at(&self, t: f64, s: &[f64]) -> Result<DVec> {
        self.coef.base_drift(t, s)
    }

    pub fn correction_at(&self, t: f64, s: &[f64]) -> Result<DVec> {
        self.coef.correction(t, s)
    }

    pub fn diffusion_at(&self, t: f64, s: &[f64]) -> Result<Matrix> {
        self.coef.diffusion(t, s)
    }
}

impl SdeSystem for LimitSystem {
    fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn wiener_dims(&self) -> (usize, usize) {
        self.wiener
    }

    // Coefficient failures (singular ν, unstable blocks) surface as NaN and
    // are reported by the integrator as a blow-up.
    fn drift(&self, t: f64, s: &[f64], out: &mut [f64]) {
        match self.drift_at(t, s) {
            Ok(v) => out.copy_from_slice(v.as_slice()),
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn diffusion(&self, t: f64, s: &[f64], out: &mut Matrix) {
        match self.diffusion_at(t, s) {
            Ok(g) => out.copy_from(&g),
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn position_slice(&self) -> (usize, usize) {
        self.position
    }

    fn initial_state(&self, normal: &mut dyn FnMut(u32) -> f64) -> Vec<f64> {
        let mut s = self.init.mean.clone();
        for term in &self.init.terms {
            s[term.index] += term.coeff * normal(term.key);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Probing helpers

const PROBES: usize = 32;

/// Seeded probe points `(t, x)` in `[0, 10] × [−5, 5]^dim`, plus `(0, x0)`.
fn probe_points(dim: usize, x0: Option<&[f64]>) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut pts: Vec<(f64, Vec<f64>)> = (0..PROBES)
        .map(|_| (rng.random_range(0.0..10.0), (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()))
        .collect();
    if let Some(x) = x0 {
        pts.insert(0, (0.0, x.to_vec()));
    }
    pts
}

fn require_positive_stable(pts: &[(f64, Vec<f64>)], f: impl Fn(f64, &[f64]) -> Result<Matrix>) -> Result<()> {
    for (t, x) in pts {
        let (ok, spec) = matops::is_positive_stable(&f(*t, x)?, DEFAULT_MARGIN)?;
        if !ok {
            return Err(GleError::NotStable { margin: spec.min_real() });
        }
    }
    Ok(())
}

fn scalar_of(f: &CoefficientField, t: f64, x: &[f64]) -> f64 {
    f.eval(t, x)[(0, 0)]
}

fn vec_of(f: &CoefficientField, t: f64, x: &[f64]) -> DVec {
    f.eval(t, x).column(0).into_owned()
}

// ---------------------------------------------------------------------------
// Generic reduction

/// `S_i = −∂_l[A₁A₂⁻¹]_ij ([A₁]_lk J_jk + [Σ₁Σ₂*]_lj)` summed over
/// `l < deps`, with `J` from `A₂J + JA₂* = −Σ₂Σ₂*`.
#[allow(clippy::too_many_arguments)]
fn reduction_drift(
    a1: &CoefficientField,
    a2: &CoefficientField,
    s1: Option<&CoefficientField>,
    s2: &CoefficientField,
    deps: usize,
    t: f64,
    x: &[f64],
) -> Result<DVec> {
    let a1v = a1.eval(t, x);
    let a2v = a2.eval(t, x);
    let s2v = s2.eval(t, x);
    let inv = matops::inverse(&a2v)?;
    let f = &*a1v * &inv;
    let q = matops::symmetrize(&(&*s2v * s2v.transpose()));
    let j = matops::lyapunov_solve(&a2v, &q)?;
    let mut weight = &*a1v * &j;
    if let Some(s1) = s1 {
        weight += &*s1.eval(t, x) * s2v.transpose();
    }
    let mut out = DVec::zeros(a1v.nrows());
    for l in 0..deps.min(x.len()) {
        let da1 = a1.deriv(t, x, l)?;
        let da2 = a2.deriv(t, x, l)?;
        if da1.amax() == 0.0 && da2.amax() == 0.0 {
            continue;
        }
        let df = da1 * &inv - &f * da2 * &inv;
        out -= df * weight.row(l).transpose();
    }
    Ok(out)
}

/// Noise-induced drift `S` of the slow–fast reduction with independent slow
/// and fast noises.
pub fn noise_induced_drift(
    a1: &CoefficientField,
    a2: &CoefficientField,
    sigma2: &CoefficientField,
    t: f64,
    x: &[f64],
) -> Result<DVec> {
    reduction_drift(a1, a2, None, sigma2, x.len(), t, x)
}

struct GeneralCoef {
    a1: CoefficientField,
    a2: CoefficientField,
    b1: CoefficientField,
    b2: CoefficientField,
    s1: CoefficientField,
    s2: CoefficientField,
    shared: bool,
}

impl LimitCoefficients for GeneralCoef {
    fn base_drift(&self, t: f64, s: &[f64]) -> Result<DVec> {
        let inv = matops::inverse(&self.a2.eval(t, s))?;
        Ok(vec_of(&self.b1, t, s) - &*self.a1.eval(t, s) * inv * vec_of(&self.b2, t, s))
    }

    fn correction(&self, t: f64, s: &[f64]) -> Result<DVec> {
        let s1 = if self.shared { Some(&self.s1) } else { None };
        reduction_drift(&self.a1, &self.a2, s1, &self.s2, s.len(), t, s)
    }

    fn diffusion(&self, t: f64, s: &[f64]) -> Result<Matrix> {
        let inv = matops::inverse(&self.a2.eval(t, s))?;
        let fast = -(&*self.a1.eval(t, s) * inv * &*self.s2.eval(t, s));
        if self.shared {
            return Ok(&*self.s1.eval(t, s) + fast);
        }
        let s1 = self.s1.eval(t, s);
        let n1 = s1.nrows();
        let (k1, k2) = (s1.ncols(), fast.ncols());
        let mut g = Matrix::zeros(n1, k1 + k2);
        g.view_mut((0, 0), (n1, k1)).copy_from(&s1);
        g.view_mut((0, k1), (n1, k2)).copy_from(&fast);
        Ok(g)
    }
}

/// Limit of the slow–fast system with fields over the slow state `X`
/// (`n₁`-dimensional). Wiener channels are `[W^(k₁) | W^(k₂)]`.
///
/// `A₂` must be Hurwitz on the probe set; the limit state starts at zero
/// unless [`LimitSystem::with_initial`] says otherwise.
pub fn general_limit(
    a1: &CoefficientField,
    a2: &CoefficientField,
    b1: &CoefficientField,
    b2: &CoefficientField,
    sigma1: &CoefficientField,
    sigma2: &CoefficientField,
) -> Result<LimitSystem> {
    let (n1, n2) = a1.shape();
    let checks = [
        ("A2", a2.shape(), (n2, n2)),
        ("B1", b1.shape(), (n1, 1)),
        ("B2", b2.shape(), (n2, 1)),
        ("Sigma1", (sigma1.shape().0, 0), (n1, 0)),
        ("Sigma2", (sigma2.shape().0, 0), (n2, 0)),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Err(GleError::DimensionMismatch(format!("{name} is {got:?}, expected {want:?}")));
        }
    }
    require_positive_stable(&probe_points(n1, Some(&vec![0.0; n1])), |t, x| Ok(-a2.eval(t, x).into_owned()))?;
    let coef = GeneralCoef {
        a1: a1.clone(),
        a2: a2.clone(),
        b1: b1.clone(),
        b2: b2.clone(),
        s1: sigma1.clone(),
        s2: sigma2.clone(),
        shared: false,
    };
    let mut layout = StateLayout::default();
    layout.push("X", n1);
    LimitSystem::assemble(
        layout,
        (sigma1.shape().1, sigma2.shape().1),
        Provenance::General,
        Arc::new(coef),
        InitialSpec::deterministic(vec![0.0; n1]),
    )
}

// ---------------------------------------------------------------------------
// Small-mass limit of a GLE model

struct MemoryPart {
    start: usize,
    block: OUBlock,
    active: bool,
    /// `MC*`
    mc: Matrix,
}

struct NoisePart {
    start: usize,
    block: OUBlock,
    active: bool,
    channel: usize,
}

struct SmallMassCoef {
    model: GLEModel,
    mem: Vec<MemoryPart>,
    noise: Vec<NoisePart>,
    channels: usize,
    n: usize,
}

impl SmallMassCoef {
    /// γ = γ₀ + g δw h.
    fn gamma(&self, t: f64, x: &[f64]) -> Matrix {
        let m = &self.model;
        let mut g = m.gamma0.eval(t, x).into_owned();
        if let Some(dw) = &m.kernel.delta_weight {
            g += &*m.g.eval(t, x) * dw * &*m.h.eval(t, x);
        }
        g
    }

    fn gamma_deriv(&self, t: f64, x: &[f64], l: usize) -> Result<Matrix> {
        let m = &self.model;
        let mut dg = m.gamma0.deriv(t, x, l)?;
        if let Some(dw) = &m.kernel.delta_weight {
            dg += m.g.deriv(t, x, l)? * dw * &*m.h.eval(t, x) + &*m.g.eval(t, x) * dw * m.h.deriv(t, x, l)?;
        }
        Ok(dg)
    }

    /// Fast noise `[σ₀ | σ D_j]` on the channel layout `[k | q₃ | q₄]`.
    fn fast_noise(&self, t: f64, x: &[f64]) -> Matrix {
        let m = &self.model;
        let d = m.dim;
        let mut s = Matrix::zeros(d, self.channels);
        s.view_mut((0, 0), (d, m.k())).copy_from(&m.sigma0.eval(t, x));
        for p in &self.noise {
            if let (true, Some(dm)) = (p.active, &p.block.d) {
                s.view_mut((0, p.channel), (d, dm.ncols())).copy_from(&(&*m.sigma.eval(t, x) * dm));
            }
        }
        s
    }

    fn force(&self, t: f64, s: &[f64]) -> DVec {
        let m = &self.model;
        let x = &s[..m.dim];
        let mut f = vec_of(&m.fe, t, x);
        let q = m.q();
        let mut mem = DVec::zeros(q);
        for p in self.mem.iter().filter(|p| p.active) {
            mem += &p.block.c * DVec::from_column_slice(&s[p.start..p.start + p.block.dim()]);
        }
        f -= &*m.g.eval(t, x) * mem;
        let mut xi = DVec::zeros(m.r());
        for p in self.noise.iter().filter(|p| p.active) {
            xi += &p.block.c * DVec::from_column_slice(&s[p.start..p.start + p.block.dim()]);
        }
        f + &*m.sigma.eval(t, x) * xi
    }
}

impl LimitCoefficients for SmallMassCoef {
    fn base_drift(&self, t: f64, s: &[f64]) -> Result<DVec> {
        let d = self.model.dim;
        let x = &s[..d];
        let u = matops::inverse(&self.gamma(t, x))? * self.force(t, s);
        let mut out = DVec::zeros(self.n);
        out.rows_mut(0, d).copy_from(&u);
        let h = self.model.h.eval(t, x);
        for p in &self.mem {
            let y = DVec::from_column_slice(&s[p.start..p.start + p.block.dim()]);
            let dy = -(&p.block.gamma * y) + &p.mc * (&*h * &u);
            out.rows_mut(p.start, p.block.dim()).copy_from(&dy);
        }
        for p in &self.noise {
            let b = DVec::from_column_slice(&s[p.start..p.start + p.block.dim()]);
            out.rows_mut(p.start, p.block.dim()).copy_from(&(-(&p.block.gamma * b)));
        }
        Ok(out)
    }

    /// `S⁽⁰⁾_i = ∂_l(γ⁻¹)_ij J_lj` and `S⁽ᵏ⁾_i = ∂_l(MₖCₖ*hγ⁻¹)_ij J_lj`,
    /// where `γJ + Jγ* = Σ_fast Σ_fast*`.
    fn correction(&self, t: f64, s: &[f64]) -> Result<DVec> {
        let m = &self.model;
        let d = m.dim;
        let x = &s[..d];
        let mut out = DVec::zeros(self.n);
        let gamma = self.gamma(t, x);
        let sf = self.fast_noise(t, x);
        let q = matops::symmetrize(&(&sf * sf.transpose()));
        if q.amax() == 0.0 {
            return Ok(out);
        }
        let gi = matops::inverse(&gamma)?;
        let j = matops::lyapunov_solve(&(-&gamma), &q)?;
        let h = m.h.eval(t, x);
        for l in 0..d {
            let dgam = self.gamma_deriv(t, x, l)?;
            let dh = m.h.deriv(t, x, l)?;
            if dgam.amax() == 0.0 && dh.amax() == 0.0 {
                continue;
            }
            let dgi = -(&gi * dgam * &gi);
            let jl = j.row(l).transpose();
            let mut r0 = out.rows_mut(0, d);
            r0 += &dgi * &jl;
            for p in &self.mem {
                let dp = &p.mc * (&dh * &gi + &*h * &dgi);
                let mut r = out.rows_mut(p.start, p.block.dim());
                r += dp * &jl;
            }
        }
        Ok(out)
    }

    fn diffusion(&self, t: f64, s: &[f64]) -> Result<Matrix> {
        let m = &self.model;
        let d = m.dim;
        let x = &s[..d];
        let gi = matops::inverse(&self.gamma(t, x))?;
        let top = &gi * self.fast_noise(t, x);
        let mut g = Matrix::zeros(self.n, self.channels);
        g.view_mut((0, 0), (d, self.channels)).copy_from(&top);
        let h = m.h.eval(t, x);
        for p in &self.mem {
            g.view_mut((p.start, 0), (p.block.dim(), self.channels)).copy_from(&(&p.mc * &*h * &top));
        }
        for p in &self.noise {
            let sig = p.block.sigma.as_ref().expect("noise blocks carry Sigma");
            g.view_mut((p.start, p.channel), (p.block.dim(), sig.ncols())).copy_from(sig);
        }
        Ok(g)
    }
}

/// Small-mass limit `m → 0` of a GLE model on `(X, y¹, y², β³, β⁴)`.
///
/// The delta weight of the kernel (if any) is folded into the
/// instantaneous damping `γ = γ₀ + g δw h`, and white feedthrough of the
/// noise blocks joins σ₀ as fast noise on its own channel. Wiener channels
/// are those of the Markovian embedding, so the limit can be coupled to it.
pub fn small_mass_limit(model: &GLEModel) -> Result<LimitSystem> {
    model.check_dimensions()?;
    let f0_zero = model.gamma0.constant_value().is_some_and(|g| g.amax() == 0.0)
        && model.sigma0.constant_value().is_some_and(|s| s.amax() == 0.0)
        && model.kernel.delta_weight.as_ref().is_none_or(|w| w.amax() == 0.0);
    if f0_zero && model.kernel.alpha[0] && model.noise.alpha[0] {
        return Err(GleError::UnsupportedSwitches(
            "small-mass limit without instantaneous damping and with alpha1 = alpha3 = 1 is ill-defined".into(),
        ));
    }
    let d = model.dim;
    let mut layout = StateLayout::default();
    layout.push("x", d);
    let mut mem = Vec::new();
    for (i, (b, &a)) in model.kernel.blocks.iter().zip(&model.kernel.alpha).enumerate() {
        if let Some(b) = b {
            let start = layout.push(&format!("y{}", i + 1), b.dim());
            mem.push(MemoryPart { start, mc: &b.m * b.c.transpose(), block: b.clone(), active: a });
        }
    }
    let mut noise = Vec::new();
    let mut ch = model.k();
    let mut init = InitialSpec::deterministic(Vec::new());
    for (j, (b, &a)) in model.noise.blocks.iter().zip(&model.noise.alpha).enumerate() {
        if let Some(b) = b {
            let start = layout.push(&format!("beta{}", j + 3), b.dim());
            init.add_gaussian(start, &lower_factor(&b.m), |k| init_key(j + 3, k));
            noise.push(NoisePart { start, block: b.clone(), active: a, channel: ch });
            ch += b.channels();
        }
    }
    let n = layout.dim();
    init.mean = vec![0.0; n];
    init.mean[..d].copy_from_slice(&model.initial.x0);
    let coef = SmallMassCoef { model: model.clone(), mem, noise, channels: ch, n };
    require_positive_stable(&probe_points(d, Some(&model.initial.x0)), |t, x| Ok(coef.gamma(t, x)))?;
    LimitSystem::assemble(layout, (model.k(), ch - model.k()), Provenance::SmallMass, Arc::new(coef), init)
}

/// Pre-limit member of the small-mass family: the model with mass
/// `model.mass · eps`, tagged with `eps` for step-size control.
pub fn small_mass_prelimit(model: &GLEModel, eps: f64) -> Result<MarkovianSystem> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(GleError::EpsilonRange(eps));
    }
    let mut m = model.clone();
    m.mass *= eps;
    Ok(build_markovian_system(&m)?.with_epsilon(eps))
}

// ---------------------------------------------------------------------------
// Vanishing effective damping

/// The GLE family in which the mass (`m₀ε`), the fast memory scales
/// (`γ₂₂/ε`) and the fast noise scales (`γ₄₂/ε`) vanish together.
///
/// Memory and noise are bi-exponential blocks `C = [B B]` with slow
/// diagonals Γ₂₁, Γ₄₁ and fast diagonals γ₂₂, γ₄₂; `F₀ = 0`, only blocks 2
/// and 4 are switched on.
#[derive(Debug, Clone)]
pub struct VanishingSetup {
    pub dim: usize,
    pub m0: f64,
    pub g: CoefficientField,
    pub h: CoefficientField,
    pub sigma: CoefficientField,
    pub fe: CoefficientField,
    pub b2: Matrix,
    pub b4: Matrix,
    pub gamma21: Vec<f64>,
    pub gamma22: Vec<f64>,
    pub gamma41: Vec<f64>,
    pub gamma42: Vec<f64>,
    pub initial: InitialLaw,
}

impl VanishingSetup {
    /// One-dimensional family with `B₂ = B₄ = β`, `γ₂₂ = γ₄₂ = γ₂` and
    /// `Γ₂₁ = Γ₄₁ = Γ₁`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        g: CoefficientField,
        h: CoefficientField,
        sigma: CoefficientField,
        fe: CoefficientField,
        beta: f64,
        gamma1: f64,
        gamma2: f64,
        m0: f64,
    ) -> Self {
        Self {
            dim: 1,
            m0,
            g,
            h,
            sigma,
            fe,
            b2: matops::scalar(beta),
            b4: matops::scalar(beta),
            gamma21: vec![gamma1],
            gamma22: vec![gamma2],
            gamma41: vec![gamma1],
            gamma42: vec![gamma2],
            initial: InitialLaw { x0: vec![0.0], v0: vec![0.0] },
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.dim;
        let (p, r) = (self.gamma21.len(), self.gamma41.len());
        let (q, rr) = (self.b2.nrows(), self.b4.nrows());
        let ok = self.g.shape() == (d, q)
            && self.h.shape() == (q, d)
            && self.sigma.shape() == (d, rr)
            && self.fe.shape() == (d, 1)
            && self.b2.ncols() == p
            && self.b4.ncols() == r
            && self.gamma22.len() == p
            && self.gamma42.len() == r
            && self.initial.x0.len() == d
            && self.initial.v0.len() == d;
        if !ok {
            return Err(GleError::DimensionMismatch("vanishing-damping setup shapes disagree".into()));
        }
        if !(self.m0 > 0.0) {
            return Err(GleError::InvalidConfig(format!("m0 must be positive, got {}", self.m0)));
        }
        Ok(())
    }

    /// The GLE at scale `eps`.
    pub fn prelimit(&self, eps: f64) -> Result<GLEModel> {
        self.check()?;
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(GleError::EpsilonRange(eps));
        }
        let fast = |v: &[f64]| v.iter().map(|g| g / eps).collect::<Vec<_>>();
        let kb = biexp_realization(&self.gamma21, &fast(&self.gamma22), &self.b2)?;
        let nb = biexp_realization(&self.gamma41, &fast(&self.gamma42), &self.b4)?;
        let d = self.dim;
        Ok(GLEModel {
            dim: d,
            mass: self.m0 * eps,
            gamma0: CoefficientField::zeros(d, d),
            sigma0: CoefficientField::zeros(d, 0),
            g: self.g.clone(),
            h: self.h.clone(),
            sigma: self.sigma.clone(),
            fe: self.fe.clone(),
            kernel: KernelRealization::new([None, Some(kb)], [false, true], None)?,
            noise: NoiseRealization::new([None, Some(nb)], [false, true])?,
            initial: self.initial.clone(),
        })
    }

    /// Markovian embedding of [`Self::prelimit`], tagged with `eps`.
    pub fn prelimit_system(&self, eps: f64) -> Result<MarkovianSystem> {
        Ok(build_markovian_system(&self.prelimit(eps)?)?.with_epsilon(eps))
    }
}

struct VanishingCoef {
    s: VanishingSetup,
    p: usize,
    r: usize,
}

impl VanishingCoef {
    fn n(&self) -> usize {
        self.s.dim + self.p + self.r
    }

    fn nu(&self, t: f64, x: &[f64]) -> Result<Matrix> {
        let nu = &*self.s.g.eval(t, x) * &self.s.b2 * self.s.b2.transpose() * &*self.s.h.eval(t, x) * 0.5;
        matops::inverse(&nu).map_err(|_| GleError::SingularNu(x.to_vec()))
    }

    /// `(T, U)` at `x`, or their derivatives in `x_l` when `l` is given.
    fn tu(&self, t: f64, x: &[f64], l: Option<usize>) -> Result<(Matrix, Matrix)> {
        let s = &self.s;
        let (d, p, r) = (s.dim, self.p, self.r);
        let n = self.n();
        let field = |f: &CoefficientField| -> Result<Matrix> {
            match l {
                None => Ok(f.eval(t, x).into_owned()),
                Some(l) => f.deriv(t, x, l),
            }
        };
        let (g, h, sig) = (field(&s.g)?, field(&s.h)?, field(&s.sigma)?);
        let g21 = matops::diag(&s.gamma21);
        let g22 = matops::diag(&s.gamma22);
        let g42 = matops::diag(&s.gamma42);
        let b2h = s.b2.transpose() * &h;
        let mut tm = Matrix::zeros(n, n);
        let mut um = Matrix::zeros(n, n);
        if l.is_none() {
            tm.view_mut((0, 0), (d, d)).fill_with_identity();
            um.view_mut((d, d), (p, p)).copy_from(&g22);
            um.view_mut((d + p, d + p), (r, r)).copy_from(&g42);
        }
        tm.view_mut((d, 0), (p, d)).copy_from(&(&g21 * &b2h * -0.5));
        um.view_mut((0, d), (d, p)).copy_from(&(&g * &s.b2 / s.m0));
        um.view_mut((0, d + p), (d, r)).copy_from(&(&sig * &s.b4 / -s.m0));
        um.view_mut((d, 0), (p, d)).copy_from(&(&g22 * &b2h * -0.5));
        Ok((tm, um))
    }

    fn q_forcing(&self) -> Matrix {
        let n = self.n();
        let mut q = Matrix::zeros(n, n);
        let o = self.s.dim + self.p;
        for (k, g) in self.s.gamma42.iter().enumerate() {
            q[(o + k, o + k)] = g * g;
        }
        q
    }

    /// `J` with `UJ + JU* = diag(0, 0, γ₄₂²)`.
    fn j(&self, u: &Matrix) -> Result<Matrix> {
        matops::lyapunov_solve(&(-u), &self.q_forcing())
    }
}

impl LimitCoefficients for VanishingCoef {
    fn base_drift(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let s = &self.s;
        let (d, p, r) = (s.dim, self.p, self.r);
        let x = &st[..d];
        let y = DVec::from_column_slice(&st[d..d + p]);
        let z = DVec::from_column_slice(&st[d + p..d + p + r]);
        let force = vec_of(&s.fe, t, x) - &*s.g.eval(t, x) * (&s.b2 * &y) + &*s.sigma.eval(t, x) * (&s.b4 * &z);
        let px = self.nu(t, x)? * force;
        let g21 = matops::diag(&s.gamma21);
        let py = -(&g21 * s.b2.transpose() * &*s.h.eval(t, x) * &px) * 0.5 - &g21 * &y;
        let pz = -(matops::diag(&s.gamma41) * &z);
        let mut out = DVec::zeros(self.n());
        out.rows_mut(0, d).copy_from(&px);
        out.rows_mut(d, p).copy_from(&py);
        out.rows_mut(d + p, r).copy_from(&pz);
        Ok(out)
    }

    /// `Q_i = ∂_l H_ij J_jl`, `H = TU⁻¹`, with `∂H = ∂T U⁻¹ − H ∂U U⁻¹`.
    fn correction(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let d = self.s.dim;
        let x = &st[..d];
        let (tm, um) = self.tu(t, x, None)?;
        let ui = matops::inverse(&um)?;
        let hm = &tm * &ui;
        let j = self.j(&um)?;
        let mut out = DVec::zeros(self.n());
        for l in 0..d {
            let (dt, du) = self.tu(t, x, Some(l))?;
            if dt.amax() == 0.0 && du.amax() == 0.0 {
                continue;
            }
            let dh = dt * &ui - &hm * du * &ui;
            out += dh * j.column(l);
        }
        Ok(out)
    }

    fn diffusion(&self, t: f64, st: &[f64]) -> Result<Matrix> {
        let s = &self.s;
        let (d, p, r) = (s.dim, self.p, self.r);
        let x = &st[..d];
        let top = self.nu(t, x)? * &*s.sigma.eval(t, x) * &s.b4;
        let mid = matops::diag(&s.gamma21) * s.b2.transpose() * &*s.h.eval(t, x) * &top * -0.5;
        let mut g = Matrix::zeros(self.n(), r);
        g.view_mut((0, 0), (d, r)).copy_from(&top);
        g.view_mut((d, 0), (p, r)).copy_from(&mid);
        g.view_mut((d + p, 0), (r, r)).copy_from(&(-matops::diag(&s.gamma41)));
        Ok(g)
    }
}

/// Real parts in `[0.01, 100]` (log-spaced) times imaginary parts.
fn lambda_grid() -> Vec<Complex64> {
    let mut out = Vec::new();
    for k in 0..9 {
        let re = 10f64.powf(-2.0 + 0.5 * k as f64);
        for im in [0.0, 1.0, -1.0, 10.0, -10.0] {
            out.push(Complex64::new(re, im));
        }
    }
    out
}

/// Limit of [`VanishingSetup`] on `(X, Y, Z)` with `Y ∈ R^{d₂/2}`,
/// `Z ∈ R^{d₄/2}`.
///
/// Errors with `SingularNu` if `ν = ½gB₂B₂*h` is singular on a probe and
/// `NotStable` if `U` is not positive stable there. Invertibility of
/// `I + g κ̃(λ) h/(λm₀)` is only spot-checked on a λ-grid and reported
/// through [`LimitSystem::warnings`].
pub fn vanishing_damping_limit(setup: &VanishingSetup) -> Result<LimitSystem> {
    setup.check()?;
    let (d, p, r) = (setup.dim, setup.gamma21.len(), setup.gamma41.len());
    let coef = VanishingCoef { s: setup.clone(), p, r };
    let pts = probe_points(d, Some(&setup.initial.x0));
    for (t, x) in &pts {
        coef.nu(*t, x)?;
    }
    require_positive_stable(&pts, |t, x| Ok(coef.tu(t, x, None)?.1))?;
    let mut warnings = Vec::new();
    let g22 = matops::diag(&setup.gamma22);
    let q = setup.b2.nrows();
    'outer: for (t, x) in pts.iter().take(8) {
        let g = setup.g.eval(*t, x).map(|v| Complex64::new(v, 0.0));
        let h = setup.h.eval(*t, x).map(|v| Complex64::new(v, 0.0));
        for lam in lambda_grid() {
            let mut res = g22.map(|v| Complex64::new(v, 0.0));
            for k in 0..p {
                res[(k, k)] += lam;
            }
            let Some(res_inv) = res.try_inverse() else { continue };
            let b2 = setup.b2.map(|v| Complex64::new(v, 0.0));
            let kt = &b2 * res_inv * g22.map(|v| Complex64::new(v, 0.0)) * b2.transpose() * Complex64::new(0.5, 0.0);
            debug_assert_eq!(kt.nrows(), q);
            let m = nalgebra::DMatrix::<Complex64>::identity(d, d) + &g * kt * &h / (lam * setup.m0);
            let smin = m.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
            if smin < 1e-8 {
                warnings.push(format!("I + g k(lambda) h/(lambda m0) nearly singular at x = {x:?}, lambda = {lam}"));
                break 'outer;
            }
        }
    }
    let mut layout = StateLayout::default();
    layout.push("x", d);
    layout.push("y", p);
    let zs = layout.push("z", r);
    let mut init = InitialSpec::deterministic(vec![0.0; d + p + r]);
    init.mean[..d].copy_from_slice(&setup.initial.x0);
    let l = matops::diag(&setup.gamma41.iter().map(|g| (0.5 * g).sqrt()).collect::<Vec<_>>());
    init.add_gaussian(zs, &l, |k| init_key(4, k));
    let mut sys = LimitSystem::assemble(layout, (0, r), Provenance::VanishingDamping, Arc::new(coef), init)?;
    sys.warnings = warnings;
    Ok(sys)
}

// ---------------------------------------------------------------------------
// One-dimensional closed forms

/// Value and first derivative of a scalar function of x.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Jet {
    v: f64,
    d: f64,
}

impl Jet {
    fn of(f: &CoefficientField, t: f64, x: f64) -> Result<Self> {
        Ok(Self { v: scalar_of(f, t, &[x]), d: f.deriv(t, &[x], 0)?[(0, 0)] })
    }

    fn recip(self) -> Self {
        Self { v: 1.0 / self.v, d: -self.d / (self.v * self.v) }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet { v: -self.v, d: -self.d }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

/// Scalar coefficient fields of a one-dimensional GLE.
#[derive(Debug, Clone)]
pub struct Scalar1d {
    pub g: CoefficientField,
    pub h: CoefficientField,
    pub sigma: CoefficientField,
    pub fe: CoefficientField,
    pub x0: f64,
}

impl Scalar1d {
    pub fn new(g: CoefficientField, h: CoefficientField, sigma: CoefficientField, fe: CoefficientField) -> Self {
        Self { g, h, sigma, fe, x0: 0.0 }
    }

    fn check(&self) -> Result<()> {
        for (name, f) in [("g", &self.g), ("h", &self.h), ("sigma", &self.sigma), ("fe", &self.fe)] {
            if f.shape() != (1, 1) {
                return Err(GleError::DimensionMismatch(format!("{name} must be scalar, got {:?}", f.shape())));
            }
        }
        Ok(())
    }

    fn jets(&self, t: f64, x: f64) -> Result<(Jet, Jet, Jet)> {
        Ok((Jet::of(&self.g, t, x)?, Jet::of(&self.h, t, x)?, Jet::of(&self.sigma, t, x)?))
    }

    fn fe(&self, t: f64, x: f64) -> f64 {
        scalar_of(&self.fe, t, &[x])
    }

    /// Spot-checks `g = φσ` on the probe set.
    fn check_phi(&self, phi: f64) -> Result<()> {
        if !(phi > 0.0) {
            return Err(GleError::InvalidConfig(format!("phi must be positive, got {phi}")));
        }
        for (t, x) in probe_points(1, Some(&[self.x0])) {
            let (g, s) = (scalar_of(&self.g, t, &x), scalar_of(&self.sigma, t, &x));
            if (g - phi * s).abs() > 1e-10 * (1.0 + g.abs()) {
                return Err(GleError::HypothesisViolation(format!("g != phi*sigma at x = {}", x[0])));
            }
        }
        Ok(())
    }
}

/// Parameters of the vanishing-damping scaling.
#[derive(Debug, Clone, Copy)]
struct Scaling {
    m0: f64,
    gamma2: f64,
}

/// The three-equation `(X, Y, Z)` limits of the one-dimensional models.
struct Corollary1d {
    f: Scalar1d,
    beta: f64,
    gamma1: f64,
    scaling: Option<Scaling>,
}

impl Corollary1d {
    /// `(S₁, S₂)`.
    fn drifts(&self, t: f64, x: f64) -> Result<(f64, f64)> {
        let (g, h, s) = self.f.jets(t, x)?;
        let (b, g1) = (self.beta, self.gamma1);
        let gh = g * h;
        let s2 = s.v * s.v;
        let mut d1 = 2.0 / (b * b) * gh.recip().d * s2 / gh.v;
        let mut d2 = -g1 / b * g.recip().d * s2 / gh.v;
        if let Some(sc) = self.scaling {
            let den = b * b * gh.v + 4.0 * sc.m0 * sc.gamma2;
            d1 += -h.recip().d * 4.0 * s2 / (g.v * den) + (s / gh).d * 4.0 * s.v / den;
            d2 += -(s / g).d * 2.0 * g1 * b * s.v / den;
        }
        Ok((d1, d2))
    }
}

impl LimitCoefficients for Corollary1d {
    fn base_drift(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let (x, y, z) = (st[0], st[1], st[2]);
        let (g, h, s) = (scalar_of(&self.f.g, t, &[x]), scalar_of(&self.f.h, t, &[x]), scalar_of(&self.f.sigma, t, &[x]));
        let fe = self.f.fe(t, x);
        let (b, g1) = (self.beta, self.gamma1);
        Ok(DVec::from_vec(vec![
            2.0 * fe / (b * b * g * h) - 2.0 * y / (b * h) + 2.0 * s * z / (b * g * h),
            -g1 * fe / (b * g) - g1 * s * z / g,
            -g1 * z,
        ]))
    }

    fn correction(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let (d1, d2) = self.drifts(t, st[0])?;
        Ok(DVec::from_vec(vec![d1, d2, 0.0]))
    }

    fn diffusion(&self, t: f64, st: &[f64]) -> Result<Matrix> {
        let x = st[0];
        let (g, h, s) = (scalar_of(&self.f.g, t, &[x]), scalar_of(&self.f.h, t, &[x]), scalar_of(&self.f.sigma, t, &[x]));
        let (b, g1) = (self.beta, self.gamma1);
        Ok(Matrix::from_column_slice(3, 1, &[2.0 * s / (b * g * h), -g1 * s / g, -g1]))
    }
}

/// `(X, U)` with `U = φY − Z`, read off a three-equation system whose `X`
/// and `U` coefficients depend on `(Y, Z)` only through `U` (true when
/// `g = φσ`).
struct PhiReduced {
    inner: Arc<dyn LimitCoefficients>,
    phi: f64,
}

impl PhiReduced {
    fn lift(&self, st: &[f64]) -> [f64; 3] {
        [st[0], st[1] / self.phi, 0.0]
    }

    fn project(&self, v: DVec) -> DVec {
        DVec::from_vec(vec![v[0], self.phi * v[1] - v[2]])
    }
}

impl LimitCoefficients for PhiReduced {
    fn base_drift(&self, t: f64, st: &[f64]) -> Result<DVec> {
        Ok(self.project(self.inner.base_drift(t, &self.lift(st))?))
    }

    fn correction(&self, t: f64, st: &[f64]) -> Result<DVec> {
        Ok(self.project(self.inner.correction(t, &self.lift(st))?))
    }

    fn diffusion(&self, t: f64, st: &[f64]) -> Result<Matrix> {
        let g = self.inner.diffusion(t, &self.lift(st))?;
        let mut out = Matrix::zeros(2, g.ncols());
        out.row_mut(0).copy_from(&g.row(0));
        out.row_mut(1).copy_from(&(g.row(1) * self.phi - g.row(2)));
        Ok(out)
    }
}

/// `Z(0) ~ N(0, Γ₁/2)`, coupled to the stationary β⁴ of the pre-limit model.
fn corollary_system(coef: Corollary1d, phi: Option<f64>, provenance: Provenance) -> Result<LimitSystem> {
    if !(coef.beta > 0.0 && coef.gamma1 > 0.0) {
        return Err(GleError::InvalidConfig("beta and Gamma1 must be positive".into()));
    }
    coef.f.check()?;
    let x0 = coef.f.x0;
    let zsd = (0.5 * coef.gamma1).sqrt();
    let mut layout = StateLayout::default();
    layout.push("x", 1);
    match phi {
        None => {
            layout.push("y", 1);
            layout.push("z", 1);
            let init = InitialSpec {
                mean: vec![x0, 0.0, 0.0],
                terms: vec![InitTerm { index: 2, key: init_key(4, 0), coeff: zsd }],
            };
            LimitSystem::assemble(layout, (0, 1), provenance, Arc::new(coef), init)
        }
        Some(phi) => {
            coef.f.check_phi(phi)?;
            layout.push("u", 1);
            let init = InitialSpec { mean: vec![x0, 0.0], terms: vec![InitTerm { index: 1, key: init_key(4, 0), coeff: -zsd }] };
            let reduced = PhiReduced { inner: Arc::new(coef), phi };
            LimitSystem::assemble(layout, (0, 1), provenance, Arc::new(reduced), init)
        }
    }
}

/// Small-mass limit of the one-dimensional model with kernel
/// `(β²/2)(δ(t) − Γ₁e^{−Γ₁|t|})`, on `(X, Y, Z)`; with `phi = Some(φ)`
/// (requiring `g = φσ`) the reduced `(X, U = φY − Z)` system.
pub fn corollary_small_mass_1d(f: &Scalar1d, beta: f64, gamma1: f64, phi: Option<f64>) -> Result<LimitSystem> {
    corollary_system(Corollary1d { f: f.clone(), beta, gamma1, scaling: None }, phi, Provenance::SmallMass1d)
}

/// Limit of the one-dimensional bi-exponential model as `m = m₀ε`,
/// `Γ₂ = γ₂/ε`, `ε → 0`; same layout conventions as
/// [`corollary_small_mass_1d`].
pub fn corollary_vanishing_1d(
    f: &Scalar1d,
    beta: f64,
    gamma1: f64,
    gamma2: f64,
    m0: f64,
    phi: Option<f64>,
) -> Result<LimitSystem> {
    if !(gamma2 > 0.0 && m0 > 0.0) {
        return Err(GleError::InvalidConfig("gamma2 and m0 must be positive".into()));
    }
    let coef = Corollary1d { f: f.clone(), beta, gamma1, scaling: Some(Scaling { m0, gamma2 }) };
    corollary_system(coef, phi, Provenance::Vanishing1d)
}

struct Fdt {
    sigma: CoefficientField,
    fe: CoefficientField,
    beta: f64,
    gamma1: f64,
}

impl LimitCoefficients for Fdt {
    fn base_drift(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let (x, u) = (st[0], st[1]);
        let s = scalar_of(&self.sigma, t, &[x]);
        let fe = scalar_of(&self.fe, t, &[x]);
        let b = self.beta;
        Ok(DVec::from_vec(vec![2.0 * fe / (b * b * s * s) - 2.0 * u / (b * s), -self.gamma1 * fe / (b * s)]))
    }

    fn correction(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let s = Jet::of(&self.sigma, t, st[0])?;
        let b = self.beta;
        Ok(DVec::from_vec(vec![2.0 / (b * b) * (s * s).recip().d, -self.gamma1 / b * s.recip().d]))
    }

    fn diffusion(&self, t: f64, st: &[f64]) -> Result<Matrix> {
        let s = scalar_of(&self.sigma, t, &[st[0]]);
        Ok(Matrix::from_column_slice(2, 1, &[2.0 / (self.beta * s), 0.0]))
    }
}

/// The `(X, U)` system both one-dimensional limits reduce to when
/// `g = h = σ`. `σ` must be strictly positive on the probe set.
pub fn fdt_reduction(sigma: &CoefficientField, fe: &CoefficientField, beta: f64, gamma1: f64, x0: f64) -> Result<LimitSystem> {
    for (name, f) in [("sigma", sigma), ("fe", fe)] {
        if f.shape() != (1, 1) {
            return Err(GleError::DimensionMismatch(format!("{name} must be scalar")));
        }
    }
    for (t, x) in probe_points(1, Some(&[x0])) {
        let s = scalar_of(sigma, t, &x);
        if !(s > 0.0) {
            return Err(GleError::NonPositiveSigma(s));
        }
    }
    let zsd = (0.5 * gamma1).sqrt();
    let mut layout = StateLayout::default();
    layout.push("x", 1);
    layout.push("u", 1);
    let init = InitialSpec { mean: vec![x0, 0.0], terms: vec![InitTerm { index: 1, key: init_key(4, 0), coeff: -zsd }] };
    let coef = Fdt { sigma: sigma.clone(), fe: fe.clone(), beta, gamma1 };
    LimitSystem::assemble(layout, (0, 1), Provenance::Fdt, Arc::new(coef), init)
}

/// Parameters of the one-dimensional hyper-diffusive limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub m0: f64,
}

struct Hyper {
    g: CoefficientField,
    sigma: CoefficientField,
    fe: CoefficientField,
    p: HyperParams,
}

impl Hyper {
    /// `∂(1/g)σ²/g² + ∂(σ/g)·2β²σ/D`, shared by both `Z` equations.
    fn z_term(&self, g: Jet, s: Jet, den: f64) -> f64 {
        let b2 = self.p.beta * self.p.beta;
        g.recip().d * s.v * s.v / (g.v * g.v) + (s / g).d * 2.0 * b2 * s.v / den
    }
}

impl LimitCoefficients for Hyper {
    fn base_drift(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let [x, z0, z1, y0, y1] = [st[0], st[1], st[2], st[3], st[4]];
        let g = scalar_of(&self.g, t, &[x]);
        let s = scalar_of(&self.sigma, t, &[x]);
        let fe = scalar_of(&self.fe, t, &[x]);
        let HyperParams { beta: b, gamma1: g1, gamma2: g2, .. } = self.p;
        let (pr, sm) = (g1 * g2, g1 + g2);
        Ok(DVec::from_vec(vec![
            2.0 * fe / (b * b * g * g) + 2.0 / (b * b * g) * (pr * z0 + sm * z1) - 2.0 * s / (b * b * g * g) * (pr * y0 + sm * y1),
            -fe / (g * sm) - pr / sm * z0 + pr * s / (g * sm) * y0 + s / g * y1,
            fe / g - pr * s / g * y0 - s / g * sm * y1,
            y1,
            -pr * y0 - sm * y1,
        ]))
    }

    fn correction(&self, t: f64, st: &[f64]) -> Result<DVec> {
        let x = st[0];
        let g = Jet::of(&self.g, t, x)?;
        let s = Jet::of(&self.sigma, t, x)?;
        let HyperParams { beta: b, gamma1: g1, gamma2: g2, gamma3: g3, m0 } = self.p;
        let den = g.v * g.v * b * b + 4.0 * g3 * m0;
        let s2 = s.v * s.v;
        let cx = 2.0 / (b * b) * (g * g).recip().d * s2 / (g.v * g.v) - g.recip().d * 4.0 * s2 / (g.v * den)
            + (s / (g * g)).d * 4.0 * s.v / den;
        let zt = self.z_term(g, s, den);
        Ok(DVec::from_vec(vec![cx, -zt / (g1 + g2), zt, 0.0, 0.0]))
    }

    fn diffusion(&self, t: f64, st: &[f64]) -> Result<Matrix> {
        let x = st[0];
        let g = scalar_of(&self.g, t, &[x]);
        let s = scalar_of(&self.sigma, t, &[x]);
        let HyperParams { beta: b, gamma1: g1, gamma2: g2, .. } = self.p;
        Ok(Matrix::from_column_slice(5, 1, &[2.0 * s / (b * g * g), -b * s / (g * (g1 + g2)), s * b / g, 0.0, b]))
    }
}

/// The five-equation limit `(X, Z⁰, Z¹, Y⁰, Y¹)` of the one-dimensional
/// hyper-diffusive model with `g = h`, as `m = m₀ε`, `Γ₃ = γ₃/ε`, `ε → 0`.
///
/// `Y` is the limiting noise state and starts from its stationary law;
/// `Z` starts at zero.
pub fn hyper_limit_1d(g: &CoefficientField, sigma: &CoefficientField, fe: &CoefficientField, p: HyperParams, x0: f64) -> Result<LimitSystem> {
    for (name, f) in [("g", g), ("sigma", sigma), ("fe", fe)] {
        if f.shape() != (1, 1) {
            return Err(GleError::DimensionMismatch(format!("{name} must be scalar")));
        }
    }
    if [p.beta, p.gamma1, p.gamma2, p.gamma3, p.m0].iter().any(|v| !(*v > 0.0)) {
        return Err(GleError::InvalidConfig("hyper parameters must be positive".into()));
    }
    let mut layout = StateLayout::default();
    layout.push("x", 1);
    layout.push("z0", 1);
    layout.push("z1", 1);
    let ys = layout.push("y0", 1);
    layout.push("y1", 1);
    let mut init = InitialSpec::deterministic(vec![x0, 0.0, 0.0, 0.0, 0.0]);
    init.add_gaussian(ys, &lower_factor(&hyper_noise_covariance(&p)?), |k| init_key(4, k));
    let coef = Hyper { g: g.clone(), sigma: sigma.clone(), fe: fe.clone(), p };
    LimitSystem::assemble(layout, (0, 1), Provenance::Hyper1d, Arc::new(coef), init)
}

/// Stationary covariance of `(Y⁰, Y¹)` in the hyper-diffusive limit.
pub fn hyper_noise_covariance(p: &HyperParams) -> Result<Matrix> {
    let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, -p.gamma1 * p.gamma2, -(p.gamma1 + p.gamma2)]);
    let q = Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, p.beta * p.beta]);
    matops::lyapunov_solve(&a, &q)
}
