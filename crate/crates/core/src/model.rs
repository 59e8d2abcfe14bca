//! GLE assembly and its Markovian embedding.
//!
//! The model is
//!
//! ```text
//! m dv = −γ₀ v dt + σ₀ dW − g ∫₀ᵗ κ(t−s) h v ds dt + σ ξ dt + F_e dt
//! ```
//!
//! and [`build_markovian_system`] turns it into an SDE for
//! `(x, v, y¹, y², β³, β⁴)` with `yⁱ' = −Γᵢyⁱ + MᵢCᵢ* h v`.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GleError, Result};
use crate::expr::Expr;
use crate::matops::{self, Matrix, DEFAULT_MARGIN};
use crate::realization::{KernelRealization, NoiseRealization, OUBlock};
use crate::simulate::{AffineParts, OuSlice, SdeSystem, StateLayout};

type EvalFn = dyn Fn(f64, &[f64]) -> Matrix + Send + Sync;
type DerivFn = dyn Fn(f64, &[f64], usize) -> Matrix + Send + Sync;

#[derive(Clone)]
enum FieldKind {
    Constant(Matrix),
    Expr {
        cells: Vec<Expr>,
        /// `derivs[l]` holds ∂/∂x_l of every cell (row-major).
        derivs: Vec<Vec<Expr>>,
    },
    Custom {
        eval: Arc<EvalFn>,
        deriv: Option<Arc<DerivFn>>,
    },
}

/// A matrix-valued coefficient of `(t, x)`.
#[derive(Clone)]
pub struct CoefficientField {
    rows: usize,
    cols: usize,
    kind: FieldKind,
    /// Declared bound on the max-abs entry, checked by [`validate_model`].
    pub bound: Option<f64>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            FieldKind::Constant(m) => format!("Constant({:?})", matops::to_rows(m)),
            FieldKind::Expr { cells, .. } => {
                format!("Expr({:?})", cells.iter().map(|c| c.to_string()).collect::<Vec<_>>())
            }
            FieldKind::Custom { deriv, .. } => format!("Custom(analytic deriv: {})", deriv.is_some()),
        };
        write!(f, "CoefficientField {}x{} {kind}", self.rows, self.cols)
    }
}

impl CoefficientField {
    pub fn constant(m: Matrix) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), kind: FieldKind::Constant(m), bound: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(matops::scalar(v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Matrix::zeros(rows, cols))
    }

    /// Expression field from row-major cell sources.
    pub fn expr(rows: usize, cols: usize, cells: &[&str]) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(GleError::DimensionMismatch(format!("{} cells for a {rows}x{cols} field", cells.len())));
        }
        let parsed = cells.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_exprs(rows, cols, parsed))
    }

    pub fn from_exprs(rows: usize, cols: usize, cells: Vec<Expr>) -> Self {
        if cells.iter().all(|c| c.max_var().is_none() && !c.uses_t()) {
            let m = Matrix::from_row_iterator(rows, cols, cells.iter().map(|c| c.eval(0.0, &[])));
            return Self::constant(m);
        }
        let nvars = cells.iter().filter_map(|c| c.max_var()).max().map_or(0, |k| k + 1);
        let derivs = (0..nvars).map(|l| cells.iter().map(|c| c.derivative(l)).collect()).collect();
        Self { rows, cols, kind: FieldKind::Expr { cells, derivs }, bound: None }
    }

    pub fn scalar_expr(src: &str) -> Result<Self> {
        Self::expr(1, 1, &[src])
    }

    /// User closure; without `deriv`, derivatives fall back to finite differences.
    pub fn custom(
        rows: usize,
        cols: usize,
        eval: impl Fn(f64, &[f64]) -> Matrix + Send + Sync + 'static,
        deriv: Option<Arc<DerivFn>>,
    ) -> Self {
        Self { rows, cols, kind: FieldKind::Custom { eval: Arc::new(eval), deriv }, bound: None }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Constant in both `t` and `x`.
    pub fn is_constant(&self) -> bool {
        matches!(self.kind, FieldKind::Constant(_))
    }

    pub fn constant_value(&self) -> Option<&Matrix> {
        match &self.kind {
            FieldKind::Constant(m) => Some(m),
            _ => None,
        }
    }

    pub fn has_analytic_deriv(&self) -> bool {
        match &self.kind {
            FieldKind::Constant(_) | FieldKind::Expr { .. } => true,
            FieldKind::Custom { deriv, .. } => deriv.is_some(),
        }
    }

    /// Same values, but derivatives forced through finite differences.
    pub fn without_analytic_deriv(&self) -> Self {
        let me = self.clone();
        let (r, c) = self.shape();
        Self { rows: r, cols: c, kind: FieldKind::Custom { eval: Arc::new(move |t, x| me.eval(t, x).into_owned()), deriv: None }, bound: self.bound }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Cow<'_, Matrix> {
        match &self.kind {
            FieldKind::Constant(m) => Cow::Borrowed(m),
            FieldKind::Expr { cells, .. } => {
                Cow::Owned(Matrix::from_row_iterator(self.rows, self.cols, cells.iter().map(|c| c.eval(t, x))))
            }
            FieldKind::Custom { eval, .. } => Cow::Owned(eval(t, x)),
        }
    }

    /// ∂/∂x_l, analytic when available, otherwise [`fd_derivative`].
    pub fn deriv(&self, t: f64, x: &[f64], l: usize) -> Result<Matrix> {
        match &self.kind {
            FieldKind::Constant(_) => Ok(Matrix::zeros(self.rows, self.cols)),
            FieldKind::Expr { derivs, .. } => Ok(match derivs.get(l) {
                Some(d) => Matrix::from_row_iterator(self.rows, self.cols, d.iter().map(|c| c.eval(t, x))),
                None => Matrix::zeros(self.rows, self.cols),
            }),
            FieldKind::Custom { deriv: Some(d), .. } => Ok(d(t, x, l)),
            FieldKind::Custom { deriv: None, .. } => fd_derivative(self, t, x, l),
        }
    }
}

/// Central difference in `x_l` with `h = max(1e-6, 1e-6·|x_l|)`, one
/// Richardson step (`(4D(h/2) − D(h))/3`).
pub fn fd_derivative(f: &CoefficientField, t: f64, x: &[f64], l: usize) -> Result<Matrix> {
    if l >= x.len() {
        return Err(GleError::DimensionMismatch(format!("derivative index {l} for a {}-vector", x.len())));
    }
    let h = 1e-6f64.max(1e-6 * x[l].abs());
    let mut probe = x.to_vec();
    let mut central = |h: f64| {
        probe[l] = x[l] + h;
        let fp = f.eval(t, &probe).into_owned();
        probe[l] = x[l] - h;
        let fm = f.eval(t, &probe).into_owned();
        (fp - fm) / (2.0 * h)
    };
    let d1 = central(h);
    let d2 = central(0.5 * h);
    let d = (d2 * 4.0 - d1) / 3.0;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(GleError::NonFinite(format!("finite difference in x{l} at {x:?}")));
    }
    Ok(d)
}

/// Deterministic initial position and velocity; `β_j(0) ~ N(0, M_j)` and
/// `y_i(0) = 0` are implied by the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GLEModel {
    pub dim: usize,
    pub mass: f64,
    pub gamma0: CoefficientField,
    pub sigma0: CoefficientField,
    pub g: CoefficientField,
    pub h: CoefficientField,
    pub sigma: CoefficientField,
    pub fe: CoefficientField,
    pub kernel: KernelRealization,
    pub noise: NoiseRealization,
    pub initial: InitialLaw,
}

impl GLEModel {
    /// Free particle (`F_e = 0`, no white noise) with unit g, h, σ in `dim`
    /// dimensions; memory and noise outputs must then be `dim`-dimensional.
    pub fn free_particle(dim: usize, mass: f64, kernel: KernelRealization, noise: NoiseRealization) -> Self {
        let q = kernel.out_dim().unwrap_or(dim);
        let r = noise.out_dim().unwrap_or(dim);
        Self {
            dim,
            mass,
            gamma0: CoefficientField::zeros(dim, dim),
            sigma0: CoefficientField::zeros(dim, 0),
            g: CoefficientField::constant(Matrix::identity(dim, q)),
            h: CoefficientField::constant(Matrix::identity(q, dim)),
            sigma: CoefficientField::constant(Matrix::identity(dim, r)),
            fe: CoefficientField::zeros(dim, 1),
            kernel,
            noise,
            initial: InitialLaw { x0: vec![0.0; dim], v0: vec![0.0; dim] },
        }
    }

    pub fn q(&self) -> usize {
        self.g.shape().1
    }

    pub fn r(&self) -> usize {
        self.sigma.shape().1
    }

    pub fn k(&self) -> usize {
        self.sigma0.shape().1
    }

    /// Shape checks for every coefficient and realization.
    pub fn check_dimensions(&self) -> Result<()> {
        let d = self.dim;
        let (q, r, k) = (self.q(), self.r(), self.k());
        let want = [
            ("gamma0", &self.gamma0, (d, d)),
            ("sigma0", &self.sigma0, (d, k)),
            ("g", &self.g, (d, q)),
            ("h", &self.h, (q, d)),
            ("sigma", &self.sigma, (d, r)),
            ("fe", &self.fe, (d, 1)),
        ];
        for (name, f, shape) in want {
            if f.shape() != shape {
                return Err(GleError::DimensionMismatch(format!("{name} is {:?}, expected {:?}", f.shape(), shape)));
            }
        }
        if let Some(kq) = self.kernel.out_dim() {
            if kq != q {
                return Err(GleError::DimensionMismatch(format!("kernel output {kq} but g has {q} columns")));
            }
        }
        if let Some(nr) = self.noise.out_dim() {
            if nr != r {
                return Err(GleError::DimensionMismatch(format!("noise output {nr} but sigma has {r} columns")));
            }
        }
        if self.initial.x0.len() != d || self.initial.v0.len() != d {
            return Err(GleError::DimensionMismatch("initial law must be d-dimensional".into()));
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(GleError::InvalidConfig(format!("mass must be positive, got {}", self.mass)));
        }
        Ok(())
    }

    pub fn all_constant(&self) -> bool {
        [&self.gamma0, &self.sigma0, &self.g, &self.h, &self.sigma, &self.fe].iter().all(|f| f.is_constant())
    }

    /// Copy with every coefficient's derivative forced through finite differences.
    pub fn with_fd_derivatives(&self) -> Self {
        let mut m = self.clone();
        for f in [&mut m.gamma0, &mut m.sigma0, &mut m.g, &mut m.h, &mut m.sigma, &mut m.fe] {
            if !f.is_constant() {
                *f = f.without_analytic_deriv();
            }
        }
        m
    }
}

/// Key of the standard normal used for component `i` of `β_j(0)`; limit
/// systems reuse the same keys to couple their initial data.
pub fn init_key(slot: usize, i: usize) -> u32 {
    ((slot as u32) << 8) | i as u32
}

/// The extended SDE `(x, v, y¹, y², β³, β⁴)`.
pub struct MarkovianSystem {
    pub model: GLEModel,
    layout: StateLayout,
    /// (slot, block) for i = 1, 2 and j = 3, 4.
    mem: Vec<(usize, OUBlock, bool)>,
    noise: Vec<(usize, OUBlock, bool, usize)>,
    delta: Option<Matrix>,
    wiener: usize,
    affine: Option<AffineParts>,
    ou: Vec<OuSlice>,
    /// Small parameter this system was built for, if any.
    pub epsilon: Option<f64>,
    /// Number of leading Wiener channels treated as "slow" when coupling.
    pub slow_channels: usize,
}

impl fmt::Debug for MarkovianSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkovianSystem")
            .field("layout", &self.layout)
            .field("wiener", &self.wiener)
            .field("affine", &self.affine.is_some())
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

/// Markovian embedding; coefficients constant in `(t, x)` get a
/// precomputed affine form used by the integrator's fast path.
pub fn build_markovian_system(model: &GLEModel) -> Result<MarkovianSystem> {
    model.check_dimensions()?;
    let d = model.dim;
    let mut layout = StateLayout::default();
    layout.push("x", d);
    layout.push("v", d);
    let mut mem = Vec::new();
    for (i, (b, &a)) in model.kernel.blocks.iter().zip(&model.kernel.alpha).enumerate() {
        if let Some(b) = b {
            layout.push(&format!("y{}", i + 1), b.dim());
            mem.push((i + 1, b.clone(), a));
        }
    }
    let mut noise = Vec::new();
    let mut ch = model.k();
    let mut ou = Vec::new();
    for (j, (b, &a)) in model.noise.blocks.iter().zip(&model.noise.alpha).enumerate() {
        if let Some(b) = b {
            let name = format!("beta{}", j + 3);
            let start = layout.push(&name, b.dim());
            ou.push(OuSlice {
                start,
                len: b.dim(),
                gamma: b.gamma.clone(),
                sigma: b.sigma.clone().expect("noise blocks carry Sigma"),
                channel_start: ch,
                m: b.m.clone(),
            });
            noise.push((j + 3, b.clone(), a, ch));
            ch += b.channels();
        }
    }
    let mut sys = MarkovianSystem {
        model: model.clone(),
        layout,
        mem,
        noise,
        delta: model.kernel.delta_weight.clone(),
        wiener: ch,
        affine: None,
        ou,
        epsilon: None,
        slow_channels: model.k(),
    };
    if model.all_constant() {
        sys.affine = Some(sys.linearize());
    }
    Ok(sys)
}

impl MarkovianSystem {
    fn slice(&self, name: &str) -> (usize, usize) {
        let s = self.layout.get(name).expect("slice exists by construction");
        (s.start, s.len)
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = Some(eps);
        self
    }

    /// Evaluate drift with explicit coefficient values (shared by the
    /// general and the affine paths).
    fn drift_with(&self, t: f64, s: &[f64], out: &mut [f64], coef: &Coefs) {
        let d = self.model.dim;
        let (xs, _) = self.slice("x");
        let (vs, _) = self.slice("v");
        let v = &s[vs..vs + d];
        out[xs..xs + d].copy_from_slice(v);
        let vv = nalgebra::DVectorView::from_slice(v, d);
        let hv = &*coef.h * vv;
        let mut force = -(&*coef.gamma0 * vv) + coef.fe.column(0);
        let q = self.model.q();
        let mut mem_out = nalgebra::DVector::zeros(q);
        if let Some(dw) = &self.delta {
            mem_out += dw * &hv;
        }
        for (slot, b, a) in &self.mem {
            let (ys, yl) = self.slice(&format!("y{slot}"));
            let y = nalgebra::DVectorView::from_slice(&s[ys..ys + yl], yl);
            if *a {
                mem_out += &b.c * y;
            }
            let dy = -(&b.gamma * y) + &b.m * (b.c.transpose() * &hv);
            out[ys..ys + yl].copy_from_slice(dy.as_slice());
        }
        force -= &*coef.g * mem_out;
        let r = self.model.r();
        let mut xi = nalgebra::DVector::zeros(r);
        for (slot, b, a, _) in &self.noise {
            let (bs, bl) = self.slice(&format!("beta{slot}"));
            let beta = nalgebra::DVectorView::from_slice(&s[bs..bs + bl], bl);
            if *a {
                xi += &b.c * beta;
            }
            let db = -(&b.gamma * beta);
            out[bs..bs + bl].copy_from_slice(db.as_slice());
        }
        force += &*coef.sigma * xi;
        let _ = t;
        for i in 0..d {
            out[vs + i] = force[i] / self.model.mass;
        }
    }

    fn diffusion_with(&self, out: &mut Matrix, coef: &Coefs) {
        out.fill(0.0);
        let d = self.model.dim;
        let (vs, _) = self.slice("v");
        let k = self.model.k();
        let inv_m = 1.0 / self.model.mass;
        out.view_mut((vs, 0), (d, k)).copy_from(&(&*coef.sigma0 * inv_m));
        for (slot, b, a, ch) in &self.noise {
            let (bs, bl) = self.slice(&format!("beta{slot}"));
            let sig = b.sigma.as_ref().unwrap();
            out.view_mut((bs, *ch), (bl, sig.ncols())).copy_from(sig);
            if let (true, Some(dm)) = (*a, &b.d) {
                out.view_mut((vs, *ch), (d, dm.ncols())).copy_from(&(&*coef.sigma * dm * inv_m));
            }
        }
    }

    fn coefs(&self, t: f64, x: &[f64]) -> Coefs<'_> {
        let m = &self.model;
        Coefs {
            gamma0: m.gamma0.eval(t, x),
            sigma0: m.sigma0.eval(t, x),
            g: m.g.eval(t, x),
            h: m.h.eval(t, x),
            sigma: m.sigma.eval(t, x),
            fe: m.fe.eval(t, x),
        }
    }

    fn linearize(&self) -> AffineParts {
        let n = self.layout.dim();
        let coef = self.coefs(0.0, &vec![0.0; self.model.dim]);
        let zero = vec![0.0; n];
        let mut b = vec![0.0; n];
        self.drift_with(0.0, &zero, &mut b, &coef);
        let mut a = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.drift_with(0.0, &e, &mut col, &coef);
            for i in 0..n {
                a[(i, j)] = col[i] - b[i];
            }
            e[j] = 0.0;
        }
        let mut g = Matrix::zeros(n, self.wiener);
        self.diffusion_with(&mut g, &coef);
        AffineParts { a, b: nalgebra::DVector::from_vec(b), g }
    }
}

struct Coefs<'a> {
    gamma0: Cow<'a, Matrix>,
    sigma0: Cow<'a, Matrix>,
    g: Cow<'a, Matrix>,
    h: Cow<'a, Matrix>,
    sigma: Cow<'a, Matrix>,
    fe: Cow<'a, Matrix>,
}

impl SdeSystem for MarkovianSystem {
    fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn wiener_dims(&self) -> (usize, usize) {
        (self.slow_channels, self.wiener - self.slow_channels)
    }

    fn drift(&self, t: f64, s: &[f64], out: &mut [f64]) {
        if let Some(af) = &self.affine {
            af.drift(s, out);
            return;
        }
        let d = self.model.dim;
        let coef = self.coefs(t, &s[..d]);
        self.drift_with(t, s, out, &coef);
    }

    fn diffusion(&self, t: f64, s: &[f64], out: &mut Matrix) {
        if let Some(af) = &self.affine {
            out.copy_from(&af.g);
            return;
        }
        let d = self.model.dim;
        let coef = self.coefs(t, &s[..d]);
        self.diffusion_with(out, &coef);
    }

    fn affine(&self) -> Option<&AffineParts> {
        self.affine.as_ref()
    }

    fn ou_slices(&self) -> &[OuSlice] {
        &self.ou
    }

    fn position_slice(&self) -> (usize, usize) {
        self.slice("x")
    }

    fn momentum_slice(&self) -> Option<(usize, usize)> {
        Some(self.slice("v"))
    }

    fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    fn initial_state(&self, normal: &mut dyn FnMut(u32) -> f64) -> Vec<f64> {
        let mut s = vec![0.0; self.layout.dim()];
        let d = self.model.dim;
        s[..d].copy_from_slice(&self.model.initial.x0);
        s[d..2 * d].copy_from_slice(&self.model.initial.v0);
        for (slot, b, _, _) in &self.noise {
            let (bs, bl) = self.slice(&format!("beta{slot}"));
            let l = lower_factor(&b.m);
            let xi: Vec<f64> = (0..bl).map(|i| normal(init_key(*slot, i))).collect();
            for i in 0..bl {
                s[bs + i] = (0..=i).map(|k| l[(i, k)] * xi[k]).sum();
            }
        }
        s
    }
}

/// Lower-triangular factor of a PSD matrix (Cholesky, or eigen-based with
/// an LQ cleanup when semidefinite).
pub fn lower_factor(m: &Matrix) -> Matrix {
    match m.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let r = matops::psd_sqrt(m);
            // r rᵀ = m; make it lower triangular via QR of rᵀ
            let qr = r.transpose().qr();
            let l = qr.r().transpose();
            let mut l = l;
            for j in 0..l.ncols() {
                if l[(j, j)] < 0.0 {
                    for i in 0..l.nrows() {
                        l[(i, j)] = -l[(i, j)];
                    }
                }
            }
            l
        }
    }
}

/// Per-check outcome of [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Probes random `(t, x)` in `[0, 10] × [−5, 5]^d` (seeded) for declared
/// bounds, finiteness, analytic-vs-FD derivative agreement (1e-6) and,
/// when requested, uniform positive stability of γ₀.
pub fn validate_model(m: &GLEModel, probes: usize, small_mass_requested: bool) -> ValidationReport {
    let mut checks = Vec::new();
    if let Err(e) = m.check_dimensions() {
        checks.push(CheckResult { name: "dimensions".into(), passed: false, detail: e.to_string() });
        return ValidationReport { checks };
    }
    checks.push(CheckResult { name: "dimensions".into(), passed: true, detail: String::new() });
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let pts: Vec<(f64, Vec<f64>)> = (0..probes.max(1))
        .map(|_| (rng.random_range(0.0..10.0), (0..m.dim).map(|_| rng.random_range(-5.0..5.0)).collect()))
        .collect();
    let fields = [
        ("gamma0", &m.gamma0),
        ("sigma0", &m.sigma0),
        ("g", &m.g),
        ("h", &m.h),
        ("sigma", &m.sigma),
        ("fe", &m.fe),
    ];
    for (name, f) in fields {
        let mut finite = true;
        let mut bound_ok = true;
        let mut worst_deriv = 0.0f64;
        for (t, x) in &pts {
            let v = f.eval(*t, x);
            finite &= v.iter().all(|e| e.is_finite());
            if let Some(b) = f.bound {
                bound_ok &= v.amax() <= b;
            }
            if f.has_analytic_deriv() && !f.is_constant() {
                for l in 0..m.dim {
                    match (f.deriv(*t, x, l), fd_derivative(f, *t, x, l)) {
                        (Ok(a), Ok(n)) => worst_deriv = worst_deriv.max((a - n).amax()),
                        _ => worst_deriv = f64::INFINITY,
                    }
                }
            }
        }
        checks.push(CheckResult { name: format!("{name}.finite"), passed: finite, detail: String::new() });
        if let Some(b) = f.bound {
            checks.push(CheckResult { name: format!("{name}.bound"), passed: bound_ok, detail: format!("declared {b}") });
        }
        if f.has_analytic_deriv() && !f.is_constant() {
            checks.push(CheckResult {
                name: format!("{name}.derivative"),
                passed: worst_deriv <= 1e-6,
                detail: format!("max |analytic − fd| = {worst_deriv:.3e}"),
            });
        }
    }
    if small_mass_requested {
        let mut worst = f64::INFINITY;
        let mut ok = true;
        for (t, x) in &pts {
            match matops::is_positive_stable(&m.gamma0.eval(*t, x), DEFAULT_MARGIN) {
                Ok((stable, spec)) => {
                    ok &= stable;
                    worst = worst.min(spec.min_real());
                }
                Err(_) => ok = false,
            }
        }
        checks.push(CheckResult {
            name: "gamma0.positive_stable".into(),
            passed: ok,
            detail: format!("min Re λ over probes = {worst:.3e}"),
        });
    }
    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::realization::{preset, Preset};

    #[test]
    fn fd_derivative_examples() {
        let c = CoefficientField::scalar(3.0);
        assert_eq!(fd_derivative(&c, 0.0, &[1.0], 0).unwrap()[(0, 0)], 0.0);
        let sq = CoefficientField::custom(1, 1, |_, x| matops::scalar(x[0] * x[0]), None);
        assert!((fd_derivative(&sq, 0.0, &[3.0], 0).unwrap()[(0, 0)] - 6.0).abs() < 1e-8);
        let f = CoefficientField::custom(1, 1, |_, x| matops::scalar(1.0 / (2.0 + x[0].sin())), None);
        assert!((fd_derivative(&f, 0.0, &[0.0], 0).unwrap()[(0, 0)] + 0.25).abs() < 1e-7);
        let bad = CoefficientField::custom(1, 1, |_, _| matops::scalar(f64::NAN), None);
        assert!(matches!(fd_derivative(&bad, 0.0, &[0.0], 0), Err(GleError::NonFinite(_))));
    }

    #[test]
    fn expression_fields() {
        let f = CoefficientField::expr(2, 1, &["2 + sin(x0)", "x1*t"]).unwrap();
        let v = f.eval(2.0, &[0.0, 3.0]);
        assert_eq!(v[(0, 0)], 2.0);
        assert_eq!(v[(1, 0)], 6.0);
        assert_eq!(f.deriv(2.0, &[0.0, 3.0], 0).unwrap()[(0, 0)], 1.0);
        assert_eq!(f.deriv(2.0, &[0.0, 3.0], 1).unwrap()[(1, 0)], 2.0);
        assert!(CoefficientField::expr(1, 1, &["2*3"]).unwrap().is_constant());
    }

    fn m2_model() -> GLEModel {
        let (k, n) = preset(&Preset::M2 { gamma_1: 1.0, beta: 1.0 }).unwrap();
        let mut m = GLEModel::free_particle(1, 0.5, k, n);
        m.initial.v0 = vec![1.0];
        m
    }

    #[test]
    fn m2_delta_weight_damps() {
        let m = m2_model();
        let sys = build_markovian_system(&m).unwrap();
        assert!(sys.affine().is_some());
        let names: Vec<_> = sys.layout().slices.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names, ["x", "v", "y2", "beta4"]);
        let s = [0.0, 1.0, 0.0, 0.0];
        let mut out = [0.0; 4];
        sys.drift(0.0, &s, &mut out);
        assert!((out[1] + 0.5 / m.mass).abs() < 1e-15);
        assert_eq!(out[0], 1.0);
        // y² is driven by M C* h v = −1/2
        assert!((out[2] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn switches_off_reduce_to_langevin() {
        let mut m = m2_model();
        m.kernel.alpha = [false, false];
        m.noise.alpha = [false, false];
        m.kernel.delta_weight = None;
        m.gamma0 = CoefficientField::scalar(2.0);
        m.sigma0 = CoefficientField::scalar(1.0);
        let sys = build_markovian_system(&m).unwrap();
        let s = [0.3, 1.0, 5.0, -7.0];
        let mut out = [0.0; 4];
        sys.drift(0.0, &s, &mut out);
        assert!((out[1] + 2.0 / m.mass).abs() < 1e-15);
        let mut g = Matrix::zeros(4, sys.wiener_dims().0 + sys.wiener_dims().1);
        sys.diffusion(0.0, &s, &mut g);
        assert_eq!(g[(1, 0)], 1.0 / m.mass);
        assert_eq!(g[(1, 1)], 0.0);
    }

    #[test]
    fn affine_path_matches_general_path() {
        let (k, n) = preset(&Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.3 }).unwrap();
        let mut m = GLEModel::free_particle(1, 0.7, k, n);
        m.gamma0 = CoefficientField::scalar(0.4);
        m.sigma0 = CoefficientField::scalar(0.9);
        let fast = build_markovian_system(&m).unwrap();
        // same model but forced through the general path
        let mut m2 = m.clone();
        m2.fe = CoefficientField::custom(1, 1, |_, _| matops::scalar(0.0), None);
        let slow = build_markovian_system(&m2).unwrap();
        assert!(slow.affine().is_none());
        let s: Vec<f64> = (0..fast.layout().dim()).map(|i| (i as f64 * 0.7).sin()).collect();
        let (mut a, mut b) = (vec![0.0; s.len()], vec![0.0; s.len()]);
        fast.drift(0.0, &s, &mut a);
        slow.drift(0.0, &s, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn memory_slice_drift_is_exact() {
        let (k, n) = preset(&Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.0 }).unwrap();
        let mut m = GLEModel::free_particle(1, 1.0, k, n);
        m.h = CoefficientField::scalar_expr("2 + cos(x)").unwrap();
        let sys = build_markovian_system(&m).unwrap();
        let b = m.kernel.blocks[1].as_ref().unwrap();
        let s = [0.4, -1.2, 0.3, 0.8, 0.1, -0.2];
        let mut out = [0.0; 6];
        sys.drift(0.0, &s, &mut out);
        let hv = (2.0 + 0.4f64.cos()) * -1.2;
        let y = nalgebra::DVector::from_vec(vec![0.3, 0.8]);
        let want = -(&b.gamma * &y) + &b.m * b.c.transpose() * hv;
        assert!((out[2] - want[0]).abs() < 1e-14 && (out[3] - want[1]).abs() < 1e-14);
        // β slices autonomous
        let mut s2 = s;
        s2[0] = 9.0;
        s2[1] = 3.0;
        s2[2] = -4.0;
        let mut out2 = [0.0; 6];
        sys.drift(0.0, &s2, &mut out2);
        assert_eq!(out[4..], out2[4..]);
    }

    #[test]
    fn exactly_solvable_jacobian_is_constant() {
        let (k, n) = preset(&Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.0 }).unwrap();
        let sys = build_markovian_system(&GLEModel::free_particle(1, 1.0, k, n)).unwrap();
        let af = sys.affine().unwrap();
        let dim = sys.layout().dim();
        let s0: Vec<f64> = (0..dim).map(|i| i as f64 - 2.0).collect();
        let mut f0 = vec![0.0; dim];
        sys.drift(0.0, &s0, &mut f0);
        for j in 0..dim {
            let mut s1 = s0.clone();
            s1[j] += 1e-3;
            let mut f1 = vec![0.0; dim];
            sys.drift(0.0, &s1, &mut f1);
            for i in 0..dim {
                assert!(((f1[i] - f0[i]) / 1e-3 - af.a[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn validation_checks() {
        let (k, n) = preset(&Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.0 }).unwrap();
        let mut m = GLEModel::free_particle(1, 1.0, k, n);
        m.gamma0 = CoefficientField::scalar(1.0);
        assert!(validate_model(&m, 20, true).all_passed());
        m.sigma = CoefficientField::scalar_expr("2 + sin(x)").unwrap().with_bound(3.0);
        let r = validate_model(&m, 50, false);
        assert!(r.get("sigma.bound").unwrap().passed);
        assert!(r.get("sigma.derivative").unwrap().passed);
        m.gamma0 = CoefficientField::scalar(0.0);
        assert!(!validate_model(&m, 5, true).get("gamma0.positive_stable").unwrap().passed);
        m.g = CoefficientField::zeros(2, 1);
        assert!(!validate_model(&m, 5, false).all_passed());
    }

    #[test]
    fn initial_beta_has_covariance_m() {
        let (k, n) = preset(&Preset::M1 { gamma_1: 1.0, gamma_2: 2.0, beta: 1.0 }).unwrap();
        let sys = build_markovian_system(&GLEModel::free_particle(1, 1.0, k, n)).unwrap();
        let l = lower_factor(&sys.model.noise.blocks[1].as_ref().unwrap().m);
        let mm = &l * l.transpose();
        assert!((mm - &sys.model.noise.blocks[1].as_ref().unwrap().m).norm() < 1e-12);
        let semidef = matops::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let l = lower_factor(&semidef);
        assert!((&l * l.transpose() - semidef).norm() < 1e-12);
        assert!(l[(0, 1)].abs() < 1e-14);
    }
}
