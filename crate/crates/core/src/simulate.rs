//! Euler–Maruyama integration with optional exact Ornstein–Uhlenbeck
//! splitting, reproducible Wiener paths and common-noise coupling.
//!
//! Wiener paths are built by dyadic Brownian-bridge refinement: the grid
//! has `2^L` steps and the `k`-th standard normal of a (seed, path,
//! channel) stream always refines the same bridge midpoint. Halving `dt`
//! therefore refines the *same* Brownian path, and two systems simulated
//! with the same seed share increments exactly.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GleError, Result};
use crate::matops::{self, Matrix};

/// States whose norm exceeds this are reported as a blow-up.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Named, contiguous slices of a state vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub slices: Vec<Slice>,
}

impl StateLayout {
    /// Appends a slice and returns its start offset.
    pub fn push(&mut self, name: &str, len: usize) -> usize {
        let start = self.dim();
        self.slices.push(Slice { name: name.to_string(), start, len });
        start
    }

    pub fn dim(&self) -> usize {
        self.slices.last().map_or(0, |s| s.start + s.len)
    }

    pub fn get(&self, name: &str) -> Option<&Slice> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// `name[i]` for every component, in state order.
    pub fn column_names(&self) -> Vec<String> {
        self.slices.iter().flat_map(|s| (0..s.len).map(move |i| format!("{}[{i}]", s.name))).collect()
    }
}

/// Drift `As + b` and constant diffusion `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParts {
    pub a: Matrix,
    pub b: DVector<f64>,
    pub g: Matrix,
}

impl AffineParts {
    pub fn drift(&self, s: &[f64], out: &mut [f64]) {
        let n = s.len();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = self.b[i];
            for (j, sj) in s.iter().enumerate() {
                acc += self.a[(i, j)] * sj;
            }
            *o = acc;
        }
    }
}

/// Autonomous OU sub-system `dβ = −Γβ dt + Σ dW` occupying a state slice
/// and driven by Wiener channels `channel_start..channel_start + Σ.ncols()`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuSlice {
    pub start: usize,
    pub len: usize,
    pub gamma: Matrix,
    pub sigma: Matrix,
    pub channel_start: usize,
    pub m: Matrix,
}

/// An Itô SDE on a named state layout.
///
/// Wiener channels are ordered slow first: `wiener_dims() = (k₁, k₂)` and
/// the diffusion matrix has `k₁ + k₂` columns.
pub trait SdeSystem: Send + Sync {
    fn layout(&self) -> &StateLayout;
    fn wiener_dims(&self) -> (usize, usize);
    fn drift(&self, t: f64, s: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, s: &[f64], out: &mut Matrix);
    /// Constant-coefficient shortcut, if the system is affine.
    fn affine(&self) -> Option<&AffineParts> {
        None
    }
    /// Slices eligible for exact OU stepping.
    fn ou_slices(&self) -> &[OuSlice] {
        &[]
    }
    /// `(start, len)` of the position slice.
    fn position_slice(&self) -> (usize, usize);
    /// `(start, len)` of the velocity slice, for pre-limit systems.
    fn momentum_slice(&self) -> Option<(usize, usize)> {
        None
    }
    fn epsilon(&self) -> Option<f64> {
        None
    }
    /// Initial state; `normal(key)` returns the path's standard normal for
    /// `key`, shared between systems simulated with the same seed.
    fn initial_state(&self, normal: &mut dyn FnMut(u32) -> f64) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StiffPolicy {
    Explicit,
    OuSplitting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    pub paths: usize,
    pub epsilon: Option<f64>,
    pub policy: StiffPolicy,
    /// Shrink the step to ε/20 under the explicit policy instead of failing.
    pub auto_shrink: bool,
    /// Spacing of recorded states (rounded down to a power-of-two multiple
    /// of the step); `None` records every step.
    pub record_dt: Option<f64>,
}

impl SimConfig {
    pub fn new(t_end: f64, dt: f64, seed: u64, paths: usize) -> Self {
        Self { t_end, dt, seed, paths, epsilon: None, policy: StiffPolicy::Explicit, auto_shrink: true, record_dt: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(GleError::InvalidConfig(format!("T must be positive, got {}", self.t_end)));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_end) {
            return Err(GleError::InvalidConfig(format!("need 0 < dt <= T, got dt = {}", self.dt)));
        }
        if self.paths == 0 {
            return Err(GleError::InvalidConfig("paths must be >= 1".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e <= 1.0) {
                return Err(GleError::EpsilonRange(e));
            }
        }
        Ok(())
    }

    /// Effective step target for a system with small parameter `eps`.
    pub fn effective_dt(&self, eps: Option<f64>) -> Result<f64> {
        let eps = eps.or(self.epsilon);
        match (self.policy, eps) {
            (StiffPolicy::Explicit, Some(e)) if self.auto_shrink => Ok(self.dt.min(e / 20.0)),
            (StiffPolicy::Explicit, Some(e)) if self.dt > e => Err(GleError::StepTooLarge { dt: self.dt, epsilon: e }),
            _ => Ok(self.dt),
        }
    }

    /// Number of steps: the smallest power of two with `T/N ≤ dt_eff`.
    pub fn steps_for(&self, dt_eff: f64) -> usize {
        let mut n = 1usize;
        while self.t_end / n as f64 > dt_eff * (1.0 + 1e-12) {
            n *= 2;
        }
        n
    }

    fn stride(&self, h: f64, n: usize) -> usize {
        match self.record_dt {
            None => 1,
            Some(r) => {
                let mut s = 1usize;
                while s * 2 <= n && (s * 2) as f64 * h <= r * (1.0 + 1e-12) {
                    s *= 2;
                }
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub layout: StateLayout,
}

impl Trajectory {
    pub fn component(&self, idx: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[idx]).collect()
    }
}

fn stream_rng(seed: u64, path: usize, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((path as u64) << 16) | channel);
    rng
}

/// Brownian increments on `n = 2^L` equal steps of `[0, t_end]` for one
/// channel, by bridge refinement (endpoint first, then level by level).
pub fn brownian_increments(seed: u64, path: usize, channel: usize, t_end: f64, n: usize) -> Vec<f64> {
    assert!(n.is_power_of_two());
    let mut rng = stream_rng(seed, path, channel as u64);
    let mut w = vec![0.0; n + 1];
    let z: f64 = StandardNormal.sample(&mut rng);
    w[n] = t_end.sqrt() * z;
    let mut span = n;
    while span > 1 {
        let half = span / 2;
        let sd = (t_end * half as f64 / n as f64 / 2.0).sqrt();
        let mut a = 0;
        while a < n {
            let z: f64 = StandardNormal.sample(&mut rng);
            w[a + half] = 0.5 * (w[a] + w[a + span]) + sd * z;
            a += span;
        }
        span = half;
    }
    w.windows(2).map(|p| p[1] - p[0]).collect()
}

/// Standard normal for initial-condition key `key` on `path`.
pub fn init_normal(seed: u64, path: usize, key: u32) -> f64 {
    let mut rng = stream_rng(seed, path, 0xF000 | u64::from(key & 0x0FFF));
    StandardNormal.sample(&mut rng)
}

/// Per-path driving noise: increments `dw[channel][step]`.
#[derive(Debug, Clone)]
pub struct PathNoise {
    pub seed: u64,
    pub path: usize,
    pub h: f64,
    pub dw: Vec<Vec<f64>>,
    steps: usize,
}

impl PathNoise {
    pub fn new(seed: u64, path: usize, channels: usize, t_end: f64, n: usize) -> Self {
        let dw = (0..channels).map(|c| brownian_increments(seed, path, c, t_end, n)).collect();
        Self { seed, path, h: t_end / n as f64, dw, steps: n }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Precomputed exact-step matrices for one OU slice.
struct OuStep {
    start: usize,
    len: usize,
    channel_start: usize,
    channels: usize,
    decay: Matrix,
    k_over_h: Matrix,
    resid: Matrix,
    rng: ChaCha8Rng,
}

fn ou_steps(sys: &dyn SdeSystem, h: f64, seed: u64, path: usize) -> Result<Vec<OuStep>> {
    sys.ou_slices()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let decay = matops::matrix_exp(&o.gamma, -h)?;
            let n = o.len;
            let gi = matops::inverse(&o.gamma)?;
            let k = gi * (Matrix::identity(n, n) - &decay) * &o.sigma;
            let q = &o.m - &decay * &o.m * decay.transpose();
            let resid = matops::psd_sqrt(&matops::symmetrize(&(q - &k * k.transpose() / h)));
            Ok(OuStep {
                start: o.start,
                len: n,
                channel_start: o.channel_start,
                channels: o.sigma.ncols(),
                decay,
                k_over_h: k / h,
                resid,
                rng: stream_rng(seed, path, 0x8000 | i as u64),
            })
        })
        .collect()
}

/// Integrates one path over the increments in `noise`, calling
/// `observe(step, t, state)` at step 0 and after every step.
pub fn integrate_path(
    sys: &dyn SdeSystem,
    policy: StiffPolicy,
    noise: &PathNoise,
    init: Vec<f64>,
    mut observe: impl FnMut(usize, f64, &[f64]),
) -> Result<()> {
    let n = sys.layout().dim();
    let (k1, k2) = sys.wiener_dims();
    let w = k1 + k2;
    if noise.dw.len() != w {
        return Err(GleError::ChannelMismatch(noise.dw.len(), w));
    }
    if init.len() != n {
        return Err(GleError::DimensionMismatch(format!("initial state has {} entries, layout {n}", init.len())));
    }
    let h = noise.h;
    let steps = noise.steps();
    let mut ou = match policy {
        StiffPolicy::OuSplitting => ou_steps(sys, h, noise.seed, noise.path)?,
        StiffPolicy::Explicit => Vec::new(),
    };
    let mut exact_rows = vec![false; n];
    for o in &ou {
        exact_rows[o.start..o.start + o.len].iter_mut().for_each(|r| *r = true);
    }
    let mut s = init;
    let mut next = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut g = Matrix::zeros(n, w);
    let mut dw = vec![0.0; w];
    let affine = sys.affine();
    if let Some(af) = affine {
        g.copy_from(&af.g);
    }
    observe(0, 0.0, &s);
    for step in 0..steps {
        let t = step as f64 * h;
        for (c, d) in dw.iter_mut().enumerate() {
            *d = noise.dw[c][step];
        }
        match affine {
            Some(af) => af.drift(&s, &mut f),
            None => {
                sys.drift(t, &s, &mut f);
                sys.diffusion(t, &s, &mut g);
            }
        }
        for i in 0..n {
            if exact_rows[i] {
                continue;
            }
            let mut acc = s[i] + f[i] * h;
            for (c, d) in dw.iter().enumerate() {
                acc += g[(i, c)] * d;
            }
            next[i] = acc;
        }
        for o in ou.iter_mut() {
            let xi: Vec<f64> = (0..o.len).map(|_| StandardNormal.sample(&mut o.rng)).collect();
            for i in 0..o.len {
                let mut acc = 0.0;
                for j in 0..o.len {
                    acc += o.decay[(i, j)] * s[o.start + j] + o.resid[(i, j)] * xi[j];
                }
                for c in 0..o.channels {
                    acc += o.k_over_h[(i, c)] * dw[o.channel_start + c];
                }
                next[o.start + i] = acc;
            }
        }
        std::mem::swap(&mut s, &mut next);
        let norm2: f64 = s.iter().map(|v| v * v).sum();
        if !(norm2 <= BLOWUP_THRESHOLD * BLOWUP_THRESHOLD) {
            return Err(GleError::Blowup { time: (step + 1) as f64 * h });
        }
        observe(step + 1, (step + 1) as f64 * h, &s);
    }
    Ok(())
}

fn grid(sys: &dyn SdeSystem, cfg: &SimConfig) -> Result<(usize, f64)> {
    cfg.validate()?;
    let dt = cfg.effective_dt(sys.epsilon())?;
    let n = cfg.steps_for(dt);
    Ok((n, cfg.t_end / n as f64))
}

fn initial(sys: &dyn SdeSystem, seed: u64, path: usize) -> Vec<f64> {
    sys.initial_state(&mut |key| init_normal(seed, path, key))
}

/// One recorded path.
pub fn simulate_path(sys: &dyn SdeSystem, cfg: &SimConfig, path: usize) -> Result<Trajectory> {
    let (n, h) = grid(sys, cfg)?;
    let (k1, k2) = sys.wiener_dims();
    let noise = PathNoise::new(cfg.seed, path, k1 + k2, cfg.t_end, n);
    let stride = cfg.stride(h, n);
    let mut tr = Trajectory { times: Vec::new(), states: Vec::new(), layout: sys.layout().clone() };
    integrate_path(sys, cfg.policy, &noise, initial(sys, cfg.seed, path), |step, t, s| {
        if step % stride == 0 {
            tr.times.push(t);
            tr.states.push(s.to_vec());
        }
    })?;
    Ok(tr)
}

/// All `cfg.paths` paths, in parallel; output order is the path index.
pub fn simulate_sde(sys: &dyn SdeSystem, cfg: &SimConfig) -> Result<Vec<Trajectory>> {
    grid(sys, cfg)?;
    (0..cfg.paths).into_par_iter().map(|p| simulate_path(sys, cfg, p)).collect()
}

/// Pre-limit and limit paths driven by the same Wiener increments (and the
/// same initial-condition normals) on the pre-limit system's grid.
pub fn simulate_coupled_pair(
    pre: &dyn SdeSystem,
    limit: &dyn SdeSystem,
    cfg: &SimConfig,
    path: usize,
) -> Result<(Trajectory, Trajectory)> {
    if pre.wiener_dims() != limit.wiener_dims() {
        let (a, b) = (pre.wiener_dims(), limit.wiener_dims());
        return Err(GleError::ChannelMismatch(a.0 + a.1, b.0 + b.1));
    }
    let (n, h) = grid(pre, cfg)?;
    let (k1, k2) = pre.wiener_dims();
    let noise = PathNoise::new(cfg.seed, path, k1 + k2, cfg.t_end, n);
    let stride = cfg.stride(h, n);
    let mut out = Vec::new();
    for sys in [pre, limit] {
        let mut tr = Trajectory { times: Vec::new(), states: Vec::new(), layout: sys.layout().clone() };
        integrate_path(sys, cfg.policy, &noise, initial(sys, cfg.seed, path), |step, t, s| {
            if step % stride == 0 {
                tr.times.push(t);
                tr.states.push(s.to_vec());
            }
        })?;
        out.push(tr);
    }
    let lim = out.pop().unwrap();
    Ok((out.pop().unwrap(), lim))
}

/// Per-path sup-norm statistics of a coupled pair, computed on every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledSup {
    pub position: f64,
    pub momentum: f64,
}

pub fn coupled_sup(pre: &dyn SdeSystem, limit: &dyn SdeSystem, cfg: &SimConfig, path: usize) -> Result<CoupledSup> {
    if pre.wiener_dims() != limit.wiener_dims() {
        let (a, b) = (pre.wiener_dims(), limit.wiener_dims());
        return Err(GleError::ChannelMismatch(a.0 + a.1, b.0 + b.1));
    }
    let (n, _) = grid(pre, cfg)?;
    let (k1, k2) = pre.wiener_dims();
    let noise = PathNoise::new(cfg.seed, path, k1 + k2, cfg.t_end, n);
    let (ps, pl) = pre.position_slice();
    let mut xs = Vec::with_capacity((n + 1) * pl);
    let eps = pre.epsilon().or(cfg.epsilon).unwrap_or(1.0);
    let mom = pre.momentum_slice();
    let mut momentum = 0.0f64;
    integrate_path(pre, cfg.policy, &noise, initial(pre, cfg.seed, path), |_, _, s| {
        xs.extend_from_slice(&s[ps..ps + pl]);
        if let Some((vs, vl)) = mom {
            let v2: f64 = s[vs..vs + vl].iter().map(|v| v * v).sum();
            momentum = momentum.max(eps * v2.sqrt());
        }
    })?;
    let (ls, ll) = limit.position_slice();
    if ll != pl {
        return Err(GleError::DimensionMismatch("position slices differ".into()));
    }
    let mut sup = 0.0f64;
    integrate_path(limit, cfg.policy, &noise, initial(limit, cfg.seed, path), |step, _, s| {
        let d2: f64 = (0..pl).map(|i| (s[ls + i] - xs[step * pl + i]).powi(2)).sum();
        sup = sup.max(d2.sqrt());
    })?;
    Ok(CoupledSup { position: sup, momentum })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes trajectories as CSV (`t,<slice>[i],…`); `long` prefixes a
/// `path` column and concatenates all paths in one table.
pub fn write_trajectories_csv<W: Write>(w: &mut W, trajs: &[Trajectory], long: bool) -> std::io::Result<()> {
    let Some(first) = trajs.first() else { return Ok(()) };
    let mut header = Vec::new();
    if long {
        header.push("path".to_string());
    }
    header.push("t".to_string());
    header.extend(first.layout.column_names());
    writeln!(w, "{}", header.join(","))?;
    for (p, tr) in trajs.iter().enumerate() {
        for (t, s) in tr.times.iter().zip(&tr.states) {
            let mut row = Vec::with_capacity(s.len() + 2);
            if long {
                row.push(p.to_string());
            }
            row.push(fmt_f64(*t));
            row.extend(s.iter().map(|v| fmt_f64(*v)));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
