//! Subcommand implementations. Each returns the files it wrote.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gle_core::analysis::{convergence_study, fit_diffusion_exponent, msd_exact_free_particle, msd_monte_carlo};
use gle_core::homogenize::{
    corollary_small_mass_1d, corollary_vanishing_1d, fdt_reduction, general_limit, hyper_limit_1d, small_mass_limit,
    small_mass_prelimit, vanishing_damping_limit, VanishingSetup,
};
use gle_core::model::{build_markovian_system, validate_model, GLEModel, MarkovianSystem};
use gle_core::realization::{preset_catalog, Preset};
use gle_core::simulate::{fmt_f64, simulate_sde, write_trajectories_csv, SdeSystem};
use gle_core::{LimitSystem, Matrix, MSDCurve};

use crate::config::{grid, need, to_toml, ExperimentConfig, LimitKind, MsdMethodChoice, SavedLimit};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Limit,
    Msd,
    Spectrum,
    Converge,
    Presets,
}

/// Random probes per coefficient field when validating a model.
const VALIDATION_PROBES: usize = 64;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    Ok(path)
}

fn note(tag: &str, msg: &str) {
    eprintln!("gle: note tag={tag} message=\"{}\"", msg.replace('"', "'"));
}

pub fn validate(m: &GLEModel, small_mass: bool) -> Result<(), CliError> {
    let rep = validate_model(m, VALIDATION_PROBES, small_mass);
    if rep.all_passed() {
        return Ok(());
    }
    let failed: Vec<String> = rep
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| if c.detail.is_empty() { c.name.clone() } else { format!("{} ({})", c.name, c.detail) })
        .collect();
    Err(CliError::Validation { tag: "model-validation", message: format!("failed checks: {}", failed.join(", ")) })
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if cmd == Command::Presets {
        print!("{}", presets_table());
        return Ok(Vec::new());
    }
    cfg.check()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    match cmd {
        Command::Simulate => simulate(cfg, out),
        Command::Limit => limit(cfg, out),
        Command::Msd => msd(cfg, out),
        Command::Spectrum => spectrum(cfg, out),
        Command::Converge => converge(cfg, out),
        Command::Presets => unreachable!(),
    }
}

fn preset_params(p: &Preset) -> String {
    match *p {
        Preset::M1 { gamma_1, gamma_2, beta } => format!("gamma_1={gamma_1} gamma_2={gamma_2} beta={beta}"),
        Preset::M2 { gamma_1, beta } => format!("gamma_1={gamma_1} beta={beta}"),
        Preset::Hyper { gamma_1, gamma_2, gamma_3, beta } => {
            format!("gamma_1={gamma_1} gamma_2={gamma_2} gamma_3={gamma_3} beta={beta}")
        }
        Preset::Exponential { gamma_1, beta } => format!("gamma_1={gamma_1} beta={beta}"),
    }
}

fn preset_summary(p: &Preset) -> &'static str {
    match p {
        Preset::M1 { .. } => "bi-exponential kernel; noise = kernel; vanishing effective friction (ballistic)",
        Preset::M2 { .. } => "delta minus exponential kernel; derivative-of-OU noise; vanishing effective friction",
        Preset::Hyper { .. } => "three-exponential kernel; omega^4 noise spectrum at low frequency",
        Preset::Exponential { .. } => "single exponential kernel; noise = kernel; normal diffusion",
    }
}

pub fn presets_table() -> String {
    let mut s = String::from("preset,defaults,description\n");
    for p in preset_catalog() {
        s.push_str(&format!("{},{},{}\n", p.name(), preset_params(&p), preset_summary(&p)));
    }
    s
}

fn write_trajectories(cfg: &ExperimentConfig, sys: &dyn SdeSystem, out: &Path, stem: &str) -> Result<Vec<PathBuf>, CliError> {
    let trajs = simulate_sde(sys, &cfg.run.sim_config())?;
    if cfg.run.per_path_files {
        let width = trajs.len().saturating_sub(1).to_string().len();
        trajs
            .iter()
            .enumerate()
            .map(|(p, tr)| {
                write_file(out, &format!("{stem}_{p:0width$}.csv"), |mut w| write_trajectories_csv(&mut w, std::slice::from_ref(tr), false))
            })
            .collect()
    } else {
        Ok(vec![write_file(out, &format!("{stem}.csv"), |mut w| write_trajectories_csv(&mut w, &trajs, true))?])
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let m = cfg.model_config()?.build()?;
    validate(&m, false)?;
    let sys = build_markovian_system(&m)?;
    write_trajectories(cfg, &sys, out, "trajectories")
}

/// A limit system and, where the family is implemented, its pre-limit
/// members for coupled convergence studies.
pub struct BuiltLimit {
    pub system: LimitSystem,
    pub family: Option<Family>,
}

pub enum Family {
    SmallMass(GLEModel),
    Vanishing(VanishingSetup),
}

impl Family {
    pub fn member(&self, eps: f64) -> gle_core::Result<MarkovianSystem> {
        match self {
            Family::SmallMass(m) => small_mass_prelimit(m, eps),
            Family::Vanishing(s) => s.prelimit_system(eps),
        }
    }
}

pub fn build_limit(cfg: &ExperimentConfig) -> Result<BuiltLimit, CliError> {
    let lim = cfg.limit_section()?;
    if lim.general.is_some() && lim.kind != LimitKind::General {
        return Err(CliError::Config("[limit.general] is only used with kind = \"general\"".into()));
    }
    if lim.kind == LimitKind::General {
        let g = lim.general.as_ref().ok_or_else(|| CliError::Config("kind general needs [limit.general]".into()))?;
        let n1 = cfg.model.as_ref().map_or(1, |m| m.dim);
        let [a1, a2, b1, b2, s1, s2] = g.build(n1)?;
        return Ok(BuiltLimit { system: general_limit(&a1, &a2, &b1, &b2, &s1, &s2)?, family: None });
    }
    let mc = cfg.model_config()?;
    let built = match lim.kind {
        LimitKind::SmallMass => {
            let m = mc.build()?;
            validate(&m, true)?;
            BuiltLimit { system: small_mass_limit(&m)?, family: Some(Family::SmallMass(m)) }
        }
        LimitKind::Corollary1dSmallMass => {
            let (beta, gamma1) = lim.beta_gamma1(mc)?;
            let system = corollary_small_mass_1d(&mc.scalar1d()?, beta, gamma1, lim.phi)?;
            let family = match mc.bath {
                Some(Preset::M2 { .. }) => {
                    let m = mc.build()?;
                    validate(&m, false)?;
                    Some(Family::SmallMass(m))
                }
                _ => None,
            };
            BuiltLimit { system, family }
        }
        LimitKind::VanishingDamping | LimitKind::Corollary1dVanishing => {
            let setup = lim.vanishing_setup(mc)?;
            // The fast scales only separate for ε < 1; check the fields on
            // the smallest configured member.
            let eps = cfg.converge.epsilons.last().copied().unwrap_or(0.1);
            validate(&setup.prelimit(eps)?, false)?;
            let system = if lim.kind == LimitKind::VanishingDamping {
                vanishing_damping_limit(&setup)?
            } else {
                let s = mc.scalar1d()?;
                corollary_vanishing_1d(
                    &s,
                    need(lim.beta, "beta")?,
                    need(lim.gamma_1, "gamma_1")?,
                    need(lim.gamma_2, "gamma_2")?,
                    need(lim.m0, "m0")?,
                    lim.phi,
                )?
            };
            BuiltLimit { system, family: Some(Family::Vanishing(setup)) }
        }
        LimitKind::Fdt => {
            let (beta, gamma1) = lim.beta_gamma1(mc)?;
            let s = mc.scalar1d()?;
            BuiltLimit { system: fdt_reduction(&s.sigma, &s.fe, beta, gamma1, s.x0)?, family: None }
        }
        LimitKind::Hyper => {
            let p = lim.hyper_params(mc)?;
            let s = mc.scalar1d()?;
            BuiltLimit { system: hyper_limit_1d(&s.g, &s.sigma, &s.fe, p, s.x0)?, family: None }
        }
        LimitKind::General => unreachable!(),
    };
    Ok(built)
}

fn stamp(sys: &LimitSystem) -> SavedLimit {
    let w = sys.wiener_dims();
    SavedLimit { provenance: sys.provenance(), layout: sys.layout().column_names(), wiener: [w.0, w.1] }
}

fn limit(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let built = build_limit(cfg)?;
    let sys = built.system;
    for w in &sys.warnings {
        note("hypothesis-warning", w);
    }
    let st = stamp(&sys);
    if let Some(saved) = &cfg.saved_limit {
        if saved != &st {
            return Err(CliError::Validation {
                tag: "saved-limit-mismatch",
                message: format!("recipe describes {saved:?} but rebuilds to {st:?}"),
            });
        }
    }
    let recipe = ExperimentConfig { saved_limit: Some(st), ..cfg.clone() };
    let text = to_toml(&recipe)?;
    let mut files = vec![write_file(out, "limit.toml", |w| w.write_all(text.as_bytes()))?];
    if cfg.limit_section()?.simulate {
        files.extend(write_trajectories(cfg, &sys, out, "limit_trajectories")?);
    }
    Ok(files)
}

fn msd_record_dt(cfg: &ExperimentConfig) -> f64 {
    cfg.run.record_dt.unwrap_or(cfg.run.t_end / 200.0)
}

fn msd(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let m = cfg.model_config()?.build()?;
    validate(&m, false)?;
    let method = cfg.msd.method;
    let mut curves: Vec<(&str, MSDCurve)> = Vec::new();
    if method != MsdMethodChoice::Exact {
        let sys = build_markovian_system(&m)?;
        let sc = gle_core::SimConfig { record_dt: Some(msd_record_dt(cfg)), ..cfg.run.sim_config() };
        curves.push(("monte_carlo", msd_monte_carlo(&sys, &sc)?));
    }
    if method != MsdMethodChoice::MonteCarlo {
        let times = match curves.first() {
            Some((_, c)) => c.times.clone(),
            None => {
                let h = msd_record_dt(cfg);
                let n = (cfg.run.t_end / h).floor() as usize;
                (0..=n).map(|i| i as f64 * h).collect()
            }
        };
        match msd_exact_free_particle(&m, &times) {
            Ok(c) => curves.push(("exact", c)),
            Err(e) if method == MsdMethodChoice::Auto && e.category() != gle_core::ErrorCategory::Numerical => {
                note("exact-msd-skipped", &format!("{}: {e}", e.tag()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut files = Vec::new();
    let mut fits = Vec::new();
    for (name, c) in &curves {
        for w in &c.warnings {
            note("msd-warning", w);
        }
        files.push(write_file(out, &format!("msd_{name}.csv"), |mut w| c.write_csv(&mut w))?);
        match fit_diffusion_exponent(c, cfg.msd.fit_window) {
            Ok(f) => fits.push(format!("{name},{},{},{}", fmt_f64(f.exponent), fmt_f64(f.stderr), f.points)),
            Err(e) => note("exponent-fit-skipped", &format!("{name}: {e}")),
        }
    }
    files.push(write_file(out, "msd_fit.csv", |w| {
        writeln!(w, "method,exponent,stderr,points")?;
        fits.iter().try_for_each(|l| writeln!(w, "{l}"))
    })?);
    Ok(files)
}

/// Column names and values of a matrix, flattened row-major; a 1x1
/// matrix gives the bare name.
fn matrix_columns(name: &str, m: &Matrix) -> Vec<String> {
    if m.shape() == (1, 1) {
        return vec![name.to_string()];
    }
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| format!("{name}[{i}][{j}]"))).collect()
}

fn matrix_values(m: &Matrix) -> impl Iterator<Item = String> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| fmt_f64(m[(i, j)])))
}

fn table(
    dir: &Path,
    file: &str,
    xname: &str,
    xs: &[f64],
    names: [&str; 2],
    eval: impl Fn(f64) -> Result<[Matrix; 2], CliError>,
) -> Result<PathBuf, CliError> {
    let rows: Vec<(f64, [Matrix; 2])> = xs.iter().map(|&x| Ok((x, eval(x)?))).collect::<Result<_, CliError>>()?;
    write_file(dir, file, |w| {
        let mut header = vec![xname.to_string()];
        if let Some((_, ms)) = rows.first() {
            header.extend(matrix_columns(names[0], &ms[0]));
            header.extend(matrix_columns(names[1], &ms[1]));
        }
        writeln!(w, "{}", header.join(","))?;
        for (x, ms) in &rows {
            let cells: Vec<String> = std::iter::once(fmt_f64(*x)).chain(matrix_values(&ms[0])).chain(matrix_values(&ms[1])).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })
}

fn spectrum(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mc = cfg.model_config()?;
    if mc.bath.is_none() {
        return Err(CliError::Config("spectrum needs [model.bath]".into()));
    }
    let (kernel, noise) = mc.bath()?;
    let q = kernel.out_dim().unwrap_or(mc.dim);
    let r = noise.out_dim().unwrap_or(mc.dim);
    let s = &cfg.spectrum;
    let omegas = grid(s.omega_min, s.omega_max, s.omega_points);
    let times = grid(0.0, s.t_max, s.t_points);
    Ok(vec![
        table(out, "spectrum.csv", "omega", &omegas, ["kernel_density", "noise_density"], |w| {
            Ok([kernel.spectral_density(w, q)?, noise.spectral_density(w, r)?])
        })?,
        table(out, "kernel.csv", "t", &times, ["kernel", "noise_covariance"], |t| Ok([kernel.eval(t, q), noise.eval(t, r)]))?,
    ])
}

fn converge(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let kind = cfg.limit_section()?.kind;
    let built = build_limit(cfg)?;
    let family = built.family.ok_or_else(|| {
        CliError::Config(format!("converge has no pre-limit family for limit kind {kind:?}; use smallMass, vanishingDamping, corollary1d_smallMass (M2 bath) or corollary1d_vanishing"))
    })?;
    let report = convergence_study(|e| family.member(e), &built.system, &cfg.converge.epsilons, &cfg.run.sim_config())?;
    let path = write_file(out, "convergence.csv", |mut w| report.write_csv(&mut w))?;
    match report.fitted_rate {
        Some(r) => println!("fitted_rate={} note=\"{}\"", fmt_f64(r), report.rate_note),
        None => println!("fitted_rate=undefined note=\"{}\"", report.rate_note),
    }
    if let Some(row) = report.rows.iter().find(|r| r.error.is_some()) {
        let err = row.error.clone().unwrap_or_default();
        let tag = err.split(':').next().unwrap_or("numerical").to_string();
        return Err(CliError::Numerical { tag, message: format!("epsilon {}: {err}", row.eps) });
    }
    if report.medians().windows(2).any(|w| w[1] >= w[0]) {
        note("non-monotone-medians", "median sup-errors are not strictly decreasing in epsilon");
    }
    Ok(vec![path])
}
