use std::path::Path;
use std::process::{Command, Output};

use gle_cli::{parse_str, to_toml};
use proptest::prelude::*;

const M1: &str = "[model.bath]\npreset = \"M1\"\ngamma_1 = 1.0\ngamma_2 = 2.0\nbeta = 1.0\n\n[run]\nt_end = 1.0\ndt = 0.01\npaths = 20\nrecord_dt = 0.25\n";

fn gle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gle")).args(args).current_dir(dir).output().unwrap()
}

fn with_config(body: &str, args: &[&str]) -> (tempfile::TempDir, Output) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), body).unwrap();
    let mut full = args.to_vec();
    full.extend(["--config", "c.toml", "--out", "out"]);
    let o = gle(dir.path(), &full);
    (dir, o)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_is_a_parse_error_naming_the_key() {
    let body = "[model.bath]\npreset = \"M1\"\ngamma_1 = 1.0\ngamma_2 = 2.0\nbeta = 1.0\ngamma_3 = 4.0\n";
    let (_d, o) = with_config(body, &["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("category=config tag=parse-error line=6"), "{e}");
    assert!(e.contains("gamma_3"), "{e}");
    assert_eq!(e.lines().filter(|l| l.starts_with("gle: error")).count(), 1);
}

#[test]
fn epsilons_must_strictly_decrease() {
    let (_d, o) = with_config(&format!("{M1}\n[converge]\nepsilons = [0.1, 0.2]\n"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tag=epsilon-order"));
    let (_d, o) = with_config(&format!("{M1}\n[converge]\nepsilons = [0.1, 0.1]\n"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gle(dir.path(), &["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gle(dir.path(), &["simulate", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("category=config"));
}

#[test]
fn nonfinite_coefficient_fails_validation() {
    let (_d, o) = with_config("[model]\nh = \"exp(exp(x^2))\"\nx0 = [3.0]\n\n[run]\nt_end = 0.1\npaths = 2\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("category=validation"));
}

#[test]
fn blowup_is_a_numerical_error() {
    let (_d, o) = with_config("[model]\nfe = \"x^3\"\nx0 = [2.0]\n\n[run]\nt_end = 20.0\ndt = 0.1\npaths = 1\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("category=numerical"));
}

#[test]
fn spectrum_matches_closed_form_at_unit_frequency() {
    let (d, o) = with_config(M1, &["spectrum"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("out/spectrum.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("omega,kernel_density,noise_density"));
    let row: Vec<f64> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect::<Vec<f64>>())
        .find(|r| r[0] == 1.0)
        .unwrap();
    assert!((row[1] - 0.4).abs() < 1e-12 && (row[2] - 0.4).abs() < 1e-12, "{row:?}");
    assert!(!csv.contains('\r'));
}

#[test]
fn csv_values_carry_seventeen_significant_digits() {
    let (d, o) = with_config(M1, &["simulate", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("out/trajectories.csv")).unwrap();
    let row = csv.lines().nth(2).unwrap();
    let last = row.split(',').next_back().unwrap();
    let mantissa = last.trim_start_matches('-').split('e').next().unwrap();
    assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{last}");
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let read = |seed: &str, threads: &str| {
        let (d, o) = with_config(M1, &["simulate", "--seed", seed, "--threads", threads]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(d.path().join("out/trajectories.csv")).unwrap()
    };
    let a = read("5", "1");
    assert_eq!(a, read("5", "3"));
    assert_ne!(a, read("6", "1"));
}

#[test]
fn paths_flag_overrides_config() {
    let (d, o) = with_config(M1, &["simulate", "--paths", "3"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(d.path().join("out/trajectories.csv")).unwrap();
    let paths: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(paths.len(), 3);
}

#[test]
fn presets_needs_no_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = gle(dir.path(), &["presets"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("preset,defaults,description\n"));
    for l in out.lines() {
        assert_eq!(l.split(',').count(), 3, "{l}");
    }
    assert_eq!(out.lines().count(), 5);
}

#[test]
fn help_documents_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = gle(dir.path(), &["--help"]);
    let h = String::from_utf8(o.stdout).unwrap();
    for needle in ["GLE_THREADS", "t_end = 10.0", "epsilons = [0.2, 0.1, 0.05, 0.025]", "fit_window = 0.5", "corollary1d_vanishing"] {
        assert!(h.contains(needle), "missing {needle}");
    }
}

#[test]
fn saved_limit_recipe_reloads() {
    let body = "[model]\ng = \"2 + sin(x)\"\nh = 1.0\nsigma = \"2 + sin(x)\"\n\n[run]\nt_end = 0.5\npaths = 4\n\n\
                [limit]\nkind = \"corollary1d_vanishing\"\nbeta = 1.0\ngamma_1 = 1.0\ngamma_2 = 1.0\nm0 = 1.0\n";
    let (d, o) = with_config(body, &["limit"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = std::fs::read_to_string(d.path().join("out/limit.toml")).unwrap();
    assert!(saved.contains("[saved_limit]"));
    let again = gle(d.path(), &["limit", "--config", "out/limit.toml", "--out", "again"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(saved, std::fs::read_to_string(d.path().join("again/limit.toml")).unwrap());

    // a stale stamp is rejected
    let stale = saved.replace("wiener = [0, 1]", "wiener = [1, 1]");
    assert_ne!(stale, saved);
    std::fs::write(d.path().join("stale.toml"), stale).unwrap();
    let o = gle(d.path(), &["limit", "--config", "stale.toml", "--out", "stale"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tag=saved-limit-mismatch"));
}

#[test]
fn minimal_config_takes_documented_defaults() {
    let cfg = parse_str("[model.bath]\npreset = \"exponential\"\ngamma_1 = 1.0\nbeta = 1.0\n").unwrap();
    assert_eq!((cfg.run.t_end, cfg.run.dt, cfg.run.seed, cfg.run.paths), (10.0, 0.01, 0, 100));
    assert!(cfg.run.auto_shrink && !cfg.run.per_path_files && cfg.run.record_dt.is_none());
    assert_eq!(cfg.msd.fit_window, 0.5);
    assert_eq!(cfg.converge.epsilons, vec![0.2, 0.1, 0.05, 0.025]);
    assert_eq!((cfg.spectrum.omega_min, cfg.spectrum.omega_max, cfg.spectrum.omega_points), (0.0, 10.0, 201));
    let m = cfg.model.as_ref().unwrap();
    assert_eq!((m.dim, m.mass), (1, 1.0));
}

#[test]
fn every_limit_kind_name_parses() {
    for k in ["smallMass", "vanishingDamping", "corollary1d_smallMass", "corollary1d_vanishing", "fdt", "hyper", "general"] {
        let cfg = parse_str(&format!("[limit]\nkind = \"{k}\"\n")).unwrap();
        let back = to_toml(&cfg).unwrap();
        assert!(back.contains(&format!("kind = \"{k}\"")), "{back}");
    }
    assert!(parse_str("[limit]\nkind = \"smallmass\"\n").is_err());
}

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        (-5.0f64..5.0).prop_map(|v| format!("{v:?}")),
        Just("\"2 + sin(x)\"".to_string()),
        Just("\"cos(x) * x\"".to_string()),
    ]
}

fn config_text() -> impl Strategy<Value = String> {
    (
        (1usize..3, 0.1f64..5.0, cell(), cell()),
        (0.5f64..50.0, 1e-4f64..0.1, any::<u64>(), 1usize..500, any::<bool>()),
        prop::collection::vec(0.01f64..1.0, 1..5),
        (0.0f64..1.0, 0.0f64..3.0, 0usize..3),
    )
        .prop_map(|((dim, mass, g, fe), (t_end, dt, seed, paths, shrink), mut eps, (phi, gamma, bath))| {
            eps.sort_by(|a, b| b.total_cmp(a));
            let bath = match bath {
                0 => String::new(),
                1 => format!("[model.bath]\npreset = \"M2\"\ngamma_1 = {:?}\nbeta = 1.0\n", 1.0 + gamma),
                _ => format!("[model.bath]\npreset = \"hyper\"\ngamma_1 = 1.0\ngamma_2 = 2.0\ngamma_3 = {:?}\nbeta = 0.5\n", 3.0 + gamma),
            };
            format!(
                "[model]\ndim = {dim}\nmass = {mass:?}\ng = {g}\nfe = {fe}\n{bath}\n[run]\nt_end = {t_end:?}\ndt = {dt:?}\nseed = {seed}\npaths = {paths}\n\
                 auto_shrink = {shrink}\n\n[converge]\nepsilons = {eps:?}\n\n[limit]\nkind = \"corollary1d_smallMass\"\nphi = {phi:?}\n"
            )
        })
}

proptest! {
    #[test]
    fn serialization_is_idempotent(src in config_text()) {
        let cfg = parse_str(&src).unwrap();
        let once = to_toml(&cfg).unwrap();
        let reparsed = parse_str(&once).unwrap();
        prop_assert_eq!(&reparsed, &cfg);
        prop_assert_eq!(to_toml(&reparsed).unwrap(), once);
    }
}
