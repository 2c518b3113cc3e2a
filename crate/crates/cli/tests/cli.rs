//! Runs of the `cpcontrol` binary against temporary directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpcontrol::data::CoordinateDistribution;
use cpcontrol::indirect::verify_invariance;
use cpcontrol::LinearSystem;
use cpcontrol_cli::config::{matrix, DataSource, RunConfig};
use cpcontrol_cli::manifest::{Manifest, RegionRecord};
use tempfile::TempDir;

fn cpcontrol(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcontrol"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cpcontrol(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, config: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn quick_config() -> RunConfig {
    let mut config = RunConfig::benchmark();
    config.validation.n_trials = 2000;
    config.validation.sample_trajectories = 5;
    config
}

fn zero_generator(config: &mut RunConfig) {
    config.data.source = DataSource::Generator {
        coordinates: vec![CoordinateDistribution::Constant { value: 0.0 }; 2],
    };
}

#[test]
fn gen_data_is_reproducible_and_sized() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "a", "--seed", "5"], d);
    ok(&["gen-data", "--out", "b", "--seed", "5"], d);
    ok(&["gen-data", "--out", "c", "--seed", "6"], d);
    let a = std::fs::read(d.join("a/dataset.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/dataset.csv")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c/dataset.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample,t,coord,value"));
    assert_eq!(lines.count(), 200 * 100 * 2);
}

#[test]
fn zero_spread_generator_gives_zero_sequences() {
    let dir = TempDir::new().unwrap();
    let mut config = quick_config();
    config.data.source = DataSource::Generator {
        coordinates: vec![
            CoordinateDistribution::Normal {
                mean: 0.0,
                spread: 0.0,
                spread_param: Default::default(),
            },
            CoordinateDistribution::Gamma {
                shape: 5.5,
                scale: 0.0,
                random_sign: true,
            },
        ],
    };
    let cfg = write_config(dir.path(), "zero.json", &config);
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "z"], dir.path());
    let ds = cpcontrol_cli::dataset::read_dataset(&dir.path().join("z/dataset.csv")).unwrap();
    assert!(ds.sequences().iter().flatten().all(|w| w.iter().all(|&x| x == 0.0)));
}

#[test]
fn direct_run_writes_a_complete_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &quick_config());
    ok(&["run-direct", "--config", cfg.to_str().unwrap(), "--out", "direct"], dir.path());
    let out = dir.path().join("direct");
    for f in ["manifest.json", "timing.json", "nominal.csv", "samples.csv", "regions.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let m = Manifest::load(&out.join("manifest.json")).unwrap();
    let radius = |r: &Option<RegionRecord>| match r {
        Some(RegionRecord::Ball { radius, .. }) => *radius,
        other => panic!("expected a ball, got {other:?}"),
    };
    assert!(radius(&m.error_region).is_finite());
    assert!(radius(&m.input_region).is_finite());
    assert!(m.tightening.as_ref().unwrap().feasible);
    assert!(m.validation.state.rate >= 0.95);
    assert!(m.data.disjoint);
    assert!(m.data.calibration.last < m.data.training.first);
    assert_eq!(m.v_star.len(), 100);

    let nominal = std::fs::read_to_string(out.join("nominal.csv")).unwrap();
    assert!(nominal.starts_with("t,z1,z2,v1\n0,2,-1,"));
    assert_eq!(nominal.lines().count(), 1 + 101);
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 5 * 101);
    let regions = std::fs::read_to_string(out.join("regions.csv")).unwrap();
    for name in ["state_set", "tightened_state_set", "error_region"] {
        assert!(regions.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn run_with_method_matches_dedicated_command() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &quick_config());
    let cfg = cfg.to_str().unwrap();
    ok(&["run-direct", "--config", cfg, "--out", "a", "--trials", "500"], dir.path());
    ok(&["run", "--method", "direct", "--config", cfg, "--out", "b", "--trials", "500"], dir.path());
    assert_eq!(
        std::fs::read(dir.path().join("a/manifest.json")).unwrap(),
        std::fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
}

#[test]
fn indirect_manifest_passes_an_independent_certificate_check() {
    let dir = TempDir::new().unwrap();
    let config = quick_config();
    let cfg = write_config(dir.path(), "c.json", &config);
    ok(&["run-indirect", "--config", cfg.to_str().unwrap(), "--out", "ind"], dir.path());
    let m = Manifest::load(&dir.path().join("ind/manifest.json")).unwrap();
    let rec = m.indirect.as_ref().unwrap();
    let sys = LinearSystem::new(
        matrix(&config.system.a, "a").unwrap(),
        matrix(&config.system.b, "b").unwrap(),
        config.system.horizon,
    )
    .unwrap();
    let gain = matrix(m.gain.as_ref().unwrap(), "gain").unwrap();
    let phi = matrix(&rec.phi, "phi").unwrap();
    let y = matrix(&rec.y, "y").unwrap();
    let report = verify_invariance(&sys, &gain, &phi, &y, 2000, 1e-6, None).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(rec.invariance.passed);
    assert!(rec.phi_dominates_state_sets);
    assert!(rec.input_admissibility < 1.0);
    assert_eq!(rec.grid_points, 190);
    assert!(m.validation.state.rate >= 0.99);
}

#[test]
fn dataset_flag_overrides_the_generator() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "data"], d);
    let cfg = write_config(d, "c.json", &quick_config());
    let cfg = cfg.to_str().unwrap();
    ok(&["run-direct", "--config", cfg, "--data", "data/dataset.csv", "--out", "from_file", "--trials", "500"], d);
    ok(&["run-direct", "--config", cfg, "--out", "generated", "--trials", "500"], d);
    let from_file = Manifest::load(&d.join("from_file/manifest.json")).unwrap();
    let generated = Manifest::load(&d.join("generated/manifest.json")).unwrap();
    assert_eq!(from_file.data.source, "dataset.csv");
    assert_eq!(from_file.gain, generated.gain);
    assert_eq!(from_file.validation, generated.validation);
}

#[test]
fn file_source_without_generator_validates_by_resampling() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "data"], d);
    let mut config = quick_config();
    config.data.source = DataSource::File {
        path: PathBuf::from("data/dataset.csv"),
    };
    let cfg = write_config(d, "c.json", &config);
    ok(&["run-direct", "--config", cfg.to_str().unwrap(), "--out", "r", "--trials", "500"], d);
    let m = Manifest::load(&d.join("r/manifest.json")).unwrap();
    assert_eq!(m.data.validation_sampler, "empirical");
}

#[test]
fn too_little_calibration_data_stops_at_calibration() {
    let dir = TempDir::new().unwrap();
    let mut config = quick_config();
    config.data.k = 12;
    config.data.k1 = 5;
    config.direct.population = 20;
    config.direct.generations = 3;
    let cfg = write_config(dir.path(), "small.json", &config);
    let out = cpcontrol(&["run-direct", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("calibrate stage"), "{stderr}");
    assert!(stderr.contains("insufficient calibration data"), "{stderr}");
}

#[test]
fn single_zero_scenario_baseline_follows_the_nominal_plan() {
    let dir = TempDir::new().unwrap();
    let mut config = quick_config();
    zero_generator(&mut config);
    let cfg = write_config(dir.path(), "c.json", &config);
    ok(
        &["run-baseline", "--config", cfg.to_str().unwrap(), "--out", "b", "--scenarios", "1"],
        dir.path(),
    );
    let m = Manifest::load(&dir.path().join("b/manifest.json")).unwrap();
    let b = m.baseline.as_ref().unwrap();
    assert_eq!(b.scenarios, 1);
    assert!(b.scenarios_satisfied);
    // The plan rides the state boundary, so validation may count solver-level
    // overshoot; the scenario check allows the feasibility tolerance.
    assert!(b.worst_level.sqrt() <= 1.0 + 1e-7);
    let nominal = std::fs::read_to_string(dir.path().join("b/nominal.csv")).unwrap();
    let samples = std::fs::read_to_string(dir.path().join("b/samples.csv")).unwrap();
    let first_sample: Vec<String> = samples
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("0,"))
        .map(|l| l[2..].to_string())
        .collect();
    let nominal_rows: Vec<String> = nominal.lines().skip(1).map(str::to_string).collect();
    assert_eq!(first_sample, nominal_rows);
}

#[test]
fn unreachable_constraints_are_an_analytic_outcome() {
    let dir = TempDir::new().unwrap();
    let mut config = quick_config();
    // The first position is 1.5 whatever the input, outside radius 0.5.
    config.constraints.state[0].shape = vec![vec![4.0, 0.0], vec![0.0, 4.0]];
    let cfg = write_config(dir.path(), "c.json", &config);
    let out = cpcontrol(
        &["run-baseline", "--config", cfg.to_str().unwrap(), "--out", "b", "--scenarios", "3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solve stage"));
}

#[test]
fn report_merges_manifests() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut config = quick_config();
    config.validation.n_trials = 300;
    let cfg = write_config(d, "c.json", &config);
    let cfg = cfg.to_str().unwrap();
    ok(&["run-direct", "--config", cfg, "--out", "direct"], d);
    ok(&["run-indirect", "--config", cfg, "--out", "indirect"], d);

    let one = ok(&["report", "direct/manifest.json"], d);
    assert_eq!(one.lines().filter(|l| l.starts_with("direct")).count(), 1);

    let two = ok(&["report", "direct", "indirect", "--out", "rep"], d);
    assert!(two.lines().any(|l| l.starts_with("indirect")));
    assert!(two.contains("5,739"));
    let csv = std::fs::read_to_string(d.join("rep/report.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("method,error_region,input_region,objective,state_rate"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    let columns = header.split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == columns));

    std::fs::write(d.join("corrupt.json"), b"{\"schema_version\": 1, \"method\": 3}").unwrap();
    let out = cpcontrol(&["report", "direct", "corrupt.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt.json"));
}

#[test]
fn init_config_round_trips_through_the_loader() {
    let dir = TempDir::new().unwrap();
    ok(&["init-config", "--out", "cfg"], dir.path());
    let loaded = RunConfig::load(&dir.path().join("cfg/config.json")).unwrap();
    assert_eq!(loaded, RunConfig::benchmark());
}
