use std::path::Path;
use std::process::{Command, Output};

use qds_core::tensor_algebra::Capacity;
use qds_lab::config::{parse_model, SCHEMA};
use qds_lab::output::{read_curve, read_fits, read_results, read_timings, write_outputs};
use qds_lab::study::run_study;

const EXAMPLES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/config/examples");

fn qds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qds"))
        .args(args)
        .output()
        .expect("spawn qds")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn examples() -> Vec<std::path::PathBuf> {
    let mut paths: Vec<_> = std::fs::read_dir(EXAMPLES)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths
}

const SIGMA_X: &str = r#"
[model]
name = "sx"
local_dim = 2
lattice_dim = 1
flavor = "gns_form"
seed = 1

[[model.shells]]
level = 0
sites = [0]
matrix = [["0", "1"], ["1", "0"]]

[grid]
t_final = 0.5
steps = [32, 64, 128]

[study]
kind = "convergence"
observables = 2
"#;

#[test]
fn every_example_validates() {
    let paths = examples();
    assert!(paths.len() >= 6);
    for path in paths {
        let o = qds(&["validate", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
        assert!(stdout(&o).contains("is valid"));
    }
}

#[test]
fn schema_is_printed_and_valid() {
    let o = qds(&["validate", "--schema"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), SCHEMA);
    parse_model(SCHEMA).unwrap();
}

#[test]
fn run_writes_artifacts_that_report_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sx.toml");
    std::fs::write(&config, SIGMA_X).unwrap();
    let out = dir.path().join("out");
    let o = qds(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let records = read_results(&out.join("results.csv")).unwrap();
    let fits = read_fits(&out.join("fits.csv")).unwrap();
    assert_eq!(fits.len(), 2);
    assert!(fits.iter().all(|f| f.pass));
    assert!(!read_timings(&out.join("timings.csv")).unwrap().is_empty());
    let curve = read_curve(&out.join("plot/sx_level0_x0.csv")).unwrap();
    assert_eq!((curve.x_label.as_str(), curve.points.len()), ("h", 3));

    // Identical parameters give identical records.
    let direct = run_study(&parse_model(SIGMA_X).unwrap(), &Capacity::default()).unwrap();
    assert_eq!(records, direct.records);
    assert_eq!(fits, direct.fits);

    let o = qds(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("all pass"));
}

#[test]
fn in_memory_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = parse_model(&std::fs::read_to_string(Path::new(EXAMPLES).join("random_ito.toml")).unwrap()).unwrap();
    let result = run_study(&spec, &Capacity::default()).unwrap();
    write_outputs(&result, dir.path()).unwrap();
    assert_eq!(read_results(&dir.path().join("results.csv")).unwrap(), result.records);
}

#[test]
fn seed_override_changes_random_observables() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sx.toml");
    std::fs::write(&config, SIGMA_X).unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = qds(&[
            "run",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        read_results(&out.join("results.csv")).unwrap()
    };
    let (a, b, c) = (run("1", "a"), run("2", "b"), run("2", "c"));
    assert_ne!(a, b);
    assert_eq!(b, c);
    assert!(b.iter().all(|r| r.params.seed == Some(2)));
}

#[test]
fn failed_checks_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("coarse.toml");
    let coarse = SIGMA_X
        .replace("t_final = 0.5", "t_final = 8.0")
        .replace("steps = [32, 64, 128]", "steps = [1, 2, 4]");
    std::fs::write(&config, coarse).unwrap();
    let out = dir.path().join("out");
    let o = qds(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fitted order"), "{}", stderr(&o));
    assert_eq!(qds(&["report", out.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn invalid_input_exits_with_two_and_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(
        &config,
        SIGMA_X.replace("level = 0\nsites = [0]", "level = 1\nsites = [0]"),
    )
    .unwrap();
    let o = qds(&["validate", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 11") && err.contains("boundary-support"), "{err}");

    let compat = Path::new(EXAMPLES).join("two_shell_compatibility.toml");
    let o = qds(&[
        "run",
        compat.to_str().unwrap(),
        "--cap",
        "8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("capacity exceeded"), "{}", stderr(&o));

    let o = qds(&["report", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn identical_configs_give_byte_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(EXAMPLES).join("random_cp_sweep.toml");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = qds(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("results.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn two_shell_algebra_flow_converges_at_first_order() {
    let text = std::fs::read_to_string(Path::new(EXAMPLES).join("two_shell_convergence.toml")).unwrap();
    let result = run_study(&parse_model(&text).unwrap(), &Capacity::default()).unwrap();
    assert_eq!(result.fits.len(), 2);
    for fit in &result.fits {
        let order = fit.order.expect("nonzero errors");
        assert!((order - 1.0).abs() <= 0.15, "{order}");
    }
    assert!(result.passes(), "{:?}", result.failures());
}
