use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kbzakai"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(repo().join("schemas").join(name)).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value, what: &str) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{what}: {errors:?}");
}

const SMALL: &str = r#"
[model]
family = "classic_scalar"

[simulation]
dt = 0.01
horizon = 0.5
n_paths = 3
seed = 99
x0_mean = [0.0]
x0_cov = [[1.0]]

[zakai]
h = 0.1
snapshot_times = [0.25, 0.5]

[oracle]
particles = 2000
times = [0.5]

[output]
formats = ["csv", "json", "svg-plot-data"]
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_in(dir: &Path, command: &str, config: &Path, out: &str) -> Output {
    let o = run(&[command, "--quiet", "--config", config.to_str().unwrap(), "--out", dir.join(out).to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{command}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn check_passes_with_shipped_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("check");
    let cfg = repo().join("configs/classic_scalar.toml");
    let o = run(&["check", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout.matches("[PASS]").count(), 10, "{stdout}");
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_valid(&schema("manifest.schema.json"), &m, "check manifest");
    let acc = m["acceptance"].as_array().unwrap();
    assert_eq!(acc.len(), 10);
    assert!(acc.iter().all(|e| e["passed"] == Value::Bool(true)));
    let table: Value = serde_json::from_str(&std::fs::read_to_string(out.join("acceptance.json")).unwrap()).unwrap();
    assert_valid(&schema("table.schema.json"), &table, "acceptance table");
}

#[test]
fn dt_not_dividing_horizon_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("dt = 0.01", "dt = 0.03"));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("simulation.dt") && err.contains("simulation.horizon"), "{err}");
    assert!(!tmp.path().join("o").exists(), "nothing is written for an invalid configuration");
}

#[test]
fn parse_errors_report_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("seed = 99", "seed = 99\nhorizont = 1.0"));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("horizont") && err.contains("line"), "{err}");
}

#[test]
fn degenerate_observation_noise_names_the_assumption() {
    let tmp = tempfile::tempdir().unwrap();
    let model = "family = \"scalar_constant\"\ntheta = [1.0, 0.0]\nobs_theta = [0.0, 0.0]\nbdot = -1.0\nobs_bdot = 1.0";
    let cfg = write_config(tmp.path(), &SMALL.replace("family = \"classic_scalar\"", model));
    let o = run(&["filter", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nondegeneracy assumption violated") && err.contains("(t,y)"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["simulate"])), 1, "simulate needs a configuration");
    assert_eq!(code(&run(&["simulate", "--config", "/nonexistent/run.toml"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["export", "--run", tmp.path().to_str().unwrap(), "--format", "csv"]);
    assert_eq!(code(&o), 1, "missing manifest");
    assert_eq!(code(&run(&["export", "--run", ".", "--format", "pdf"])), 1, "unknown format");
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn blow_up_is_a_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("seed = 99", "seed = 99\nblowup_bound = 1e-3"));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_is_byte_identical_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    run_in(tmp.path(), "simulate", &cfg, "a");
    run_in(tmp.path(), "simulate", &cfg, "b");
    let manifest = tmp.path().join("a/manifest.json");
    run_in(tmp.path(), "simulate", &manifest, "c");
    let a = std::fs::read(tmp.path().join("a/paths.csv")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("b/paths.csv")).unwrap());
    assert_eq!(a, std::fs::read(tmp.path().join("c/paths.csv")).unwrap(), "manifest replay");
    let text = String::from_utf8(a).unwrap();
    let id = text.lines().next().unwrap().strip_prefix("# manifest ").unwrap();
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["manifest_id"], id);
    assert_eq!(m["path_seeds"].as_array().unwrap().len(), 3);
    assert_eq!(text.lines().nth(1), Some("path,t,x1,y1,ytilde1"));
    assert_eq!(text.lines().count(), 2 + 3 * 51);

    let o = run(&["simulate", "--quiet", "--seed", "100", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(tmp.path().join("d/paths.csv")).unwrap(), text.as_bytes(), "seed override changes the paths");
}

#[test]
fn filter_csv_schema_and_json_twin() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    run_in(tmp.path(), "filter", &cfg, "f");
    let dir = tmp.path().join("f");
    let csv = std::fs::read_to_string(dir.join("filter_002.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("t,W11,V1,U,xbar1,Sigma11"));
    assert!(csv.lines().next().unwrap().starts_with("# manifest "));
    let validator = schema("table.schema.json");
    for name in ["filter_000.json", "paths.json"] {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap();
        assert_valid(&validator, &doc, name);
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("filter_000.json")).unwrap()).unwrap();
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 51);
    // Sigma = 1/W on every row.
    for r in rows {
        let (w, s) = (r[1].as_f64().unwrap(), r[5].as_f64().unwrap());
        assert!((w * s - 1.0).abs() < 1e-12);
    }
    let bad = serde_json::json!({"manifest": "xyz", "table": "t", "columns": [], "rows": []});
    assert!(!validator.is_valid(&bad));
    let svg = std::fs::read_to_string(dir.join("filter_001.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("signal x1"));
}

#[test]
fn zakai_svg_overlays_closed_form_and_export_rewrites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    run_in(tmp.path(), "zakai", &cfg, "z");
    let dir = tmp.path().join("z");
    let svg = std::fs::read_to_string(dir.join("densities.svg")).unwrap();
    for t in ["0.25", "0.5"] {
        assert!(svg.contains(&format!("grid t={t}")) && svg.contains(&format!("closed form t={t}")), "{t}");
    }
    let snaps = std::fs::read_to_string(dir.join("zakai_snapshots.csv")).unwrap();
    let l1: Vec<f64> = snaps.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(l1.len(), 2);
    assert!(l1.iter().all(|v| *v < 5e-2), "{snaps}");

    let out = tmp.path().join("exported");
    let o = run(&["export", "--quiet", "--run", dir.to_str().unwrap(), "--format", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(out.join("densities.csv")).unwrap(),
        std::fs::read(dir.join("densities.csv")).unwrap()
    );
}

#[test]
fn compare_and_testbed_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    run_in(tmp.path(), "compare", &cfg, "c");
    let csv = std::fs::read_to_string(tmp.path().join("c/comparison.csv")).unwrap();
    assert_eq!(
        csv.lines().nth(1),
        Some("t,method,mean1,cov11,gap1,tol1,within,grid_particle_gap,l1_closed_form,stderr1")
    );
    let methods: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["closed_form", "grid", "particle"]);

    let tb = format!(
        "{SMALL}\n[testbed]\nfamily = \"heat\"\nh = 0.1\nhalf_width = 3.0\ncoarse_steps = 4\nlevels = 3\nn_paths = 2\n"
    );
    let cfg = write_config(tmp.path(), &tb);
    run_in(tmp.path(), "testbed", &cfg, "t");
    let orders = std::fs::read_to_string(tmp.path().join("t/testbed_orders.csv")).unwrap();
    assert_eq!(orders.lines().count(), 2 + 4);
    let apriori = std::fs::read_to_string(tmp.path().join("t/testbed_apriori.csv")).unwrap();
    let ratios: Vec<f64> = apriori.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 2);
    assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0));
}

#[test]
fn shipped_configs_validate() {
    let validator = schema("run_config.schema.json");
    let mut n = 0;
    for entry in std::fs::read_dir(repo().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let doc: Value = toml::from_str(&text).unwrap();
        assert_valid(&validator, &doc, &path.display().to_string());
        let cfg = kbzakai_cli::config::load(&path).unwrap();
        let effective = serde_json::to_value(&cfg).unwrap();
        assert_valid(&validator, &effective, "effective configuration");
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
