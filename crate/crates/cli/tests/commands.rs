use std::path::PathBuf;
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;
use vbsens::densities::{ContaminatedPrior, DensityKernel};
use vbsens::functional::Functional;
use vbsens::models::NormalLocation;
use vbsens::oracle::{posterior_quadrature, refit_derivative, REFIT_STEP};
use vbsens::robustness::{ExactInfluence, SensitivityReport};
use vbsens_cli::output::{csv_reader, read_sample_set, read_site_data};

struct Run {
    dir: TempDir,
    code: i32,
    stderr: String,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out().join(name)).unwrap()).unwrap()
    }

    fn text(&self, name: &str) -> String {
        std::fs::read_to_string(self.out().join(name)).unwrap()
    }

    /// Header and numeric rows of a CSV artifact.
    fn table(&self, name: &str) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut r = csv_reader(&self.out().join(name)).unwrap();
        let header = r.headers().unwrap().iter().map(String::from).collect();
        let rows = r.records().map(|rec| rec.unwrap().iter().map(|s| s.parse().unwrap()).collect()).collect();
        (header, rows)
    }

    fn table_strings(&self, name: &str) -> (Vec<String>, Vec<Vec<String>>) {
        let mut r = csv_reader(&self.out().join(name)).unwrap();
        let header = r.headers().unwrap().iter().map(String::from).collect();
        let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
        (header, rows)
    }
}

fn run_raw(verb: &str, config_text: &str, extra: &[&str]) -> Run {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, config_text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vbsens"))
        .arg(verb)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    Run { dir, code: out.status.code().unwrap(), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

fn run(verb: &str, config: &Value) -> Run {
    run_raw(verb, &config.to_string(), &[])
}

fn cauchy() -> Value {
    json!({"type": "student_t", "loc": 0.0, "scale": 1.0, "nu": 1.0})
}

fn standard_normal() -> Value {
    json!({"type": "normal", "mean": 0.0, "variance": 1.0})
}

/// One observation at 2 with unit noise, `N(0, 1)` base prior.
fn conjugate(contamination: Value, epsilon: f64) -> Value {
    json!({
        "model": {"kind": "normal_location", "observations": [[2.0]], "noise_covariance": [[1.0]]},
        "prior": {"base": standard_normal(), "contamination": contamination, "epsilon": epsilon},
        "mcmc": {"draws": 200000, "burn_in": 20000}
    })
}

fn oracle_prior(epsilon: f64) -> (NormalLocation, ContaminatedPrior) {
    let model = NormalLocation::scalar(&[2.0], 1.0).unwrap();
    let prior = ContaminatedPrior::new(
        DensityKernel::standard_normal(),
        DensityKernel::student_t(0.0, 1.0, 1.0).unwrap(),
        epsilon,
    )
    .unwrap();
    (model, prior)
}

fn hierarchical(extra: Value) -> Value {
    let mut config = json!({"model": {"kind": "hierarchical"}, "seed": 1});
    for (k, v) in extra.as_object().unwrap() {
        config[k] = v.clone();
    }
    config
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn conjugate_fit_has_closed_form_moments() {
    let r = run("fit", &conjugate(cauchy(), 0.0));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let fit = r.json("fit.json");
    assert!((f(&fit["mean"][0]) - 1.0).abs() < 1e-9);
    assert!((f(&fit["variance"][0]) - 0.5).abs() < 1e-9);
    assert_eq!(fit["converged"], json!(true));
    assert_eq!(fit["parameter_names"], json!(["theta[1]"]));
}

#[test]
fn rerunning_fit_changes_only_the_timestamp() {
    let config = conjugate(cauchy(), 0.3);
    let (a, b) = (run("fit", &config), run("fit", &config));
    let (mut ja, mut jb) = (a.json("fit.json"), b.json("fit.json"));
    ja.as_object_mut().unwrap().remove("created_unix");
    jb.as_object_mut().unwrap().remove("created_unix");
    assert_eq!(ja, jb);
    assert_eq!(a.text("fit_trace.csv"), b.text("fit_trace.csv"));
}

#[test]
fn malformed_json_exits_with_config_error_and_position() {
    let r = run_raw("fit", "{\n  \"model\": {\"kind\": \"normal_location\",\n", &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("line 3") && r.stderr.contains("column"), "{}", r.stderr);
}

#[test]
fn schema_errors_exit_with_config_error() {
    let mut config = conjugate(cauchy(), 0.0);
    config["unknown_field"] = json!(1);
    assert_eq!(run("fit", &config).code, 1);
    let bad_descriptor = conjugate(json!({"type": "student_t", "loc": 0.0, "scale": -1.0, "nu": 1.0}), 0.0);
    assert_eq!(run("sensitivity", &bad_descriptor).code, 1);
    assert_eq!(run("simulate", &conjugate(cauchy(), 0.0)).code, 1);
}

#[test]
fn unconverged_fit_exits_with_code_two() {
    let mut config = conjugate(cauchy(), 0.5);
    config["optimizer"] = json!({"max_iterations": 1});
    let r = run("fit", &config);
    assert_eq!(r.code, 2);
    assert_eq!(r.json("fit.json")["converged"], json!(false));
}

#[test]
fn outputs_carry_config_hash_and_seed() {
    let config = conjugate(cauchy(), 0.0);
    let r = run_raw("epsilon-curve", &config.to_string(), &["--seed", "42"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = r.text("epsilon_curve.csv");
    let mut lines = text.lines();
    let hash_line = lines.next().unwrap();
    assert!(hash_line.starts_with("# config_hash=") && hash_line.len() == "# config_hash=".len() + 64);
    assert_eq!(lines.next().unwrap(), "# seed=42");
    let other = run_raw("epsilon-curve", &config.to_string(), &["--seed", "43"]);
    assert_ne!(other.text("epsilon_curve.csv").lines().next().unwrap(), hash_line);
    let s = run_raw("sensitivity", &config.to_string(), &["--seed", "42"]);
    assert_eq!(s.json("sensitivity.json")["config_hash"].as_str().unwrap(), &hash_line["# config_hash=".len()..]);
}

#[test]
fn sensitivity_without_contamination_is_zero() {
    for method in ["exact", "vb"] {
        let mut config = conjugate(standard_normal(), 0.0);
        config["method"] = json!(method);
        let r = run("sensitivity", &config);
        assert_eq!(r.code, 0, "{method}: {}", r.stderr);
        let rep = r.json("sensitivity.json");
        for key in ["s_local", "s_mv"] {
            let v = f(&rep[key]["value"]);
            let se = f(&rep[key]["standard_error"]);
            assert!(v.abs() <= 3.0 * se + 1e-12, "{method} {key}: {v} +/- {se}");
        }
        assert!(f(&rep["delta_refit"]).abs() < 1e-6, "{method}: {}", rep["delta_refit"]);
    }
}

#[test]
fn conjugate_sensitivity_report_matches_oracle() {
    let eps = 0.25;
    let r = run("sensitivity", &conjugate(cauchy(), eps));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.json("sensitivity.json");
    let (model, prior) = oracle_prior(eps);
    let oracle = SensitivityReport::exact(&model, &prior, &Functional::Coordinate(0)).unwrap();
    assert!((f(&rep["s_local"]["value"]) - oracle.s_local).abs() < 1e-12);
    assert!((f(&rep["s_mv"]["value"]) - oracle.s_mv).abs() < 1e-12);
    assert!((f(&rep["s_bound"]["value"]) - oracle.s_bound).abs() < 1e-12);
    assert!((f(&rep["delta_refit"]) - oracle.delta_refit.unwrap()).abs() < 1e-12);
    let fd = refit_derivative(&model, &prior, &Functional::Coordinate(0), eps, REFIT_STEP).unwrap();
    assert!((f(&rep["s_local"]["value"]) - fd).abs() < 1e-6);
}

#[test]
fn hierarchical_mean_value_beats_linear_extrapolation() {
    let r = run("sensitivity", &hierarchical(json!({})));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.json("sensitivity.json");
    let delta = f(&rep["delta_refit"]);
    let local = f(&rep["s_local"]["value"]);
    let mv = f(&rep["s_mv"]["value"]);
    assert!((mv - delta).abs() < (local - delta).abs(), "delta {delta}, local {local}, mv {mv}");
}

#[test]
fn unreliable_importance_weights_exit_with_partial_report() {
    let r = run("sensitivity", &hierarchical(json!({"importance": {"draws": 4}})));
    assert_eq!(r.code, 3, "{}", r.stderr);
    let rep = r.json("sensitivity.json");
    assert!(rep["expectation"].is_number());
    assert!(rep["delta_refit"].is_number());
    assert!(rep["s_local"].is_null());
    assert!(!rep["failures"].as_array().unwrap().is_empty());
}

#[test]
fn conjugate_epsilon_curve_matches_oracle() {
    let mut config = conjugate(cauchy(), 0.0);
    config["epsilon_grid"] = json!([0.0, 0.2, 0.5, 0.8]);
    let r = run("epsilon-curve", &config);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (header, rows) = r.table("epsilon_curve.csv");
    assert_eq!(header, ["epsilon", "expectation", "sensitivity", "sensitivity_se", "bound"]);
    let g = Functional::Coordinate(0);
    for row in rows {
        let (model, prior) = oracle_prior(row[0]);
        let q = posterior_quadrature(&model, &prior).unwrap();
        assert!((row[1] - q.expectation(&g).unwrap()).abs() < 1e-6);
        let fd = refit_derivative(&model, &prior, &g, row[0], REFIT_STEP).unwrap();
        assert!((row[2] - fd).abs() < 1e-6, "epsilon {}: {} vs {fd}", row[0], row[2]);
        assert!(row[0] == 0.0 || row[2].abs() <= row[4]);
    }
}

#[test]
fn epsilon_curve_is_flat_without_contamination() {
    let mut config = conjugate(standard_normal(), 0.0);
    config["epsilon_grid"] = json!([0.0, 0.5, 0.9]);
    let (_, rows) = run("epsilon-curve", &config).table("epsilon_curve.csv");
    for row in &rows {
        assert!((row[1] - rows[0][1]).abs() < 1e-10);
        assert_eq!(row[2], 0.0);
    }
}

#[test]
fn hierarchical_epsilon_curve_levels_off_and_records_failed_points() {
    let r = run("epsilon-curve", &hierarchical(json!({"epsilon_grid": [0.0, 0.1, 1.0]})));
    // The influence is undefined at epsilon = 1, so that row fails.
    assert_eq!(r.code, 3, "{}", r.stderr);
    let (_, rows) = r.table("epsilon_curve.csv");
    assert!(rows[1][2].abs() < 0.2 * rows[0][2].abs(), "{rows:?}");
    assert_eq!(rows[2][0], 1.0);
    assert!(rows[2][1..].iter().all(|v| v.is_nan()));
}

#[test]
fn conjugate_influence_grid_matches_exact_influence() {
    let mut config = conjugate(cauchy(), 0.0);
    config["method"] = json!("vb");
    let r = run("influence-grid", &config);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (header, rows) = r.table("influence_grid.csv");
    assert_eq!(header, ["theta_1", "influence_value"]);
    let (model, prior) = oracle_prior(0.0);
    let q = posterior_quadrature(&model, &prior).unwrap();
    let exact = ExactInfluence::new(&q, &Functional::Coordinate(0)).unwrap();
    for row in &rows {
        assert!((row[1] - exact.value(&[row[0]])).abs() < 1e-6);
    }
    // The grid is centered on the posterior mean, where a centered functional has no influence.
    let middle = &rows[rows.len() / 2];
    assert!((middle[0] - 1.0).abs() < 1e-9);
    assert!(middle[1].abs() < 1e-9);
}

#[test]
fn oversized_influence_grid_is_refused() {
    let mut config = conjugate(cauchy(), 0.0);
    config["theta_grid"] = json!({"lower": [-1.0], "upper": [1.0], "points": [1_000_001]});
    let r = run("influence-grid", &config);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("limit"), "{}", r.stderr);
}

#[test]
fn hierarchical_influence_peaks_near_the_posterior_mean() {
    let r = run("influence-grid", &hierarchical(json!({})));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (header, rows) = r.table("influence_grid.csv");
    assert_eq!(header, ["theta_1", "theta_2", "influence_value"]);
    let peak = rows.iter().max_by(|a, b| a[2].abs().total_cmp(&b[2].abs())).unwrap();
    // The default grid is centered on the variational mean of the prior block.
    let center = rows[rows.len() / 2].clone();
    let prior_sd = (1.0f64 / 0.111).sqrt();
    let distance = ((peak[0] - center[0]).powi(2) + (peak[1] - center[1]).powi(2)).sqrt();
    assert!(distance < 0.5 * prior_sd, "peak {peak:?}, center {center:?}");
}

#[test]
fn conjugate_compare_matches_oracle_and_ranks_refits() {
    let mut config = conjugate(cauchy(), 0.0);
    config["mcmc"]["save_samples"] = json!(true);
    let r = run("compare", &config);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.json("compare.json");
    assert!(f(&rep["max_oracle_vb_difference"]) < 1e-6);
    assert_eq!(rep["means_agree"], json!(true));
    assert!(f(&rep["rank_correlation_mean_value"]) > 0.9);
    let (header, rows) = r.table_strings("compare_sweep.csv");
    assert_eq!(header[1], "delta_refit");
    assert_eq!(rows.len(), 8);

    let samples = read_sample_set(&r.out().join("samples.csv"), &r.out().join("samples.json")).unwrap();
    assert_eq!(samples.len(), 200_000);
    let sidecar = r.json("samples.json");
    assert_eq!(sidecar["config_hash"], rep["config_hash"]);
    assert!((f(&sidecar["acceptance_rate"]) - samples.acceptance_rate).abs() == 0.0);
}

#[test]
fn hierarchical_compare_reproduces_the_desk_study() {
    let r = run("compare", &hierarchical(json!({})));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.json("compare.json");
    assert_eq!(rep["means_agree"], json!(true), "prior-block max |z| = {}", rep["prior_block_max_abs_z"]);
    assert!(f(&rep["rank_correlation_mean_value"]) > 0.9);
    assert!(f(&rep["mean_overprediction"]) >= 2.0);
    assert!(rep["max_oracle_vb_difference"].is_null());
}

#[test]
fn simulate_is_deterministic_and_round_trips() {
    let config = hierarchical(json!({}));
    let (a, b) = (run("simulate", &config), run("simulate", &config));
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.text("site_data.csv"), b.text("site_data.csv"));
    let truth = a.json("truth.json");
    assert_eq!(truth["sites"], json!(10));
    assert_eq!(truth["observations"], json!(500));

    // Fitting from the written file matches fitting from the simulation.
    let data_path = a.out().join("site_data.csv");
    let data = read_site_data(&data_path).unwrap();
    assert_eq!(data.total_observations(), 500);
    let from_file = hierarchical(json!({"model": {"kind": "hierarchical", "data_path": data_path}}));
    let (fa, fb) = (run("fit", &from_file), run("fit", &config));
    assert_eq!(fa.json("fit.json")["eta"], fb.json("fit.json")["eta"]);
}

#[test]
fn paper_scale_switch_changes_sizes() {
    let r = run_raw("simulate", &hierarchical(json!({})).to_string(), &["--scale", "paper"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let truth = r.json("truth.json");
    assert_eq!(truth["sites"], json!(30));
    assert_eq!(truth["observations"], json!(3000));
}
