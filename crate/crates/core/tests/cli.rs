//! End-to-end checks of the `ctista` binary: exit codes, artifacts and
//! byte-level reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctista::scenarios::{Scenario, ScenarioConfig};
use ctista::shrinkage::{hard_decision, make_qam16};
use ctista::training::load_params;
use ctista::C64;

const QUICK: &str = r#"
kind = "cs-sparse"
n = 64
m = 32
layers = 4
seed = 3
ensemble = "cn-unit-over-m"
p = 0.1
sigma_x2 = 1.0
sigma2 = 0.0004

[training]
minibatches = 200
batch_size = 50
learning_rate = 0.005

[eval]
trials = 60
"#;

const PSK_SMALL: &str = r#"
kind = "psk8-under"
n = 20
m = 16
layers = 3
seed = 5
ensemble = "cn-unit"
constellation = "8psk"
snr_db = 15.0

[training]
minibatches = 20
batch_size = 20

[eval]
trials = 40
ser_min_errors = 20
ser_max_trials = 400
snr_grid = [10.0, 15.0]
chunk = 10
"#;

const OFDM_CLEAN: &str = r#"
kind = "clipped-ofdm"
n = 128
m = 128
layers = 2
seed = 2
ensemble = "idft"
constellation = "qam16"
sigma2 = 0.0
"#;

fn ctista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctista"))
        .args(args)
        .env("CTISTA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn missing_config_is_a_config_error() {
    let out = ctista(&[
        "train",
        "--config",
        "/nonexistent/ctista.toml",
        "--out",
        "/tmp/never.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(
        dir.path(),
        "bad.toml",
        &format!("{QUICK}\nunknown_key = 1\n"),
    );
    let out = ctista(&["sweep-iter", "--config", s(&bad), "--untrained"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    assert_eq!(ctista(&["sweep-iter", "--bogus"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "q.toml", QUICK);
    // neither --params nor --untrained nor --train
    assert_eq!(
        ctista(&["sweep-iter", "--config", s(&cfg)]).status.code(),
        Some(2)
    );
    let missing = dir.path().join("absent.json");
    assert_eq!(
        ctista(&["sweep-iter", "--config", s(&cfg), "--params", s(&missing)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = QUICK
        .replace("learning_rate = 0.005", "learning_rate = 1e300")
        .replace("minibatches = 200", "minibatches = 5");
    let cfg = write_config(dir.path(), "div.toml", &body);
    let out = ctista(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("p.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged in generation"));
}

#[test]
fn unwritable_output_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", QUICK);
    let out = ctista(&[
        "sweep-iter",
        "--config",
        s(&cfg),
        "--untrained",
        "--trials",
        "2",
        "--out",
        "/nonexistent/dir/x.csv",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_minibatches_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "k0.toml",
        &QUICK.replace("minibatches = 200", "minibatches = 0"),
    );
    let params = dir.path().join("p.json");
    let out = ctista(&["train", "--config", s(&cfg), "--out", s(&params)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (p, meta) = load_params(&params).unwrap();
    let scn = Scenario::build(ScenarioConfig::load(&cfg).unwrap()).unwrap();
    let init = scn.model().unwrap().init_params(Some(scn.sigma2()));
    assert_eq!(p, init);
    assert_eq!(p.beta, vec![1.0; 4]);
    assert_eq!(p.b, vec![1.0; 4]);
    assert_eq!(meta.seed, 3);
}

#[test]
fn reduced_scale_training_writes_finite_parameters_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", QUICK);
    let params = dir.path().join("p.json");
    let out = ctista(&["train", "--config", s(&cfg), "--out", s(&params)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (p, _) = load_params(&params).unwrap();
    let all: Vec<f64> = p.beta.iter().chain(&p.a).chain(&p.b).copied().collect();
    assert_eq!(all.len(), 12);
    assert!(all.iter().all(|v| v.is_finite()));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("p.json.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["generations"].as_array().unwrap().len(), 4);

    // the trained parameters beat the initialization on the sweep
    let csv = |flag: &[&str]| {
        let mut args = vec!["sweep-iter", "--config", s(&cfg), "--trials", "60"];
        args.extend_from_slice(flag);
        String::from_utf8(ctista(&args).stdout).unwrap()
    };
    let last = |text: String| -> f64 { data_rows(&text).last().unwrap()[2].parse().unwrap() };
    let trained = last(csv(&["--params", s(&params)]));
    let untrained = last(csv(&["--untrained"]));
    assert!(trained < untrained - 3.0, "{trained} vs {untrained}");
}

#[test]
fn sweeps_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", QUICK);
    let args = [
        "sweep-iter",
        "--config",
        s(&cfg),
        "--untrained",
        "--baseline",
        "zf",
        "--baseline",
        "amp",
        "--trials",
        "30",
    ];
    let a = ctista(&args);
    assert_eq!(a.status.code(), Some(0));
    // thread count must not change the output
    let b = Command::new(env!("CARGO_BIN_EXE_ctista"))
        .args(args)
        .env("CTISTA_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(a.stdout, b.stdout);

    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    let prov = lines.next().unwrap();
    assert!(
        prov.starts_with("# ctista ") && prov.contains("config_digest=") && prov.contains("seed=3")
    );
    assert_eq!(
        lines.next().unwrap(),
        "t,algorithm,nmse_db,trials,stderr_db"
    );
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 4 * 3);
    assert!(rows.iter().all(|r| r[3] == "30"));

    let psk = write_config(dir.path(), "psk.toml", PSK_SMALL);
    let snr = [
        "sweep-snr",
        "--config",
        s(&psk),
        "--train",
        "--baseline",
        "zf",
    ];
    let first = ctista(&snr);
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert_eq!(first.stdout, ctista(&snr).stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap() == "snr_db,algorithm,mse,ser,trials");
    assert_eq!(data_rows(&text).len(), 4);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", QUICK);
    let run = |seed: &str| {
        ctista(&[
            "sweep-iter",
            "--config",
            s(&cfg),
            "--untrained",
            "--trials",
            "5",
            "--seed",
            seed,
        ])
        .stdout
    };
    let (a, b) = (run("3"), run("4"));
    assert_ne!(a, b);
    assert!(String::from_utf8(b).unwrap().contains("seed=4"));
}

#[test]
fn clean_unclipped_ofdm_scatter_lies_on_the_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ofdm.toml", OFDM_CLEAN);
    let out_csv = dir.path().join("scatter.csv");
    let out = ctista(&[
        "scatter",
        "--config",
        s(&cfg),
        "--untrained",
        "--out",
        s(&out_csv),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&out_csv).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "re,im,algorithm");
    let rows = data_rows(&text);
    let dft: Vec<&Vec<String>> = rows.iter().filter(|r| r[2] == "dft").collect();
    assert_eq!(dft.len(), 128);
    assert_eq!(
        rows.iter().filter(|r| r[2] == "ctista-untrained").count(),
        128
    );
    let qam = make_qam16();
    for r in dft {
        let z = C64::new(r[0].parse().unwrap(), r[1].parse().unwrap());
        assert!((hard_decision(z, &qam) - z).norm() < 1e-9, "{z}");
    }
}

#[test]
fn selftest_passes() {
    let out = ctista(&["selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 3 && text.lines().all(|l| l.starts_with("PASS ")));
}
