use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn spim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn spim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
        .parse()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_instance_exits_2_without_output() {
    let tmp = TempDir::new().unwrap();
    let o = spim(&["solve", "--instance", "nope.txt", "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn malformed_instance_exits_2_without_output() {
    let tmp = TempDir::new().unwrap();
    for (name, body) in [("neg.txt", "1\n-2\n"), ("text.txt", "one\ntwo\n"), ("short.txt", "5\n")] {
        fs::write(tmp.path().join(name), body).unwrap();
        let o = spim(&["solve", "--instance", name, "--out", "run"], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{name}");
        assert!(!tmp.path().join("run").exists());
    }
}

#[test]
fn two_equal_numbers_split_evenly() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("pair.txt"), "1\n1\n").unwrap();
    let o = spim(&["solve", "--instance", "pair.txt", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "fidelity"), 0.0);
    let p = json(&tmp.path().join("run/partition.json"));
    assert_eq!(p["subset_plus"], serde_json::json!([1.0]));
    assert_eq!(p["subset_minus"], serde_json::json!([1.0]));

    let m = json(&tmp.path().join("run/manifest.json"));
    assert_eq!(m["command"], "solve");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outputs, ["trace.csv", "partition.json"]);
    let trace = fs::read_to_string(tmp.path().join("run/trace.csv")).unwrap();
    assert!(trace.starts_with("# spim-trace v1\niteration,t_step,beta,objective,fidelity,accepted,sim_time_ms\n"));
}

#[test]
fn generated_64_spin_instance_reaches_low_fidelity() {
    let tmp = TempDir::new().unwrap();
    let o = spim(&["solve", "--n", "64", "--seed", "7", "--mode", "fast", "--out", "run"], tmp.path());
    assert!(o.status.success());
    let line = stdout(&o);
    assert!(field(&line, "fidelity") <= 1e-2, "{line}");
    assert_eq!(field(&line, "iterations"), 2080.0);
}

#[test]
fn checkerboard_without_iterations_keeps_initial_cost() {
    let tmp = TempDir::new().unwrap();
    let o = spim(&["checkerboard", "--spins", "4", "--iterations", "0", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "ratio"), 1.0);
}

#[test]
fn checkerboard_camera_mode_converges() {
    let tmp = TempDir::new().unwrap();
    let o = spim(
        &["checkerboard", "--spins", "8", "--mode", "camera", "--iterations", "600", "--out", "run"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(field(&stdout(&o), "ratio") < 0.1);
    assert_eq!(json(&tmp.path().join("run/summary.json"))["algorithm"], "mh");
}

#[test]
fn noise_floor_is_zero_without_noise() {
    let tmp = TempDir::new().unwrap();
    let o = spim(&["noise-floor", "--spins", "4", "--noise", "off", "--out", "run"], tmp.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.0);
    let o = spim(&["noise-floor", "--spins", "4", "--noise", "paper-like", "--out", "run2"], tmp.path());
    assert!(stdout(&o).trim().parse::<f64>().unwrap() > 0.0);
}

#[test]
fn bench_writes_one_record_per_instance_and_solver() {
    let tmp = TempDir::new().unwrap();
    let o = spim(
        &["bench", "--sizes", "8,16,64", "--seeds", "2", "--solvers", "spim,kk", "--out", "run"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(tmp.path().join("run/records.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "instance_id",
            "n_spins",
            "solver_name",
            "best_fidelity",
            "best_residual",
            "iterations",
            "simulated_time_ms",
            "seed",
            "error"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    for solver in ["spim", "karmarkar_karp"] {
        assert_eq!(rows.iter().filter(|r| &r[2] == solver).count(), 6);
    }
    assert!(tmp.path().join("run/reference_table.json").exists());
    assert!(tmp.path().join("run/timings.csv").exists());
}

#[test]
fn scaling_has_one_row_per_size() {
    let tmp = TempDir::new().unwrap();
    let o = spim(&["scaling", "--sizes", "16,64,256", "--seeds", "2", "--svg", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("run/scaling.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("size,mean_fidelity,std,mean_time"));
    let sizes: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sizes, ["16", "64", "256"]);
    assert!(tmp.path().join("run/scaling.svg").exists());
}

#[test]
fn scaling_rejects_non_square_sizes() {
    let tmp = TempDir::new().unwrap();
    let o = spim(&["scaling", "--sizes", "20", "--seeds", "1", "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "[common]\nseed = 3\nout = \"from-config\"\n\n[solve]\nn = 16\n\n[schedule]\nsteps = 8\nsettle_iterations = 10\n",
    )
    .unwrap();
    let o = spim(&["solve", "--config", "run.toml", "--settle-iterations", "20"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // stages t = 0..=8 at the flag value, not the file value
    assert_eq!(field(&stdout(&o), "iterations"), 180.0);
    let m = json(&tmp.path().join("from-config/manifest.json"));
    assert_eq!(m["seeds"], serde_json::json!([3]));

    let o = spim(&["solve", "--config", "run.toml", "--seed", "4", "--out", "flag"], tmp.path());
    assert!(o.status.success());
    assert_eq!(json(&tmp.path().join("flag/manifest.json"))["seeds"], serde_json::json!([4]));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[common]\nsede = 3\n").unwrap();
    let o = spim(&["solve", "--config", "bad.toml", "--n", "16", "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = TempDir::new().unwrap();
    let mut bytes = Vec::new();
    for threads in ["1", "4"] {
        let out = format!("run{threads}");
        let o = Command::new(env!("CARGO_BIN_EXE_spim"))
            .args(["bench", "--sizes", "16,64", "--seeds", "3", "--solvers", "spim,kk,random", "--random-samples", "500"])
            .args(["--out", &out])
            .env("SPIM_SIM_THREADS", threads)
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert!(o.status.success());
        bytes.push(fs::read(tmp.path().join(&out).join("records.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}
