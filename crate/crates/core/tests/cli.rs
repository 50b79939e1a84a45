use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowlab::neural_velocity::{Checkpoint, NetConfig, VelocityNet};
use flowlab::TrainingSet;
use tempfile::TempDir;

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowlab(args);
    assert!(
        out.status.success(),
        "flowlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn two_moons(dir: &TempDir, n: usize, seed: u64) -> PathBuf {
    let out = dir.path().join(format!("moons_{n}_{seed}"));
    ok(&[
        "gen-data",
        "two-moons",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&out),
    ]);
    out.join("dataset.fmds")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = two_moons(&dir, 256, 7);
    let b_dir = dir.path().join("again");
    let stdout = ok(&["gen-data", "two-moons", "--n", "256", "--seed", "7", "--out", p(&b_dir)]);
    assert!(stdout.contains("n=256 d=2"), "{stdout}");
    assert_eq!(fs::read(&a).unwrap(), fs::read(b_dir.join("dataset.fmds")).unwrap());
}

#[test]
fn gen_data_mixture_file_size() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m");
    ok(&[
        "gen-data",
        "mixture",
        "--n",
        "1024",
        "--dim",
        "512",
        "--k",
        "8",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    let len = fs::metadata(out.join("dataset.fmds")).unwrap().len();
    assert_eq!(len, 24 + 4 * 1024 * 512);
}

#[test]
fn gen_data_without_n_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = flowlab(&["gen-data", "two-moons", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_and_subcommand_are_usage_errors() {
    assert_eq!(
        flowlab(&["gen-data", "two-moons", "--n", "4", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(flowlab(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn standardize_flag_is_recorded_in_the_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s");
    let stdout = ok(&["gen-data", "two-moons", "--n", "64", "--standardize", "--out", p(&out)]);
    assert!(stdout.contains("standardized"));
    assert!(TrainingSet::load(out.join("dataset.fmds")).unwrap().standardized);
}

#[test]
fn efm_with_one_companion_matches_cfm_loss() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 128, 3);
    let common = [
        "--steps",
        "60",
        "--log-every",
        "5",
        "--hidden",
        "32,32",
        "--seed",
        "11",
        "--data",
        p(&data),
    ];
    let cfm = dir.path().join("cfm");
    let efm = dir.path().join("efm");
    let mut a: Vec<&str> = vec!["train", "--objective", "cfm", "--out", p(&cfm)];
    a.extend(common);
    ok(&a);
    let mut b: Vec<&str> = vec!["train", "--objective", "efm", "--M", "1", "--out", p(&efm)];
    b.extend(common);
    ok(&b);
    let ra = read_csv(&cfm.join("loss.csv"));
    let rb = read_csv(&efm.join("loss.csv"));
    assert_eq!(ra.len(), 13);
    assert_eq!(ra.len(), rb.len());
    assert_eq!(ra[0], vec!["step", "loss"]);
    for (x, y) in ra[1..].iter().zip(&rb[1..]) {
        assert_eq!(x[0], y[0]);
        let (lx, ly): (f64, f64) = (x[1].parse().unwrap(), y[1].parse().unwrap());
        assert!((lx - ly).abs() <= 1e-5, "{lx} vs {ly}");
    }
}

#[test]
fn efm_without_m_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 16, 0);
    let out = flowlab(&[
        "train",
        "--data",
        p(&data),
        "--objective",
        "efm",
        "--out",
        p(&dir.path().join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_steps_writes_the_initialized_net() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 32, 0);
    let out = dir.path().join("t");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--steps",
        "0",
        "--hidden",
        "16,16",
        "--seed",
        "5",
        "--out",
        p(&out),
    ]);
    let ck = Checkpoint::load(out.join("checkpoint.fmnn")).unwrap();
    let cfg = NetConfig {
        hidden: vec![16, 16],
        ..NetConfig::default()
    };
    let init = VelocityNet::new(2, &cfg, 5).unwrap();
    let (a, b) = (ck.net.params.to_flat(), init.params.to_flat());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(*x, (*y as f32) as f64);
    }
}

#[test]
fn missing_checkpoint_file_is_reported() {
    let dir = TempDir::new().unwrap();
    let out = flowlab(&[
        "sample",
        "--checkpoint",
        p(&dir.path().join("nope.fmnn")),
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_dataset_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.fmds");
    fs::write(&bad, b"not a dataset file at all").unwrap();
    let out = flowlab(&[
        "nn-dist",
        "--samples",
        p(&bad),
        "--data",
        p(&bad),
        "--out",
        p(&dir.path().join("n")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn singular_time_grid_is_a_singularity_error() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 16, 0);
    let out = flowlab(&[
        "collapse",
        "--data",
        p(&data),
        "--t-grid",
        "0.5,1",
        "--n-pairs",
        "10",
        "--out",
        p(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn verify_efm_reports_exact_agreement() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("v");
    let stdout = ok(&["verify-efm", "--n", "4", "--M", "2", "--trials", "50", "--out", p(&out)]);
    let line = stdout
        .lines()
        .find(|l| l.starts_with("max unbiasedness error"))
        .unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value <= 1e-10, "{line}");
    assert_eq!(read_csv(&out.join("verify_efm.csv")).len(), 51);
}

#[test]
fn hybrid_tau_zero_equals_learned_sampling() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 64, 2);
    let train = dir.path().join("t");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--steps",
        "20",
        "--hidden",
        "16",
        "--out",
        p(&train),
    ]);
    let ck = train.join("checkpoint.fmnn");
    let h = dir.path().join("h");
    let s = dir.path().join("s");
    let shared = ["--n-samples", "32", "--steps", "25", "--seed", "9"];
    let mut a = vec![
        "hybrid",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ck),
        "--taus",
        "0,1",
        "--out",
        p(&h),
    ];
    a.extend(shared);
    ok(&a);
    let mut b = vec!["sample", "--checkpoint", p(&ck), "--out", p(&s)];
    b.extend(shared);
    ok(&b);
    assert_eq!(
        fs::read(h.join("hybrid_tau_0.fmds")).unwrap(),
        fs::read(s.join("samples.fmds")).unwrap()
    );
    // tau = 1 is the pure exact sampler.
    let e = dir.path().join("e");
    let mut c = vec!["sample", "--data", p(&data), "--field", "exact", "--out", p(&e)];
    c.extend(shared);
    ok(&c);
    assert_eq!(
        fs::read(h.join("hybrid_tau_1.fmds")).unwrap(),
        fs::read(e.join("samples.fmds")).unwrap()
    );
    assert_eq!(read_csv(&h.join("hybrid_nn.csv")).len(), 3);
}

#[test]
fn collapse_vs_dim_has_one_group_per_dimension() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    ok(&[
        "collapse",
        "--dims",
        "2,32,512",
        "--n-pairs",
        "50",
        "--n",
        "256",
        "--out",
        p(&out),
    ]);
    let rows = read_csv(&out.join("collapse_vs_dim.csv"));
    let mut dims: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    dims.dedup();
    assert_eq!(dims, vec!["2", "32", "512"]);
    assert_eq!(rows.len(), 1 + 3 * 10);
}

#[test]
fn diagnostics_write_their_tables() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 64, 4);
    let s = dir.path().join("s");
    ok(&[
        "sample",
        "--data",
        p(&data),
        "--n-samples",
        "16",
        "--steps",
        "20",
        "--method",
        "rk4",
        "--out",
        p(&s),
    ]);
    let samples = s.join("samples.fmds");
    let nn = dir.path().join("nn");
    let stdout = ok(&["nn-dist", "--samples", p(&samples), "--data", p(&data), "--out", p(&nn)]);
    assert!(stdout.contains("raw coordinates"));
    assert_eq!(read_csv(&nn.join("nn_dist.csv")).len(), 17);
    let mmd = dir.path().join("mmd");
    let stdout = ok(&[
        "mmd",
        "--a",
        p(&samples),
        "--b",
        p(&data),
        "--variant",
        "biased",
        "--out",
        p(&mmd),
    ]);
    assert!(stdout.contains("not FID"));
    let rows = read_csv(&mmd.join("mmd.csv"));
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[6][2], "total");
}

#[test]
fn approx_error_and_trajectories() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 32, 1);
    let train = dir.path().join("t");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--steps",
        "10",
        "--hidden",
        "8",
        "--out",
        p(&train),
    ]);
    let ck = train.join("checkpoint.fmnn");
    let ae = dir.path().join("ae");
    ok(&[
        "approx-error",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ck),
        "--use-ema",
        "--t-grid",
        "0,0.5,0.9",
        "--n-mc",
        "16",
        "--out",
        p(&ae),
    ]);
    assert_eq!(read_csv(&ae.join("approx_error.csv")).len(), 4);
    let tr = dir.path().join("tr");
    ok(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--n-samples",
        "3",
        "--steps",
        "5",
        "--trajectories",
        "--out",
        p(&tr),
    ]);
    let rows = read_csv(&tr.join("trajectories.csv"));
    assert_eq!(rows[0], vec!["sample_id", "t", "x0", "x1"]);
    assert_eq!(rows.len(), 1 + 3 * 6);
}

#[test]
fn config_file_supplies_arguments_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("o");
    fs::write(
        &cfg,
        format!(
            r#"{{"command": "gen-data", "seed": 7, "output_dir": {:?}, "args": {{"kind": "two-moons", "n": 100}}}}"#,
            p(&out)
        ),
    )
    .unwrap();
    ok(&["gen-data", "--config", p(&cfg), "--n", "50"]);
    let ts = TrainingSet::load(out.join("dataset.fmds")).unwrap();
    assert_eq!(ts.n(), 50);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 7);
    assert_eq!(echoed["args"]["n"], 50);
    assert_eq!(echoed["args"]["noise"], 0.05);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let top = dir.path().join("top.json");
    fs::write(&top, r#"{"command": "gen-data", "sed": 1}"#).unwrap();
    assert_eq!(
        flowlab(&["gen-data", "two-moons", "--n", "4", "--config", p(&top)])
            .status
            .code(),
        Some(2)
    );
    let inner = dir.path().join("inner.json");
    fs::write(&inner, r#"{"command": "gen-data", "args": {"n": 4, "colour": "red"}}"#).unwrap();
    assert_eq!(
        flowlab(&["gen-data", "two-moons", "--config", p(&inner)]).status.code(),
        Some(2)
    );
    let wrong = dir.path().join("wrong.json");
    fs::write(&wrong, r#"{"command": "train"}"#).unwrap();
    assert_eq!(
        flowlab(&["gen-data", "two-moons", "--n", "4", "--config", p(&wrong)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 64, 8);
    let first = dir.path().join("first");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--steps",
        "15",
        "--hidden",
        "16,16",
        "--objective",
        "otcfm",
        "--batch-size",
        "32",
        "--seed",
        "4",
        "--deterministic",
        "--out",
        p(&first),
    ]);
    let second = dir.path().join("second");
    ok(&["train", "--config", p(&first.join("config.json")), "--out", p(&second)]);
    for f in ["checkpoint.fmnn", "loss.csv"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
    let a = fs::read_to_string(first.join("config.json")).unwrap();
    let b = fs::read_to_string(second.join("config.json")).unwrap();
    assert_eq!(a.replace(p(&first), ""), b.replace(p(&second), ""));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let data = two_moons(&dir, 64, 3);
    let mut files = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("s{threads}"));
        ok(&[
            "sample",
            "--data",
            p(&data),
            "--n-samples",
            "40",
            "--steps",
            "30",
            "--threads",
            threads,
            "--out",
            p(&out),
        ]);
        files.push(fs::read(out.join("samples.fmds")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}
