use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coda")).args(args).output().expect("run coda")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "input_size": [32, 32],
  "patch_fraction": 1.0,
  "scales": [0.6],
  "stage1_steps": 3,
  "stage2_steps": 2,
  "counting_net": {"in_channels": 1, "front_channels": [[4], [4]], "backend_channels": 4, "backend_dilation": 4},
  "discriminator": {"in_channels": 1, "channels": [4, 4, 4, 4, 1], "leaky_slope": 0.2},
  "g_optimizer": {"kind": "adam", "lr": 0.001}
}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn with_data(n: &str) -> Self {
        let ws = Workspace::new();
        let out = ws.path("data");
        let o = coda(&["gen-data", "--preset", "shift", "--out", p(&out), "--n", n, "--seed", "3", "--size", "32"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::write(ws.path("config.json"), TINY_CONFIG).unwrap();
        ws
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_both_splits_deterministically() {
    let ws = Workspace::new();
    let a = ws.path("a");
    let b = ws.path("b");
    for dir in [&a, &b] {
        let o = coda(&["gen-data", "--preset", "shift", "--out", p(dir), "--n", "4", "--seed", "5", "--size", "48"]);
        assert_eq!(code(&o), 0);
    }
    let files = tree(&a);
    assert_eq!(files.iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "png")).count(), 8);
    assert_eq!(files.iter().filter(|(f, _)| f.ends_with("annotations.json")).count(), 2);
    assert_eq!(files, tree(&b));
}

#[test]
fn gen_data_rejects_zero_images_and_occupied_dirs() {
    let ws = Workspace::new();
    let out = ws.path("d");
    assert_eq!(code(&coda(&["gen-data", "--preset", "shift", "--out", p(&out), "--n", "0"])), 2);
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("x"), "x").unwrap();
    let args = ["gen-data", "--preset", "shift", "--out", p(&out), "--n", "1", "--size", "32"];
    assert_eq!(code(&coda(&args)), 1);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&coda(&forced)), 0);
}

#[test]
fn pretrain_writes_checkpoint_and_one_log_line_per_step() {
    let ws = Workspace::with_data("2");
    let ckpt = ws.path("pre.ckpt");
    let o = coda(&["pretrain", "--config", p(&ws.path("config.json")), "--data", p(&ws.path("data/source")), "--out", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(&ckpt).unwrap().starts_with(b"CKPT"));
    let log = fs::read_to_string(ws.path("pre.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["stage"], 1);
        assert!(v["l_dens"].is_f64());
    }
}

#[test]
fn malformed_config_is_a_usage_error_naming_the_field() {
    let ws = Workspace::with_data("1");
    fs::write(ws.path("bad.json"), r#"{"stage1_step": 3}"#).unwrap();
    let o = coda(&["pretrain", "--config", p(&ws.path("bad.json")), "--data", p(&ws.path("data/source")), "--out", p(&ws.path("x.ckpt"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1_step"));
    fs::write(ws.path("bad2.json"), r#"{"batch_size": 0}"#).unwrap();
    let o = coda(&["pretrain", "--config", p(&ws.path("bad2.json")), "--data", p(&ws.path("data/source")), "--out", p(&ws.path("x.ckpt"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));
}

#[test]
fn adapt_guards_annotated_targets_and_resumes_idempotently() {
    let ws = Workspace::with_data("2");
    let cfg = ws.path("config.json");
    let pre = ws.path("pre.ckpt");
    let o = coda(&["pretrain", "--config", p(&cfg), "--data", p(&ws.path("data/source")), "--out", p(&pre)]);
    assert_eq!(code(&o), 0);
    let adapted = ws.path("adapted.ckpt");
    let (source, target) = (ws.path("data/source"), ws.path("data/target"));
    let base = [
        "adapt", "--config", p(&cfg), "--ckpt", p(&pre), "--source", p(&source),
        "--target", p(&target), "--out", p(&adapted),
    ];
    let o = coda(&base);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--allow-annotated"));

    let mut allowed = base.to_vec();
    allowed.push("--allow-annotated");
    let o = coda(&allowed);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["steps_run"], 2);
    let first = fs::read(&adapted).unwrap();
    let log = fs::read_to_string(ws.path("adapted.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for key in ["l_dens", "l_disc", "l_adv", "l_rank", "lr_d"] {
        let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert!(v[key].is_f64(), "{key}");
    }

    let resumed = ws.path("resumed.ckpt");
    let o = coda(&[
        "adapt", "--config", p(&cfg), "--ckpt", p(&adapted), "--source", p(&ws.path("data/source")),
        "--target", p(&ws.path("data/target")), "--out", p(&resumed), "--allow-annotated",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["steps_run"], 0);
    assert_eq!(fs::read(&resumed).unwrap(), first);
}

#[test]
fn adapt_without_checkpoint_fails() {
    let ws = Workspace::with_data("1");
    let o = coda(&[
        "adapt", "--config", p(&ws.path("config.json")), "--ckpt", p(&ws.path("missing.ckpt")),
        "--source", p(&ws.path("data/source")), "--target", p(&ws.path("data/target")),
        "--out", p(&ws.path("o.ckpt")), "--allow-annotated",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn oracle_eval_is_all_zero() {
    let ws = Workspace::with_data("3");
    let o = coda(&["eval", "--oracle", "--data", p(&ws.path("data/target")), "--gmae-levels", "0,1,2,3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["n_images"], 3);
    assert_eq!(v["mae"], 0.0);
    assert_eq!(v["mse"], 0.0);
    for l in ["0", "1", "2", "3"] {
        assert_eq!(v["gmae"][l], 0.0);
    }
}

#[test]
fn checkpoint_eval_report_and_render() {
    let ws = Workspace::with_data("2");
    let cfg = ws.path("config.json");
    let pre = ws.path("pre.ckpt");
    assert_eq!(code(&coda(&["pretrain", "--config", p(&cfg), "--data", p(&ws.path("data/source")), "--out", p(&pre)])), 0);
    let dmaps = ws.path("maps");
    let report = ws.path("report.json");
    let o = coda(&[
        "eval", "--ckpt", p(&pre), "--data", p(&ws.path("data/target")), "--gmae-levels", "0,1",
        "--config", p(&cfg), "--dmap-dir", p(&dmaps), "--out", p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let obj = v.as_object().unwrap();
    let mut keys: Vec<_> = obj.keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["dataset", "gmae", "mae", "mse", "n_images"]);
    assert!(v["mae"].as_f64().unwrap() >= 0.0);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&fs::read_to_string(&report).unwrap()).unwrap(), v);
    assert!(String::from_utf8_lossy(&o.stderr).contains("GMAE(1)"));

    let map = fs::read_dir(&dmaps).unwrap().next().unwrap().unwrap().path();
    let (a, b) = (ws.path("a.png"), ws.path("b.png"));
    assert_eq!(code(&coda(&["render", "--dmap", p(&map), "--out", p(&a)])), 0);
    assert_eq!(code(&coda(&["render", "--dmap", p(&map), "--out", p(&b)])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn render_rejects_non_dmap_input() {
    let ws = Workspace::new();
    fs::write(ws.path("x.dmap"), b"nope").unwrap();
    let o = coda(&["render", "--dmap", p(&ws.path("x.dmap")), "--out", p(&ws.path("x.png"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    let o = coda(&["gradcheck", "--op", "conv2d_dilated"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    assert_eq!(v["ops"].as_array().unwrap().len(), 1);
    assert!(v["ops"][0]["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(code(&coda(&["gradcheck", "--op", "nonsense"])), 2);
}

#[test]
fn gradcheck_full_suite_passes() {
    let o = coda(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    let ops = v["ops"].as_array().unwrap();
    assert!(ops.len() >= 20);
    assert!(ops.iter().all(|op| op["passed"] == true));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&coda(&[])), 2);
    assert_eq!(code(&coda(&["eval", "--data", "x"])), 2);
    assert_eq!(code(&coda(&["gen-data", "--out", "x", "--n", "1"])), 2);
}
