use std::path::Path;
use std::process::{Command, Output};

const SYNTH: &str = "layers = 6, 8, 3\ndata = synth:linear-teacher\nsynth_features = 6\nsynth_classes = 3\n\
                     train_size = 60\ntest_size = 20\nepochs = 2\nseed = 4\n";

fn run(args: &[&str], cfg: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_block-admm"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &format!("method = block-admm\n{SYNTH}"));
    let out = dir.path().join("run");
    let o = run(&["train", "--out", out.to_str().unwrap()], &cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "metrics.csv", "model.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let o = run(&["eval", "--model", out.join("model.bin").to_str().unwrap()], &cfg);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("accuracy ") && text.contains("on 20 samples"), "{text}");
}

#[test]
fn deepfacto_projection_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &format!("method = deepfacto\nnmf_rank = 3\n{SYNTH}"));
    let out = dir.path().join("run");
    assert!(run(&["train", "--out", out.to_str().unwrap()], &cfg).status.success());
    assert!(out.join("s_train.csv").exists());
    let proj = dir.path().join("proj");
    let o = run(&["nmf-project", "--model", out.join("model.bin").to_str().unwrap(), "--out", proj.to_str().unwrap()], &cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = std::fs::read_to_string(proj.join("s.csv")).unwrap();
    let mut lines = s.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 21);
    assert_eq!(lines.count(), 3);
}

#[test]
fn convergence_mode_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &format!("method = convergence\nouter_iters = 3\ninner_cap = 5\n{SYNTH}"));
    let out = dir.path().join("run");
    assert!(run(&["train", "--out", out.to_str().unwrap()], &cfg).status.success());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,rho,eta,eps,h_norm,inner_iters,grad_sq\n"));
    assert_eq!(trace.lines().count(), 4);
}

#[test]
fn gen_synth_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", SYNTH);
    let out = dir.path().join("synth");
    assert!(run(&["gen-synth", "--out", out.to_str().unwrap()], &cfg).status.success());
    let train = std::fs::read_to_string(out.join("train.csv")).unwrap();
    assert!(train.starts_with("label,x0,x1,x2,x3,x4,x5\n"));
    assert_eq!(train.lines().count(), 61);

    let bench = dir.path().join("bench");
    let o = run(&["bench", "--out", bench.to_str().unwrap(), "--methods", "block-admm,sgd"], &cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(bench.join("block-admm.csv").exists() && bench.join("sgd.csv").exists());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &format!("method = sgd\n{SYNTH}"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["train", "--out", a.to_str().unwrap()], &cfg).status.success());
    assert!(run(&["train", "--out", b.to_str().unwrap(), "--seed", "99"], &cfg).status.success());
    assert_ne!(std::fs::read(a.join("model.bin")).unwrap(), std::fs::read(b.join("model.bin")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.txt", SYNTH);

    // usage
    let o = Command::new(env!("CARGO_BIN_EXE_block-admm")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let bad = write_config(dir.path(), "bad.txt", "no_such_key = 1\n");
    let o = run(&["train", "--out", dir.path().join("x").to_str().unwrap()], &bad);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    // data
    let o = run(&["eval", "--model", dir.path().join("missing.bin").to_str().unwrap()], &good);
    assert_eq!(o.status.code(), Some(2));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"BLOCKADMM v9\n").unwrap();
    let o = run(&["eval", "--model", junk.to_str().unwrap()], &good);
    assert_eq!(o.status.code(), Some(2));
    let nodata = write_config(dir.path(), "nodata.txt", "data = mnist:/nonexistent/dir\n");
    let o = run(&["train", "--out", dir.path().join("y").to_str().unwrap()], &nodata);
    assert_eq!(o.status.code(), Some(2));

    // numeric
    let wild = write_config(dir.path(), "wild.txt", &format!("method = sgd\nlr = 1e200\n{}", SYNTH.replace("6, 8, 3", "6, 3")));
    let o = run(&["train", "--out", dir.path().join("z").to_str().unwrap()], &wild);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
