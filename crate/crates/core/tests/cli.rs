use std::path::Path;
use std::process::{Command, Output};

fn amortize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amortize")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn help_exits_zero_and_bad_usage_exits_two() {
    assert_eq!(code(&amortize(&["--help"])), 0);
    assert_eq!(code(&amortize(&["gauss-lab", "--help"])), 0);
    assert_eq!(code(&amortize(&["frobnicate"])), 2);
    assert_eq!(code(&amortize(&["train", "--steps", "x"])), 2);
}

#[test]
fn generate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = amortize(&["generate", "--style", "desk", "--count", "12", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ra, rb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    assert_eq!(ra.len(), 13);
    assert_eq!(ra, rb);
    let manifest = String::from_utf8(std::fs::read(a.join("manifest.jsonl")).unwrap()).unwrap();
    assert_eq!(manifest.lines().count(), 13);
    assert!(manifest.lines().nth(1).unwrap().contains("\"file\":\"img_000000.pgm\""));
}

#[test]
fn zero_count_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = amortize(&["generate", "--count", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    assert!(manifest.contains("\"count\":0"));
}

#[test]
fn unwritable_output_and_bad_style_exit_two() {
    let o = amortize(&["generate", "--count", "1", "--out", "/dev/null/sub"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = amortize(&["generate", "--count", "1", "--style", "no-such-style", "--out", "/tmp"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown style"));
}

#[test]
fn one_step_training_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    let o = amortize(&[
        "train", "--style", "tiny", "--arch", "tiny", "--steps", "1", "--batch", "4", "--heldout", "5",
        "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let net = amortize::proposal::checkpoint::load(&ckpt).unwrap();
    assert_eq!(net.arch().input_width, 20);
    let metrics = std::fs::read_to_string(dir.path().join("net.csv")).unwrap();
    assert_eq!(metrics.lines().collect::<Vec<_>>()[0], "step,loss,heldout_rr,wall_ms");
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn metrics_have_one_row_per_logging_interval_and_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let o = amortize(&[
            "train", "--style", "tiny", "--arch", "tiny", "--steps", "25", "--batch", "8", "--log-every", "10",
            "--heldout", "10", "--seed", "3", "--lr", "0.01", "--checkpoint", ckpt.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (std::fs::read(&ckpt).unwrap(), std::fs::read(dir.path().join(format!("{name}.csv"))).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let steps: Vec<String> = String::from_utf8(a.1).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().to_owned()).collect();
    assert_eq!(steps, ["10", "20", "25"]);
}

#[test]
fn diverging_training_exits_three_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    let o = amortize(&[
        "train", "--style", "tiny", "--arch", "tiny", "--steps", "50", "--batch", "4", "--heldout", "0",
        "--lr", "1e300", "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("training error"));
    let net = amortize::proposal::checkpoint::load(&ckpt).unwrap();
    assert!(net.params().iter().all(|p| p.all_finite()));
}

#[test]
fn break_and_perturb_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    assert_eq!(code(&amortize(&["generate", "--style", "tiny", "--count", "4", "--out", &d("data")])), 0);
    let o = amortize(&["train", "--style", "tiny", "--arch", "tiny", "--steps", "2", "--batch", "4", "--checkpoint", &d("net.ckpt")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = amortize(&["break", "--checkpoint", &d("net.ckpt"), "--style", "tiny", "--input", &d("data")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(out.lines().next().unwrap(), "image,decoded,ms");
    assert_eq!(out.lines().count(), 5);
    assert!(stderr(&o).contains("recognition rate"));

    let img = d("data/img_000000.pgm");
    let o = amortize(&["break", "--checkpoint", &d("net.ckpt"), "--style", "tiny", "--input", &img, "--mode", "posterior", "--particles", "100"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(out.lines().next().unwrap(), "rank,string,probability");
    let total: f64 = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!(total <= 1.0 + 1e-9 && total > 0.0);
    let summary: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(summary["particles"], 100);
    assert!(summary["ess"].as_f64().unwrap() >= 1.0);

    let o = amortize(&[
        "perturb-eval", "--checkpoint", &d("net.ckpt"), "--style", "tiny", "--count", "5", "--sigma", "5",
        "--kerning-delta", "1", "--alpha", "1.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout.clone()).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "perturbation,n,clean_rr,rr,mean_ms,median_ms");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("noise sigma=5,5,"));
}

#[test]
fn break_rejects_mismatched_image_dims() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    assert_eq!(code(&amortize(&["generate", "--style", "desk", "--count", "1", "--out", &d("desk")])), 0);
    assert_eq!(code(&amortize(&["train", "--style", "tiny", "--arch", "tiny", "--steps", "1", "--batch", "2", "--checkpoint", &d("t.ckpt")])), 0);
    let o = amortize(&["break", "--checkpoint", &d("t.ckpt"), "--style", "tiny", "--input", &d("desk/img_000000.pgm")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("expects 12×20"), "{}", stderr(&o));
}

#[test]
fn gauss_lab_writes_the_sweep_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = amortize(&["gauss-lab", "--steps", "20", "--seeds", "2", "--particles", "50", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "scenario,seed,mu_err,sigma_err,ess");
    assert_eq!(text.lines().count(), 7);
    let o = amortize(&["gauss-lab", "--mu-pi", "1", "--steps", "1"]);
    assert_eq!(code(&o), 2);
}
