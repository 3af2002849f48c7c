use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("DCN_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dcn(args);
    assert!(
        out.status.success(),
        "dcn {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
# small enough to train in well under a second
input_height = 16
input_width = 16
channels = 8,8
proj_hidden = 16
proj_dim = 8
detail_dim = 8
epochs = 2
way = 2
shot = 1
query = 2
tasks = 10
";

/// Synthetic data plus a trained tiny checkpoint.
fn fixture() -> (TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--classes",
        "4",
        "--per-class",
        "6",
        "--size",
        "16",
    ]);
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let ck = dir.path().join("tiny.ck");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&ck),
    ]);
    let (data, ck) = (p(&data).to_string(), p(&ck).to_string());
    (dir, data, ck)
}

#[test]
fn print_config_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&["train", "--print-config"]);
    let path = dir.path().join("dumped.cfg");
    fs::write(&path, &first).unwrap();
    let second = ok(&["train", "--config", p(&path), "--print-config"]);
    assert_eq!(first, second);
    assert!(first.lines().any(|l| l == "batch_n = 2"), "{first}");
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(dcn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dcn(&["eval", "--checkpoint", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = dcn(&[
        "train",
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("m.ck")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lr = 0.1\nwarp_speed = 9\n").unwrap();
    let out = dcn(&["train", "--config", p(&cfg), "--print-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));

    fs::write(&cfg, "lr = -1\n").unwrap();
    assert_eq!(
        dcn(&["train", "--config", p(&cfg), "--print-config"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--classes",
        "4",
        "--per-class",
        "4",
        "--size",
        "16",
    ]);
    let cfg = dir.path().join("hot.cfg");
    fs::write(
        &cfg,
        format!("{TINY}lr = 1e30\nepochs = 3\n").replace("epochs = 2\n", ""),
    )
    .unwrap();
    let out = dcn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m.ck")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn eval_reads_without_touching_the_checkpoint() {
    let (_dir, data, ck) = fixture();
    let before = fs::read(&ck).unwrap();
    let line = ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--split",
        "heldout",
    ]);
    let fields: Vec<&str> = line.trim().split('\t').collect();
    assert_eq!(fields.len(), 6, "{line}");
    assert_eq!(&fields[2..], ["10", "2", "1", "2"]);
    let acc: f64 = fields[0].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(fs::read(&ck).unwrap(), before);

    // flags override the stored protocol
    let line = ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--tasks",
        "3",
        "--split",
        "all",
        "--way",
        "3",
    ]);
    assert!(line.trim().ends_with("3\t3\t1\t2"), "{line}");
}

#[test]
fn eval_rejects_impossible_episodes() {
    let (_dir, data, ck) = fixture();
    // the novel split of a 4-class synthetic set holds a single class
    let out = dcn(&["eval", "--checkpoint", &ck, "--data", &data, "--way", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn maps_mode_writes_six_files_per_image() {
    let (dir, data, ck) = fixture();
    let out_dir = dir.path().join("maps");
    ok(&[
        "report",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--mode",
        "maps",
        "--split",
        "all",
        "--limit",
        "3",
        "--out-dir",
        p(&out_dir),
    ]);
    let files: Vec<_> = fs::read_dir(&out_dir).unwrap().collect();
    assert_eq!(files.len(), 18);
}

#[test]
fn variance_mode_writes_both_branches() {
    let (dir, data, ck) = fixture();
    let out_dir = dir.path().join("var");
    let text = ok(&[
        "report",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--mode",
        "variance",
        "--split",
        "all",
        "--out-dir",
        p(&out_dir),
    ]);
    let names: Vec<&str> = text
        .lines()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(names, ["context", "detail"]);
    assert!(out_dir.join("variance_context.tsv").exists());
    assert!(out_dir.join("variance_detail.tsv").exists());
}

#[test]
fn metrics_log_has_one_line_per_epoch() {
    let (_dir, _data, ck) = fixture();
    let log = fs::read_to_string(format!("{ck}.metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 5);
        assert_eq!(f[0], (i + 1).to_string());
        assert!(f[1..].iter().all(|x| x.parse::<f64>().unwrap().is_finite()));
    }
}
