use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use octofuse::dataset::read_ground_truth;
use octofuse::mesh::{sphere_diff, TriMesh};

fn octofuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octofuse"))
        .args(args)
        .output()
        .expect("octofuse runs")
}

fn code(args: &[&str]) -> i32 {
    octofuse(args).status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = octofuse(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--resolution", "32", "--views", "6", "--width", "160", "--height", "120", "--focal", "131",
];

fn small_dataset(dir: &Path) {
    let mut args = vec!["synth", "--out", s(dir)];
    args.extend(SMALL);
    ok(&args);
}

const FAST: [&str; 6] = ["--delta", "0.016", "--eta", "0.04", "--iterations", "8"];

fn fuse(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["fuse", "--data", s(data), "--out", s(out)];
    args.extend(FAST);
    args.extend(extra);
    ok(&args)
}

fn without_wall_time(report: &str) -> String {
    let mut wall = None;
    report
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                return l.to_string();
            }
            let f: Vec<&str> = l.split(',').collect();
            let w = *wall.get_or_insert_with(|| f.iter().position(|c| *c == "wall_ms").unwrap());
            f.iter()
                .enumerate()
                .filter(|(i, _)| *i != w)
                .map(|(_, c)| *c)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["fuse", "--help"]), 0);
}

#[test]
fn bad_arguments_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&["synth", "--out", s(&out), "--views", "0"]), 2);
    assert_eq!(code(&["synth", "--out", s(&out), "--resolution", "100"]), 2);
    assert_eq!(code(&["fuse", "--no-such-flag"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["fuse"]), 2);
}

#[test]
fn invalid_configuration_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "lambda = 0.3\nsmoothness = 2\n").unwrap();
    assert_eq!(code(&["fuse", "--data", s(&data), "--config", s(&cfg)]), 2);
    fs::write(&cfg, "lambda = lots\n").unwrap();
    assert_eq!(code(&["fuse", "--data", s(&data), "--config", s(&cfg)]), 2);
    assert_eq!(code(&["fuse", "--data", s(&data), "--lambda", "-1"]), 2);
    assert_eq!(code(&["fuse", "--data", s(&data), "--tau-s", "0.6", "--tau-j", "0.5"]), 2);
}

#[test]
fn missing_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    assert_eq!(code(&["fuse", "--data", s(&nowhere)]), 1);
    assert_eq!(code(&["compare", s(&nowhere.join("a.ply")), "--sphere", s(&nowhere)]), 1);
    let junk = tmp.path().join("junk.ply");
    fs::write(&junk, "not a mesh").unwrap();
    assert_eq!(code(&["compare", s(&junk), "--against", s(&junk)]), 1);
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a);
    small_dataset(&b);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    // 6 frames and poses, intrinsics, domain, ground truth
    assert_eq!(names.len(), 15);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        "# experiment\nlambda = 0.5\niterations = 3  # short\ndelta = 0.016\neta = 0.04\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    ok(&[
        "fuse", "--data", s(&data), "--out", s(&out), "--config", s(&cfg), "--iterations", "2",
    ]);
    let report = fs::read_to_string(out.join("octree_report.csv")).unwrap();
    assert!(report.contains("# lambda = 0.5\n"));
    assert!(report.contains("# iterations = 2\n"));
    assert!(report.contains("# epsilon = 0.001\n"));
    assert!(report.contains("# tau_split = 0.1\n"));
    let rows = report.lines().filter(|l| !l.starts_with('#')).count();
    // header plus iterations 0, 1, 2
    assert_eq!(rows, 4);
}

#[test]
fn fuse_both_writes_meshes_reports_and_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("out");
    let stdout = fuse(&data, &out, &["--mode", "both"]);
    for f in ["octree.ply", "dense.ply", "octree_report.csv", "dense_report.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    for key in ["octree ", "dense ", "octree_vs_dense ", "quantization_error ", "input_bytes octree "] {
        assert!(stdout.lines().any(|l| l.starts_with(key)), "{key}");
        assert!(summary.lines().any(|l| l.starts_with(key)), "{key}");
    }
    let octree_line: Vec<&str> = stdout.lines().find(|l| l.starts_with("octree ")).unwrap().split(' ').collect();
    assert_eq!(octree_line.len(), 4);
}

#[test]
fn fuse_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fuse(&data, &a, &["--mode", "both"]);
    fuse(&data, &b, &["--mode", "both"]);
    for mesh in ["octree.ply", "dense.ply"] {
        assert_eq!(fs::read(a.join(mesh)).unwrap(), fs::read(b.join(mesh)).unwrap());
    }
    for report in ["octree_report.csv", "dense_report.csv"] {
        let ra = fs::read_to_string(a.join(report)).unwrap();
        let rb = fs::read_to_string(b.join(report)).unwrap();
        assert_eq!(without_wall_time(&ra), without_wall_time(&rb));
    }
}

#[test]
fn tree_dump_is_written_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let dump = tmp.path().join("tree.txt");
    fuse(&data, &tmp.path().join("out"), &["--dump-tree", s(&dump)]);
    assert!(!fs::read_to_string(dump).unwrap().is_empty());
}

#[test]
fn compare_mesh_with_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("out");
    fuse(&data, &out, &[]);
    let mesh = out.join("octree.ply");
    let line = ok(&["compare", s(&mesh), "--against", s(&mesh), "--out", s(&tmp.path().join("self"))]);
    assert_eq!(line.trim(), "0 0 0");
    assert!(tmp.path().join("self.ply").exists());
    assert!(tmp.path().join("self.csv").exists());
}

#[test]
fn compare_against_sphere_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("out");
    fuse(&data, &out, &[]);
    let mesh_path = out.join("octree.ply");
    let line = ok(&["compare", s(&mesh_path), "--sphere", s(&data)]);
    let mesh = TriMesh::read_ply(&mesh_path).unwrap();
    let sphere = read_ground_truth(&data.join("ground_truth.txt")).unwrap();
    assert_eq!(line.trim(), sphere_diff(&mesh, &sphere).summary_line());
}
