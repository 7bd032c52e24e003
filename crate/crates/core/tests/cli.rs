use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use camforge::bench::{score_map, BBox, BenchConfig};
use camforge::cam::{activation_profile, explain, CamRequest, ClassSelector, LayerSelection, Method};
use camforge::model_io::{decode_image, load_model, weights_bytes};
use camforge::render::profile_csv;
use camforge::Tensor;

fn camforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camforge"))
        .args(args)
        .env("CAMFORGE_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = camforge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Demo {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Demo {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["demo", "--out", s(&root.join("demo")), "--seed", "3"]);
        Demo { _dir: dir, root }
    }

    fn model_args(&self) -> Vec<String> {
        let d = self.root.join("demo");
        vec![
            "--model".into(),
            d.join("model.json").to_str().unwrap().into(),
            "--weights".into(),
            d.join("model.cwgt").to_str().unwrap().into(),
            "--image".into(),
            d.join("scene.png").to_str().unwrap().into(),
        ]
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.model_args());
        args.extend(["--out".to_string(), self.root.join(out).to_str().unwrap().into()]);
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        camforge(&refs)
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn explain_writes_overlay_map_and_report() {
    let d = Demo::new();
    let out = d.run("explain", "ex", &["--method", "combicam"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = dir_contents(&d.path("ex"));
    assert_eq!(files.keys().collect::<Vec<_>>(), ["heatmap.cten", "overlay.png", "report.txt"]);
    let map = Tensor::from_bytes(&files["heatmap.cten"]).unwrap();
    assert_eq!(map.shape(), &[32, 32]);

    let net = load_model(d.path("demo/model.json"), d.path("demo/model.cwgt")).unwrap();
    let image = decode_image(d.path("demo/scene.png")).unwrap();
    let res = explain(&net, &image, &CamRequest::new(Method::CombiCam)).unwrap();
    assert_eq!(res.heatmap.values, map);
    let report = String::from_utf8(files["report.txt"].clone()).unwrap();
    assert!(report.contains("layers: block0_conv,block1_conv,block2_conv,block3_conv"), "{report}");
}

#[test]
fn single_block_combicam_equals_gradcam_file() {
    let d = Demo::new();
    for block in ["0", "2", "3"] {
        let a = d.run("explain", &format!("combi{block}"), &["--method", "combicam", "--layers", block]);
        let b = d.run("explain", &format!("grad{block}"), &["--method", "gradcam", "--layers", block]);
        assert!(a.status.success() && b.status.success());
        let fa = fs::read(d.path(&format!("combi{block}/heatmap.cten"))).unwrap();
        let fb = fs::read(d.path(&format!("grad{block}/heatmap.cten"))).unwrap();
        assert_eq!(fa, fb, "block {block}");
    }
}

#[test]
fn identical_invocations_are_byte_identical() {
    let d = Demo::new();
    for (cmd, extra) in [("explain", vec!["--method", "layercam"]), ("compare", vec!["--bbox", "3,4,7,7"]), ("profile", vec![])] {
        assert!(d.run(cmd, &format!("{cmd}_a"), &extra).status.success());
        assert!(d.run(cmd, &format!("{cmd}_b"), &extra).status.success());
        assert_eq!(dir_contents(&d.path(&format!("{cmd}_a"))), dir_contents(&d.path(&format!("{cmd}_b"))));
    }
}

#[test]
fn failures_use_exit_codes_and_write_nothing() {
    let d = Demo::new();
    let mut args: Vec<String> = vec!["explain".into()];
    args.extend(d.model_args());
    args[6] = s(&d.path("missing.png")).into();
    args.extend(["--out".into(), s(&d.path("none")).into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = camforge(&refs);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--image"));
    assert!(!d.path("none").exists());

    let out = d.run("explain", "none", &["--method", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let out = d.run("explain", "none", &["--method", "gradcam", "--layers", "all-blocks"]);
    assert_eq!(out.status.code(), Some(2));
    let out = d.run("explain", "none", &["--class", "9"]);
    assert_eq!(out.status.code(), Some(2));
    let out = d.run("explain", "none", &["--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = d.run("compare", "none", &["--bbox", "30,30,7,7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path("none").exists());

    let out = camforge(&["profile", "--model", s(&d.path("nope.json")), "--weights", "x", "--image", "y", "--out", s(&d.path("none"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.path("none").exists());

    fs::write(d.path("demo/model.cwgt"), b"CWGT").unwrap();
    assert_eq!(d.run("profile", "none", &[]).status.code(), Some(3));
    assert!(!d.path("none").exists());
}

#[test]
fn compare_matches_explain_and_pointing_game() {
    let d = Demo::new();
    let out = d.run("compare", "cmp", &["--bbox", "3,4,7,7", "--class", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = dir_contents(&d.path("cmp"));
    assert_eq!(files.len(), 5 * 2 + 2);

    let net = load_model(d.path("demo/model.json"), d.path("demo/model.cwgt")).unwrap();
    let image = decode_image(d.path("demo/scene.png")).unwrap();
    let bbox = BBox { top: 3, left: 4, height: 7, width: 7 };
    let csv = String::from_utf8(files["scores.csv"].clone()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    for (i, method) in Method::ALL.into_iter().enumerate() {
        let ex = d.run("explain", &format!("ex_{method}"), &["--method", method.name(), "--class", "1"]);
        assert!(ex.status.success());
        let single = fs::read(d.path(&format!("ex_{method}/heatmap.cten"))).unwrap();
        assert_eq!(files[&format!("heatmap_{method}.cten")], single, "{method}");

        let req = CamRequest::new(method).class(ClassSelector::Index(1));
        let map = explain(&net, &image, &req).unwrap().heatmap.values;
        let (hit, ratio) = score_map(&map, &bbox).unwrap();
        let fields: Vec<&str> = lines[i + 1].split(',').collect();
        assert_eq!(fields[0], method.name());
        assert_eq!(fields[2], if hit { "1" } else { "0" });
        assert_eq!(fields[5].parse::<f64>().unwrap(), ratio);
    }
    let grid = decode_image(d.path("cmp/grid.png")).unwrap();
    assert_eq!(grid.shape(), &[3, 32, 5 * 32 + 4 * camforge::render::GRID_GAP]);
}

#[test]
fn profile_csv_matches_library() {
    let d = Demo::new();
    assert!(d.run("profile", "prof", &[]).status.success());
    let net = load_model(d.path("demo/model.json"), d.path("demo/model.cwgt")).unwrap();
    let image = decode_image(d.path("demo/scene.png")).unwrap();
    let c = net.forward(&image).unwrap().predicted;
    let (_, recs) = net.explain_pass(&image, c).unwrap();
    let prof = activation_profile(&net.spec().blocks(), &recs).unwrap();
    assert_eq!(fs::read_to_string(d.path("prof/profile.csv")).unwrap(), profile_csv(&prof));
}

#[test]
fn zero_learning_rate_saves_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&["train", "--out", s(&out), "--seed", "5", "--epochs", "1", "--learning-rate", "0"]);
    let cfg = BenchConfig { seed: 5, ..BenchConfig::default() };
    assert_eq!(fs::read(out.join("model.cwgt")).unwrap(), weights_bytes(&cfg.initial_network().unwrap()));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let bad = camforge(&["train", "--out", s(&dir.path().join("u")), "--learning-rate", "-1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn dataset_export_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&["dataset", "--out", s(&dir.path().join(name)), "--seed", "4", "--count", "5"]);
    }
    ok(&["dataset", "--out", s(&dir.path().join("c")), "--seed", "5", "--count", "5"]);
    let a = dir_contents(&dir.path().join("a"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, dir_contents(&dir.path().join("b")));
    assert_ne!(a, dir_contents(&dir.path().join("c")));
}

#[test]
fn threads_variable_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_camforge"))
        .args(["dataset", "--out", "/nonexistent/never", "--count", "1"])
        .env("CAMFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn layer_selection_parses_block_lists() {
    assert_eq!("1, 3".parse::<LayerSelection>().unwrap(), LayerSelection::Blocks(vec![1, 3]));
}
