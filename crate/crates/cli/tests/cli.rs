use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salcar::dataset::synthetic::{write_blur_ladder, LadderSpec};
use salcar::dataset::{read_manifest, write_manifest};
use tempfile::TempDir;

fn salcar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salcar"))
        .args(args)
        .env_remove("JSCR_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ladder(dir: &Path) -> PathBuf {
    let spec = LadderSpec {
        references: 3,
        sigmas: vec![0.5, 1.5, 3.0],
        size: 32,
        ..LadderSpec::default()
    };
    write_blur_ladder(dir, &spec).unwrap()
}

/// One short training run shared by the tests that need a checkpoint.
fn trained(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let manifest = ladder(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    let o = salcar(&[
        "train",
        "--manifest",
        p(&manifest),
        "--config",
        "small",
        "--seed",
        "3",
        "--set",
        "max_epochs=1",
        "--set",
        "patches_per_image=2",
        "--out-dir",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (manifest, out.join("best.ckpt"))
}

#[test]
fn params_prints_a_positive_count() {
    let o = salcar(&["params", "--config", "default"]);
    assert_eq!(o.status.code(), Some(0));
    let n: u64 = stdout(&o).trim().parse().unwrap();
    assert!(n > 0);
    let small: u64 = stdout(&salcar(&["params", "--config", "small"]))
        .trim()
        .parse()
        .unwrap();
    assert!(small < n);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(salcar(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(salcar(&["params", "--bogus"]).status.code(), Some(1));
    assert_eq!(salcar(&[]).status.code(), Some(1));
    assert_eq!(
        salcar(&["params", "--config", "nope-preset-or-file"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(salcar(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent.csv");
    let o = salcar(&[
        "split",
        "--manifest",
        p(&missing),
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = salcar(&[
        "priors",
        p(&tmp.path().join("absent.png")),
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_values_exit_one() {
    let tmp = TempDir::new().unwrap();
    let manifest = ladder(tmp.path());
    let o = salcar(&[
        "train",
        "--manifest",
        p(&manifest),
        "--set",
        "batch_size=1",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = salcar(&[
        "train",
        "--manifest",
        p(&manifest),
        "--set",
        "no_such_key=1",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn priors_writes_three_maps_under_out_dir() {
    let tmp = TempDir::new().unwrap();
    ladder(&tmp.path().join("data"));
    let out = tmp.path().join("maps");
    let r = tmp.path().join("data/ref0.png");
    let d = tmp.path().join("data/ref0_blur2.png");
    let o = salcar(&[
        "priors",
        p(&r),
        p(&d),
        "--name",
        "pair",
        "--out-dir",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for suffix in ["sal", "jnd", "sid"] {
        let img = image::open(out.join(format!("pair.{suffix}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
}

#[test]
fn split_is_seeded_and_covers_every_reference() {
    let tmp = TempDir::new().unwrap();
    let manifest = ladder(tmp.path());
    let run = |dir: &str, seed: &str| {
        let out = tmp.path().join(dir);
        let o = salcar(&[
            "split",
            "--manifest",
            p(&manifest),
            "--ratios",
            "1/1/1",
            "--seed",
            seed,
            "--out-dir",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("split.csv")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    for s in ["train", "val", "test"] {
        assert_eq!(a.lines().filter(|l| l.ends_with(s)).count(), 1, "{a}");
    }
}

#[test]
fn train_predict_eval_and_maps() {
    let tmp = TempDir::new().unwrap();
    let (manifest, ckpt) = trained(&tmp);
    let run_dir = ckpt.parent().unwrap();
    assert!(run_dir.join("last.ckpt").exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,L_mae,L_rank,L_sal,L_tot"));
    assert_eq!(log.lines().count(), 1 + 2);

    let data = manifest.parent().unwrap();
    let r = data.join("ref0.png");
    let predict = |r: &Path, dst: &Path| {
        let o = salcar(&[
            "predict",
            "--ckpt",
            p(&ckpt),
            "--ref",
            p(r),
            "--dst",
            p(dst),
            "--out-dir",
            p(tmp.path()),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let same = predict(&r, &r);
    assert!(same.trim().parse::<f64>().unwrap().is_finite());
    assert_eq!(same, predict(&r, &r));

    let mut entries = read_manifest(&manifest).unwrap();
    for e in &mut entries {
        e.raw_score = predict(&e.reference_path, &e.distorted_path)
            .trim()
            .parse()
            .unwrap();
    }
    let oracle = data.join("oracle.csv");
    write_manifest(&oracle, &entries).unwrap();
    let out = tmp.path().join("eval");
    let o = salcar(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&oracle),
        "--split",
        "all",
        "--out-dir",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kv = std::fs::read_to_string(out.join("eval.txt")).unwrap();
    let get = |k: &str| -> f64 {
        kv.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}: ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(get("n"), 9.0);
    assert_eq!(get("srcc"), 1.0);
    assert_eq!(get("krcc"), 1.0);
    assert!((get("plcc") - 1.0).abs() < 1e-9);

    let maps = tmp.path().join("figs");
    let d = data.join("ref0_blur1.png");
    let o = salcar(&[
        "maps",
        "--ckpt",
        p(&ckpt),
        "--ref",
        p(&r),
        "--dst",
        p(&d),
        "--out-dir",
        p(&maps),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for suffix in ["q", "w"] {
        let img = image::open(maps.join(format!("ref0_blur1.{suffix}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let manifest = ladder(tmp.path());
    let split = |dir: &str, seed: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut c = Command::new(env!("CARGO_BIN_EXE_salcar"));
        c.args([
            "split",
            "--manifest",
            p(&manifest),
            "--ratios",
            "1/1/1",
            "--out-dir",
            p(&out),
        ]);
        match seed {
            Some(s) => c.env("JSCR_SEED", s),
            None => c.env_remove("JSCR_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(out.join("split.csv")).unwrap()
    };
    let flag = {
        let out = tmp.path().join("flag");
        salcar(&[
            "split",
            "--manifest",
            p(&manifest),
            "--ratios",
            "1/1/1",
            "--seed",
            "9",
            "--out-dir",
            p(&out),
        ]);
        std::fs::read_to_string(out.join("split.csv")).unwrap()
    };
    assert_eq!(split("env", Some("9")), flag);
    let mut c = Command::new(env!("CARGO_BIN_EXE_salcar"));
    c.args([
        "split",
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(tmp.path()),
    ])
    .env("JSCR_SEED", "x");
    assert_eq!(c.output().unwrap().status.code(), Some(1));
    let _ = split("none", None);
}
