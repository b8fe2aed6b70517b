use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caai_core::data::write_gray;
use caai_core::Tensor;

fn caai(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caai"))
        .args(args)
        .env("CAAI_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn caai")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_map(path: &Path, h: usize, w: usize, v: &[f64]) {
    write_gray(path, &Tensor::<f64>::from_f64([1, 1, h, w], v).unwrap()).unwrap();
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn eval_perfect_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    let map = [
        0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    for root in [&pred, &gt] {
        write_map(&root.join("a.png"), 4, 4, &map);
    }
    let csv = dir.path().join("report.csv");
    let out = caai(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--csv", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().last().unwrap(), "MEAN,1.0,0.0,1.0,1.0");
    assert!(String::from_utf8_lossy(&out.stdout).contains("MEAN"));
}

#[test]
fn eval_missing_prediction_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    write_map(&gt.join("a.png"), 2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let csv = dir.path().join("r.csv");
    let out = caai(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--csv", s(&csv)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let out = caai(&["grad-check", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert!(rows.len() >= 8);
    for row in rows {
        let err: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{row}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(caai(&["eval", "--bogus", "x"]).status.code(), Some(1));
    assert_eq!(caai(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(caai(&[]).status.code(), Some(1));
    assert_eq!(caai(&["gen-data", "--n", "two"]).status.code(), Some(1));
    assert_eq!(caai(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = caai(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = caai(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(dir.path()),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_train_infer_eval_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = configs().join("synthetic.spec");
    let cfg = configs().join("tiny.conf");
    let run = |tag: &str| {
        let root = dir.path().join(tag);
        let (data, ckpt, pred) = (root.join("data"), root.join("model.ckpt"), root.join("pred"));
        let out = caai(&[
            "gen-data",
            "--spec",
            s(&spec),
            "--n",
            "3",
            "--seed",
            "5",
            "--out",
            s(&data),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = caai(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = caai(&["infer", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&pred)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = root.join("report.csv");
        let out = caai(&[
            "eval",
            "--pred",
            s(&pred),
            "--gt",
            s(&data.join("GT")),
            "--csv",
            s(&csv),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (root, data, pred, csv)
    };
    let (_, data_a, pred_a, csv_a) = run("a");
    let (_, data_b, pred_b, csv_b) = run("b");

    for sub in ["RGB", "depth", "GT"] {
        assert_eq!(read_dir_bytes(&data_a.join(sub)), read_dir_bytes(&data_b.join(sub)));
    }
    assert_eq!(
        fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
    assert_eq!(read_dir_bytes(&pred_a), read_dir_bytes(&pred_b));
    assert_eq!(fs::read(csv_a).unwrap(), fs::read(csv_b).unwrap());

    let maps = read_dir_bytes(&pred_a);
    assert_eq!(maps.len(), 3);
    for (name, _) in maps {
        let img = image::open(pred_a.join(&name)).unwrap();
        assert_eq!(img.color(), image::ColorType::L8, "{name}");
        let rgb = image::open(data_a.join("RGB").join(&name)).unwrap();
        assert_eq!((img.width(), img.height()), (rgb.width(), rgb.height()));
    }
}

#[test]
fn train_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = configs().join("synthetic.spec");
    assert!(caai(&[
        "gen-data",
        "--spec",
        s(&spec),
        "--n",
        "2",
        "--seed",
        "1",
        "--out",
        s(&data)
    ])
    .status
    .success());
    let base = fs::read_to_string(configs().join("tiny.conf")).unwrap();
    let one = dir.path().join("one.conf");
    fs::write(&one, base.replace("epochs = 2", "epochs = 1")).unwrap();

    let full = dir.path().join("full.ckpt");
    let half = dir.path().join("half.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    let two = configs().join("tiny.conf");
    assert!(
        caai(&["train", "--config", s(&two), "--data", s(&data), "--out", s(&full)])
            .status
            .success()
    );
    assert!(
        caai(&["train", "--config", s(&one), "--data", s(&data), "--out", s(&half)])
            .status
            .success()
    );
    let out = caai(&[
        "train",
        "--config",
        s(&two),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&half),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(full).unwrap(), fs::read(resumed).unwrap());
}
