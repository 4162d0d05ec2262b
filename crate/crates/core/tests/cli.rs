use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abp::io::codec::{encode_mask, read_signal};
use abp::io::encode_image;
use abp::tensor::Tensor;

fn abp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abp"))
        .args(args)
        .env("ABP_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = abp(args);
    assert!(
        out.status.success(),
        "abp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const NET: &str = "net.latent_shape = 2
net.layer = dense in=2 out=2x4x4 activation=leaky_relu:0.2 normalize=false
net.layer = deconv in=2 out=1 kernel=3x3 up=2 activation=tanh normalize=false bias=false
";

const CONV_NET: &str = "net.latent_shape = 1x2x2
net.layer = deconv in=1 out=2 kernel=3x3 up=2 activation=relu normalize=false
net.layer = deconv in=2 out=1 kernel=3x3 up=2 activation=tanh normalize=false bias=false
";

/// Six 8x8 graymaps, a manifest and a short training config in `dir`.
fn workspace(dir: &Path, iterations: usize) -> PathBuf {
    workspace_with(dir, iterations, NET)
}

fn workspace_with(dir: &Path, iterations: usize, net: &str) -> PathBuf {
    let mut manifest = String::from("normalize = symmetric\n");
    for i in 0..6 {
        let data = (0..64)
            .map(|p| ((p * (i + 1)) % 17) as f64 / 10.0 - 0.8)
            .collect();
        let img = Tensor::new(vec![1, 8, 8], data).unwrap();
        std::fs::write(dir.join(format!("img{i}.pgm")), encode_image(&img).unwrap()).unwrap();
        manifest.push_str(&format!("sample = img{i}.pgm\n"));
    }
    std::fs::write(dir.join("train.manifest"), manifest).unwrap();
    let cfg = dir.join("small.cfg");
    std::fs::write(
        &cfg,
        format!("{net}hyper.iterations = {iterations}\nhyper.seed = 4\ndata.manifest = train.manifest\n"),
    )
    .unwrap();
    cfg
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = workspace(dir, 5);
    let ckpt = dir.join("out/model.abpc");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
        "--log-every",
        "0",
    ]);
    ckpt
}

fn stanza(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("reproducibility.txt")).unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_stanza() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(&bytes[..4], b"ABPC");
    let history = std::fs::read_to_string(dir.path().join("out/model.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);
    let text = stanza(&dir.path().join("out"));
    for key in [
        "command = train",
        "seed = 4",
        "config_sha256 = ",
        "version = ",
    ] {
        assert!(text.contains(key), "{text}");
    }
}

#[test]
fn resumed_training_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let short = workspace(dir.path(), 3);
    let first = dir.path().join("a/first.abpc");
    ok(&[
        "train",
        "--config",
        s(&short),
        "--out",
        s(&first),
        "--log-every",
        "0",
    ]);
    let long = workspace(dir.path(), 6);
    let resumed = dir.path().join("a/resumed.abpc");
    ok(&[
        "train",
        "--config",
        s(&long),
        "--out",
        s(&resumed),
        "--resume",
        s(&first),
        "--log-every",
        "0",
    ]);
    let direct = dir.path().join("b/direct.abpc");
    ok(&[
        "train",
        "--config",
        s(&long),
        "--out",
        s(&direct),
        "--log-every",
        "0",
    ]);
    assert_eq!(
        std::fs::read(&resumed).unwrap(),
        std::fs::read(&direct).unwrap()
    );
}

#[test]
fn synthesis_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let (a, b) = (dir.path().join("syn_a"), dir.path().join("syn_b"));
    for out in [&a, &b] {
        ok(&[
            "synthesize",
            "--ckpt",
            s(&ckpt),
            "--num",
            "2",
            "--seed",
            "7",
            "--out-dir",
            s(out),
        ]);
    }
    for name in ["sample_000.pgm", "sample_001.pgm"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    assert!(stanza(&a).contains("command = synthesize"));

    let out = abp(&[
        "synthesize",
        "--ckpt",
        s(&ckpt),
        "--expand",
        "3x3",
        "--out-dir",
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn expanded_synthesis_grows_the_canvas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace_with(dir.path(), 2, CONV_NET);
    let ckpt = dir.path().join("conv.abpc");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
        "--log-every",
        "0",
    ]);
    let big = dir.path().join("syn_big");
    ok(&[
        "synthesize",
        "--ckpt",
        s(&ckpt),
        "--expand",
        "3x5",
        "--out-dir",
        s(&big),
    ]);
    assert_eq!(
        read_signal(&big.join("sample_000.pgm")).unwrap().shape(),
        &[1, 12, 20]
    );
}

#[test]
fn all_ones_mask_recovery_equals_plain_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let input = dir.path().join("img2.pgm");
    let ones = dir.path().join("ones.pgm");
    std::fs::write(
        &ones,
        encode_mask(&Tensor::filled(&[1, 8, 8], 1.0)).unwrap(),
    )
    .unwrap();
    let masked = dir.path().join("rec/masked.pgm");
    let plain = dir.path().join("rec/plain.pgm");
    let common = ["--ckpt", s(&ckpt), "--input", s(&input), "--steps", "40"];
    ok(&[
        &["recover"][..],
        &common,
        &["--mask", s(&ones), "--out", s(&masked)],
    ]
    .concat());
    ok(&[&["recover"][..], &common, &["--out", s(&plain)]].concat());
    assert_eq!(
        std::fs::read(&masked).unwrap(),
        std::fs::read(&plain).unwrap()
    );
    let composite = dir.path().join("rec/masked.composite.pgm");
    assert_eq!(
        std::fs::read(&composite).unwrap(),
        std::fs::read(&input).unwrap()
    );
    assert!(stanza(&dir.path().join("rec")).contains("command = recover"));
}

#[test]
fn composite_keeps_observed_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let input = dir.path().join("img3.pgm");
    let mask_t = Tensor::new(
        vec![1, 8, 8],
        (0..64).map(|p| (p % 3 != 0) as u8 as f64).collect(),
    )
    .unwrap();
    let mask = dir.path().join("mask.pgm");
    std::fs::write(&mask, encode_mask(&mask_t).unwrap()).unwrap();
    let out = dir.path().join("rec/out.pgm");
    ok(&[
        "recover",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&input),
        "--mask",
        s(&mask),
        "--out",
        s(&out),
        "--steps",
        "20",
    ]);
    let original = read_signal(&input).unwrap();
    let filled = read_signal(&dir.path().join("rec/out.composite.pgm")).unwrap();
    let recon = read_signal(&out).unwrap();
    for p in 0..64 {
        let expect = if mask_t.data()[p] == 1.0 {
            original.data()[p]
        } else {
            recon.data()[p]
        };
        assert_eq!(filled.data()[p], expect, "pixel {p}");
    }
}

#[test]
fn evaluate_interpolate_and_dyntex_produce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let manifest = dir.path().join("train.manifest");
    let report = dir.path().join("eval/report.csv");
    let out = ok(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--test-manifest",
        s(&manifest),
        "--metric",
        "recon",
        "--report",
        s(&report),
        "--baseline",
        "pca-2",
        "--train-manifest",
        s(&manifest),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pca-2 error"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("sample,abp_error,pca2_error\n"));
    assert_eq!(csv.lines().count(), 8);

    let grid = dir.path().join("grid");
    ok(&[
        "interpolate",
        "--ckpt",
        s(&ckpt),
        "--corners",
        "0,1,2,3",
        "--steps",
        "3",
        "--out-dir",
        s(&grid),
    ]);
    assert!(grid.join("grid_02_02.pgm").exists());
    let range = dir.path().join("range");
    ok(&[
        "interpolate",
        "--ckpt",
        s(&ckpt),
        "--grid",
        "-2:2:4",
        "--out-dir",
        s(&range),
    ]);
    assert!(range.join("grid_03_03.pgm").exists());

    let frames = dir.path().join("frames");
    ok(&[
        "dyntex",
        "--ckpt",
        s(&ckpt),
        "--frames",
        "4",
        "--out-dir",
        s(&frames),
    ]);
    let index = std::fs::read_to_string(frames.join("index.txt")).unwrap();
    assert_eq!(
        index.lines().collect::<Vec<_>>(),
        [
            "frame_0000.pgm",
            "frame_0001.pgm",
            "frame_0002.pgm",
            "frame_0003.pgm"
        ]
    );
    assert!(stanza(&frames).contains("command = dyntex"));
}

#[test]
fn exit_codes_and_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(abp(&["--help"]).status.code(), Some(0));
    assert_eq!(abp(&["--version"]).status.code(), Some(0));

    let out = abp(&["synthesize", "--num", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    let missing = dir.path().join("none.abpc");
    let out = abp(&[
        "synthesize",
        "--ckpt",
        s(&missing),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    let junk = dir.path().join("junk.abpc");
    std::fs::write(&junk, b"definitely not").unwrap();
    let out = abp(&[
        "dyntex",
        "--ckpt",
        s(&junk),
        "--frames",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a checkpoint"));

    let linear = "net.latent_shape = 2\nnet.layer = dense in=2 out=1x8x8 activation=identity normalize=false\n";
    let cfg = workspace_with(dir.path(), 30, linear);
    let text = std::fs::read_to_string(&cfg).unwrap() + "hyper.learning_rate = 1e3\n";
    std::fs::write(&cfg, text).unwrap();
    let out = abp(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.abpc")),
        "--log-every",
        "0",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
