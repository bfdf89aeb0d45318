use std::path::Path;
use std::process::{Command, Output};

use dmffn::data::{FloatImage, ImageBuffer};

fn dmffn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmffn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_png(path: &Path, h: usize, w: usize, seed: usize) {
    let data = (0..3 * h * w)
        .map(|i| (((i * 7919 + seed * 104_729) % 251) as f64) / 250.0)
        .collect();
    FloatImage::new(3, h, w, data)
        .to_buffer()
        .write(path)
        .unwrap();
}

const TINY: &str = "channels = 8\nnum_stages = 1\nheads = 2\nsquare_window = 4\n\
                    patch = 8\nstride = 8\nbatch = 2\nsteps = 4\ndecay_every = 2\nlr0 = 1e-3\n";

#[test]
fn params_prints_one_integer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let o = dmffn(&["params", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.trim().parse::<usize>().unwrap() > 0);

    let o = dmffn(&["params"]);
    assert_eq!(stdout(&o).trim(), "937556");
}

#[test]
fn infer_doubles_size() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.png");
    let dst = dir.path().join("out.png");
    write_png(&src, 16, 16, 1);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let o = dmffn(&[
        "infer",
        "--scale",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--lr",
        src.to_str().unwrap(),
        "--out",
        dst.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = ImageBuffer::read(&dst).unwrap();
    assert_eq!((out.width, out.height), (32, 32));
}

#[test]
fn train_then_eval_infer_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    std::fs::create_dir(&hr).unwrap();
    write_png(&hr.join("a.png"), 32, 32, 2);
    write_png(&hr.join("b.png"), 24, 40, 3);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let (cfg_s, hr_s, out_s) = (
        cfg.to_str().unwrap(),
        hr.to_str().unwrap(),
        out.to_str().unwrap(),
    );

    let o = dmffn(&[
        "train", "--config", cfg_s, "--hr-dir", hr_s, "--out", out_s, "--steps", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists());
    let ckpt_s = ckpt.to_str().unwrap();
    let o = dmffn(&[
        "train",
        "--config",
        cfg_s,
        "--hr-dir",
        hr_s,
        "--out",
        out_s,
        "--checkpoint",
        ckpt_s,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = std::fs::read_to_string(out.join("loss.log")).unwrap();

    // The same four steps in one go give the same log.
    let straight = dir.path().join("straight");
    let o = dmffn(&[
        "train",
        "--config",
        cfg_s,
        "--hr-dir",
        hr_s,
        "--out",
        straight.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let once = std::fs::read_to_string(straight.join("loss.log")).unwrap();
    assert_eq!(resumed.lines().count(), 4);
    assert_eq!(resumed, once);
    assert!(resumed.lines().all(|l| l
        .split_once(',')
        .is_some_and(|(s, v)| s.parse::<usize>().is_ok() && v.parse::<f64>().is_ok())));
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(straight.join("model.ckpt")).unwrap()
    );

    let report = dir.path().join("report.csv");
    let o = dmffn(&[
        "eval",
        "--checkpoint",
        ckpt_s,
        "--hr-dir",
        hr_s,
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("image,psnr_db,ssim\na.png,"));
    assert!(csv.contains("# scale,2"));

    let lr_dir = dir.path().join("lr");
    let o = dmffn(&[
        "downsample",
        "--hr-dir",
        hr_s,
        "--out",
        lr_dir.to_str().unwrap(),
        "--scale",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lr_b = ImageBuffer::read(&lr_dir.join("b.png")).unwrap();
    assert_eq!((lr_b.width, lr_b.height), (20, 12));

    let sr_dir = dir.path().join("sr");
    let o = dmffn(&[
        "infer",
        "--checkpoint",
        ckpt_s,
        "--lr",
        lr_dir.to_str().unwrap(),
        "--out",
        sr_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sr_b = ImageBuffer::read(&sr_dir.join("b.png")).unwrap();
    assert_eq!((sr_b.width, sr_b.height), (40, 24));

    let o = dmffn(&[
        "infer",
        "--checkpoint",
        ckpt_s,
        "--scale",
        "3",
        "--lr",
        lr_dir.to_str().unwrap(),
        "--out",
        out_s,
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bicubic_eval_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("x.png"), 30, 30, 4);
    let o = dmffn(&[
        "eval",
        "--scale",
        "3",
        "--hr-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("# params,0"));
    let o = dmffn(&["eval", "--hr-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.txt");
    let o = dmffn(&[
        "gradcheck",
        "--precision",
        "f64",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(rows.len() > 30);
    for row in &rows {
        let err: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{row}");
    }
    assert!(rows.iter().any(|r| r.starts_with("model ")));
    let o = dmffn(&["gradcheck", "--precision", "f32"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["params", "--bogus"][..],
        &["frobnicate"],
        &["infer", "--scale", "5", "--lr", "a", "--out", "b"],
        &["gradcheck", "--precision", "f16"],
    ] {
        assert_eq!(dmffn(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_one_with_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "channels = 8\nwidth = 3\n").unwrap();
    let o = dmffn(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error: ") && err.contains("bad.cfg:2"),
        "{err}"
    );

    let o = dmffn(&[
        "eval",
        "--checkpoint",
        "/nonexistent/m.ckpt",
        "--hr-dir",
        ".",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "));

    std::fs::write(&cfg, "channels = 6\nheads = 4\n").unwrap();
    let o = dmffn(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid config"));
}
