//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! gated criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{random_image, rng, test_card, uniform};
use dmffn::attention::{Atb, Awb, Swb};
use dmffn::checkpoint::Checkpoint;
use dmffn::data::{axis_weights, bicubic_resize, FloatImage, PairOptions, PairStream, ScaleFactor};
use dmffn::fusion::DfbParams;
use dmffn::gradsuite::{run_suite, CASES};
use dmffn::layers::{zero_weights, Init, ParamStore};
use dmffn::metrics::{evaluate_image, psnr, ssim, BicubicUpscaler, SSIM_C1, SSIM_C2};
use dmffn::train::{format_loss_log, train, Adam, TrainConfig};
use dmffn::{build_model, Model, ModelConfig};
use dmffn_tensor::Tensor;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite::<f64>(1e-4, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op_name.as_str())
        .collect();
    let detail = format!(
        "{} checks, worst rel. error {worst:.2e}, {:.1}s{}",
        CASES.len(),
        elapsed.as_secs_f64(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {failed:?}")
        }
    );
    ensure(
        failed.is_empty() && elapsed < Duration::from_secs(300),
        detail,
    )
}

fn identity_at_zero() -> Outcome {
    let cfg = ModelConfig::default();
    let c = cfg.channels;
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(4);
    let awb = Awb::new(&mut store, &mut init, "awb", &cfg).map_err(|e| e.to_string())?;
    let swb = Swb::new(&mut store, &mut init, "swb", &cfg).map_err(|e| e.to_string())?;
    let atb = Atb::new(&mut store, &mut init, "atb", &cfg).map_err(|e| e.to_string())?;
    let dfb = DfbParams::new(&mut store, &mut init, "dfb", &cfg, 2).map_err(|e| e.to_string())?;
    zero_weights(&mut store);
    let mut checked = 0;
    for (h, w) in [(8, 8), (16, 16), (12, 20), (9, 7)] {
        let x: Tensor<f64> = uniform(&mut r, &[1, c, h, w], -1.0, 1.0);
        let y: Tensor<f64> = uniform(&mut r, &[1, c, h, w], -1.0, 1.0);
        let cases = [
            ("awb", awb.forward(&store, &x).unwrap().bit_eq(&x)),
            ("swb", swb.forward(&store, &x).unwrap().bit_eq(&x)),
            ("atb", atb.forward(&store, &x).unwrap().bit_eq(&x)),
            (
                "dfb",
                dfb.forward_pair(&store, &x, &y)
                    .unwrap()
                    .bit_eq(&x.add(&y).unwrap()),
            ),
        ];
        for (name, ok) in cases {
            if !ok {
                return Err(format!("{name} differs at {h}x{w}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} bitwise comparisons in 64-bit"))
}

fn shape_contract() -> Outcome {
    let sides = [8, 22, 36, 50, 64];
    let mut count = 0;
    let start = Instant::now();
    for scale in [2, 3, 4] {
        let cfg = ModelConfig {
            scale,
            ..ModelConfig::default()
        };
        let model = build_model::<f32>(&cfg).map_err(|e| e.to_string())?;
        for &h in &sides {
            for &w in &sides {
                let out = model
                    .infer(&Tensor::zeros([1, 3, h, w]))
                    .map_err(|e| e.to_string())?;
                if out.shape() != [1, 3, scale * h, scale * w] {
                    return Err(format!("x{scale} {h}x{w} gave {:?}", out.shape()));
                }
                count += 1;
            }
        }
    }
    Ok(format!(
        "{count} forwards over sides {sides:?}, scales 2-4, {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

struct Overfit {
    model: Model<f32>,
    first_loss: f64,
    last_loss: f64,
    elapsed: Duration,
}

fn overfit() -> Result<Overfit, String> {
    let cfg = ModelConfig {
        num_stages: 2,
        ..ModelConfig::with_channels(16)
    };
    let mut model = build_model::<f32>(&cfg).map_err(|e| e.to_string())?;
    // One 32×32 LR patch covers the whole image, so a batch of one sees it all.
    let tc = TrainConfig {
        lr0: 2e-3,
        batch: 1,
        steps: 1500,
        decay_every: 500,
        patch: 32,
        stride: 32,
        augment: false,
        ..TrainConfig::default()
    };
    let opts = PairOptions {
        scale: 2,
        patch: tc.patch,
        stride: tc.stride,
        augment: tc.augment,
        seed: tc.seed,
    };
    let mut stream = PairStream::from_images(vec![("card".into(), test_card())], opts)
        .map_err(|e| e.to_string())?;
    let mut adam = Adam::from_config(&model.params, &tc);
    let start = Instant::now();
    let hist = train(&mut model, &mut adam, &mut stream, &tc, |_, _, _| Ok(()))
        .map_err(|e| e.to_string())?;
    Ok(Overfit {
        model,
        first_loss: hist[0],
        last_loss: hist[hist.len() - 1],
        elapsed: start.elapsed(),
    })
}

fn overfit_criterion(run: &Result<Overfit, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let (p, _) = evaluate_image(&run.model, &test_card()).map_err(|e| e.to_string())?;
    let ratio = run.last_loss / run.first_loss;
    let detail = format!(
        "loss {:.4} -> {:.5} (ratio {ratio:.4}), Y-PSNR {p:.2} dB, {:.0}s",
        run.first_loss,
        run.last_loss,
        run.elapsed.as_secs_f64()
    );
    ensure(
        ratio <= 0.1 && p >= 35.0 && run.elapsed < Duration::from_secs(900),
        detail,
    )
}

fn beats_bicubic(run: &Result<Overfit, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let card = test_card();
    let (model_psnr, _) = evaluate_image(&run.model, &card).map_err(|e| e.to_string())?;
    let (bicubic_psnr, _) =
        evaluate_image(&BicubicUpscaler { scale: 2 }, &card).map_err(|e| e.to_string())?;
    let gain = model_psnr - bicubic_psnr;
    ensure(
        gain >= 3.0,
        format!("model {model_psnr:.2} dB vs bicubic {bicubic_psnr:.2} dB (+{gain:.2} dB)"),
    )
}

fn luma_plane(img: &FloatImage) -> Vec<f64> {
    let n = img.height * img.width;
    (0..n)
        .map(|i| {
            (16.0 + 65.481 * img.data[i] + 128.553 * img.data[n + i] + 24.966 * img.data[2 * n + i])
                / 255.0
        })
        .collect()
}

fn ssim_scalar(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
        .collect();
    let norm = g.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let mut s = [0.0; 5];
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = g[dy] * g[dx] / norm;
                    let (p, q) = (a[(y0 + dy) * w + x0 + dx], b[(y0 + dy) * w + x0 + dx]);
                    s[0] += k * p;
                    s[1] += k * q;
                    s[2] += k * p * p;
                    s[3] += k * q * q;
                    s[4] += k * p * q;
                }
            }
            let (va, vb, cov) = (s[2] - s[0] * s[0], s[3] - s[1] * s[1], s[4] - s[0] * s[1]);
            total += (2.0 * s[0] * s[1] + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((s[0] * s[0] + s[1] * s[1] + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / ((h - 10) * (w - 10)) as f64
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (r.random_range(11..24), r.random_range(11..24));
        let a = random_image(&mut r, 3, h, w);
        let b = random_image(&mut r, 3, h, w);
        let (ya, yb) = (luma_plane(&a), luma_plane(&b));
        let mse = ya
            .iter()
            .zip(&yb)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / ya.len() as f64;
        let want_psnr = 10.0 * (1.0 / mse).log10();
        worst = worst.max((psnr(&a, &b, 0, true).map_err(|e| e.to_string())? - want_psnr).abs());
        let want_ssim = ssim_scalar(&ya, &yb, h, w);
        worst = worst.max((ssim(&a, &b, true).map_err(|e| e.to_string())? - want_ssim).abs());
    }
    let a = random_image(&mut r, 3, 16, 16);
    let self_ssim = ssim(&a, &a, true).map_err(|e| e.to_string())?;
    let offset = psnr(
        &FloatImage::filled(3, 16, 16, 0.5),
        &FloatImage::filled(3, 16, 16, 0.5 + 1.0 / 255.0),
        0,
        false,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        worst < 1e-6 && self_ssim == 1.0 && (offset - 48.131).abs() <= 0.001,
        format!("50 pairs, max deviation {worst:.1e}; ssim(a,a) = {self_ssim}; 1/255 offset {offset:.4} dB"),
    )
}

fn bicubic_resampler() -> Outcome {
    let mut r = rng(7);
    let mut worst_sum: f64 = 0.0;
    let mut worst_flat: f64 = 0.0;
    for _ in 0..10 {
        let (h, w) = (r.random_range(3..48), r.random_range(3..48));
        let s = r.random_range(2..5);
        for f in [ScaleFactor::up(s), ScaleFactor::down(s)] {
            let scale = f.num as f64 / f.den as f64;
            let (ho, wo) = (f.apply(h), f.apply(w));
            let wy = axis_weights(h, ho, scale, true);
            let wx = axis_weights(w, wo, scale, true);
            // Output-pixel weight sum is the product of the two axis sums.
            for ry in wy.weights.chunks(wy.taps) {
                for rx in wx.weights.chunks(wx.taps) {
                    let total = ry.iter().sum::<f64>() * rx.iter().sum::<f64>();
                    worst_sum = worst_sum.max((total - 1.0).abs());
                }
            }
            let c = r.random_range(0..256) as f64 / 255.0;
            let flat = FloatImage::filled(3, h, w, c);
            let out = bicubic_resize(&flat, f, true).map_err(|e| e.to_string())?;
            if out.quantized() != FloatImage::filled(3, ho, wo, c) {
                return Err(format!("constant {c} not preserved at {h}x{w} by {f:?}"));
            }
            worst_flat = worst_flat.max(out.data.iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
        }
    }
    ensure(
        worst_sum < 1e-6,
        format!("max |Σw - 1| = {worst_sum:.1e}; constants exact after quantisation (float drift {worst_flat:.1e})"),
    )
}

fn determinism() -> Outcome {
    let cfg = ModelConfig {
        num_stages: 1,
        heads: 2,
        square_window: 4,
        ..ModelConfig::with_channels(8)
    };
    let tc = TrainConfig {
        lr0: 1e-3,
        batch: 2,
        steps: 8,
        decay_every: 3,
        patch: 8,
        stride: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let img = random_image(&mut rng(8), 3, 40, 40);
    let stream = || {
        let opts = PairOptions {
            scale: 2,
            patch: tc.patch,
            stride: tc.stride,
            augment: tc.augment,
            seed: tc.seed,
        };
        PairStream::from_images(vec![("img".into(), img.clone())], opts).unwrap()
    };
    let run = |model: &mut Model<f32>, adam: &mut Adam<f32>, steps: usize| {
        let t = TrainConfig {
            steps,
            ..tc.clone()
        };
        train(model, adam, &mut stream(), &t, |_, _, _| Ok(())).unwrap()
    };
    let fresh = || {
        let m = build_model::<f32>(&cfg).unwrap();
        let a = Adam::from_config(&m.params, &tc);
        (m, a)
    };
    let same = |a: &Model<f32>, b: &Model<f32>| {
        a.params
            .tensors()
            .iter()
            .zip(b.params.tensors())
            .all(|(x, y)| x.bit_eq(y))
    };

    let (mut m1, mut a1) = fresh();
    let log1 = format_loss_log(1, &run(&mut m1, &mut a1, 8));
    let (mut m2, mut a2) = fresh();
    let log2 = format_loss_log(1, &run(&mut m2, &mut a2, 8));
    if log1 != log2 || !same(&m1, &m2) {
        return Err("repeated training diverged".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&m1, None)
        .save(&path)
        .map_err(|e| e.to_string())?;
    let loaded: Model<f32> = Checkpoint::load(&path)
        .and_then(|c| c.to_model())
        .map_err(|e| e.to_string())?;
    let x = uniform::<f32>(&mut rng(9), &[1, 3, 13, 10], 0.0, 1.0);
    if !loaded.forward(&x).unwrap().bit_eq(&m1.forward(&x).unwrap()) {
        return Err("checkpoint changed the forward pass".into());
    }

    let (mut m3, mut a3) = fresh();
    let head = run(&mut m3, &mut a3, 5);
    Checkpoint::from_model(&m3, Some(a3.to_state()))
        .save(&path)
        .map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut m4: Model<f32> = ckpt.to_model().map_err(|e| e.to_string())?;
    let mut a4 = Adam::from_state(ckpt.optimizer.as_ref().unwrap(), &tc);
    let tail = run(&mut m4, &mut a4, 8);
    let resumed_log = format_loss_log(1, &[head, tail].concat());
    ensure(
        resumed_log == log1 && same(&m4, &m1),
        "loss log, checkpointed forward and resumed run all bitwise equal".into(),
    )
}

fn calibration() -> Outcome {
    let published = [(2, 669_000usize), (3, 708_000), (4, 765_000)];
    let mut parts = Vec::new();
    for (scale, target) in published {
        let cfg = ModelConfig {
            scale,
            ..ModelConfig::default()
        };
        let n = build_model::<f32>(&cfg)
            .map_err(|e| e.to_string())?
            .param_count();
        let delta = 100.0 * (n as f64 - target as f64) / target as f64;
        parts.push(format!("x{scale} {n} vs {}K ({delta:+.1}%)", target / 1000));
    }
    Ok(parts.join("; "))
}

fn report(id: &str, name: &str, gated: bool, outcome: Outcome) -> bool {
    let (tag, detail, ok) = match outcome {
        Ok(d) => (if gated { "PASS" } else { "INFO" }, d, true),
        Err(d) => (if gated { "FAIL" } else { "INFO" }, d, !gated),
    };
    println!("[{tag}] {id}. {name}: {detail}");
    ok
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    // `cargo test <filter>` forwards the filter to every test target; only
    // run when it is absent or names this one.
    let args: Vec<String> = std::env::args().skip(1).collect();
    let filtered_out = args.iter().any(|a| a == "--list")
        || args
            .iter()
            .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()));
    if filtered_out {
        return;
    }
    let mut all = true;
    all &= report("1", "gradient suite (f64)", true, guarded(gradient_suite));
    all &= report(
        "2",
        "identity at zero weights",
        true,
        guarded(identity_at_zero),
    );
    all &= report("3", "output shape contract", true, guarded(shape_contract));
    let run = catch_unwind(overfit).unwrap_or_else(|_| Err("overfit run panicked".into()));
    all &= report(
        "4",
        "overfit one image",
        true,
        guarded(|| overfit_criterion(&run)),
    );
    all &= report(
        "5",
        "beats bicubic on the training image",
        true,
        guarded(|| beats_bicubic(&run)),
    );
    all &= report("6", "metric oracles", true, guarded(metrics_oracle));
    all &= report("7", "bicubic resampler", true, guarded(bicubic_resampler));
    all &= report(
        "8",
        "determinism and persistence",
        true,
        guarded(determinism),
    );
    all &= report("9", "parameter calibration", false, guarded(calibration));
    if !all {
        std::process::exit(1);
    }
}
