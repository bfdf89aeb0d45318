//! PSNR, SSIM and directory evaluation with CSV reporting.

use std::fmt::Write as _;
use std::path::Path;

use dmffn_tensor::Element;

use crate::data::{
    bicubic_resize, degrade, list_pngs, rgb_to_y, FloatImage, ImageBuffer, ScaleFactor,
};
use crate::error::{Error, Result};
use crate::model::Model;

fn check_same(a: &FloatImage, b: &FloatImage) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Data(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

fn to_metric_space(img: &FloatImage, on_y: bool) -> Result<FloatImage> {
    if on_y {
        rgb_to_y(img)
    } else {
        Ok(img.clone())
    }
}

/// Removes `border` pixels from every side.
pub fn crop_border(img: &FloatImage, border: usize) -> Result<FloatImage> {
    if 2 * border >= img.height || 2 * border >= img.width {
        return Err(Error::Data(format!(
            "cropping {border} pixels leaves nothing of a {}x{} image",
            img.height, img.width
        )));
    }
    Ok(img.crop(
        border,
        border,
        img.height - 2 * border,
        img.width - 2 * border,
    ))
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images; `+inf` when equal.
pub fn psnr(a: &FloatImage, b: &FloatImage, border: usize, on_y: bool) -> Result<f64> {
    check_same(a, b)?;
    let a = crop_border(&to_metric_space(a, on_y)?, border)?;
    let b = crop_border(&to_metric_space(b, on_y)?, border)?;
    let mut sum = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        sum += d * d;
    }
    let mse = sum / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Valid-region separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &gt) in g.iter().enumerate() {
                acc += gt * plane[y * w + x + t];
            }
            rows[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &gt) in g.iter().enumerate() {
                acc += gt * rows[(y + t) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu1 = filter_valid(a, h, w, &g);
    let mu2 = filter_valid(b, h, w, &g);
    let e11 = filter_valid(&prod(a, a), h, w, &g);
    let e22 = filter_valid(&prod(b, b), h, w, &g);
    let e12 = filter_valid(&prod(a, b), h, w, &g);
    let mut total = 0.0;
    for i in 0..mu1.len() {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s11 = e11[i] - m1 * m1;
        let s22 = e22[i] - m2 * m2;
        let s12 = e12[i] - m1 * m2;
        let num = (2.0 * m1 * m2 + SSIM_C1) * (2.0 * s12 + SSIM_C2);
        let den = (m1 * m1 + m2 * m2 + SSIM_C1) * (s11 + s22 + SSIM_C2);
        total += num / den;
    }
    total / mu1.len() as f64
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) over
/// the valid region. Multi-channel input without `on_y` averages the
/// per-channel scores.
pub fn ssim(a: &FloatImage, b: &FloatImage, on_y: bool) -> Result<f64> {
    check_same(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let a = to_metric_space(a, on_y)?;
    let b = to_metric_space(b, on_y)?;
    let total: f64 = (0..a.channels)
        .map(|c| ssim_plane(a.plane(c), b.plane(c), a.height, a.width))
        .sum();
    Ok(total / a.channels as f64)
}

/// Anything that maps a low-resolution RGB image to a high-resolution one.
pub trait Upscaler {
    fn scale(&self) -> usize;
    fn param_count(&self) -> usize;
    fn upscale(&self, lr: &FloatImage) -> Result<FloatImage>;
}

impl<T: Element> Upscaler for Model<T> {
    fn scale(&self) -> usize {
        self.config.scale
    }

    fn param_count(&self) -> usize {
        Model::param_count(self)
    }

    fn upscale(&self, lr: &FloatImage) -> Result<FloatImage> {
        let out = self.infer(&lr.to_tensor::<T>())?;
        FloatImage::from_tensor(&out, 0)
    }
}

/// Plain bicubic interpolation, the reference every model should beat.
#[derive(Debug, Clone, Copy)]
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl Upscaler for BicubicUpscaler {
    fn scale(&self) -> usize {
        self.scale
    }

    fn param_count(&self) -> usize {
        0
    }

    fn upscale(&self, lr: &FloatImage) -> Result<FloatImage> {
        bicubic_resize(lr, ScaleFactor::up(self.scale), true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub model_params: usize,
    pub scale: usize,
    pub crop_border: usize,
}

/// One row of the bundled comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub scale: usize,
    pub model: String,
    pub params_k: usize,
    pub set: String,
    pub psnr: String,
    pub ssim: String,
}

const BASELINES_CSV: &str = include_str!("../data/baselines.csv");

/// Published results of lightweight super-resolution models on the standard
/// benchmark sets, values kept verbatim as text.
pub fn baselines() -> Vec<Baseline> {
    BASELINES_CSV
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Baseline {
                scale: f[0].parse().expect("bundled scale"),
                model: f[1].to_string(),
                params_k: f[2].parse().expect("bundled param count"),
                set: f[3].to_string(),
                psnr: f[4].to_string(),
                ssim: f[5].to_string(),
            }
        })
        .collect()
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub fn from_rows(
        rows: Vec<EvalRow>,
        model_params: usize,
        scale: usize,
        crop_border: usize,
    ) -> Self {
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        EvalReport {
            rows,
            mean_psnr,
            mean_ssim,
            model_params,
            scale,
            crop_border,
        }
    }

    /// `image,psnr_db,ssim` rows, then `#` lines with the means, the run
    /// settings and the bundled baselines for this scale.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{}",
                r.image_id,
                fmt_metric(r.psnr_db),
                fmt_metric(r.ssim)
            );
        }
        let _ = writeln!(
            s,
            "# mean,{},{}",
            fmt_metric(self.mean_psnr),
            fmt_metric(self.mean_ssim)
        );
        let _ = writeln!(s, "# params,{}", self.model_params);
        let _ = writeln!(s, "# scale,{}", self.scale);
        let _ = writeln!(s, "# crop_border,{}", self.crop_border);
        for b in baselines().iter().filter(|b| b.scale == self.scale) {
            let _ = writeln!(
                s,
                "# baseline,{},{},{},{},{}",
                b.scale, b.model, b.set, b.psnr, b.ssim
            );
        }
        s
    }
}

/// PSNR and SSIM of one super-resolved image against its ground truth,
/// on luma with `border` pixels cropped.
pub fn score(sr: &FloatImage, hr: &FloatImage, border: usize) -> Result<(f64, f64)> {
    let p = psnr(sr, hr, border, true)?;
    let sy = crop_border(&rgb_to_y(sr)?, border)?;
    let hy = crop_border(&rgb_to_y(hr)?, border)?;
    Ok((p, ssim(&sy, &hy, false)?))
}

/// Scores `model` on one HR image: the image is cropped to a multiple of
/// the scale, downsampled, upscaled by the model and quantised to 8 bits.
pub fn evaluate_image(model: &dyn Upscaler, hr: &FloatImage) -> Result<(f64, f64)> {
    let s = model.scale();
    let (hr, lr) = degrade(&hr.to_rgb(), s)?;
    let sr = model.upscale(&lr)?.quantized();
    score(&sr, &hr, s)
}

/// Evaluates every PNG in `hr_dir`. Images that fail are logged and skipped.
pub fn evaluate(model: &dyn Upscaler, hr_dir: &Path) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for path in list_pngs(hr_dir)? {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let scored =
            ImageBuffer::read(&path).and_then(|img| evaluate_image(model, &img.to_float()));
        match scored {
            Ok((psnr_db, ssim)) => rows.push(EvalRow {
                image_id: id,
                psnr_db,
                ssim,
            }),
            Err(e) => log::warn!("skipping {id}: {e}"),
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no image in {} could be evaluated",
            hr_dir.display()
        )));
    }
    let s = model.scale();
    Ok(EvalReport::from_rows(rows, model.param_count(), s, s))
}
