//! Image I/O, resampling, colour conversion and training-pair synthesis.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dmffn_tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};

/// 8-bit image with interleaved samples, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (grey) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::Data(format!(
                "invalid image geometry {width}x{height}x{channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{} samples for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Reads an 8-bit greyscale or RGB PNG.
    pub fn read(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        let file = File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
        let mut reader = png::Decoder::new(BufReader::new(file))
            .read_info()
            .map_err(|e| bad(e.to_string()))?;
        let (color, depth) = reader.output_color_type();
        if depth != png::BitDepth::Eight {
            return Err(bad(format!("unsupported bit depth {depth:?}, expected 8")));
        }
        let channels = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(bad(format!(
                    "unsupported colour type {other:?}, expected greyscale or RGB"
                )))
            }
        };
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| bad(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let row = w * channels;
        let pixels = if info.line_size == row {
            buf.truncate(row * h);
            buf
        } else {
            buf.chunks(info.line_size)
                .take(h)
                .flat_map(|r| r[..row].to_vec())
                .collect()
        };
        ImageBuffer::new(w, h, channels, pixels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(if self.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let bad = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(bad)?;
        writer.write_image_data(&self.pixels).map_err(bad)?;
        writer.finish().map_err(bad)
    }

    /// Planar `[0, 1]` view.
    pub fn to_float(&self) -> FloatImage {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        FloatImage::new(c, h, w, data)
    }
}

/// Planar floating-point image, `channels × height × width`, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// `v ∈ [0,1] → 0..=255`, clamping, rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image data length");
        FloatImage {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_buffer(&self) -> ImageBuffer {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut pixels = vec![0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pixels[(y * w + x) * c + ch] = quantize(self.at(ch, y, x));
                }
            }
        }
        ImageBuffer::new(w, h, c, pixels).expect("valid geometry")
    }

    /// Round trip through 8 bits.
    pub fn quantized(&self) -> FloatImage {
        let data = self
            .data
            .iter()
            .map(|&v| quantize(v) as f64 / 255.0)
            .collect();
        FloatImage::new(self.channels, self.height, self.width, data)
    }

    /// Greyscale images are replicated to three channels.
    pub fn to_rgb(&self) -> FloatImage {
        if self.channels == 3 {
            return self.clone();
        }
        let plane = self.plane(0);
        let data = plane.iter().chain(plane).chain(plane).copied().collect();
        FloatImage::new(3, self.height, self.width, data)
    }

    /// The `h×w` region whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> FloatImage {
        assert!(
            y0 + h <= self.height && x0 + w <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let start = (c * self.height + y) * self.width + x0;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        FloatImage::new(self.channels, h, w, data)
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v)).collect();
        Tensor::from_vec([1, self.channels, self.height, self.width], data).expect("shape matches")
    }

    /// Image `index` of an `N×C×H×W` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<FloatImage> {
        let &[n, c, h, w] = t.shape() else {
            return Err(Error::Data(format!(
                "expected an NCHW tensor, got {:?}",
                t.shape()
            )));
        };
        if index >= n {
            return Err(Error::Data(format!("image {index} of a batch of {n}")));
        }
        let len = c * h * w;
        let data = t.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        Ok(FloatImage::new(c, h, w, data))
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Positive rational resampling factor `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleFactor {
    pub num: usize,
    pub den: usize,
}

impl ScaleFactor {
    pub fn up(s: usize) -> Self {
        ScaleFactor { num: s, den: 1 }
    }

    pub fn down(s: usize) -> Self {
        ScaleFactor { num: 1, den: s }
    }

    fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(n · num / den)`.
    pub fn apply(self, n: usize) -> usize {
        (n * self.num).div_ceil(self.den)
    }
}

/// Taps and normalised weights along one axis: `out[i] = Σ w · in[idx]`.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    pub taps: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Half-sample symmetric mirroring into `0..n` (`…1 0 | 0 1 … n-1 | n-1 n-2…`).
fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Per-output-sample interpolation weights for resizing an axis of length
/// `n_in` to `n_out` by `scale`. When shrinking with `antialias`, the kernel
/// is stretched by `1/scale`.
pub fn axis_weights(n_in: usize, n_out: usize, scale: f64, antialias: bool) -> AxisWeights {
    let shrink = antialias && scale < 1.0;
    let width = if shrink { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as usize + 2;
    let mut indices = Vec::with_capacity(n_out * taps);
    let mut weights = Vec::with_capacity(n_out * taps);
    for i in 0..n_out {
        // 1-based output coordinate mapped to 1-based input coordinate.
        let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as isize;
        let start = weights.len();
        let mut total = 0.0;
        for t in 0..taps as isize {
            let j = left + t;
            let d = u - j as f64;
            let w = if shrink {
                scale * cubic(scale * d)
            } else {
                cubic(d)
            };
            total += w;
            indices.push(mirror(j - 1, n_in));
            weights.push(w);
        }
        for w in &mut weights[start..] {
            *w /= total;
        }
    }
    AxisWeights {
        taps,
        indices,
        weights,
    }
}

/// Separable bicubic resize. The output side is `ceil(side · scale)`.
/// Rows are resampled first, then columns.
pub fn bicubic_resize(img: &FloatImage, scale: ScaleFactor, antialias: bool) -> Result<FloatImage> {
    if scale.num == 0 || scale.den == 0 {
        return Err(Error::Data("resize factor must be positive".into()));
    }
    let (h, w) = (img.height, img.width);
    let (ho, wo) = (scale.apply(h), scale.apply(w));
    if ho == 0 || wo == 0 {
        return Err(Error::Data(format!(
            "resize of {h}x{w} by {scale:?} is empty"
        )));
    }
    let s = scale.value();
    let wy = axis_weights(h, ho, s, antialias);
    let wx = axis_weights(w, wo, s, antialias);
    let mut out = Vec::with_capacity(img.channels * ho * wo);
    let mut mid = vec![0.0; ho * w];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for oy in 0..ho {
            for x in 0..w {
                let mut acc = 0.0;
                for t in 0..wy.taps {
                    let k = oy * wy.taps + t;
                    acc += wy.weights[k] * plane[wy.indices[k] * w + x];
                }
                mid[oy * w + x] = acc;
            }
        }
        for oy in 0..ho {
            let row = &mid[oy * w..(oy + 1) * w];
            for ox in 0..wo {
                let mut acc = 0.0;
                for t in 0..wx.taps {
                    let k = ox * wx.taps + t;
                    acc += wx.weights[k] * row[wx.indices[k]];
                }
                out.push(acc);
            }
        }
    }
    Ok(FloatImage::new(img.channels, ho, wo, out))
}

/// BT.601 luma on the studio range: `(65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn rgb_to_y(img: &FloatImage) -> Result<FloatImage> {
    if img.channels != 3 {
        return Err(Error::Data(format!(
            "luma conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..r.len())
        .map(|i| (65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i] + 16.0) / 255.0)
        .collect();
    Ok(FloatImage::new(1, img.height, img.width, data))
}

/// One of the eight symmetries of the square: `k & 3` quarter turns
/// counter-clockwise, preceded by a horizontal flip when `k & 4` is set.
pub fn dihedral(img: &FloatImage, k: u8) -> FloatImage {
    let (h, w) = (img.height, img.width);
    let flip = k & 4 != 0;
    let turns = k & 3;
    let (ho, wo) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..ho {
            for x in 0..wo {
                // Source of output (y, x) under the rotation.
                let (sy, sx) = match turns {
                    0 => (y, x),
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                let sx = if flip { w - 1 - sx } else { sx };
                data.push(img.at(c, sy, sx));
            }
        }
    }
    FloatImage::new(img.channels, ho, wo, data)
}

/// Aligned low/high resolution training patches.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub hr_patch: FloatImage,
    pub lr_patch: FloatImage,
    pub scale: usize,
    pub source_id: String,
}

/// Patch sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOptions {
    pub scale: usize,
    /// LR patch side.
    pub patch: usize,
    /// LR grid step between patches.
    pub stride: usize,
    pub augment: bool,
    pub seed: u64,
}

struct Source {
    id: String,
    hr: FloatImage,
    lr: FloatImage,
}

/// Deterministic, seekable stream of training pairs. Each epoch visits every
/// grid patch once in an order shuffled from `(seed, epoch)`; with
/// augmentation each draw also gets a dihedral transform from the same RNG.
pub struct PairStream {
    opts: PairOptions,
    sources: Vec<Source>,
    /// `(source, lr_y, lr_x)` for each grid patch.
    grid: Vec<(usize, usize, usize)>,
    epoch: Option<(u64, Vec<(usize, u8)>)>,
    position: u64,
}

/// Sorted `.png` files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(io_err(format!("listing {}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e
            .map_err(io_err(format!("listing {}", dir.display())))?
            .path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", dir.display())));
    }
    Ok(files)
}

/// Crops `hr` to multiples of `scale` and downsamples it with antialiased bicubic.
pub fn degrade(hr: &FloatImage, scale: usize) -> Result<(FloatImage, FloatImage)> {
    let (h, w) = (hr.height / scale * scale, hr.width / scale * scale);
    if h == 0 || w == 0 {
        return Err(Error::Data(format!(
            "{}x{} image is smaller than the scale {scale}",
            hr.height, hr.width
        )));
    }
    let hr = hr.crop(0, 0, h, w);
    let lr = bicubic_resize(&hr, ScaleFactor::down(scale), true)?;
    Ok((hr, lr))
}

/// Builds the pair stream for every PNG in `hr_dir`. Images too small for
/// one patch are skipped with a warning.
pub fn make_pairs(hr_dir: &Path, opts: PairOptions) -> Result<PairStream> {
    let mut images = Vec::new();
    for path in list_pngs(hr_dir)? {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        images.push((id, ImageBuffer::read(&path)?.to_float().to_rgb()));
    }
    PairStream::from_images(images, opts)
}

impl PairStream {
    pub fn from_images(images: Vec<(String, FloatImage)>, opts: PairOptions) -> Result<Self> {
        if opts.patch == 0 || opts.stride == 0 || opts.scale == 0 {
            return Err(Error::Data(
                "patch, stride and scale must be positive".into(),
            ));
        }
        let mut sources = Vec::new();
        let mut grid = Vec::new();
        for (id, img) in images {
            let hr_side = opts.patch * opts.scale;
            if img.height < hr_side || img.width < hr_side {
                log::warn!(
                    "skipping {id}: {}x{} is smaller than a {hr_side}x{hr_side} patch",
                    img.height,
                    img.width
                );
                continue;
            }
            let (hr, lr) = degrade(&img.to_rgb(), opts.scale)?;
            let si = sources.len();
            for y in (0..=lr.height - opts.patch).step_by(opts.stride) {
                for x in (0..=lr.width - opts.patch).step_by(opts.stride) {
                    grid.push((si, y, x));
                }
            }
            sources.push(Source { id, hr, lr });
        }
        if grid.is_empty() {
            return Err(Error::Data("no image is large enough for one patch".into()));
        }
        Ok(PairStream {
            opts,
            sources,
            grid,
            epoch: None,
            position: 0,
        })
    }

    /// Patches per epoch.
    pub fn epoch_len(&self) -> usize {
        self.grid.len()
    }

    pub fn options(&self) -> PairOptions {
        self.opts
    }

    /// Index of the next pair [`Iterator::next`] returns.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn seek(&mut self, position: u64) {
        self.position = position;
    }

    fn epoch_plan(&mut self, epoch: u64) -> &[(usize, u8)] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mixed = self.opts.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(mixed);
            let mut order: Vec<usize> = (0..self.grid.len()).collect();
            order.shuffle(&mut rng);
            let plan = order
                .into_iter()
                .map(|i| {
                    let k = if self.opts.augment {
                        rng.random_range(0..8u8)
                    } else {
                        0
                    };
                    (i, k)
                })
                .collect();
            self.epoch = Some((epoch, plan));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    /// Pair number `index` of the infinite stream.
    pub fn pair_at(&mut self, index: u64) -> SamplePair {
        let n = self.grid.len() as u64;
        let (epoch, slot) = (index / n, (index % n) as usize);
        let (cell, k) = self.epoch_plan(epoch)[slot];
        let (si, y, x) = self.grid[cell];
        let src = &self.sources[si];
        let (p, s) = (self.opts.patch, self.opts.scale);
        let lr = dihedral(&src.lr.crop(y, x, p, p), k);
        let hr = dihedral(&src.hr.crop(y * s, x * s, p * s, p * s), k);
        SamplePair {
            hr_patch: hr,
            lr_patch: lr,
            scale: s,
            source_id: src.id.clone(),
        }
    }

    /// The next `n` pairs stacked as `(lr, hr)` tensors `n×3×P×P`, `n×3×sP×sP`.
    pub fn next_batch<T: Element>(&mut self, n: usize) -> (Tensor<T>, Tensor<T>) {
        let pairs: Vec<SamplePair> = (0..n).map(|_| self.next().expect("endless")).collect();
        let stack = |imgs: Vec<&FloatImage>| {
            let (c, h, w) = (imgs[0].channels, imgs[0].height, imgs[0].width);
            let data = imgs
                .iter()
                .flat_map(|i| i.data.iter().map(|&v| T::lit(v)))
                .collect();
            Tensor::from_vec([imgs.len(), c, h, w], data).expect("uniform patches")
        };
        (
            stack(pairs.iter().map(|p| &p.lr_patch).collect()),
            stack(pairs.iter().map(|p| &p.hr_patch).collect()),
        )
    }
}

impl Iterator for PairStream {
    type Item = SamplePair;

    fn next(&mut self) -> Option<SamplePair> {
        let pair = self.pair_at(self.position);
        self.position += 1;
        Some(pair)
    }
}
