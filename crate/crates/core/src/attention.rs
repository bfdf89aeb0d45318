//! Transformer path: window partitioning, windowed multi-head
//! self-attention, and the axial-window, square-window and combined blocks.

use dmffn_tensor::ops::{concat, crop2d, gather, pad2d};
use dmffn_tensor::{Element, PadMode, Tensor, TensorError};

use crate::error::Result;
use crate::layers::{
    ConvParams, ConvSpec, Init, LayerNormParams, LinearParams, ParamId, ParamStore,
};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Square,
    /// Horizontal stripes `size` rows tall spanning the full width.
    AxialRow,
    /// Vertical stripes `size` columns wide spanning the full height.
    AxialCol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub size: usize,
}

impl WindowSpec {
    pub fn new(kind: WindowKind, size: usize) -> Self {
        WindowSpec { kind, size }
    }

    /// Window extent `(rows, cols)` on an `h×w` map.
    pub fn extent(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            WindowKind::Square => (self.size, self.size),
            WindowKind::AxialRow => (self.size, w),
            WindowKind::AxialCol => (h, self.size),
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.size == 0 {
            return Err(TensorError::Invalid {
                op: "window_partition",
                msg: "window size must be positive".into(),
            }
            .into());
        }
        let (wh, ww) = self.extent(h, w);
        let fail = |axis: &str, size| TensorError::Divisibility {
            op: "window_partition",
            axis: axis.into(),
            size,
            divisor: self.size,
        };
        if !h.is_multiple_of(wh) {
            return Err(fail("height", h).into());
        }
        if !w.is_multiple_of(ww) {
            return Err(fail("width", w).into());
        }
        Ok((wh, ww))
    }

    /// Spatial padding `(bottom, right)` that makes `h×w` partitionable.
    pub fn padding_for(&self, h: usize, w: usize) -> (usize, usize) {
        let up = |n: usize| n.div_ceil(self.size) * self.size - n;
        match self.kind {
            WindowKind::Square => (up(h), up(w)),
            WindowKind::AxialRow => (up(h), 0),
            WindowKind::AxialCol => (0, up(w)),
        }
    }
}

/// `N×C×H×W → M×L×C`, windows ordered batch-major then row-major.
pub fn window_partition<T: Element>(x: &Tensor<T>, spec: WindowSpec) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(TensorError::Rank {
            op: "window_partition",
            expected: 4,
            shape: x.shape().to_vec(),
        }
        .into());
    };
    let (wh, ww) = spec.check(h, w)?;
    let (bh, bw) = (h / wh, w / ww);
    Ok(x.reshape([n, c, bh, wh, bw, ww])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape([n * bh * bw, wh * ww, c])?)
}

/// Inverse of [`window_partition`] for an `h×w` map.
pub fn window_reverse<T: Element>(
    windows: &Tensor<T>,
    spec: WindowSpec,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (wh, ww) = spec.check(h, w)?;
    let &[m, l, c] = windows.shape() else {
        return Err(TensorError::Rank {
            op: "window_reverse",
            expected: 3,
            shape: windows.shape().to_vec(),
        }
        .into());
    };
    let (bh, bw) = (h / wh, w / ww);
    if l != wh * ww || m % (bh * bw) != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "window_reverse",
            lhs: windows.shape().to_vec(),
            rhs: vec![h, w],
        }
        .into());
    }
    let n = m / (bh * bw);
    Ok(windows
        .reshape([n, bh, bw, wh, ww, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape([n, c, h, w])?)
}

/// Learned bias on attention logits indexed by the relative offset of two
/// tokens in a window. Offsets are clipped to `±clip_y` rows and `±clip_x`
/// columns, so one table serves stripes of any length.
#[derive(Debug, Clone)]
pub struct RelativeBias {
    pub table: ParamId,
    pub heads: usize,
    pub clip_y: usize,
    pub clip_x: usize,
}

impl RelativeBias {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        heads: usize,
        clip_y: usize,
        clip_x: usize,
    ) -> Result<Self> {
        let offsets = (2 * clip_y + 1) * (2 * clip_x + 1);
        let table = store.add(format!("{name}.rel_bias"), Tensor::zeros([offsets, heads]))?;
        Ok(RelativeBias {
            table,
            heads,
            clip_y,
            clip_x,
        })
    }

    /// Bias for a `wh×ww` window as a `1×heads×L×L` tensor.
    pub fn bias<T: Element>(&self, store: &ParamStore<T>, wh: usize, ww: usize) -> Tensor<T> {
        let l = wh * ww;
        let span_x = 2 * self.clip_x + 1;
        let offset = |a: usize, b: usize, clip: usize| {
            let d = (a as isize - b as isize).clamp(-(clip as isize), clip as isize);
            (d + clip as isize) as usize
        };
        let mut index = vec![0; self.heads * l * l];
        for i in 0..l {
            let (yi, xi) = (i / ww, i % ww);
            for j in 0..l {
                let (yj, xj) = (j / ww, j % ww);
                let row = offset(yi, yj, self.clip_y) * span_x + offset(xi, xj, self.clip_x);
                for h in 0..self.heads {
                    index[(h * l + i) * l + j] = row * self.heads + h;
                }
            }
        }
        gather(
            store.get(self.table),
            vec![1, self.heads, l, l],
            index,
            "relative_bias",
        )
    }
}

/// Scaled dot-product attention over `M×h×L×d` queries, keys and values
/// with an optional `1×h×L×L` additive logit bias.
pub fn attention_core<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    scale: f64,
) -> Result<Tensor<T>> {
    let mut logits = q.mul_scalar(T::lit(scale)).matmul(&k.transpose_last2()?)?;
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    Ok(logits.softmax(-1)?.matmul(v)?)
}

/// `M×L×(h·d) → M×h×L×d`.
fn split_heads<T: Element>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let &[m, l, c] = x.shape() else {
        unreachable!()
    };
    Ok(x.reshape([m, l, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?)
}

/// `M×h×L×d → M×L×(h·d)`.
fn merge_heads<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, h, l, d] = x.shape() else {
        unreachable!()
    };
    Ok(x.permute(&[0, 2, 1, 3])?.reshape([m, l, h * d])?)
}

/// Multi-head self-attention applied independently to each window.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub heads: usize,
    pub rel_bias: RelativeBias,
    pub window: usize,
}

impl AttentionParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        let clip = window.saturating_sub(1);
        Ok(AttentionParams {
            qkv: LinearParams::new(store, init, &format!("{name}.qkv"), channels, 3 * channels)?,
            proj: LinearParams::new(store, init, &format!("{name}.proj"), channels, channels)?,
            heads,
            rel_bias: RelativeBias::new(store, name, heads, clip, clip)?,
            window,
        })
    }

    /// Attention over `M×L×C` windows of extent `wh×ww` (`L = wh·ww`).
    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        windows: &Tensor<T>,
        (wh, ww): (usize, usize),
    ) -> Result<Tensor<T>> {
        let &[m, l, c] = windows.shape() else {
            return Err(TensorError::Rank {
                op: "mhsa",
                expected: 3,
                shape: windows.shape().to_vec(),
            }
            .into());
        };
        if c != self.qkv.d_in || l != wh * ww {
            return Err(TensorError::ShapeMismatch {
                op: "mhsa",
                lhs: windows.shape().to_vec(),
                rhs: vec![wh * ww, self.qkv.d_in],
            }
            .into());
        }
        let d = c / self.heads;
        let qkv = self
            .qkv
            .forward(store, windows)?
            .reshape([m, l, 3, self.heads, d])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part =
            |i| -> Result<Tensor<T>> { Ok(qkv.narrow(0, i, 1)?.reshape([m, self.heads, l, d])?) };
        let bias = self.rel_bias.bias(store, wh, ww);
        let out = attention_core(
            &part(0)?,
            &part(1)?,
            &part(2)?,
            Some(&bias),
            1.0 / (d as f64).sqrt(),
        )?;
        self.proj.forward(store, &merge_heads(&out)?)
    }
}

/// Attention over row stripes and column stripes, each orientation taking a
/// share of the heads. Projections run as pointwise maps on `N×C×H×W`.
#[derive(Debug, Clone)]
pub struct AxialAttention {
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub heads: usize,
    pub row_heads: usize,
    pub stripe: usize,
    pub row_bias: RelativeBias,
    pub col_bias: Option<RelativeBias>,
}

impl AxialAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let heads = cfg.heads;
        let row_heads = heads.div_ceil(2);
        let col_heads = heads - row_heads;
        let along = cfg.square_window.saturating_sub(1);
        let across = cfg.axial_stripe - 1;
        Ok(AxialAttention {
            qkv: LinearParams::new(store, init, &format!("{name}.qkv"), c, 3 * c)?,
            proj: LinearParams::new(store, init, &format!("{name}.proj"), c, c)?,
            heads,
            row_heads,
            stripe: cfg.axial_stripe,
            row_bias: RelativeBias::new(store, &format!("{name}.row"), row_heads, across, along)?,
            col_bias: if col_heads > 0 {
                Some(RelativeBias::new(
                    store,
                    &format!("{name}.col"),
                    col_heads,
                    along,
                    across,
                )?)
            } else {
                None
            },
        })
    }

    /// `x` must already be padded to a multiple of the stripe thickness.
    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[_, c, h, w] = x.shape() else {
            unreachable!()
        };
        let d = c / self.heads;
        let qkv = self.qkv.forward_nchw(store, x)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outputs = Vec::with_capacity(2);
        let orientations = [
            (
                WindowKind::AxialRow,
                0,
                self.row_heads,
                Some(&self.row_bias),
            ),
            (
                WindowKind::AxialCol,
                self.row_heads,
                self.heads - self.row_heads,
                self.col_bias.as_ref(),
            ),
        ];
        for (kind, first_head, heads, bias) in orientations {
            let Some(bias) = bias else { continue };
            let spec = WindowSpec::new(kind, self.stripe);
            let (wh, ww) = spec.extent(h, w);
            let part = |i: usize| -> Result<Tensor<T>> {
                let channels = qkv.narrow(1, i * c + first_head * d, heads * d)?;
                split_heads(&window_partition(&channels, spec)?, heads)
            };
            let out = attention_core(
                &part(0)?,
                &part(1)?,
                &part(2)?,
                Some(&bias.bias(store, wh, ww)),
                scale,
            )?;
            outputs.push(window_reverse(&merge_heads(&out)?, spec, h, w)?);
        }
        let merged = if outputs.len() == 1 {
            outputs.pop().expect("one orientation")
        } else {
            concat(&outputs, 1)?
        };
        self.proj.forward_nchw(store, &merged)
    }
}

/// Pointwise two-layer perceptron with GELU, on `N×C×H×W`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl Mlp {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        let hidden = channels * ratio;
        Ok(Mlp {
            fc1: LinearParams::new(store, init, &format!("{name}.fc1"), channels, hidden)?,
            fc2: LinearParams::new(store, init, &format!("{name}.fc2"), hidden, channels)?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = self.fc1.forward_nchw(store, x)?.gelu();
        self.fc2.forward_nchw(store, &hidden)
    }
}

/// Reflect-pads bottom/right so `spec` partitions the map.
fn pad_for<T: Element>(x: &Tensor<T>, spec: WindowSpec) -> Result<Tensor<T>> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (pb, pr) = spec.padding_for(h, w);
    Ok(pad2d(x, (0, pb, 0, pr), PadMode::Reflect)?)
}

/// Axial-window block.
#[derive(Debug, Clone)]
pub struct Awb {
    pub norm1: LayerNormParams,
    pub attn: AxialAttention,
    pub rb_conv1: ConvParams,
    pub rb_conv2: ConvParams,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
}

impl Awb {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(Awb {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), c)?,
            attn: AxialAttention::new(store, init, &format!("{name}.attn"), cfg)?,
            rb_conv1: ConvParams::new(
                store,
                init,
                &format!("{name}.rb.conv1"),
                c,
                c,
                ConvSpec::k(3),
            )?,
            rb_conv2: ConvParams::new(
                store,
                init,
                &format!("{name}.rb.conv2"),
                c,
                c,
                ConvSpec::k(3),
            )?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), c, cfg.mlp_ratio)?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let xn = self.norm1.forward(store, x)?;
        let rb = self
            .rb_conv2
            .forward(store, &self.rb_conv1.forward(store, &xn)?.elu())?;
        // Stripes run along full rows/columns, so only the thickness needs padding.
        let stripe = WindowSpec::new(WindowKind::Square, self.attn.stripe);
        let attn = self.attn.forward(store, &pad_for(&xn, stripe)?)?;
        let attn = crop2d(&attn, 0, 0, h, w)?;
        let f1 = x.add(&rb)?.add(&attn)?;
        let mlp = self.mlp.forward(store, &self.norm2.forward(store, &f1)?)?;
        Ok(f1.add(&mlp)?)
    }
}

/// Square-window block.
#[derive(Debug, Clone)]
pub struct Swb {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
}

impl Swb {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(Swb {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), c)?,
            attn: AttentionParams::new(
                store,
                init,
                &format!("{name}.attn"),
                c,
                cfg.heads,
                cfg.square_window,
            )?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), c, cfg.mlp_ratio)?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let spec = WindowSpec::new(WindowKind::Square, self.attn.window);
        let xn = pad_for(&self.norm1.forward(store, x)?, spec)?;
        let (hp, wp) = (xn.shape()[2], xn.shape()[3]);
        let windows = window_partition(&xn, spec)?;
        let attended = self.attn.forward(store, &windows, spec.extent(hp, wp))?;
        let attn = crop2d(&window_reverse(&attended, spec, hp, wp)?, 0, 0, h, w)?;
        let f1 = x.add(&attn)?;
        let mlp = self.mlp.forward(store, &self.norm2.forward(store, &f1)?)?;
        Ok(f1.add(&mlp)?)
    }
}

/// Alternating axial and square window blocks closed by a 3×3 convolution
/// and an outer residual.
#[derive(Debug, Clone)]
pub struct Atb {
    pub blocks: Vec<(Awb, Swb)>,
    pub conv: ConvParams,
}

impl Atb {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let blocks = (0..cfg.atb_depth)
            .map(|i| {
                Ok((
                    Awb::new(store, init, &format!("{name}.block{i}.awb"), cfg)?,
                    Swb::new(store, init, &format!("{name}.block{i}.swb"), cfg)?,
                ))
            })
            .collect::<Result<_>>()?;
        let c = cfg.channels;
        Ok(Atb {
            blocks,
            conv: ConvParams::new(store, init, &format!("{name}.conv"), c, c, ConvSpec::k(3))?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for (awb, swb) in &self.blocks {
            y = swb.forward(store, &awb.forward(store, &y)?)?;
        }
        Ok(x.add(&self.conv.forward(store, &y)?)?)
    }
}
