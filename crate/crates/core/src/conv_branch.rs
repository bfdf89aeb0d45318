//! Convolutional path: channel attention, enhanced spatial attention, the
//! two-stage separable residual block and its stack.

use dmffn_tensor::ops::{global_avg_pool, max_pool2d, resize_bilinear};
use dmffn_tensor::{Element, Tensor, TensorError};

use crate::error::Result;
use crate::layers::{ConvParams, ConvSpec, Init, ParamStore};
use crate::model::ModelConfig;

/// Squeeze-and-excitation gate: one learned scale per channel.
#[derive(Debug, Clone)]
pub struct CaParams {
    pub reduce: ConvParams,
    pub expand: ConvParams,
    pub ratio: usize,
}

impl CaParams {
    /// The bottleneck has `max(1, channels / ratio)` channels.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        let hidden = (channels / ratio).max(1);
        Ok(CaParams {
            reduce: ConvParams::new(
                store,
                init,
                &format!("{name}.reduce"),
                channels,
                hidden,
                ConvSpec::k(1),
            )?,
            expand: ConvParams::new(
                store,
                init,
                &format!("{name}.expand"),
                hidden,
                channels,
                ConvSpec::k(1),
            )?,
            ratio,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let squeezed = self.reduce.forward(store, &global_avg_pool(x)?)?.relu();
        let gate = self.expand.forward(store, &squeezed)?.sigmoid();
        Ok(x.mul(&gate)?)
    }
}

pub const ESA_POOL_SIZE: usize = 7;
pub const ESA_POOL_STRIDE: usize = 3;

/// Enhanced spatial attention: a coarse mask computed on a strided,
/// pooled copy of the features and upsampled back.
#[derive(Debug, Clone)]
pub struct EsaParams {
    pub reduce: ConvParams,
    pub stride_conv: ConvParams,
    pub body_conv: ConvParams,
    pub expand: ConvParams,
    pub pool_size: usize,
    pub pool_stride: usize,
}

impl EsaParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let ce = (channels / 4).max(1);
        Ok(EsaParams {
            reduce: ConvParams::new(
                store,
                init,
                &format!("{name}.reduce"),
                channels,
                ce,
                ConvSpec::k(1),
            )?,
            stride_conv: ConvParams::new(
                store,
                init,
                &format!("{name}.stride_conv"),
                ce,
                ce,
                ConvSpec::k(3).stride(2).padding(0),
            )?,
            body_conv: ConvParams::new(
                store,
                init,
                &format!("{name}.body_conv"),
                ce,
                ce,
                ConvSpec::k(3),
            )?,
            expand: ConvParams::new(
                store,
                init,
                &format!("{name}.expand"),
                ce,
                channels,
                ConvSpec::k(1),
            )?,
            pool_size: ESA_POOL_SIZE,
            pool_stride: ESA_POOL_STRIDE,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h < 3 || w < 3 {
            return Err(TensorError::SizeUnderflow {
                op: "esa",
                detail: format!("input {h}x{w} is smaller than the 3x3 strided convolution"),
            }
            .into());
        }
        let m = self.reduce.forward(store, x)?;
        let mut coarse = self.stride_conv.forward(store, &m)?;
        let (ch, cw) = (coarse.shape()[2], coarse.shape()[3]);
        if ch >= self.pool_size && cw >= self.pool_size {
            coarse = max_pool2d(&coarse, self.pool_size, self.pool_stride)?;
        }
        let coarse = self.body_conv.forward(store, &coarse)?;
        let up = resize_bilinear(&coarse, h, w)?;
        let mask = self.expand.forward(store, &up.add(&m)?)?.sigmoid();
        Ok(x.mul(&mask)?)
    }
}

/// One stage: grouped 1×1, depthwise 3×3, grouped 1×1, ELU, plus a 3×3 skip.
#[derive(Debug, Clone)]
pub struct SeparableStage {
    pub gconv_in: ConvParams,
    pub dwconv: ConvParams,
    pub gconv_out: ConvParams,
    pub skip_conv: ConvParams,
}

impl SeparableStage {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        let c = channels;
        Ok(SeparableStage {
            gconv_in: ConvParams::new(
                store,
                init,
                &format!("{name}.gconv_in"),
                c,
                c,
                ConvSpec::k(1).groups(groups),
            )?,
            dwconv: ConvParams::new(
                store,
                init,
                &format!("{name}.dwconv"),
                c,
                c,
                ConvSpec::k(3).groups(c),
            )?,
            gconv_out: ConvParams::new(
                store,
                init,
                &format!("{name}.gconv_out"),
                c,
                c,
                ConvSpec::k(1).groups(groups),
            )?,
            skip_conv: ConvParams::new(
                store,
                init,
                &format!("{name}.skip_conv"),
                c,
                c,
                ConvSpec::k(3),
            )?,
        })
    }

    /// `x + Conv(x) + ELU(GConv(DwConv(GConv(x))))`, before any outer activation.
    fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.gconv_in.forward(store, x)?;
        let b = self.dwconv.forward(store, &a)?;
        let sep = self.gconv_out.forward(store, &b)?.elu();
        Ok(x.add(&self.skip_conv.forward(store, x)?)?.add(&sep)?)
    }
}

/// Two-stage separable residual block gated by channel then spatial attention.
#[derive(Debug, Clone)]
pub struct SerbParams {
    pub stage1: SeparableStage,
    pub stage2: SeparableStage,
    pub ca: CaParams,
    pub esa: EsaParams,
}

impl SerbParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(SerbParams {
            stage1: SeparableStage::new(
                store,
                init,
                &format!("{name}.stage1"),
                c,
                cfg.gconv_groups,
            )?,
            stage2: SeparableStage::new(
                store,
                init,
                &format!("{name}.stage2"),
                c,
                cfg.gconv_groups,
            )?,
            ca: CaParams::new(store, init, &format!("{name}.ca"), c, cfg.ca_ratio)?,
            esa: EsaParams::new(store, init, &format!("{name}.esa"), c)?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f1 = self.stage1.forward(store, x)?.elu();
        let f2 = self.stage2.forward(store, &f1)?;
        self.esa.forward(store, &self.ca.forward(store, &f2)?)
    }
}

/// Stack of separable residual blocks with an outer residual. An empty stack
/// is the identity.
#[derive(Debug, Clone)]
pub struct Sesab {
    pub serbs: Vec<SerbParams>,
}

impl Sesab {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let serbs = (0..cfg.serb_per_sesab)
            .map(|i| SerbParams::new(store, init, &format!("{name}.serb{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Sesab { serbs })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.serbs.is_empty() {
            return Ok(x.clone());
        }
        let mut y = x.clone();
        for serb in &self.serbs {
            y = serb.forward(store, &y)?;
        }
        Ok(x.add(&y)?)
    }
}
