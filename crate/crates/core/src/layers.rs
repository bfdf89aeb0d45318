//! Parameter storage and the parameterised building blocks shared by every
//! branch of the network: convolutions, linear maps, layer norm.

use std::collections::HashMap;

use dmffn_tensor::ops::{self, pad2d, Conv2dOptions};
use dmffn_tensor::{Element, PadMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
///
/// Blocks hold [`ParamId`]s and look their tensors up at forward time, so the
/// optimiser can swap in updated values without touching the blocks.
#[derive(Clone)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value.into_param());
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's value. The shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != value.shape() {
            return Err(Error::Tensor(dmffn_tensor::TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            }));
        }
        self.tensors[id.0] = value.into_param();
        Ok(())
    }

    /// Copy of this store with every tensor replaced, in order. Used to
    /// evaluate blocks at perturbed parameter values.
    pub fn with_tensors(&self, tensors: &[Tensor<T>]) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        ParamStore {
            names: self.names.clone(),
            tensors: tensors.to_vec(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn zero_grads(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }

    /// Same names and values at another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.cast::<U>().into_param())
                .collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Seeded weight initialiser. Values are drawn in `f64` and rounded to the
/// store's precision, so `f32` and `f64` models built from one seed agree.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `±1 / sqrt(fan_in)`.
    pub fn fan_in_uniform<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches")
    }

    /// Normal(0, std) resampled until it lies within two standard deviations.
    pub fn trunc_normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(&mut self.rng);
                if v.abs() <= 2.0 * std {
                    break T::lit(v);
                }
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches")
    }
}

/// Standard deviation for attention and linear weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// Convolution layer: standard (`groups = 1`), grouped, or depthwise.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
    pub groups: usize,
}

/// Geometry for [`ConvParams::new`]. Defaults: stride 1, zero "same"
/// padding for odd kernels, one group, with bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Option<usize>,
    pub pad_mode: PadMode,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k(kernel: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            padding: None,
            pad_mode: PadMode::Zero,
            groups: 1,
            bias: true,
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = Some(padding);
        self
    }
}

impl ConvParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let k = spec.kernel;
        if spec.groups == 0
            || !c_in.is_multiple_of(spec.groups)
            || !c_out.is_multiple_of(spec.groups)
        {
            return Err(Error::InvalidConfig(vec![format!(
                "{name}: channels {c_in}->{c_out} not divisible by groups {}",
                spec.groups
            )]));
        }
        let cin_g = c_in / spec.groups;
        let fan_in = cin_g * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in_uniform(&[c_out, cin_g, k, k], fan_in),
        )?;
        let bias = if spec.bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?)
        } else {
            None
        };
        Ok(ConvParams {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding.unwrap_or(k / 2),
            pad_mode: spec.pad_mode,
            groups: spec.groups,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let weight = store.get(self.weight);
        let bias = self.bias.map(|b| store.get(b));
        let (input, padding) = match self.pad_mode {
            PadMode::Reflect if self.padding > 0 => {
                let p = self.padding;
                (pad2d(x, (p, p, p, p), PadMode::Reflect)?, 0)
            }
            _ => (x.clone(), self.padding),
        };
        let opts = Conv2dOptions {
            stride: self.stride,
            padding,
            groups: self.groups,
        };
        Ok(ops::conv2d(&input, weight, bias, opts)?)
    }
}

/// Fully connected layer over the trailing (or channel) dimension.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.trunc_normal(&[d_out, d_in], LINEAR_INIT_STD),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?;
        Ok(LinearParams {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// `x · Wᵀ + b` over the trailing dimension of token-major input.
    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::linear(
            x,
            store.get(self.weight),
            Some(store.get(self.bias)),
        )?)
    }

    /// Same map applied per pixel of an `N×C×H×W` feature map.
    pub fn forward_nchw<T: Element>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let w = store
            .get(self.weight)
            .reshape([self.d_out, self.d_in, 1, 1])?;
        Ok(ops::conv2d(
            x,
            &w,
            Some(store.get(self.bias)),
            Conv2dOptions::default(),
        )?)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]))?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::layer_norm(
            x,
            store.get(self.gamma),
            store.get(self.beta),
            T::lit(self.eps),
        )?)
    }
}

/// Zeroes every learned weight and bias while leaving layer-norm scales at
/// one. Names ending in `.gamma` are norm scales.
pub fn zero_weights<T: Element>(store: &mut ParamStore<T>) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".gamma") {
            continue;
        }
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([1])).unwrap();
        assert!(matches!(
            s.add("a", Tensor::zeros([1])),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn conv_param_count() {
        let mut s = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        ConvParams::new(&mut s, &mut init, "c", 3, 8, ConvSpec::k(3)).unwrap();
        assert_eq!(s.scalar_count(), 3 * 8 * 9 + 8);
    }

    #[test]
    fn init_bounds_respected() {
        let mut init = Init::new(1);
        let t: Tensor<f64> = init.fan_in_uniform(&[64, 4, 3, 3], 36);
        let bound = 1.0 / 6.0;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let n: Tensor<f64> = init.trunc_normal(&[1000], 0.02);
        assert!(n.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn reflect_conv_on_constant() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        let mut spec = ConvSpec::k(3);
        spec.pad_mode = PadMode::Reflect;
        let conv = ConvParams::new(&mut s, &mut init, "c", 1, 1, spec).unwrap();
        s.set(conv.weight, Tensor::ones([1, 1, 3, 3])).unwrap();
        let y = conv.forward(&s, &Tensor::full([1, 1, 4, 4], 2.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn pointwise_linear_matches_token_linear() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(3);
        let lin = LinearParams::new(&mut s, &mut init, "l", 3, 5).unwrap();
        let x: Tensor<f64> = init.fan_in_uniform(&[2, 3, 2, 4], 1);
        let a = lin.forward_nchw(&s, &x).unwrap();
        let tokens = x.permute(&[0, 2, 3, 1]).unwrap();
        let b = lin
            .forward(&s, &tokens)
            .unwrap()
            .permute(&[0, 3, 1, 2])
            .unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
