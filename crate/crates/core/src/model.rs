//! Full network assembly, configuration and parameter counting.

use std::fmt;

use dmffn_tensor::ops::pixel_shuffle;
use dmffn_tensor::{no_grad, Element, Tensor, TensorError};

use crate::error::{Error, Result};
use crate::fusion::{Dffb, Frb};
use crate::layers::{ConvParams, ConvSpec, Init, ParamStore};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_stages: usize,
    pub atb_depth: usize,
    pub serb_per_sesab: usize,
    pub heads: usize,
    pub square_window: usize,
    pub axial_stripe: usize,
    pub gconv_groups: usize,
    pub ca_ratio: usize,
    pub mlp_ratio: usize,
    pub dfb_branches: usize,
    pub scale: usize,
    pub seed: u64,
}

/// Smallest input side the network accepts (the strided 3×3 convolution in
/// spatial attention needs at least three pixels).
pub const MIN_INPUT_SIZE: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 48,
            num_stages: 4,
            atb_depth: 1,
            serb_per_sesab: 2,
            heads: 4,
            square_window: 8,
            axial_stripe: 1,
            gconv_groups: 4,
            ca_ratio: default_ca_ratio(48),
            mlp_ratio: 2,
            dfb_branches: 4,
            scale: 2,
            seed: 0,
        }
    }
}

/// 16 for wide models, 4 for narrow ones.
pub fn default_ca_ratio(channels: usize) -> usize {
    if channels >= 32 {
        16
    } else {
        4
    }
}

/// Names of every configuration key, in canonical order.
pub const MODEL_KEYS: [&str; 13] = [
    "channels",
    "num_stages",
    "atb_depth",
    "serb_per_sesab",
    "heads",
    "square_window",
    "axial_stripe",
    "gconv_groups",
    "ca_ratio",
    "mlp_ratio",
    "dfb_branches",
    "scale",
    "seed",
];

impl ModelConfig {
    /// Default hyperparameters at another width, with the matching CA ratio.
    pub fn with_channels(channels: usize) -> Self {
        ModelConfig {
            channels,
            ca_ratio: default_ca_ratio(channels),
            ..Default::default()
        }
    }

    /// Every violated constraint, or `Ok` if there are none.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("square_window", self.square_window),
            ("axial_stripe", self.axial_stripe),
            ("gconv_groups", self.gconv_groups),
            ("ca_ratio", self.ca_ratio),
            ("mlp_ratio", self.mlp_ratio),
            ("dfb_branches", self.dfb_branches),
        ];
        for (name, v) in positive {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !matches!(self.scale, 2..=4) {
            problems.push(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        let c = self.channels;
        let divisors = [
            ("dfb_branches", self.dfb_branches),
            ("heads", self.heads),
            ("gconv_groups", self.gconv_groups),
            ("ca_ratio", self.ca_ratio),
        ];
        for (name, d) in divisors {
            if d != 0 && !c.is_multiple_of(d) {
                problems.push(format!("channels {c} not divisible by {name} {d}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Sets one field from its text form. Returns `Ok(false)` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
            v.parse()
                .map_err(|_| format!("expected a non-negative integer, got '{v}'"))
        }
        let field = match key {
            "channels" => &mut self.channels,
            "num_stages" => &mut self.num_stages,
            "atb_depth" => &mut self.atb_depth,
            "serb_per_sesab" => &mut self.serb_per_sesab,
            "heads" => &mut self.heads,
            "square_window" => &mut self.square_window,
            "axial_stripe" => &mut self.axial_stripe,
            "gconv_groups" => &mut self.gconv_groups,
            "ca_ratio" => &mut self.ca_ratio,
            "mlp_ratio" => &mut self.mlp_ratio,
            "dfb_branches" => &mut self.dfb_branches,
            "scale" => &mut self.scale,
            "seed" => {
                self.seed = num(value)?;
                return Ok(true);
            }
            _ => return Ok(false),
        };
        *field = num(value)?;
        Ok(true)
    }

    fn get(&self, key: &str) -> String {
        match key {
            "channels" => self.channels.to_string(),
            "num_stages" => self.num_stages.to_string(),
            "atb_depth" => self.atb_depth.to_string(),
            "serb_per_sesab" => self.serb_per_sesab.to_string(),
            "heads" => self.heads.to_string(),
            "square_window" => self.square_window.to_string(),
            "axial_stripe" => self.axial_stripe.to_string(),
            "gconv_groups" => self.gconv_groups.to_string(),
            "ca_ratio" => self.ca_ratio.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "dfb_branches" => self.dfb_branches.to_string(),
            "scale" => self.scale.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("unknown model key {key}"),
        }
    }
}

/// Canonical `key = value` text, one line per field in [`MODEL_KEYS`] order.
impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in MODEL_KEYS {
            writeln!(f, "{key} = {}", self.get(key))?;
        }
        Ok(())
    }
}

/// The assembled network and its parameters.
#[derive(Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub sfb: ConvParams,
    pub stages: Vec<Dffb>,
    pub frb: Frb,
    pub recon_expand: ConvParams,
    pub recon_out: ConvParams,
}

/// Builds a freshly initialised model. Construction is fully determined by
/// `cfg.seed`.
pub fn build_model<T: Element>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(cfg.seed);
    let c = cfg.channels;
    let s = cfg.scale;
    let sfb = ConvParams::new(&mut store, &mut init, "sfb", 3, c, ConvSpec::k(3))?;
    let stages = (0..cfg.num_stages)
        .map(|i| Dffb::new(&mut store, &mut init, &format!("stage{i}"), cfg))
        .collect::<Result<_>>()?;
    let frb = Frb::new(&mut store, &mut init, "frb", cfg)?;
    let recon_expand = ConvParams::new(
        &mut store,
        &mut init,
        "recon.expand",
        c,
        c * s * s,
        ConvSpec::k(3),
    )?;
    let recon_out = ConvParams::new(&mut store, &mut init, "recon.out", c, 3, ConvSpec::k(3))?;
    Ok(Model {
        config: cfg.clone(),
        params: store,
        sfb,
        stages,
        frb,
        recon_expand,
        recon_out,
    })
}

impl<T: Element> Model<T> {
    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// `N×3×H×W → N×3×sH×sW`, unclamped, using this model's parameters.
    pub fn forward(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(&self.params, lr)
    }

    /// Forward pass with parameters taken from `store`, which must have this
    /// model's layout.
    pub fn forward_with(&self, store: &ParamStore<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = lr.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "model",
                lhs: shape.to_vec(),
                rhs: vec![0, 3, 0, 0],
            }
            .into());
        }
        if shape[2] < MIN_INPUT_SIZE || shape[3] < MIN_INPUT_SIZE {
            return Err(TensorError::SizeUnderflow {
                op: "model",
                detail: format!(
                    "input {}x{} is smaller than the minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}",
                    shape[2], shape[3]
                ),
            }
            .into());
        }
        let f0 = self.sfb.forward(store, lr)?.elu();
        let mut f = f0.clone();
        let mut sum = f0.clone();
        for stage in &self.stages {
            f = stage.forward(store, &f)?;
            sum = sum.add(&f)?;
        }
        let fused = self.frb.forward(store, &sum)?;
        let expanded = self.recon_expand.forward(store, &f0.add(&fused)?)?;
        let shuffled = pixel_shuffle(&expanded, self.config.scale)?;
        self.recon_out.forward(store, &shuffled)
    }

    /// Inference: no graph, output clamped to `[0, 1]`.
    pub fn infer(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let out = no_grad(|| self.forward(lr))?;
        let data = out
            .data()
            .iter()
            .map(|&v| v.max(T::zero()).min(T::one()))
            .collect();
        Ok(Tensor::from_vec(out.shape().to_vec(), data)?)
    }
}
