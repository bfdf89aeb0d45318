//! Finite-difference checks for every differentiable operation and block,
//! from single ops up to a tiny end-to-end model.
//!
//! Each check draws inputs and parameters uniformly from `[-1, 1]` and
//! differentiates `Σ w ⊙ f(inputs)` for a fixed random `w`, so that every
//! output element contributes a distinct weight.

use dmffn_tensor::gradcheck::relative_error;
use dmffn_tensor::ops::{
    conv2d, global_avg_pool, layer_norm, linear, max_pool2d, pad2d, pixel_shuffle, pixel_unshuffle,
    resize_bilinear,
};
use dmffn_tensor::{
    finite_diff_grad, no_grad, Conv2dOptions, Element, GradReport, PadMode, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{window_partition, Atb, AttentionParams, Awb, Swb, WindowKind, WindowSpec};
use crate::conv_branch::{CaParams, EsaParams, SerbParams, Sesab};
use crate::error::{Error, Result};
use crate::fusion::{DfbParams, Dffb, Frb};
use crate::layers::{Init, ParamStore};
use crate::model::{build_model, ModelConfig};

/// Every registered check, in the order [`run_suite`] runs them.
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "conv2d_strided",
    "conv2d_grouped",
    "conv2d_depthwise",
    "linear",
    "layer_norm_nchw",
    "layer_norm_tokens",
    "elu",
    "gelu",
    "relu",
    "sigmoid",
    "softmax",
    "pixel_shuffle",
    "pixel_unshuffle",
    "pad_reflect",
    "global_avg_pool",
    "max_pool2d",
    "resize_bilinear",
    "window_partition",
    "l1_loss",
    "mhsa",
    "awb",
    "swb",
    "atb",
    "channel_attention",
    "esa",
    "serb",
    "sesab",
    "dfb",
    "dffb",
    "frb",
    "model",
];

/// Small configuration shared by the block-level checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        num_stages: 1,
        atb_depth: 1,
        serb_per_sesab: 1,
        heads: 2,
        square_window: 4,
        axial_stripe: 1,
        gconv_groups: 2,
        ca_ratio: 2,
        mlp_ratio: 2,
        dfb_branches: 4,
        scale: 2,
        seed: 11,
    }
}

/// Which gradients a check computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Want {
    Analytic,
    Numeric,
    Both,
}

/// Per-input gradients, flattened to `f64`.
#[derive(Default)]
struct Grads {
    analytic: Vec<Vec<f64>>,
    numeric: Vec<Vec<f64>>,
}

struct Ctx {
    rng: ChaCha8Rng,
    eps: f64,
    want: Want,
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

impl Ctx {
    fn uniform<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-1.0..1.0)))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches")
    }

    /// Gradients of `Σ w ⊙ f(inputs)` with respect to every input.
    fn check<T: Element>(
        &mut self,
        inputs: Vec<Tensor<T>>,
        f: impl Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
    ) -> Result<Grads> {
        // The projection shape is only known after one evaluation.
        let probe_shape = no_grad(|| f(&inputs))?.shape().to_vec();
        let w = self.uniform::<T>(&probe_shape);
        let loss = |t: &[Tensor<T>]| -> Result<Tensor<T>> { Ok(f(t)?.mul(&w)?.sum()) };
        let mut grads = Grads::default();
        if self.want != Want::Numeric {
            let params: Vec<Tensor<T>> = inputs.iter().map(|t| t.detach().into_param()).collect();
            loss(&params)?.backward()?;
            grads.analytic = params
                .iter()
                .map(|p| match p.grad() {
                    Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                    None => vec![0.0; p.numel()],
                })
                .collect();
        }
        if self.want != Want::Analytic {
            for k in 0..inputs.len() {
                let eval = |xk: &Tensor<T>| -> T {
                    let mut args = inputs.clone();
                    args[k] = xk.clone();
                    no_grad(|| loss(&args).map_err(to_tensor_err).and_then(|l| l.item()))
                        .unwrap_or(T::nan())
                };
                let g = finite_diff_grad(eval, &inputs[k], T::lit(self.eps));
                grads
                    .numeric
                    .push(g.data().iter().map(|v| v.as_f64()).collect());
            }
        }
        Ok(grads)
    }

    /// Gradients of a parameterised block with respect to its input and all
    /// of its parameters, which are first redrawn from `[-1, 1]`.
    fn check_block<T: Element>(
        &mut self,
        store: &ParamStore<T>,
        x: Tensor<T>,
        f: impl Fn(&ParamStore<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Grads> {
        let mut inputs = vec![x];
        for t in store.tensors() {
            inputs.push(self.uniform(t.shape()));
        }
        self.check(inputs, |t| f(&store.with_tensors(&t[1..]), &t[0]))
    }
}

fn build<T: Element, B>(
    make: impl FnOnce(&mut ParamStore<T>, &mut Init, &ModelConfig) -> Result<B>,
) -> Result<(ParamStore<T>, B)> {
    let cfg = toy_config();
    let mut store = ParamStore::new();
    let mut init = Init::new(cfg.seed);
    let block = make(&mut store, &mut init, &cfg)?;
    Ok((store, block))
}

/// Largest [`relative_error`] over all elements. With `scaled_floor` the
/// denominator floor grows with the largest gradient of each input, so
/// that rounding noise on near-zero entries next to large ones is not
/// mistaken for an error.
fn worst_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], scaled_floor: bool) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = if scaled_floor {
            n.iter().fold(1.0f64, |m, v| m.max(v.abs()))
        } else {
            1.0
        };
        for (&x, &y) in a.iter().zip(n) {
            let e = relative_error(x / scale, y / scale);
            if e.is_nan() || e > worst {
                worst = e;
            }
        }
    }
    worst
}

/// Runs one named check entirely in precision `T`.
pub fn run_case<T: Element>(name: &str, eps: f64, tol: f64) -> Result<GradReport> {
    let g = gradients::<T>(name, Want::Both, eps)?;
    Ok(GradReport::new(
        name,
        worst_error(&g.analytic, &g.numeric, false),
        tol,
    ))
}

/// Checks `T`'s analytic gradients against 64-bit central differences at
/// the same point (inputs drawn in 64 bits and rounded to `T`). This is the
/// meaningful check for 32-bit arithmetic, whose own finite differences
/// drown in rounding noise. Errors are measured relative to the largest
/// gradient of each input when that exceeds one.
pub fn run_case_against_f64<T: Element>(name: &str, eps: f64, tol: f64) -> Result<GradReport> {
    let a = gradients::<T>(name, Want::Analytic, eps)?;
    let n = gradients::<f64>(name, Want::Numeric, eps)?;
    Ok(GradReport::new(
        name,
        worst_error(&a.analytic, &n.numeric, true),
        tol,
    ))
}

fn gradients<T: Element>(name: &str, want: Want, eps: f64) -> Result<Grads> {
    let seed = name
        .bytes()
        .fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut cx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        eps,
        want,
    };
    let conv = |stride, padding, groups| Conv2dOptions {
        stride,
        padding,
        groups,
    };
    match name {
        "add" | "sub" | "mul" => {
            let a = cx.uniform::<T>(&[2, 3, 4]);
            let b = cx.uniform::<T>(&[2, 3, 4]);
            let row = cx.uniform::<T>(&[1, 3, 1]);
            let op = name.to_string();
            cx.check(vec![a, b, row], move |t| {
                let apply = |x: &Tensor<T>, y: &Tensor<T>| match op.as_str() {
                    "add" => x.add(y),
                    "sub" => x.sub(y),
                    _ => x.mul(y),
                };
                // Same-shape and singleton-broadcast forms together.
                Ok(apply(&apply(&t[0], &t[1])?, &t[2])?)
            })
        }
        "matmul" => {
            let a = cx.uniform::<T>(&[2, 3, 4]);
            let b = cx.uniform::<T>(&[2, 4, 5]);
            cx.check(vec![a, b], |t| Ok(t[0].matmul(&t[1])?))
        }
        "conv2d" | "conv2d_strided" | "conv2d_grouped" | "conv2d_depthwise" => {
            let (cin, cout, opts) = match name {
                "conv2d" => (3, 4, conv(1, 1, 1)),
                "conv2d_strided" => (2, 3, conv(2, 0, 1)),
                "conv2d_grouped" => (4, 6, conv(1, 1, 2)),
                _ => (4, 4, conv(1, 1, 4)),
            };
            let x = cx.uniform::<T>(&[2, cin, 5, 5]);
            let w = cx.uniform::<T>(&[cout, cin / opts.groups, 3, 3]);
            let b = cx.uniform::<T>(&[cout]);
            cx.check(vec![x, w, b], move |t| {
                Ok(conv2d(&t[0], &t[1], Some(&t[2]), opts)?)
            })
        }
        "linear" => {
            let x = cx.uniform::<T>(&[2, 3, 5]);
            let w = cx.uniform::<T>(&[4, 5]);
            let b = cx.uniform::<T>(&[4]);
            cx.check(vec![x, w, b], |t| Ok(linear(&t[0], &t[1], Some(&t[2]))?))
        }
        "layer_norm_nchw" | "layer_norm_tokens" => {
            let shape: &[usize] = if name == "layer_norm_nchw" {
                &[2, 4, 3, 3]
            } else {
                &[2, 5, 4]
            };
            let x = cx.uniform::<T>(shape);
            let g = cx.uniform::<T>(&[4]);
            let b = cx.uniform::<T>(&[4]);
            cx.check(vec![x, g, b], |t| {
                Ok(layer_norm(&t[0], &t[1], &t[2], T::lit(1e-5))?)
            })
        }
        "elu" | "gelu" | "relu" | "sigmoid" => {
            let x = cx.uniform::<T>(&[2, 3, 4, 4]);
            let op = name.to_string();
            cx.check(vec![x], move |t| {
                Ok(match op.as_str() {
                    "elu" => t[0].elu(),
                    "gelu" => t[0].gelu(),
                    "relu" => t[0].relu(),
                    _ => t[0].sigmoid(),
                })
            })
        }
        "softmax" => {
            let x = cx.uniform::<T>(&[2, 3, 6]);
            cx.check(vec![x], |t| Ok(t[0].softmax(-1)?.add(&t[0].softmax(1)?)?))
        }
        "pixel_shuffle" => {
            let x = cx.uniform::<T>(&[1, 8, 3, 2]);
            cx.check(vec![x], |t| Ok(pixel_shuffle(&t[0], 2)?))
        }
        "pixel_unshuffle" => {
            let x = cx.uniform::<T>(&[1, 2, 6, 3]);
            cx.check(vec![x], |t| Ok(pixel_unshuffle(&t[0], 3)?))
        }
        "pad_reflect" => {
            let x = cx.uniform::<T>(&[1, 2, 3, 4]);
            cx.check(vec![x], |t| {
                Ok(pad2d(&t[0], (2, 3, 1, 4), PadMode::Reflect)?)
            })
        }
        "global_avg_pool" => {
            let x = cx.uniform::<T>(&[2, 3, 4, 5]);
            cx.check(vec![x], |t| Ok(global_avg_pool(&t[0])?))
        }
        "max_pool2d" => {
            let x = cx.uniform::<T>(&[1, 2, 8, 8]);
            cx.check(vec![x], |t| Ok(max_pool2d(&t[0], 3, 2)?))
        }
        "resize_bilinear" => {
            let x = cx.uniform::<T>(&[1, 2, 3, 4]);
            cx.check(vec![x], |t| {
                Ok(resize_bilinear(&t[0], 7, 5)?.add(&resize_bilinear(&t[0], 2, 2)?.sum())?)
            })
        }
        "window_partition" => {
            let x = cx.uniform::<T>(&[1, 2, 4, 6]);
            cx.check(vec![x], |t| {
                let sq = window_partition(&t[0], WindowSpec::new(WindowKind::Square, 2))?;
                let col = window_partition(&t[0], WindowSpec::new(WindowKind::AxialCol, 2))?;
                Ok(sq.reshape([48])?.add(&col.reshape([48])?)?)
            })
        }
        "l1_loss" => {
            let a = cx.uniform::<T>(&[2, 3, 4]);
            let b = cx.uniform::<T>(&[2, 3, 4]);
            cx.check(vec![a, b], |t| {
                Ok(dmffn_tensor::ops::l1_loss(&t[0], &t[1])?)
            })
        }
        "mhsa" => {
            let (store, attn) = build::<T, _>(|s, i, c| {
                AttentionParams::new(s, i, "attn", c.channels, c.heads, 2)
            })?;
            let x = cx.uniform::<T>(&[3, 4, 4]);
            cx.check_block(&store, x, |s, x| attn.forward(s, x, (2, 2)))
        }
        "awb" => {
            let (store, b) = build::<T, _>(|s, i, c| Awb::new(s, i, "awb", c))?;
            let x = cx.uniform::<T>(&[1, 4, 4, 4]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "swb" => {
            // 6×6 exercises reflect padding up to the 4×4 window grid.
            let (store, b) = build::<T, _>(|s, i, c| Swb::new(s, i, "swb", c))?;
            let x = cx.uniform::<T>(&[1, 4, 6, 6]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "atb" => {
            let (store, b) = build::<T, _>(|s, i, c| Atb::new(s, i, "atb", c))?;
            let x = cx.uniform::<T>(&[1, 4, 4, 4]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "channel_attention" => {
            let (store, b) =
                build::<T, _>(|s, i, c| CaParams::new(s, i, "ca", c.channels, c.ca_ratio))?;
            let x = cx.uniform::<T>(&[2, 4, 3, 3]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "esa" => {
            let (store, b) = build::<T, _>(|s, i, c| EsaParams::new(s, i, "esa", c.channels))?;
            let x = cx.uniform::<T>(&[1, 4, 8, 8]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "serb" => {
            let (store, b) = build::<T, _>(|s, i, c| SerbParams::new(s, i, "serb", c))?;
            let x = cx.uniform::<T>(&[1, 4, 6, 6]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "sesab" => {
            let (store, b) = build::<T, _>(|s, i, c| Sesab::new(s, i, "sesab", c))?;
            let x = cx.uniform::<T>(&[1, 4, 6, 6]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "dfb" => {
            let (store, b) = build::<T, _>(|s, i, c| DfbParams::new(s, i, "dfb", c, 2))?;
            let x = cx.uniform::<T>(&[1, 8, 4, 4]);
            cx.check_block(&store, x, |s, x| {
                let halves = x.chunk(2, 1)?;
                b.forward_pair(s, &halves[0], &halves[1])
            })
        }
        "dffb" => {
            let (store, b) = build::<T, _>(|s, i, c| Dffb::new(s, i, "dffb", c))?;
            let x = cx.uniform::<T>(&[1, 4, 4, 4]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "frb" => {
            let (store, b) = build::<T, _>(|s, i, c| Frb::new(s, i, "frb", c))?;
            let x = cx.uniform::<T>(&[1, 4, 4, 4]);
            cx.check_block(&store, x, |s, x| b.forward(s, x))
        }
        "model" => {
            let model = build_model::<T>(&toy_config())?;
            let x = cx.uniform::<T>(&[1, 3, 6, 6]);
            cx.check_block(&model.params, x, |s, x| model.forward_with(s, x))
        }
        other => Err(Error::Data(format!("no gradient check named `{other}`"))),
    }
}

/// Runs every check in [`CASES`] in precision `T`.
pub fn run_suite<T: Element>(eps: f64, tol: f64) -> Result<Vec<GradReport>> {
    CASES
        .iter()
        .map(|name| run_case::<T>(name, eps, tol))
        .collect()
}

/// [`run_case_against_f64`] for every check in [`CASES`].
pub fn run_suite_against_f64<T: Element>(eps: f64, tol: f64) -> Result<Vec<GradReport>> {
    CASES
        .iter()
        .map(|name| run_case_against_f64::<T>(name, eps, tol))
        .collect()
}
