//! Merging the two paths: the dual-way fusion block, the stage block built
//! around it, and the feature-reuse block that fuses all stage outputs.

use dmffn_tensor::ops::concat;
use dmffn_tensor::{Element, Tensor, TensorError};

use crate::attention::Atb;
use crate::conv_branch::{CaParams, Sesab};
use crate::error::Result;
use crate::layers::{ConvParams, ConvSpec, Init, ParamStore};
use crate::model::ModelConfig;

/// Progressive multi-branch fusion.
///
/// The entry 1×1 conv output is split into equal channel groups. The first
/// group goes through a 1×1 conv; each later group is added to the previous
/// branch output and goes through a 3×3 conv; the last branch is also
/// channel-gated. Branch outputs are concatenated and fused by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct DfbParams {
    pub entry: ConvParams,
    pub branch_convs: Vec<ConvParams>,
    pub branch_ca: CaParams,
    pub fuse: ConvParams,
}

impl DfbParams {
    /// `inputs` is 2 for the dual-way block and 1 for feature reuse.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
        inputs: usize,
    ) -> Result<Self> {
        let c = cfg.channels;
        let branches = cfg.dfb_branches;
        let cb = c / branches;
        let branch_convs = (0..branches)
            .map(|i| {
                let k = if i == 0 { 1 } else { 3 };
                ConvParams::new(
                    store,
                    init,
                    &format!("{name}.branch{i}"),
                    cb,
                    cb,
                    ConvSpec::k(k),
                )
            })
            .collect::<Result<_>>()?;
        Ok(DfbParams {
            entry: ConvParams::new(
                store,
                init,
                &format!("{name}.entry"),
                inputs * c,
                c,
                ConvSpec::k(1),
            )?,
            branch_convs,
            branch_ca: CaParams::new(store, init, &format!("{name}.branch_ca"), cb, cfg.ca_ratio)?,
            fuse: ConvParams::new(store, init, &format!("{name}.fuse"), c, c, ConvSpec::k(1))?,
        })
    }

    /// Everything after the entry conv, without the residual.
    fn branches<T: Element>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let groups = z.chunk(self.branch_convs.len(), 1)?;
        let last = self.branch_convs.len() - 1;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(groups.len());
        for (i, (g, conv)) in groups.iter().zip(&self.branch_convs).enumerate() {
            let input = match outs.last() {
                Some(prev) => g.add(prev)?,
                None => g.clone(),
            };
            let mut y = conv.forward(store, &input)?;
            if i == last {
                y = self.branch_ca.forward(store, &y)?;
            }
            outs.push(y);
        }
        let joined = if outs.len() == 1 {
            outs.pop().expect("one branch")
        } else {
            concat(&outs, 1)?
        };
        self.fuse.forward(store, &joined)
    }

    /// Dual-input form: `fuse(branches(entry([a; b]))) + a + b`.
    pub fn forward_pair<T: Element>(
        &self,
        store: &ParamStore<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dfb",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
            .into());
        }
        let z = self
            .entry
            .forward(store, &concat(&[a.clone(), b.clone()], 1)?)?;
        Ok(self.branches(store, &z)?.add(a)?.add(b)?)
    }

    /// Single-input form: `fuse(branches(entry(s))) + s`.
    pub fn forward_single<T: Element>(
        &self,
        store: &ParamStore<T>,
        s: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let z = self.entry.forward(store, s)?;
        Ok(self.branches(store, &z)?.add(s)?)
    }
}

/// One stage: transformer and convolutional paths on the same input,
/// merged by a dual-way fusion block.
#[derive(Debug, Clone)]
pub struct Dffb {
    pub atb: Atb,
    pub sesab: Sesab,
    pub dfb: DfbParams,
}

impl Dffb {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        Ok(Dffb {
            atb: Atb::new(store, init, &format!("{name}.atb"), cfg)?,
            sesab: Sesab::new(store, init, &format!("{name}.sesab"), cfg)?,
            dfb: DfbParams::new(store, init, &format!("{name}.dfb"), cfg, 2)?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.atb.forward(store, x)?;
        let b = self.sesab.forward(store, x)?;
        self.dfb.forward_pair(store, &a, &b)
    }
}

/// Feature-reuse block: the single-input fusion pipeline applied to the sum
/// of the shallow feature and every stage output.
#[derive(Debug, Clone)]
pub struct Frb {
    pub dfb: DfbParams,
}

impl Frb {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        Ok(Frb {
            dfb: DfbParams::new(store, init, name, cfg, 1)?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        self.dfb.forward_single(store, s)
    }
}
