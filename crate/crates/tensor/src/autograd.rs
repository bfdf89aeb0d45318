use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{BackwardArgs, Inner, Tensor};

type Key<T> = *const Inner<T>;

fn key<T: Element>(t: &Tensor<T>) -> Key<T> {
    Arc::as_ptr(&t.0)
}

/// Post-order over the tracked subgraph below `root` (inputs before consumers).
fn topo_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<Key<T>> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(key(root));
    while let Some((t, next)) = stack.pop() {
        let child = t.0.node.as_ref().and_then(|n| n.inputs.get(next).cloned());
        match child {
            Some(c) => {
                stack.push((t, next + 1));
                if c.requires_grad() && visited.insert(key(&c)) {
                    stack.push((c, 0));
                }
            }
            None => order.push(t),
        }
    }
    order
}

fn accumulate<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Element> Tensor<T> {
    /// Backpropagates from this one-element tensor.
    ///
    /// Every tracked tensor reachable from `self` gets `d self / d tensor`
    /// added into its gradient buffer. Buffers are never cleared here; call
    /// [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NotTracked);
        }
        let order = topo_order(self);
        let mut pending: HashMap<Key<T>, Vec<T>> = HashMap::new();
        pending.insert(key(self), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&key(t)) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
                let input_grads = (node.backward)(&BackwardArgs {
                    grad: &g,
                    out: t.data(),
                    needs: &needs,
                });
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                for ((input, ig), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                    let (Some(ig), true) = (ig, *need) else {
                        continue;
                    };
                    debug_assert_eq!(ig.len(), input.numel(), "op {}", node.op);
                    match pending.get_mut(&key(input)) {
                        Some(acc) => accumulate(acc, &ig),
                        None => {
                            pending.insert(key(input), ig);
                        }
                    }
                }
            }
            let mut slot = t.lock_grad();
            match slot.as_mut() {
                Some(existing) => accumulate(existing, &g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
