//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{BatchNormStats, Gradients, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered named parameters plus batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    norms: BTreeMap<String, BatchNormStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push((name, value.with_requires_grad(true)));
        Ok(())
    }

    pub fn insert_norm(&mut self, name: impl Into<String>, channels: usize) -> Result<()> {
        let name = name.into();
        if self.norms.contains_key(&name) {
            return Err(Error::Config(format!("norm `{name}` registered twice")));
        }
        self.norms.insert(name, BatchNormStats::new(channels));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn norm(&self, name: &str) -> Option<&BatchNormStats> {
        self.norms.get(name)
    }

    pub fn norm_mut(&mut self, name: &str) -> Option<&mut BatchNormStats> {
        self.norms.get_mut(name)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Batch-norm statistics in name order.
    pub fn norms(&self) -> impl Iterator<Item = (&str, &BatchNormStats)> {
        self.norms.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = (&str, &mut BatchNormStats)> {
        self.norms.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bind every parameter to `tape`. With `track` set, each becomes a
    /// gradient-tracked leaf.
    pub fn bind<'a>(&'a mut self, tape: &'a Tape, mode: NormMode, track: bool) -> Result<Session<'a>> {
        let ParamStore {
            params,
            index,
            norms,
        } = self;
        let vars = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(track)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Session {
            tape,
            vars,
            index,
            norms,
            mode,
        })
    }

    /// Attach per-parameter gradients (registration order) to the stored tensors.
    pub fn absorb_gradients(&mut self, grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for ((name, t), g) in self.params.iter_mut().zip(grads) {
            if g.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            t.grad = Some(g.into_data());
        }
        Ok(())
    }

    /// Round every stored value to 32-bit precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.params {
            t.round_to_f32();
        }
        for s in self.norms.values_mut() {
            for v in s.running_mean.iter_mut().chain(s.running_var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Parameters bound to one forward pass.
pub struct Session<'a> {
    pub tape: &'a Tape,
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
    norms: &'a mut BTreeMap<String, BatchNormStats>,
    pub mode: NormMode,
}

impl<'a> Session<'a> {
    pub fn p(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].clone())
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Batch normalization using the registered statistics `name`
    /// with affine parameters `{name}.gamma` / `{name}.beta`.
    pub fn batch_norm(&mut self, name: &str, x: &Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let stats = self
            .norms
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown norm `{name}`")))?;
        self.tape.batch_norm(x, &gamma, &beta, stats, self.mode)
    }

    pub fn layer_norm(&self, name: &str, x: &Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        self.tape.layer_norm(x, &gamma, &beta, 1e-5)
    }

    pub fn linear(&self, name: &str, x: &Var, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = if bias {
            Some(self.p(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.tape.linear(x, &w, b.as_ref())
    }

    /// Parameter gradients in registration order; zeros where unreachable.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Register affine parameters `{name}.gamma = 1`, `{name}.beta = 0`.
pub(crate) fn insert_affine(store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::ones([channels]))?;
    store.insert(format!("{name}.beta"), Tensor::zeros([channels]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros([2])).unwrap();
        assert!(s.insert("w", Tensor::zeros([2])).is_err());
        assert_eq!(s.num_scalars(), 2);
    }

    #[test]
    fn session_gradients_follow_registration_order() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        s.insert("b", Tensor::from_vec(vec![3.0])).unwrap();
        let tape = Tape::new();
        let sess = s.bind(&tape, NormMode::Train, true).unwrap();
        let a = sess.p("a").unwrap();
        let sq = tape.square(&a).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let g = tape.backward(&loss).unwrap();
        let grads = sess.gradients(&g);
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        assert_eq!(grads[1].data(), &[0.0]);
        assert!(sess.p("missing").is_err());
    }
}
