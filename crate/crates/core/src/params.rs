//! Named trainable tensors, their Adam state, and batch-norm running statistics.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub adam: AdamState<T>,
}

/// Exponential moving averages of batch statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T: Element = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    running: BTreeMap<String, RunningStats<T>>,
}

/// Parameters placed on a tape, in [`ParameterSet`] order.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    /// Gradients for every bound parameter, zero where the loss does not reach it.
    pub fn gradients<T: Element>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.wrt(tape, v)).collect()
    }
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new(), running: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let adam = AdamState { m: value.zeros_like(), v: value.zeros_like(), step: 0 };
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, adam });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(Error::UnknownParameter(name.into())),
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound { vars, index: self.index.clone() }
    }

    pub fn running(&self, layer: &str) -> Option<&RunningStats<T>> {
        self.running.get(layer)
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&String, &RunningStats<T>)> {
        self.running.iter()
    }

    pub fn set_running(&mut self, layer: impl Into<String>, stats: RunningStats<T>) -> Result<()> {
        if stats.var.data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::invalid("running variance must be strictly positive"));
        }
        self.running.insert(layer.into(), stats);
        Ok(())
    }

    /// Folds one batch into the running statistics of `layer`.
    ///
    /// Starts from mean 0 / variance 1 and uses the unbiased batch variance.
    pub fn update_running(&mut self, layer: &str, batch: &BatchStats<T>, momentum: T) {
        let c = batch.mean.len();
        let entry = self.running.entry(layer.to_string()).or_insert_with(|| RunningStats {
            mean: Tensor::zeros(&[c]),
            var: Tensor::ones(&[c]),
        });
        let n = batch.count as f64;
        let correction = if n > 1.0 { T::from_f64(n / (n - 1.0)) } else { T::one() };
        let keep = T::one() - momentum;
        for (rm, &m) in entry.mean.data_mut().iter_mut().zip(&batch.mean) {
            *rm = keep * *rm + momentum * m;
        }
        for (rv, &v) in entry.var.data_mut().iter_mut().zip(&batch.var) {
            *rv = keep * *rv + momentum * v * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_state_matches_parameter_shapes() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::ones(&[2, 3])).unwrap();
        p.insert("b", Tensor::zeros(&[4])).unwrap();
        for param in p.iter() {
            assert_eq!(param.adam.m.shape(), param.value.shape());
            assert_eq!(param.adam.v.shape(), param.value.shape());
        }
        assert!(p.insert("w", Tensor::ones(&[1])).is_err());
        assert!(matches!(p.get("nope"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut p = ParameterSet::<f64>::new();
        let batch = BatchStats { mean: vec![2.0], var: vec![3.0], count: 4 };
        p.update_running("bn", &batch, 0.1);
        let rs = p.running("bn").unwrap();
        assert!((rs.mean.data()[0] - 0.2).abs() < 1e-12);
        // 0.9 * 1 + 0.1 * 3 * 4/3
        assert!((rs.var.data()[0] - 1.3).abs() < 1e-12);
        assert!(p.set_running("bad", RunningStats { mean: Tensor::zeros(&[1]), var: Tensor::zeros(&[1]) }).is_err());
    }
}
