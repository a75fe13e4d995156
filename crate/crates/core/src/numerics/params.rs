use std::collections::BTreeMap;

use super::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param { value, grad: None });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Places every parameter on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if trainable {
                    tape.var(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of a reverse sweep into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) {
        for (name, p) in self.params.iter_mut() {
            let Some(var) = bound.vars.get(name) else { continue };
            let Some(g) = grads.get(*var) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Reverse sweep from `loss`, accumulating into parameter gradients.
    /// Parameters that do not influence the loss get a zero gradient.
    pub fn backward(&mut self, bound: &Bound<'_, T>, loss: Var<'_, T>) -> Result<()> {
        let grads = loss.tape().backward(loss)?;
        self.accumulate(bound, &grads);
        for p in self.params.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Parameter values flattened in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Checks that both sets have the same names and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.shape() == b.value.shape())
    }
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound<'t, T: Real = f32> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Binds names to variables created elsewhere on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_across_calls() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::from_fn([3], |i| i as f64));
        for _ in 0..2 {
            let tape = Tape::new();
            let b = ps.bind(&tape, true);
            let loss = b.get("w").unwrap().sum();
            ps.backward(&b, loss).unwrap();
        }
        assert_eq!(ps.param("w").unwrap().grad.as_ref().unwrap().data(), &[2.0; 3]);
        ps.zero_grad();
        assert!(ps.param("w").unwrap().grad.is_none());
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", Tensor::ones([2]));
        ps.insert("b", Tensor::ones([2]));
        let tape = Tape::new();
        let bound = ps.bind(&tape, true);
        let loss = bound.get("a").unwrap().sum();
        ps.backward(&bound, loss).unwrap();
        assert_eq!(ps.param("b").unwrap().grad.as_ref().unwrap().data(), &[0.0; 2]);
    }
}
