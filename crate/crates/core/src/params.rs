use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, MatrixRecord};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name:?} is not defined for this model")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    /// Places every parameter on the graph; names accepted by `trainable`
    /// become tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, value)| {
                let v = if trainable(name) {
                    g.param(value.clone())
                } else {
                    g.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn to_records(&self) -> BTreeMap<String, MatrixRecord> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), MatrixRecord::from(v)))
            .collect()
    }

    pub fn from_records(records: &BTreeMap<String, MatrixRecord>) -> Result<Self> {
        let entries = records
            .iter()
            .map(|(k, r)| Ok((k.clone(), r.to_matrix()?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} is not defined for this model")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients by parameter name; untracked or unused names are omitted.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Matrix<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Update rule applied to named gradients.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Matrix<T>>);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: T,
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Matrix<T>>) {
        for (name, g) in grads {
            if let Some(p) = params.get_mut(name) {
                p.axpy_neg(self.learning_rate, g);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    moments: BTreeMap<String, (Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Matrix<T>>) {
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            for (((pv, mv), vv), &gv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build<T: Scalar>(self, learning_rate: T) -> Box<dyn Optimizer<T>> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd { learning_rate }),
            OptimizerKind::Adam => Box::new(Adam::new(learning_rate)),
        }
    }
}
