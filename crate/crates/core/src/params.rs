//! Named parameter tensors living between tapes.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

/// Parameters in insertion order. Order is part of the checkpoint format
/// and of the deterministic gradient reduction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Shape, data: Vec<T>) -> Result<()> {
        let name = name.into();
        if shape.numel() != data.len() {
            return Err(Error::shape("param", shape.dims(), &[data.len()]));
        }
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Param { shape, data });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Puts every parameter on `tape`, trainable or frozen, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .values()
            .map(|p| {
                if trainable {
                    tape.param(p.shape.clone(), p.data.clone())
                } else {
                    tape.constant(p.shape.clone(), p.data.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            names: self.params.keys().cloned().collect(),
            vars,
        })
    }
}

impl<T> ParamStore<T> {
    /// Pairs existing tape handles with parameter names, in store order.
    pub fn names_with(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("names_with", &[self.params.len()], &[vars.len()]));
        }
        Ok(Bound {
            names: self.params.keys().cloned().collect(),
            vars,
        })
    }
}

/// Tape handles for a bound [`ParamStore`], indexable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal draws with |z| > 2 rejected, scaled by `std`.
pub fn truncated_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            out.push(z * std);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn insert_rejects_bad_shapes_and_duplicates() {
        let mut s = ParamStore::<f32>::new();
        assert!(s.insert("w", Shape::matrix(2, 2), vec![0.0; 3]).is_err());
        s.insert("w", Shape::matrix(2, 2), vec![0.0; 4]).unwrap();
        assert!(s.insert("w", Shape::matrix(2, 2), vec![0.0; 4]).is_err());
        assert_eq!(s.numel(), 4);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut r = rng::stream(1, "init", 0);
        let v = truncated_normal(&mut r, 5000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn bind_preserves_order() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Shape::new([1]), vec![1.0]).unwrap();
        s.insert("b", Shape::new([2]), vec![2.0, 3.0]).unwrap();
        let mut t = Tape::new(0);
        let b = s.bind(&mut t, true).unwrap();
        assert_eq!(t.value(b.var("b").unwrap()), &[2.0, 3.0]);
        assert!(b.var("c").is_err());
    }
}
