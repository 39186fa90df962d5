use std::collections::BTreeMap;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A tape bound to a parameter store. Parameters enter the tape lazily on
/// first use; frozen ones enter as constants.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = self.tape.leaf(p.value.clone(), !p.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Names of every parameter touched by the forward pass.
    pub fn touched(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        Ok(ParamGrads(out))
    }
}

/// Per-parameter gradients from one backward pass.
#[derive(Debug, Default)]
pub struct ParamGrads(BTreeMap<String, Tensor>);

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    /// Adds into the `grad` slots of non-frozen parameters only.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.0 {
            let p = store.get_mut(name)?;
            if !p.frozen {
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }
}

/// Compares analytic gradients of `f` against central differences.
///
/// Returns the maximum over all trainable parameter entries of
/// `|analytic - fd| / max(1, |fd|)`. The analytic gradients are left in the
/// `grad` slots of trainable parameters; frozen slots are not touched.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        g.backward(loss)?
    };
    for (_, p) in store.iter_mut().filter(|(_, p)| !p.frozen) {
        p.zero_grad();
    }
    grads.accumulate_into(store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        Ok(v)
    };

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.clone())
        .collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = store.get(&name)?.value.len();
        for e in 0..n {
            let orig = store.get(&name)?.value.data()[e];
            store.get_mut(&name)?.value.data_mut()[e] = orig + step;
            let plus = eval(store)?;
            store.get_mut(&name)?.value.data_mut()[e] = orig - step;
            let minus = eval(store)?;
            store.get_mut(&name)?.value.data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let analytic = store.get(&name)?.grad.data()[e];
            worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{Parameter, RngStream};

    #[test]
    fn quadratic_matches() {
        let mut store = ParamStore::new();
        store.insert("w", Parameter::new(RngStream::new(1).normal_tensor(&[5], 1.0), true));
        let err = grad_check(&mut store, 1e-5, |g| {
            let w = g.param("w")?;
            let sq = g.tape.mul(w, w)?;
            Ok(g.tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
        let p = store.get("w").unwrap();
        for (g, w) in p.grad.data().iter().zip(p.value.data()) {
            assert!((g - 2.0 * w).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_slot_untouched() {
        let mut store = ParamStore::new();
        store.insert("a", Parameter::new(Tensor::full(&[3], 0.5), true));
        let mut frozen = Parameter::new(Tensor::full(&[3], 2.0), true);
        frozen.frozen = true;
        store.insert("b", frozen);
        grad_check(&mut store, 1e-5, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let m = g.tape.mul(a, b)?;
            Ok(g.tape.sum(m))
        })
        .unwrap();
        assert!(store.get("b").unwrap().grad.data().iter().all(|&v| v == 0.0));
        assert!(store.get("a").unwrap().grad.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", Parameter::new(Tensor::scalar(0.0), false));
        let r = grad_check(&mut store, 1e-5, |g| {
            let x = g.param("x")?;
            Ok(g.tape.recip(x))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
