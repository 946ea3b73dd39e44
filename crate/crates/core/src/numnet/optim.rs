use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A parameter buffer paired with its gradient buffer.
#[derive(Debug)]
pub struct Tensor<'a> {
    pub param: &'a mut [f64],
    pub grad: &'a mut [f64],
}

impl<'a> Tensor<'a> {
    pub fn new(param: &'a mut [f64], grad: &'a mut [f64]) -> Self {
        assert_eq!(param.len(), grad.len(), "param/grad length mismatch");
        Self { param, grad }
    }
}

/// Named set of tensors that share one learning-rate scale in `(0, 1]`.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    pub name: String,
    pub tensors: Vec<Tensor<'a>>,
    lr_scale: f64,
}

impl<'a> ParamGroup<'a> {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor<'a>>) -> Self {
        Self {
            name: name.into(),
            tensors,
            lr_scale: 1.0,
        }
    }

    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    pub fn set_lr_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::invalid(
                format!("lr_scale of group `{}`", self.name),
                format!("{scale} not in (0, 1]"),
            ));
        }
        self.lr_scale = scale;
        Ok(())
    }

    fn check_grads(&self) -> Result<()> {
        for (i, t) in self.tensors.iter().enumerate() {
            if let Some(j) = t.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of group `{}` (tensor {i}, entry {j})",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta", format!("{eta} must be positive and finite")));
    }
    Ok(())
}

/// Plain SGD: `param -= eta * lr_scale * grad`, then zeroes every gradient.
///
/// Nothing is written if any gradient in any group is non-finite.
pub fn sgd_step(groups: &mut [ParamGroup<'_>], eta: f64) -> Result<()> {
    check_eta(eta)?;
    for g in groups.iter() {
        g.check_grads()?;
    }
    for g in groups.iter_mut() {
        let step = eta * g.lr_scale;
        for t in &mut g.tensors {
            for (p, d) in t.param.iter_mut().zip(t.grad.iter_mut()) {
                *p -= step * *d;
                *d = 0.0;
            }
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. With `momentum == 0` every step is
/// bit-identical to [`sgd_step`].
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: BTreeMap<(String, usize), Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("{momentum} not in [0, 1)")));
        }
        Ok(Self {
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], eta: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(groups, eta);
        }
        check_eta(eta)?;
        for g in groups.iter() {
            g.check_grads()?;
        }
        for g in groups.iter_mut() {
            let step = eta * g.lr_scale;
            for (i, t) in g.tensors.iter_mut().enumerate() {
                let v = self
                    .velocity
                    .entry((g.name.clone(), i))
                    .or_insert_with(|| vec![0.0; t.param.len()]);
                for ((p, d), v) in t.param.iter_mut().zip(t.grad.iter_mut()).zip(v.iter_mut()) {
                    *v = self.momentum * *v + *d;
                    *p -= step * *v;
                    *d = 0.0;
                }
            }
        }
        Ok(())
    }
}
