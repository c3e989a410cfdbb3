use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    velocity: Tensor<T>,
    /// Whether weight decay applies (convolution weights only).
    pub decay: bool,
}

/// Named parameters with gradient and momentum buffers of identical shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> usize {
        let grad = Tensor::zeros_like(&value);
        let velocity = Tensor::zeros_like(&value);
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            velocity,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Momentum SGD: `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
    /// Velocity buffers persist across calls.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let (lr, mu) = (T::lit(lr), T::lit(momentum));
        for p in &mut self.params {
            let wd = if p.decay { T::lit(weight_decay) } else { T::zero() };
            let value = p.value.data_mut();
            let vel = p.velocity.data_mut();
            for ((w, v), &g) in value.iter_mut().zip(vel.iter_mut()).zip(p.grad.data()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!("parameter {} after update", p.name)));
            }
        }
        Ok(())
    }
}
