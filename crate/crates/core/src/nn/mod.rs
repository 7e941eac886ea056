//! Minimal CPU neural-network engine: 2D convolution stacks with manual
//! reverse-mode gradients.
//!
//! Feature maps are `Array4<f64>` in `(batch, channel, row, col)` layout.
//! Every layer caches what its backward pass needs when called with
//! `train = true`; backward passes accumulate parameter gradients into
//! [`Param::grad`] and return the gradient with respect to their input.

mod act;
mod conv;
mod norm;
mod optim;
mod pool;

pub use act::{ActKind, Activation, Sigmoid, SoftmaxChannels};
pub use conv::{Conv2d, ConvTranspose2x2};
pub use norm::{BatchNorm2d, InstanceNorm2d, Norm, NormKind};
pub use optim::Adam;
pub use pool::MaxPool2x2;

use ndarray::ArrayD;

/// A named tensor of learnable (or tracked) state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    /// Optimizers skip non-trainable params (e.g. batch-norm running stats),
    /// but checkpoints persist them.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn non_trainable(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let mut p = Param::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}
