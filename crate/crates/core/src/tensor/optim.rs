use super::Tensor;

/// A trainable tensor together with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds `g` into the stored gradient.
    pub fn add_grad(&mut self, g: &Tensor) {
        debug_assert_eq!(g.shape(), self.value.shape());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.data_mut().fill(0.0);
    }
}

/// Momentum SGD: `v <- momentum * v + grad`, `p <- p - lr * v`.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, lr: f32, momentum: f32) {
    for p in params {
        let Param {
            value,
            grad,
            velocity,
        } = p;
        for ((w, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(velocity.data_mut())
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}
