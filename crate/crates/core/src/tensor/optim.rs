use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the accumulated grads, then clears them.
    /// Parameters without a gradient keep their value but still decay their
    /// velocity.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let n = params.len();
        if self.velocity.len() > n {
            return Err(Error::Internal("optimizer state has more slots than parameters".into()));
        }
        for i in self.velocity.len()..n {
            self.velocity.push(vec![T::zero(); params.get(i).numel()]);
        }
        let mom = T::of(self.momentum);
        let lr = T::of(lr);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            if v.len() != t.numel() {
                // The parameter was resized (head expansion): restart its momentum.
                *v = vec![T::zero(); t.numel()];
            }
            let g = t.grad().map(<[T]>::to_vec);
            match g {
                Some(g) => {
                    for (vi, gi) in v.iter_mut().zip(&g) {
                        *vi = mom * *vi + *gi;
                    }
                }
                None => v.iter_mut().for_each(|vi| *vi = mom * *vi),
            }
            for (p, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *p = *p - lr * *vi;
            }
            t.zero_grad();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
