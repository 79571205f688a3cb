//! Difficulty check: a per-pixel linear classifier on raw RGB values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::Result;
use crate::tensor::{ops, Sgd, ParamStore, Tape, Tensor};

/// Softmax regression from a pixel's `(r, g, b)` to its class.
pub struct LinearProbe {
    params: ParamStore<f64>,
    classes: usize,
}

fn pixel_rows(samples: &[Sample]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in samples {
        for (i, &l) in s.labels.iter().enumerate() {
            let px = &s.image.data()[i * 3..i * 3 + 3];
            x.extend([px[0] as f64, px[1] as f64, px[2] as f64, 1.0]);
            y.push(l as usize);
        }
    }
    (x, y)
}

impl LinearProbe {
    /// Full-batch gradient descent with momentum from a seeded initialization.
    pub fn train(ds: &Dataset, seed: u64, iterations: usize) -> Result<Self> {
        let classes = ds.class_count() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.01).unwrap();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_fn(&[4, classes], |_| dist.sample(&mut rng)))?;
        let (x, y) = pixel_rows(&ds.train);
        let rows = y.len();
        let mut opt = Sgd::new(0.9);
        for _ in 0..iterations {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, true);
            let xv = tape.constant_from(&[rows, 4], x.clone())?;
            let z = tape.matmul(xv, b[0])?;
            let loss = tape.cross_entropy(z, y.clone(), usize::MAX)?;
            let g = tape.backward(loss)?;
            params.accumulate(&b, &g)?;
            opt.step(&mut params, 0.5)?;
        }
        Ok(Self { params, classes })
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        let (x, y) = pixel_rows(samples);
        let z = ops::matmul_nn(&x, self.params.get(0).data(), y.len(), 4, self.classes);
        let pred = ops::argmax_rows(&z, self.classes);
        let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        hits as f64 / y.len() as f64
    }
}

/// Eval-split pixel accuracy of a [`LinearProbe`] trained on the train split.
pub fn linear_probe_accuracy(ds: &Dataset, seed: u64) -> Result<f64> {
    Ok(LinearProbe::train(ds, seed, 200)?.accuracy(&ds.eval))
}
