use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors owned by one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform matrix in ±√(6/(fan_in+fan_out)).
    pub fn add_matrix(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(fan_in, fan_out, data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrites values from `other`, which must have the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter names differ"));
        }
        for (i, (dst, src)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adam with fixed learning rate and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in store.values_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}
