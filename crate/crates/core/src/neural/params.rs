use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{NeuralError, Tensor2D};

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)), fan_in = rows, fan_out = cols.
    XavierUniform,
    Zeros,
    Ones,
    /// Square identity; non-square shapes get ones on the leading diagonal.
    Identity,
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

/// Named parameter tensors with matching gradient slots.
///
/// Initialization of a parameter depends only on `(seed, name, shape)`, so
/// registration order never changes the values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `name` if absent. An existing entry must have the same shape.
    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<(), NeuralError> {
        if let Some(p) = self.params.get(name) {
            if p.value.shape() != (rows, cols) {
                return Err(NeuralError::Shape {
                    op: "register",
                    expected: format!("{}x{} for {name}", p.value.rows(), p.value.cols()),
                    got: format!("{rows}x{cols}"),
                });
            }
            return Ok(());
        }
        let value = init_tensor(self.seed, name, rows, cols, init);
        self.params.insert(
            name.to_string(),
            Param {
                grad: Tensor2D::zeros(rows, cols),
                value,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D, NeuralError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NeuralError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D, NeuralError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NeuralError::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2D, NeuralError> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| NeuralError::MissingParam(name.to_string()))
    }

    /// Adds `delta` into the gradient slot of `name`.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor2D) -> Result<(), NeuralError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NeuralError::MissingParam(name.to_string()))?;
        p.grad.add_assign(delta)
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor2D) -> Result<(), NeuralError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NeuralError::MissingParam(name.to_string()))?;
        p.value.same_shape(&value, "set")?;
        p.value = value;
        Ok(())
    }

    /// Inserts or overwrites a parameter, resetting its gradient.
    pub fn insert(&mut self, name: &str, value: Tensor2D) {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.params.insert(name.to_string(), Param { value, grad });
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.data().len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Plain SGD step with optional global-norm gradient clipping.
    pub fn sgd_step(&mut self, lr: f64, clip_norm: Option<f64>) {
        let mut scale = 1.0;
        if let Some(max) = clip_norm {
            let norm = self.grad_norm();
            if norm > max && norm > 0.0 {
                scale = max / norm;
            }
        }
        for p in self.params.values_mut() {
            let step = lr * scale;
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= step * g;
            }
        }
    }
}

fn init_tensor(seed: u64, name: &str, rows: usize, cols: usize, init: Init) -> Tensor2D {
    match init {
        Init::Zeros => Tensor2D::zeros(rows, cols),
        Init::Ones => Tensor2D::filled(rows, cols, 1.0),
        Init::Constant(v) => Tensor2D::filled(rows, cols, v),
        Init::Identity => {
            let mut t = Tensor2D::zeros(rows, cols);
            for i in 0..rows.min(cols) {
                t[(i, i)] = 1.0;
            }
            t
        }
        Init::XavierUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut rng = param_rng(seed, name, rows, cols);
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor2D::from_vec(rows, cols, data).expect("length matches shape")
        }
    }
}

fn param_rng(seed: u64, name: &str, rows: usize, cols: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((rows as u64).to_le_bytes());
    h.update((cols as u64).to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
