//! Named trainable parameters, SGD with momentum and weight decay, and
//! xavier initialization.

use super::Shape4;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use std::collections::HashMap;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

/// One trainable tensor: values plus a persistent gradient accumulator and
/// the SGD momentum buffer. `dims` is the checkpointed rank/shape (rank 4
/// for kernels, rank 1 for biases and norm scales).
#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Vec<F>,
    pub momentum: Vec<F>,
}

impl<F: Scalar> Parameter<F> {
    /// Rank-4 view of the parameter: rank-1 dims map to `(1, c, 1, 1)`.
    pub fn shape4(&self) -> Shape4 {
        match self.dims.len() {
            4 => Shape4::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3]),
            1 => Shape4::new(1, self.dims[0], 1, 1),
            _ => panic!("parameter {} has unsupported rank {}", self.name, self.dims.len()),
        }
    }

    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Insertion-ordered collection of parameters with unique names. Iteration
/// order (and therefore checkpoint layout and update order) is creation
/// order, which keeps runs reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<F>) -> Result<ParamId> {
        let name = name.into();
        let count: usize = dims.iter().product();
        if values.len() != count {
            return Err(Error::ParamShape {
                name,
                expected: dims,
                actual: vec![values.len()],
            });
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Parameter {
            name,
            dims,
            grad: vec![F::zero(); count],
            momentum: vec![F::zero(); count],
            values,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.count()).sum()
    }
}

/// SGD hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.005,
        }
    }
}

/// One SGD step over every parameter:
/// `v <- momentum * v + grad + weight_decay * w; w <- w - lr * v`.
/// Gradients are cleared afterwards.
pub fn sgd_step<F: Scalar>(store: &mut ParamStore<F>, cfg: &SgdConfig) {
    let lr = F::from_f64(cfg.lr);
    let mu = F::from_f64(cfg.momentum);
    let wd = F::from_f64(cfg.weight_decay);
    for p in &mut store.params {
        for i in 0..p.values.len() {
            let v = mu * p.momentum[i] + p.grad[i] + wd * p.values[i];
            p.momentum[i] = v;
            p.values[i] = p.values[i] - lr * v;
            p.grad[i] = F::zero();
        }
    }
}

/// Xavier (Glorot) uniform init: samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<F: Scalar>(
    fan_in: usize,
    fan_out: usize,
    count: usize,
    rng: &mut RngState,
) -> Vec<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count)
        .map(|_| F::from_f64(rng.range(-bound, bound)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_grad_zero_momentum_no_decay_is_identity() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        sgd_step(
            &mut store,
            &SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        assert_eq!(store.get(ParamId(0)).values, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sgd_single_step_plain() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![2], vec![1.0, 2.0]).unwrap();
        store.get_mut(id).grad = vec![0.5, -1.0];
        sgd_step(
            &mut store,
            &SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        let p = store.get(id);
        assert_eq!(p.values, vec![1.0 - 0.1 * 0.5, 2.0 + 0.1]);
        assert!(p.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn sgd_two_steps_match_hand_unrolled_recurrence() {
        // v1 = g1 + wd*w0;            w1 = w0 - lr*v1
        // v2 = mu*v1 + g2 + wd*w1;    w2 = w1 - lr*v2
        let (w0, g1, g2) = (2.0_f64, 0.3_f64, -0.7_f64);
        let (lr, mu, wd) = (0.01, 0.9, 0.005);
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * w1;
        let w2 = w1 - lr * v2;

        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![1], vec![w0]).unwrap();
        let cfg = SgdConfig {
            lr,
            momentum: mu,
            weight_decay: wd,
        };
        store.get_mut(id).grad = vec![g1];
        sgd_step(&mut store, &cfg);
        store.get_mut(id).grad = vec![g2];
        sgd_step(&mut store, &cfg);
        assert_eq!(store.get(id).values[0], w2);
        assert_eq!(store.get(id).momentum[0], v2);
    }

    #[test]
    fn xavier_bound_and_determinism() {
        // fan_in = fan_out = 3 gives bound sqrt(6/6) = 1.
        let mut r1 = RngState::new(11);
        let a: Vec<f64> = xavier_init(3, 3, 256, &mut r1);
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        let mut r2 = RngState::new(11);
        let b: Vec<f64> = xavier_init(3, 3, 256, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_statistics() {
        let mut rng = RngState::new(5);
        let n = 100_000;
        let samples: Vec<f64> = xavier_init(3, 3, n, &mut rng);
        let mean = samples.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let max = samples.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
        assert!(max <= 1.0);
        assert!(max > 0.99, "max {max} suspiciously far from the bound");
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", vec![1], vec![0.0]).unwrap();
        assert!(store.add("w", vec![1], vec![0.0]).is_err());
    }
}
