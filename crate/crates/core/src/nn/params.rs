use ndarray::Array2;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Initialized uniform in `±1/sqrt(fan_in)`, `fan_in` = number of columns.
    Weight,
    /// Initialized to zero; stored as a `1 x out` row.
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, out_dim: usize, in_dim: usize) -> Self {
        Self {
            name: name.into(),
            rows: out_dim,
            cols: in_dim,
            kind: ParamKind::Weight,
        }
    }

    pub fn bias(name: impl Into<String>, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            rows: 1,
            cols: out_dim,
            kind: ParamKind::Bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
    pub grad: Array2<T>,
    pub frozen: bool,
}

/// Named parameter tensors with matching gradient buffers.
///
/// Iteration and flat serialization follow declaration order. `version` is
/// bumped on every in-place update so forward caches can detect staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    version: u64,
    steps: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            version: 0,
            steps: 0,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Initializes every tensor in `specs` from one seeded stream, in order.
    ///
    /// Draws are made in `f64` and rounded, so `f32` and `f64` stores built
    /// from the same seed hold the same values up to rounding.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::INIT));
        let mut store = Self::default();
        for spec in specs {
            if spec.rows == 0 || spec.cols == 0 {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` has an empty shape",
                    spec.name
                )));
            }
            let value = match spec.kind {
                ParamKind::Weight => {
                    let bound = 1.0 / (spec.cols as f64).sqrt();
                    Array2::from_shape_simple_fn((spec.rows, spec.cols), || {
                        T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound)
                    })
                }
                ParamKind::Bias => Array2::zeros((spec.rows, spec.cols)),
            };
            store.push(spec.name.clone(), value);
        }
        Ok(store)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<T>) {
        let grad = Array2::zeros(value.dim());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        self.version += 1;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn value(&self, index: usize) -> &Array2<T> {
        &self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Array2<T> {
        &self.params[index].grad
    }

    pub fn grad_mut(&mut self, index: usize) -> &mut Array2<T> {
        &mut self.params[index].grad
    }

    /// Mutable access to a value; invalidates outstanding forward caches.
    pub fn value_mut(&mut self, index: usize) -> &mut Array2<T> {
        self.version += 1;
        &mut self.params[index].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.params[index].frozen
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) {
        self.params[index].frozen = frozen;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of SGD steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// All values concatenated in declaration order, each tensor row-major.
    pub fn flat_values(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat buffer has {} values, store holds {}",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value
                .iter_mut()
                .zip(&values[offset..offset + n])
                .for_each(|(v, &x)| *v = x);
            offset += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Locates flat coordinate `k` as (parameter index, element offset).
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if k < p.value.len() {
                return Some((i, k));
            }
            k -= p.value.len();
        }
        None
    }

    /// Converts element type, keeping names, frozen flags and gradients.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| U::from_f64_lossy(x.to_f64_lossy())),
                    grad: p.grad.mapv(|x| U::from_f64_lossy(x.to_f64_lossy())),
                    frozen: p.frozen,
                })
                .collect(),
            version: 0,
            steps: self.steps,
        }
    }
}

/// Plain SGD: `p ← p − lr·∇p` for every unfrozen parameter, then zero all
/// gradients. Any non-finite gradient aborts the step before anything moves.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: T) -> Result<()> {
    for p in &params.params {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                step: params.steps,
            });
        }
    }
    for p in &mut params.params {
        if !p.frozen {
            p.value.scaled_add(-lr, &p.grad);
        }
        p.grad.fill(T::zero());
    }
    params.steps += 1;
    params.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("w", 4, 512),
            ParamSpec::bias("b", 4),
            ParamSpec::weight("v", 3, 2),
        ]
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let store = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let bound = 1.0 / 512f32.sqrt();
        assert!(store.value(0).iter().all(|w| w.abs() <= bound));
        assert!(store.value(1).iter().all(|&b| b == 0.0));
        assert_eq!(store.num_scalars(), 4 * 512 + 4 + 6);
        assert_eq!(store.value(1).dim(), (1, 4));
    }

    #[test]
    fn init_is_deterministic() {
        let a = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let b = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let c = ParamStore::<f32>::init(&specs(), 6).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        assert_ne!(a.flat_values(), c.flat_values());
        let wide = ParamStore::<f64>::init(&specs(), 5).unwrap();
        let narrowed: Vec<f32> = wide.flat_values().iter().map(|&x| x as f32).collect();
        assert_eq!(narrowed, a.flat_values());
    }

    #[test]
    fn sgd_scalar_case() {
        let mut store = ParamStore::<f64>::default();
        store.push("p", array![[1.0]]);
        store.grad_mut(0)[[0, 0]] = 2.0;
        sgd_step(&mut store, 0.1).unwrap();
        assert!((store.value(0)[[0, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(store.grad(0)[[0, 0]], 0.0);
        assert_eq!(store.steps(), 1);
    }

    #[test]
    fn sgd_zero_lr_and_frozen() {
        let mut store = ParamStore::<f64>::init(&specs(), 1).unwrap();
        let before = store.flat_values();
        store.grad_mut(0).fill(1.0);
        sgd_step(&mut store, 0.0).unwrap();
        assert_eq!(store.flat_values(), before);

        store.set_frozen(2, true);
        store.grad_mut(2).fill(1.0);
        store.grad_mut(0).fill(1.0);
        sgd_step(&mut store, 0.5).unwrap();
        assert_eq!(
            store.value(2),
            ParamStore::<f64>::init(&specs(), 1).unwrap().value(2)
        );
        assert_ne!(
            store.value(0),
            ParamStore::<f64>::init(&specs(), 1).unwrap().value(0)
        );
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut store = ParamStore::<f32>::init(&specs(), 1).unwrap();
        let before = store.flat_values();
        store.grad_mut(2)[[1, 1]] = f32::NAN;
        match sgd_step(&mut store, 0.1) {
            Err(Error::NonFiniteGradient { param, step }) => {
                assert_eq!(param, "v");
                assert_eq!(step, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.flat_values(), before);
    }

    #[test]
    fn sgd_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::<f32>::init(&specs(), 3).unwrap();
            for step in 0..3 {
                for i in 0..store.len() {
                    let g = store.value(i).mapv(|v| v * 0.5 + step as f32);
                    *store.grad_mut(i) = g;
                }
                sgd_step(&mut store, 0.01).unwrap();
            }
            store.flat_values()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn flat_round_trip_and_locate() {
        let mut store = ParamStore::<f64>::init(&specs(), 2).unwrap();
        let flat = store.flat_values();
        let mut other = ParamStore::<f64>::init(&specs(), 9).unwrap();
        other.load_flat(&flat).unwrap();
        assert_eq!(other.flat_values(), flat);
        assert_eq!(store.locate(0), Some((0, 0)));
        assert_eq!(store.locate(4 * 512), Some((1, 0)));
        assert_eq!(store.locate(4 * 512 + 4), Some((2, 0)));
        assert_eq!(store.locate(store.num_scalars()), None);
        assert!(store.load_flat(&flat[1..]).is_err());
        store.zero_grad();
    }
}
