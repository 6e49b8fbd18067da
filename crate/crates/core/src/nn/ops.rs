//! Dense kernels with hand-derived adjoints. Batched inputs are row-major:
//! one sample per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Borrowed affine map `y = x Wᵀ + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer<'a, T> {
    pub weight: ArrayView2<'a, T>,
    pub bias: Option<ArrayView1<'a, T>>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub dx: Array2<T>,
    pub dweight: Array2<T>,
    pub dbias: Option<Array1<T>>,
}

impl<'a, T: Scalar> LinearLayer<'a, T> {
    pub fn new(weight: ArrayView2<'a, T>, bias: Option<ArrayView1<'a, T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::Shape(format!(
                    "bias of length {} for a layer with {} outputs",
                    b.len(),
                    weight.nrows()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, layer expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// `dx = dy W`, `dW = dyᵀ x`, `db = Σ_rows dy`.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> Result<LinearGrads<T>> {
        if dy.ncols() != self.out_dim() || dy.nrows() != x.nrows() || x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "backward through {}x{} layer with x {:?} and dy {:?}",
                self.out_dim(),
                self.in_dim(),
                x.dim(),
                dy.dim()
            )));
        }
        Ok(LinearGrads {
            dx: dy.dot(&self.weight),
            dweight: dy.t().dot(&x),
            dbias: self.bias.map(|_| dy.sum_axis(Axis(0))),
        })
    }
}

pub fn relu<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(pre: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> Array2<T> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    dx
}

/// Branch-stable logistic function; never overflows.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Derivative through the sigmoid given its output `y`.
#[inline]
pub fn sigmoid_backward<T: Scalar>(y: T, dy: T) -> T {
    dy * y * (T::one() - y)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn softmax_stable<T: Scalar>(x: ArrayView1<'_, T>) -> Array1<T> {
    softmax_rows(x.insert_axis(Axis(0))).remove_axis(Axis(0))
}

/// Adjoint of row-wise softmax: `dx = p ⊙ (dp − ⟨p, dp⟩)` per row.
pub fn softmax_backward_rows<T: Scalar>(p: ArrayView2<'_, T>, dp: ArrayView2<'_, T>) -> Array2<T> {
    let mut dx = Array2::zeros(p.dim());
    for ((mut out, p_row), dp_row) in dx.outer_iter_mut().zip(p.outer_iter()).zip(dp.outer_iter()) {
        let inner = p_row.dot(&dp_row);
        Zip::from(&mut out)
            .and(&p_row)
            .and(&dp_row)
            .for_each(|o, &pi, &gi| *o = pi * (gi - inner));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_layer() {
        let w = Array2::<f64>::eye(3);
        let b = Array1::zeros(3);
        let layer = LinearLayer::new(w.view(), Some(b.view())).unwrap();
        let x = array![[1.0, -2.0, 3.0]];
        assert_eq!(layer.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let w = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = array![0.1, 0.2, 0.3];
        let layer = LinearLayer::new(w.view(), Some(b.view())).unwrap();
        let x = array![[0.5, -1.0], [2.0, 1.0]];
        let g = layer
            .backward(x.view(), Array2::zeros((2, 3)).view())
            .unwrap();
        assert!(g
            .dx
            .iter()
            .chain(g.dweight.iter())
            .chain(g.dbias.unwrap().iter())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let w = Array2::<f64>::zeros((2, 3));
        let layer = LinearLayer::new(w.view(), None).unwrap();
        assert!(layer.forward(Array2::zeros((1, 2)).view()).is_err());
        let b = Array1::<f64>::zeros(5);
        assert!(LinearLayer::new(w.view(), Some(b.view())).is_err());
    }

    #[test]
    fn linear_matches_finite_differences() {
        // f(W, b, x) = Σ c ⊙ (x Wᵀ + b) for a fixed weighting c.
        let w = array![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]];
        let b = array![0.05, -0.3];
        let x = array![[0.2, -0.1, 0.9], [-1.2, 0.6, 0.3]];
        let c = array![[0.7, -1.3], [0.25, 2.0]];
        let f = |w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>| {
            let l = LinearLayer::new(w.view(), Some(b.view())).unwrap();
            (l.forward(x.view()).unwrap() * &c).sum()
        };
        let layer = LinearLayer::new(w.view(), Some(b.view())).unwrap();
        let g = layer.backward(x.view(), c.view()).unwrap();
        let eps = 1e-5;
        for idx in ndarray::indices(w.dim()) {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[idx] += eps;
            wm[idx] -= eps;
            let num = (f(&wp, &b, &x) - f(&wm, &b, &x)) / (2.0 * eps);
            assert_abs_diff_eq!(num, g.dweight[idx], epsilon = 1e-9);
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += eps;
            bm[i] -= eps;
            let num = (f(&w, &bp, &x) - f(&w, &bm, &x)) / (2.0 * eps);
            assert_abs_diff_eq!(num, g.dbias.as_ref().unwrap()[i], epsilon = 1e-9);
        }
        for idx in ndarray::indices(x.dim()) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += eps;
            xm[idx] -= eps;
            let num = (f(&w, &b, &xp) - f(&w, &b, &xm)) / (2.0 * eps);
            assert_abs_diff_eq!(num, g.dx[idx], epsilon = 1e-9);
        }
    }

    #[test]
    fn relu_chain_matches_finite_differences() {
        // f(x) = Σ c ⊙ relu(x Wᵀ)
        let w = array![[0.5, -1.0], [0.8, 0.35], [-0.4, 0.9]];
        let x = array![[0.7, 0.2], [-0.3, 0.8]];
        let c = array![[1.0, -2.0, 0.5], [0.3, 0.3, -1.0]];
        let f = |x: &Array2<f64>| {
            let l = LinearLayer::new(w.view(), None).unwrap();
            (relu(l.forward(x.view()).unwrap().view()) * &c).sum()
        };
        let layer = LinearLayer::new(w.view(), None).unwrap();
        let pre = layer.forward(x.view()).unwrap();
        let dpre = relu_backward(pre.view(), c.view());
        let dx = layer.backward(x.view(), dpre.view()).unwrap().dx;
        let eps = 1e-6;
        for idx in ndarray::indices(x.dim()) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += eps;
            xm[idx] -= eps;
            assert_abs_diff_eq!((f(&xp) - f(&xm)) / (2.0 * eps), dx[idx], epsilon = 1e-8);
        }
    }

    #[test]
    fn relu_zero_subgradient() {
        let pre = array![[0.0, 1.0, -1.0]];
        let dy = array![[5.0, 5.0, 5.0]];
        assert_eq!(
            relu_backward(pre.view(), dy.view()),
            array![[0.0, 5.0, 0.0]]
        );
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(-800.0f64).is_finite());
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert_abs_diff_eq!(
            sigmoid(2.0f64),
            1.0 / (1.0 + (-2.0f64).exp()),
            epsilon = 1e-15
        );
        let y = sigmoid(0.3f64);
        let eps = 1e-6;
        let num = (sigmoid(0.3 + eps) - sigmoid(0.3 - eps)) / (2.0 * eps);
        assert_abs_diff_eq!(sigmoid_backward(y, 1.0), num, epsilon = 1e-10);
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus(0.0f64), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn softmax_values_and_adjoint() {
        let p = softmax_stable(array![0.0f64, 0.0, 0.0].view());
        p.iter()
            .for_each(|&v| assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15));
        let big = softmax_stable(array![1e4f64, -1e4, 0.0].view());
        assert!(big.iter().all(|v| v.is_finite()));

        let x = array![[0.2, -0.5, 1.3, 0.0]];
        let c = array![[0.4, -1.0, 2.0, 0.1]];
        let p = softmax_rows(x.view());
        let dx = softmax_backward_rows(p.view(), c.view());
        let eps = 1e-6;
        for j in 0..4 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[0, j]] += eps;
            xm[[0, j]] -= eps;
            let num = ((softmax_rows(xp.view()) * &c).sum() - (softmax_rows(xm.view()) * &c).sum())
                / (2.0 * eps);
            assert_abs_diff_eq!(num, dx[[0, j]], epsilon = 1e-9);
        }
    }
}
