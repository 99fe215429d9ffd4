//! Iteration strategies acting on an abstract window operator `g`.
//!
//! All state updates are evaluated in `f64` and rounded once into the
//! storage type, which makes the degenerate cases (heavy-ball with zero
//! momentum, anchored RK at `beta` in {0, 1}, one-hot blends) bit-identical
//! to the simpler strategies they reduce to.

use super::accel::{aitken_step, AndersonState};
use super::{ButcherTableau, LoopError, Strategy};
use crate::numerics::{Matrix, Scalar};

/// A window operator `g`. Its residual field is `F_g(x) = g(x) - x`.
pub trait Field<T: Scalar> {
    fn apply(&mut self, x: &Matrix<T>) -> Result<Matrix<T>, LoopError>;
}

impl<T, F> Field<T> for F
where
    T: Scalar,
    F: FnMut(&Matrix<T>) -> Result<Matrix<T>, LoopError>,
{
    fn apply(&mut self, x: &Matrix<T>) -> Result<Matrix<T>, LoopError> {
        self(x)
    }
}

/// Wraps a field and counts evaluations of `g`.
pub struct CountingField<F> {
    inner: F,
    count: usize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn into_inner(self) -> F {
        self.inner
    }
}

impl<T: Scalar, F: Field<T>> Field<T> for CountingField<F> {
    fn apply(&mut self, x: &Matrix<T>) -> Result<Matrix<T>, LoopError> {
        self.count += 1;
        self.inner.apply(x)
    }
}

/// Builds `g(x) = x + r(x)` from a residual field `r`.
pub fn from_residual<T: Scalar>(
    mut residual: impl FnMut(&Matrix<T>) -> Matrix<T>,
) -> impl FnMut(&Matrix<T>) -> Result<Matrix<T>, LoopError> {
    move |x: &Matrix<T>| Ok(x.add(&residual(x)))
}

fn checked<T: Scalar>(x: Matrix<T>, iteration: usize) -> Result<Matrix<T>, LoopError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(LoopError::Diverged { iteration })
    }
}

/// `x + alpha (y - x)`; a full step returns `y` itself.
pub fn damped_step<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, alpha: f64) -> Matrix<T> {
    if alpha == 1.0 {
        return y.clone();
    }
    x.zip_map(y, |x, y| x + alpha * (y - x))
}

/// Applies `strategy` starting from `x0`. The number of `field`
/// evaluations equals [`Strategy::forward_passes`].
pub fn apply_strategy<T: Scalar>(
    x0: &Matrix<T>,
    field: &mut dyn Field<T>,
    strategy: &Strategy,
) -> Result<Matrix<T>, LoopError> {
    strategy.validate()?;
    match strategy {
        Strategy::Naive { k } => {
            let mut x = x0.clone();
            for it in 0..*k {
                x = checked(field.apply(&x)?, it)?;
            }
            Ok(x)
        }
        Strategy::Euler { k, alpha } => {
            let alpha = alpha.unwrap_or(1.0 / *k as f64);
            euler_schedule(x0, field, std::iter::repeat_n(alpha, *k))
        }
        Strategy::EulerSched { alphas } => euler_schedule(x0, field, alphas.iter().copied()),
        Strategy::RkGeneric { tableau, h, steps } => rk_generic(x0, field, tableau, *h, *steps),
        Strategy::RkAnchored { k, beta } => rk_anchored(x0, field, *k, *beta),
        Strategy::HeavyBall { k, alpha, beta } => {
            let mut prev = x0.clone();
            let mut x = x0.clone();
            for it in 0..*k {
                let y = field.apply(&x)?;
                let mut data = Vec::with_capacity(x.data().len());
                for ((xv, yv), pv) in x.data().iter().zip(y.data()).zip(prev.data()) {
                    let (xv, yv, pv) = (xv.to_f64(), yv.to_f64(), pv.to_f64());
                    data.push(T::from_f64(xv + alpha * (yv - xv) + beta * (xv - pv)));
                }
                let next = Matrix::new(x.rows(), x.cols(), data)?;
                prev = std::mem::replace(&mut x, checked(next, it)?);
            }
            Ok(x)
        }
        Strategy::Anderson { k, m, beta } => {
            let mut state = AndersonState::new(*m, *beta);
            let mut x = x0.clone();
            for it in 0..*k {
                let gx = field.apply(&x)?;
                x = checked(state.step(&x, &gx), it)?;
            }
            Ok(x)
        }
        Strategy::Aitken { k } => {
            let mut x = x0.clone();
            for it in 0..k / 2 {
                let g1 = field.apply(&x)?;
                let g2 = field.apply(&g1)?;
                x = checked(aitken_step(&x, &g1, &g2), it)?;
            }
            Ok(x)
        }
        Strategy::UniformLoop { k } => {
            let mut sum: Vec<f64> = x0.data().iter().map(|v| v.to_f64()).collect();
            let mut x = x0.clone();
            for it in 0..*k {
                let n = (it + 1) as f64;
                let mean = Matrix::new(
                    x0.rows(),
                    x0.cols(),
                    sum.iter().map(|s| T::from_f64(s / n)).collect(),
                )?;
                x = checked(field.apply(&mean)?, it)?;
                for (s, v) in sum.iter_mut().zip(x.data()) {
                    *s += v.to_f64();
                }
            }
            Ok(x)
        }
        Strategy::NormStab { k, alpha } => {
            let ref_norms: Vec<f64> = x0.row_iter().map(row_norm).collect();
            let mut x = x0.clone();
            for it in 0..*k {
                let y = field.apply(&x)?;
                let mut data = Vec::with_capacity(x.data().len());
                for (r, (xr, yr)) in x.row_iter().zip(y.row_iter()).enumerate() {
                    let stepped: Vec<f64> = xr
                        .iter()
                        .zip(yr)
                        .map(|(a, b)| {
                            let a = a.to_f64();
                            a + alpha * (b.to_f64() - a)
                        })
                        .collect();
                    let norm = stepped.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = if norm > 0.0 { ref_norms[r] / norm } else { 1.0 };
                    data.extend(stepped.iter().map(|v| T::from_f64(v * scale)));
                }
                x = checked(Matrix::new(x.rows(), x.cols(), data)?, it)?;
            }
            Ok(x)
        }
        Strategy::PolyBlend { k, weights } => {
            let mut acc: Vec<f64> = x0.data().iter().map(|v| weights[0] * v.to_f64()).collect();
            let mut x = x0.clone();
            for it in 0..*k {
                x = checked(field.apply(&x)?, it)?;
                let w = weights[it + 1];
                for (a, v) in acc.iter_mut().zip(x.data()) {
                    *a += w * v.to_f64();
                }
            }
            let out = Matrix::new(
                x0.rows(),
                x0.cols(),
                acc.into_iter().map(T::from_f64).collect(),
            )?;
            checked(out, *k)
        }
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt()
}

fn euler_schedule<T: Scalar>(
    x0: &Matrix<T>,
    field: &mut dyn Field<T>,
    alphas: impl Iterator<Item = f64>,
) -> Result<Matrix<T>, LoopError> {
    let mut x = x0.clone();
    for (it, alpha) in alphas.enumerate() {
        let y = field.apply(&x)?;
        x = checked(damped_step(&x, &y, alpha), it)?;
    }
    Ok(x)
}

/// `steps` explicit RK steps of size `h`:
/// `k_i = F_g(x + h sum_{j<i} a_ij k_j)`, `x <- x + h sum_i b_i k_i`.
pub fn rk_generic<T: Scalar>(
    x0: &Matrix<T>,
    field: &mut dyn Field<T>,
    tableau: &ButcherTableau,
    h: f64,
    steps: usize,
) -> Result<Matrix<T>, LoopError> {
    let s = tableau.stages();
    let n = x0.data().len();
    let mut x = x0.clone();
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(s);
    for step in 0..steps {
        ks.clear();
        for i in 0..s {
            let stage = if (0..i).all(|j| tableau.a(i, j) == 0.0) {
                x.clone()
            } else {
                let mut data = Vec::with_capacity(n);
                for e in 0..n {
                    let inc: f64 = (0..i).map(|j| tableau.a(i, j) * ks[j][e]).sum();
                    data.push(T::from_f64(x.data()[e].to_f64() + h * inc));
                }
                Matrix::new(x.rows(), x.cols(), data)?
            };
            let g = field.apply(&stage)?;
            ks.push(
                g.data()
                    .iter()
                    .zip(stage.data())
                    .map(|(g, y)| g.to_f64() - y.to_f64())
                    .collect(),
            );
        }
        let b = tableau.weights();
        let mut data = Vec::with_capacity(n);
        for e in 0..n {
            let inc: f64 = (0..s).map(|i| b[i] * ks[i][e]).sum();
            data.push(T::from_f64(x.data()[e].to_f64() + h * inc));
        }
        x = checked(Matrix::new(x.rows(), x.cols(), data)?, step)?;
    }
    Ok(x)
}

/// Anchored RK in its two-branch form: one anchor pass `g(x0)`, which also
/// provides the first damped substep, `K - 1` further substeps of size
/// `1/K`, then `beta * anchor + (1 - beta) * endpoint`.
pub fn rk_anchored<T: Scalar>(
    x0: &Matrix<T>,
    field: &mut dyn Field<T>,
    k: usize,
    beta: f64,
) -> Result<Matrix<T>, LoopError> {
    Strategy::RkAnchored { k, beta }.validate()?;
    let h = 1.0 / k as f64;
    let anchor = checked(field.apply(x0)?, 0)?;
    let mut x = damped_step(x0, &anchor, h);
    for it in 1..k {
        let y = field.apply(&x)?;
        x = checked(damped_step(&x, &y, h), it)?;
    }
    Ok(anchor.zip_map(&x, |a, e| beta * a + (1.0 - beta) * e))
}
