//! Fixed-point accelerators: Anderson mixing and safeguarded Aitken.

use std::collections::VecDeque;

use crate::numerics::{Matrix, Scalar};

/// Relative ridge added to the Anderson normal equations.
pub const ANDERSON_RIDGE: f64 = 1e-8;

/// Below `AITKEN_TINY * (1 + |d1|)` the second difference counts as zero and
/// the coordinate takes a plain `x + d1` move.
pub const AITKEN_TINY: f64 = 1e-8;

/// Least-squares coefficients `argmin |f - sum_j gamma_j cols_j|` via
/// normal equations with a `1e-8 * trace` ridge. Returns `None` when the
/// system cannot be solved.
pub fn least_squares_coefficients(cols: &[Vec<f64>], f: &[f64]) -> Option<Vec<f64>> {
    let m = cols.len();
    if m == 0 {
        return Some(Vec::new());
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let v = dot(&cols[i], &cols[j]);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let trace: f64 = (0..m).map(|i| gram[i][i]).sum();
    if trace.is_nan() || trace <= 0.0 || !trace.is_finite() {
        return None;
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += ANDERSON_RIDGE * trace;
    }
    let rhs: Vec<f64> = cols.iter().map(|c| dot(c, f)).collect();
    solve(gram, rhs)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col] == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Sliding-window Anderson history: the last `m` increments of the iterate,
/// of the residual `f = g(x) - x`, and of `g(x)`.
#[derive(Debug, Clone)]
pub struct AndersonState {
    m: usize,
    beta: f64,
    prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    dx: VecDeque<Vec<f64>>,
    df: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
    fallbacks: usize,
}

impl AndersonState {
    pub fn new(m: usize, beta: f64) -> Self {
        Self {
            m,
            beta,
            prev: None,
            dx: VecDeque::with_capacity(m),
            df: VecDeque::with_capacity(m),
            dg: VecDeque::with_capacity(m),
            fallbacks: 0,
        }
    }

    pub fn history_len(&self) -> usize {
        self.df.len()
    }

    /// Times the least-squares solve was degenerate and plain mixing was used.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// One Anderson update from `x_k` and `g(x_k)`:
    /// `(1-beta)(x_k - dX gamma) + beta (g(x_k) - dG gamma)`, with
    /// `gamma = argmin |f_k - dF gamma|`. Without history this is
    /// `x + beta (g(x) - x)`.
    pub fn step<T: Scalar>(&mut self, x: &Matrix<T>, gx: &Matrix<T>) -> Matrix<T> {
        let xs: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
        let gs: Vec<f64> = gx.data().iter().map(|v| v.to_f64()).collect();
        let fs: Vec<f64> = gs.iter().zip(&xs).map(|(g, x)| g - x).collect();

        if let Some((px, pf, pg)) = self.prev.take() {
            if self.m > 0 {
                if self.df.len() == self.m {
                    self.dx.pop_front();
                    self.df.pop_front();
                    self.dg.pop_front();
                }
                self.dx.push_back(diff(&xs, &px));
                self.df.push_back(diff(&fs, &pf));
                self.dg.push_back(diff(&gs, &pg));
            }
        }

        let beta = self.beta;
        let cols: Vec<Vec<f64>> = self.df.iter().cloned().collect();
        let gamma = if cols.is_empty() {
            Vec::new()
        } else {
            match least_squares_coefficients(&cols, &fs) {
                Some(g) => g,
                None => {
                    self.fallbacks += 1;
                    Vec::new()
                }
            }
        };

        let mut out = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let mut xa = xs[i];
            let mut ga = gs[i];
            for (j, gj) in gamma.iter().enumerate() {
                xa -= self.dx[j][i] * gj;
                ga -= self.dg[j][i] * gj;
            }
            out.push(T::from_f64((1.0 - beta) * xa + beta * ga));
        }
        self.prev = Some((xs, fs, gs));
        Matrix::new(x.rows(), x.cols(), out).expect("shape preserved")
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Raw Aitken delta-squared value `x - d1^2 / d2` for one coordinate.
pub fn aitken_extrapolate(x: f64, gx: f64, ggx: f64) -> f64 {
    let d1 = gx - x;
    let d2 = ggx - 2.0 * gx + x;
    x - d1 * d1 / d2
}

/// Safeguarded per-coordinate Aitken step from `x`, `g(x)`, `g(g(x))`.
///
/// The move is clipped to `|d1|`; coordinates whose second difference is
/// negligible take the plain move `x + d1`.
pub fn aitken_step<T: Scalar>(x: &Matrix<T>, gx: &Matrix<T>, ggx: &Matrix<T>) -> Matrix<T> {
    let mut out = Vec::with_capacity(x.data().len());
    for ((x, g1), g2) in x.data().iter().zip(gx.data()).zip(ggx.data()) {
        let (x, g1, g2) = (x.to_f64(), g1.to_f64(), g2.to_f64());
        let d1 = g1 - x;
        let d2 = g2 - 2.0 * g1 + x;
        let next = if d2.abs() < AITKEN_TINY * (1.0 + d1.abs()) {
            x + d1
        } else {
            let step = -d1 * d1 / d2;
            x + step.clamp(-d1.abs(), d1.abs())
        };
        out.push(T::from_f64(next));
    }
    Matrix::new(x.rows(), x.cols(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix<f64> {
        Matrix::row_vector(vec![v])
    }

    #[test]
    fn anderson_without_history_is_plain_mixing() {
        let mut st = AndersonState::new(2, 0.5);
        let out = st.step(&scalar(1.0), &scalar(3.0));
        assert_eq!(out.get(0, 0), 2.0);
        assert_eq!(st.history_len(), 0);
    }

    #[test]
    fn anderson_solves_affine_scalar_map_at_k2() {
        let g = |x: f64| 0.5 * x + 1.0;
        let mut st = AndersonState::new(1, 1.0);
        let mut x = 0.0;
        for _ in 0..2 {
            x = st.step(&scalar(x), &scalar(g(x))).get(0, 0);
        }
        // the ridge perturbs gamma by a relative 1e-8
        assert!((x - 2.0).abs() <= 1e-7, "x2 = {x}");
    }

    #[test]
    fn single_column_is_scalar_projection() {
        let df = vec![0.3, -1.2, 2.0];
        let f = vec![1.0, 0.5, -0.25];
        let gamma = least_squares_coefficients(std::slice::from_ref(&df), &f).unwrap()[0];
        let want = f.iter().zip(&df).map(|(a, b)| a * b).sum::<f64>()
            / df.iter().map(|v| v * v).sum::<f64>();
        assert!((gamma - want).abs() <= 1e-7 * want.abs());
    }

    #[test]
    fn history_depth_is_capped() {
        let mut st = AndersonState::new(2, 0.5);
        let mut x = scalar(0.0);
        for _ in 0..6 {
            let gx = x.map(|v| (v + 1.0).cos());
            x = st.step(&x, &gx);
            assert!(st.history_len() <= 2);
        }
        assert_eq!(st.history_len(), 2);
    }

    #[test]
    fn degenerate_history_falls_back() {
        let mut st = AndersonState::new(1, 1.0);
        // identical residuals twice: dF = 0
        st.step(&scalar(1.0), &scalar(2.0));
        let out = st.step(&scalar(3.0), &scalar(4.0));
        assert_eq!(out.get(0, 0), 4.0);
        assert_eq!(st.fallbacks(), 1);
    }

    #[test]
    fn aitken_raw_is_exact_on_linear_maps() {
        // g(x) = 0.5 x + 1 from x = 0: d1 = 1, d2 = -0.5
        assert_eq!(aitken_extrapolate(0.0, 1.0, 1.5), 2.0);
    }

    #[test]
    fn aitken_safeguard_clips_to_d1() {
        let out = aitken_step(&scalar(0.0), &scalar(1.0), &scalar(1.5));
        assert_eq!(out.get(0, 0), 1.0);
    }

    #[test]
    fn aitken_exact_within_clip() {
        // g(x) = -0.5 x + 1, fixed point 2/3, reached in one step
        let g = |x: f64| -0.5 * x + 1.0;
        let out = aitken_step(&scalar(0.0), &scalar(g(0.0)), &scalar(g(g(0.0))));
        assert!((out.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aitken_fixed_point_unchanged() {
        let out = aitken_step(&scalar(2.0), &scalar(2.0), &scalar(2.0));
        assert_eq!(out.get(0, 0), 2.0);
    }

    #[test]
    fn aitken_flat_second_difference_takes_euler_move() {
        // g(x) = x + 1: d1 = 1, d2 = 0
        let out = aitken_step(&scalar(5.0), &scalar(6.0), &scalar(7.0));
        assert_eq!(out.get(0, 0), 6.0);
    }
}
