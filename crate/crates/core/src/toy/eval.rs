use std::io::Write;

use super::net::sq_err;
use super::{ToyDataset, ToyError, ToyNet};
use crate::loop_engine::{apply_strategy, LoopError, Strategy};
use crate::numerics::Matrix;

/// How the residual block is applied at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopKind {
    Baseline,
    /// The block composed `K` times.
    Naive(usize),
    /// `K` damped Euler substeps of size `1/K` with the block as `g`.
    Substep(usize),
}

impl LoopKind {
    fn strategy(&self) -> Strategy {
        match *self {
            LoopKind::Baseline => Strategy::Naive { k: 1 },
            LoopKind::Naive(k) => Strategy::Naive { k },
            LoopKind::Substep(k) => Strategy::euler(k),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoopKind::Baseline => "baseline",
            LoopKind::Naive(_) => "naive",
            LoopKind::Substep(_) => "substep",
        }
    }
}

/// Bottleneck states after the (looped) block, one per input.
pub fn block_endpoints(
    net: &ToyNet,
    xs: &[[f64; 4]],
    kind: LoopKind,
) -> Result<Vec<[f64; 2]>, ToyError> {
    let rows: Vec<Vec<f64>> = xs.iter().map(|x| net.pre(x).to_vec()).collect();
    let z0 = Matrix::<f64>::from_rows(&rows).map_err(LoopError::from)?;
    let mut g = |z: &Matrix<f64>| -> Result<Matrix<f64>, LoopError> {
        let mut out = Vec::with_capacity(z.rows() * 2);
        for row in z.row_iter() {
            out.extend(net.block(&[row[0], row[1]]));
        }
        Ok(Matrix::new(z.rows(), 2, out)?)
    };
    let z = apply_strategy(&z0, &mut g, &kind.strategy())?;
    Ok(z.row_iter().map(|r| [r[0], r[1]]).collect())
}

/// Mean squared error on the test split.
pub fn toy_eval(net: &ToyNet, data: &ToyDataset, kind: LoopKind) -> Result<f64, ToyError> {
    let z = block_endpoints(net, &data.test_x, kind)?;
    Ok(z.iter()
        .zip(&data.test_y)
        .map(|(z, y)| sq_err(&net.post(z), y))
        .sum::<f64>()
        / z.len() as f64)
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    sq_err(a, b).sqrt()
}

/// Fraction of (test point, `K`) pairs whose substep endpoints contract:
/// `|s(2K) - s(4K)| <= |s(K) - s(2K)|`.
pub fn cauchy_fraction(net: &ToyNet, data: &ToyDataset, ks: &[usize]) -> Result<f64, ToyError> {
    let mut ok = 0usize;
    let mut total = 0usize;
    for &k in ks {
        let s1 = block_endpoints(net, &data.test_x, LoopKind::Substep(k))?;
        let s2 = block_endpoints(net, &data.test_x, LoopKind::Substep(2 * k))?;
        let s4 = block_endpoints(net, &data.test_x, LoopKind::Substep(4 * k))?;
        for i in 0..s1.len() {
            total += 1;
            if dist(&s2[i], &s4[i]) <= dist(&s1[i], &s2[i]) {
                ok += 1;
            }
        }
    }
    Ok(ok as f64 / total.max(1) as f64)
}

/// Mean distance of naive endpoints from the baseline endpoints, per `K`.
pub fn naive_drift(
    net: &ToyNet,
    data: &ToyDataset,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, ToyError> {
    let base = block_endpoints(net, &data.test_x, LoopKind::Baseline)?;
    ks.iter()
        .map(|&k| {
            let z = block_endpoints(net, &data.test_x, LoopKind::Naive(k))?;
            let mean = z.iter().zip(&base).map(|(a, b)| dist(a, b)).sum::<f64>() / z.len() as f64;
            Ok((k, mean))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub z1: (f64, f64),
    pub z2: (f64, f64),
}

impl GridBounds {
    pub fn validate(&self) -> Result<(), ToyError> {
        for (name, (lo, hi)) in [("z1", self.z1), ("z2", self.z2)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ToyError::Bounds(format!("{name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Smallest box holding every point, widened by `margin` of its size
    /// on each side.
    pub fn covering(points: &[[f64; 2]], margin: f64) -> Result<Self, ToyError> {
        let mut b = GridBounds {
            z1: (f64::INFINITY, f64::NEG_INFINITY),
            z2: (f64::INFINITY, f64::NEG_INFINITY),
        };
        for p in points {
            b.z1 = (b.z1.0.min(p[0]), b.z1.1.max(p[0]));
            b.z2 = (b.z2.0.min(p[1]), b.z2.1.max(p[1]));
        }
        let widen = |(lo, hi): (f64, f64)| {
            let pad = ((hi - lo) * margin).max(1e-3);
            (lo - pad, hi + pad)
        };
        let b = GridBounds {
            z1: widen(b.z1),
            z2: widen(b.z2),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn contains(&self, p: &[f64; 2]) -> bool {
        (self.z1.0..=self.z1.1).contains(&p[0]) && (self.z2.0..=self.z2.1).contains(&p[1])
    }
}

/// Median test loss `med_i |post(z) - y_i|^2` on a square grid of cell
/// centers. `values[j * resolution + i]` is the cell at column `i` (z1) and
/// row `j` (z2).
#[derive(Debug, Clone)]
pub struct LossGrid {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl LossGrid {
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        let n = self.resolution as f64;
        let (a, b) = (self.bounds.z1, self.bounds.z2);
        [
            a.0 + (i as f64 + 0.5) * (a.1 - a.0) / n,
            b.0 + (j as f64 + 0.5) * (b.1 - b.0) / n,
        ]
    }

    pub fn cell_of(&self, z: &[f64; 2]) -> Option<(usize, usize)> {
        if !self.bounds.contains(z) {
            return None;
        }
        let n = self.resolution;
        let idx =
            |v: f64, (lo, hi): (f64, f64)| (((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1);
        Some((idx(z[0], self.bounds.z1), idx(z[1], self.bounds.z2)))
    }

    pub fn value_at(&self, z: &[f64; 2]) -> Option<f64> {
        self.cell_of(z)
            .map(|(i, j)| self.values[j * self.resolution + i])
    }

    /// Empirical `q`-quantile of the cell values.
    pub fn quantile(&self, q: f64) -> f64 {
        quantile(&self.values, q)
    }
}

pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 1.0) * (v.len() - 1) as f64).round() as usize;
    v[pos]
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let (_, hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    }
}

/// Endpoints of one evaluation kind at one `K`.
#[derive(Debug, Clone)]
pub struct Scatter {
    pub k: usize,
    pub kind: LoopKind,
    pub points: Vec<[f64; 2]>,
}

/// Loss grid in the bottleneck plane plus naive and substep endpoint
/// scatters for every `K`. Without explicit bounds the grid covers every
/// scatter with a 10% margin.
pub fn toy_grid(
    net: &ToyNet,
    data: &ToyDataset,
    bounds: Option<GridBounds>,
    resolution: usize,
    ks: &[usize],
) -> Result<(LossGrid, Vec<Scatter>), ToyError> {
    if resolution == 0 {
        return Err(ToyError::Bounds("resolution must be positive".into()));
    }
    let mut scatters = Vec::with_capacity(2 * ks.len());
    for &k in ks {
        for kind in [LoopKind::Naive(k), LoopKind::Substep(k)] {
            scatters.push(Scatter {
                k,
                kind,
                points: block_endpoints(net, &data.test_x, kind)?,
            });
        }
    }
    let bounds = match bounds {
        Some(b) => {
            b.validate()?;
            if let Some(p) = scatters
                .iter()
                .flat_map(|s| &s.points)
                .find(|p| !b.contains(p))
            {
                return Err(ToyError::Bounds(format!(
                    "endpoint ({}, {}) lies outside the grid",
                    p[0], p[1]
                )));
            }
            b
        }
        None => {
            let mut all: Vec<[f64; 2]> = scatters.iter().flat_map(|s| s.points.clone()).collect();
            all.extend(block_endpoints(net, &data.test_x, LoopKind::Baseline)?);
            GridBounds::covering(&all, 0.1)?
        }
    };
    let mut grid = LossGrid {
        bounds,
        resolution,
        values: Vec::with_capacity(resolution * resolution),
    };
    let mut losses = vec![0.0; data.test_y.len()];
    for j in 0..resolution {
        for i in 0..resolution {
            let out = net.post(&grid.cell_center(i, j));
            for (l, y) in losses.iter_mut().zip(&data.test_y) {
                *l = sq_err(&out, y);
            }
            grid.values.push(median(&mut losses));
        }
    }
    Ok((grid, scatters))
}

pub fn write_grid_csv(grid: &LossGrid, mut w: impl Write) -> Result<(), ToyError> {
    writeln!(w, "z1,z2,median_loss")?;
    for j in 0..grid.resolution {
        for i in 0..grid.resolution {
            let c = grid.cell_center(i, j);
            writeln!(
                w,
                "{},{},{}",
                c[0],
                c[1],
                grid.values[j * grid.resolution + i]
            )?;
        }
    }
    Ok(())
}

pub fn write_scatter_csv(scatters: &[Scatter], mut w: impl Write) -> Result<(), ToyError> {
    writeln!(w, "K,kind,point_index,z1,z2")?;
    for s in scatters {
        for (i, p) in s.points.iter().enumerate() {
            writeln!(w, "{},{},{},{},{}", s.k, s.kind.name(), i, p[0], p[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToyConfig;

    fn small() -> (ToyNet, ToyDataset) {
        let cfg = ToyConfig {
            n_train: 16,
            n_test: 9,
            ..ToyConfig::default()
        };
        (ToyNet::random(8, 1), ToyDataset::generate(&cfg, 1))
    }

    #[test]
    fn single_pass_kinds_coincide() {
        let (net, data) = small();
        let base = block_endpoints(&net, &data.test_x, LoopKind::Baseline).unwrap();
        assert_eq!(
            base,
            block_endpoints(&net, &data.test_x, LoopKind::Naive(1)).unwrap()
        );
        assert_eq!(
            base,
            block_endpoints(&net, &data.test_x, LoopKind::Substep(1)).unwrap()
        );
        let direct: Vec<_> = data.test_x.iter().map(|x| net.block(&net.pre(x))).collect();
        assert_eq!(base, direct);
    }

    #[test]
    fn grid_has_resolution_squared_cells() {
        let (net, data) = small();
        let (grid, scatters) = toy_grid(&net, &data, None, 220, &[2]).unwrap();
        assert_eq!(grid.values.len(), 48_400);
        assert_eq!(scatters.len(), 2);
        assert!(scatters
            .iter()
            .flat_map(|s| &s.points)
            .all(|p| grid.bounds.contains(p)));
    }

    #[test]
    fn degenerate_bounds_are_rejected() {
        let (net, data) = small();
        let flat = GridBounds {
            z1: (0.0, 0.0),
            z2: (-1.0, 1.0),
        };
        assert!(matches!(
            toy_grid(&net, &data, Some(flat), 10, &[2]),
            Err(ToyError::Bounds(_))
        ));
        let tiny = GridBounds {
            z1: (100.0, 101.0),
            z2: (100.0, 101.0),
        };
        assert!(matches!(
            toy_grid(&net, &data, Some(tiny), 10, &[2]),
            Err(ToyError::Bounds(_))
        ));
    }

    #[test]
    fn cells_map_back_to_centers() {
        let grid = LossGrid {
            bounds: GridBounds {
                z1: (-1.0, 1.0),
                z2: (0.0, 4.0),
            },
            resolution: 4,
            values: (0..16).map(f64::from).collect(),
        };
        assert_eq!(grid.cell_center(0, 0), [-0.75, 0.5]);
        assert_eq!(grid.cell_of(&[-0.75, 0.5]), Some((0, 0)));
        assert_eq!(grid.cell_of(&[1.0, 4.0]), Some((3, 3)));
        assert_eq!(grid.value_at(&[0.1, 1.5]), Some(6.0));
        assert_eq!(grid.cell_of(&[2.0, 0.0]), None);
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
