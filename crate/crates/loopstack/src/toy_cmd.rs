use std::fmt::Write as _;

use loopstack_core::toy::{
    cauchy_fraction, finite_difference_check, naive_drift, toy_eval, toy_grid, toy_train,
    write_grid_csv, write_scatter_csv, GridBounds, LoopKind, LossGrid, Scatter, ToyConfig,
    ToyDataset, ToyNet, TrainReport,
};

use crate::HarnessError;

/// Points used for the gradient check; finite differences over the full
/// training set would dominate the run time.
const GRAD_CHECK_POINTS: usize = 64;

pub struct ToyReport {
    pub net: ToyNet,
    pub train: TrainReport,
    pub baseline_mse: f64,
    /// `(K, naive test MSE, substep test MSE)`.
    pub by_k: Vec<(usize, f64, f64)>,
    pub cauchy_fraction: f64,
    pub naive_drift: Vec<(usize, f64)>,
    pub grad_check: Vec<(String, f64)>,
    pub grid: LossGrid,
    pub scatters: Vec<Scatter>,
}

impl ToyReport {
    pub fn max_grad_error(&self) -> f64 {
        self.grad_check.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn mse_csv(&self) -> String {
        let mut s = "kind,K,test_mse,gap_ratio\n".to_string();
        writeln!(s, "baseline,1,{},", self.baseline_mse).unwrap();
        for &(k, naive, sub) in &self.by_k {
            writeln!(s, "substep,{k},{sub},").unwrap();
            writeln!(s, "naive,{k},{naive},{}", naive / sub).unwrap();
        }
        s
    }

    pub fn checks_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "train_mse {}", self.train.train_mse).unwrap();
        writeln!(s, "test_mse {}", self.train.test_mse).unwrap();
        writeln!(s, "grad_check_max_rel_error {}", self.max_grad_error()).unwrap();
        writeln!(s, "cauchy_fraction {}", self.cauchy_fraction).unwrap();
        for (k, d) in &self.naive_drift {
            writeln!(s, "naive_drift K={k} {d}").unwrap();
        }
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = "step,loss\n".to_string();
        for (i, l) in self.train.losses.iter().enumerate() {
            writeln!(s, "{i},{l}").unwrap();
        }
        s
    }

    pub fn grid_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut buf = Vec::new();
        write_grid_csv(&self.grid, &mut buf)?;
        Ok(buf)
    }

    pub fn scatter_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut buf = Vec::new();
        write_scatter_csv(&self.scatters, &mut buf)?;
        Ok(buf)
    }
}

/// Trains the toy network and evaluates baseline, naive and substep
/// looping of its residual block.
pub fn cmd_toy(
    config: &ToyConfig,
    seed: u64,
    bounds: Option<[f64; 4]>,
) -> Result<ToyReport, HarnessError> {
    config.validate()?;
    let data = ToyDataset::generate(config, seed);
    let (net, train) = toy_train(config, &data, seed)?;
    let baseline_mse = toy_eval(&net, &data, LoopKind::Baseline)?;
    let by_k = config
        .ks
        .iter()
        .map(|&k| {
            Ok((
                k,
                toy_eval(&net, &data, LoopKind::Naive(k))?,
                toy_eval(&net, &data, LoopKind::Substep(k))?,
            ))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let n = GRAD_CHECK_POINTS.min(data.train_x.len());
    let grad_check = finite_difference_check(&net, &data.train_x[..n], &data.train_y[..n], 1e-6);
    let bounds = bounds.map(|b| GridBounds {
        z1: (b[0], b[1]),
        z2: (b[2], b[3]),
    });
    let (grid, scatters) = toy_grid(&net, &data, bounds, config.resolution, &config.ks)?;
    Ok(ToyReport {
        cauchy_fraction: cauchy_fraction(&net, &data, &config.ks)?,
        naive_drift: naive_drift(&net, &data, &config.ks)?,
        net,
        train,
        baseline_mse,
        by_k,
        grad_check,
        grid,
        scatters,
    })
}
