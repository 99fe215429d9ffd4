use super::{ToyConfig, ToyDataset, ToyError, ToyNet};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Full-batch training loss before each update.
    pub losses: Vec<f64>,
    pub train_mse: f64,
    pub test_mse: f64,
}

/// Full-batch training with Adam-scaled gradient steps.
pub fn toy_train(
    config: &ToyConfig,
    data: &ToyDataset,
    seed: u64,
) -> Result<(ToyNet, TrainReport), ToyError> {
    config.validate()?;
    let mut net = ToyNet::random(config.hidden, seed);
    let mut m = net.zeros_like();
    let mut v = net.zeros_like();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grad) = net.loss_and_grad(&data.train_x, &data.train_y);
        if !loss.is_finite() {
            return Err(ToyError::Diverged { step, loss });
        }
        losses.push(loss);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let params = net.tensors_mut();
        let grads = grad.tensors();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for e in 0..p.len() {
                m[e] = BETA1 * m[e] + (1.0 - BETA1) * g[e];
                v[e] = BETA2 * v[e] + (1.0 - BETA2) * g[e] * g[e];
                p[e] -= config.learning_rate * (m[e] / c1) / ((v[e] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
    let train_mse = net.loss(&data.train_x, &data.train_y);
    if !train_mse.is_finite() {
        return Err(ToyError::Diverged {
            step: config.steps,
            loss: train_mse,
        });
    }
    let test_mse = net.loss(&data.test_x, &data.test_y);
    Ok((
        net,
        TrainReport {
            losses,
            train_mse,
            test_mse,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_reduces_loss() {
        let cfg = ToyConfig {
            n_train: 128,
            n_test: 32,
            steps: 200,
            ..ToyConfig::default()
        };
        let data = ToyDataset::generate(&cfg, 1);
        let (_, report) = toy_train(&cfg, &data, 1).unwrap();
        assert_eq!(report.losses.len(), 200);
        assert!(report.train_mse < 0.5 * report.losses[0]);
    }

    #[test]
    fn zero_learning_rate_is_rejected() {
        let cfg = ToyConfig {
            n_train: 16,
            n_test: 4,
            steps: 5,
            learning_rate: 0.0,
            ..ToyConfig::default()
        };
        assert!(matches!(
            toy_train(&cfg, &ToyDataset::generate(&cfg, 1), 1),
            Err(ToyError::Config(_))
        ));
    }
}
