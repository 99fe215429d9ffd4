use super::ToyConfig;
use crate::numerics::SeededRng;

/// `y = (sin(w1 . x), tanh(w2 . x)) + noise` with `x ~ N(0, I_4)`.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train_x: Vec<[f64; 4]>,
    pub train_y: Vec<[f64; 2]>,
    pub test_x: Vec<[f64; 4]>,
    pub test_y: Vec<[f64; 2]>,
    pub w1: [f64; 4],
    pub w2: [f64; 4],
}

fn direction(rng: &mut SeededRng, norm: f64) -> [f64; 4] {
    let mut v = [0.0; 4];
    for x in &mut v {
        *x = rng.normal();
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x * norm / n)
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyDataset {
    pub fn generate(config: &ToyConfig, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).fork(1);
        let w1 = direction(&mut rng, config.sine_scale);
        let w2 = direction(&mut rng, config.tanh_scale);
        let mut sample = |n: usize| {
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let x = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
                let y = [
                    dot4(&w1, &x).sin() + config.noise * rng.normal(),
                    dot4(&w2, &x).tanh() + config.noise * rng.normal(),
                ];
                xs.push(x);
                ys.push(y);
            }
            (xs, ys)
        };
        let (train_x, train_y) = sample(config.n_train);
        let (test_x, test_y) = sample(config.n_test);
        Self {
            train_x,
            train_y,
            test_x,
            test_y,
            w1,
            w2,
        }
    }

    pub fn mean_train_target(&self) -> [f64; 2] {
        let n = self.train_y.len() as f64;
        let mut m = [0.0; 2];
        for y in &self.train_y {
            m[0] += y[0] / n;
            m[1] += y[1] / n;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_sized() {
        let cfg = ToyConfig {
            n_train: 10,
            n_test: 4,
            ..ToyConfig::default()
        };
        let a = ToyDataset::generate(&cfg, 3);
        let b = ToyDataset::generate(&cfg, 3);
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.test_y, b.test_y);
        assert_eq!((a.train_x.len(), a.test_x.len()), (10, 4));
        assert!((dot4(&a.w1, &a.w1).sqrt() - cfg.sine_scale).abs() < 1e-12);
        assert_ne!(ToyDataset::generate(&cfg, 4).train_x, a.train_x);
    }

    #[test]
    fn noiseless_targets_follow_the_formula() {
        let cfg = ToyConfig {
            n_train: 5,
            n_test: 1,
            noise: 0.0,
            ..ToyConfig::default()
        };
        let d = ToyDataset::generate(&cfg, 9);
        for (x, y) in d.train_x.iter().zip(&d.train_y) {
            assert_eq!(y[0], dot4(&d.w1, x).sin());
            assert_eq!(y[1], dot4(&d.w2, x).tanh());
        }
    }
}
