use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

impl Sampler {
    /// Fresh random stream for one generation, if the sampler needs one.
    pub fn rng(&self) -> Option<SeededRng> {
        match self {
            Sampler::Greedy => None,
            Sampler::Temperature { seed, .. } => Some(SeededRng::new(*seed)),
        }
    }

    /// Picks a token from one row of logits. Greedy ties go to the lowest id.
    pub fn sample(&self, logits: &[f32], rng: Option<&mut SeededRng>) -> u32 {
        match (self, rng) {
            (Sampler::Temperature { temperature, .. }, Some(rng)) if *temperature > 0.0 => {
                let max = logits
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                let weights: Vec<f64> = logits
                    .iter()
                    .map(|&v| ((v as f64 - max) / temperature).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.uniform() * total;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return i as u32;
                    }
                    u -= w;
                }
                (weights.len() - 1) as u32
            }
            _ => argmax(logits),
        }
    }
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_prefers_lowest_index_on_ties() {
        assert_eq!(Sampler::Greedy.sample(&[1.0, 3.0, 3.0, 2.0], None), 1);
    }

    #[test]
    fn temperature_sampling_is_seeded() {
        let s = Sampler::Temperature {
            temperature: 1.0,
            seed: 3,
        };
        let logits = [0.1f32, 0.5, 0.2, 0.9];
        let draw = |s: &Sampler| {
            let mut rng = s.rng();
            (0..32)
                .map(|_| s.sample(&logits, rng.as_mut()))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(&s), draw(&s));
        assert!(draw(&s).iter().any(|&t| t != 3));
    }
}
