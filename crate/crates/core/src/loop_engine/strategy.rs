use serde::{Deserialize, Serialize};

use super::{ButcherTableau, LoopError};

/// How `g^(K)` advances the state. `k` counts iterations of the update
/// rule; see [`Strategy::forward_passes`] for the cost of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// `x <- g(x)`, `k` times.
    Naive {
        k: usize,
    },
    /// Damped Euler `x <- x + alpha (g(x) - x)`; `alpha` defaults to `1/k`.
    Euler {
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    /// Damped Euler with a per-iteration step schedule.
    EulerSched {
        alphas: Vec<f64>,
    },
    /// `steps` explicit RK steps of size `h`.
    RkGeneric {
        tableau: ButcherTableau,
        h: f64,
        steps: usize,
    },
    /// `beta g(x0) + (1 - beta) F^k(x0)` with `F(x) = x + (g(x) - x)/k`.
    RkAnchored {
        k: usize,
        beta: f64,
    },
    HeavyBall {
        k: usize,
        alpha: f64,
        beta: f64,
    },
    Anderson {
        k: usize,
        m: usize,
        beta: f64,
    },
    /// Safeguarded per-coordinate Aitken delta-squared; `k` must be even.
    Aitken {
        k: usize,
    },
    /// `x_{k+1} = g(mean(x_0..=x_k))`.
    UniformLoop {
        k: usize,
    },
    /// Damped Euler followed by rescaling every token row to its
    /// pre-loop L2 norm.
    NormStab {
        k: usize,
        alpha: f64,
    },
    /// `sum_i w_i x_i` over the naive iterates `x_0..=x_k`.
    PolyBlend {
        k: usize,
        weights: Vec<f64>,
    },
}

impl Strategy {
    /// Explicit RK with `k` steps of size `1/k` over `[0, 1]`.
    pub fn rk_uniform(tableau: ButcherTableau, k: usize) -> Self {
        Strategy::RkGeneric {
            tableau,
            h: 1.0 / k.max(1) as f64,
            steps: k,
        }
    }

    pub fn euler(k: usize) -> Self {
        Strategy::Euler { k, alpha: None }
    }

    /// Iteration count `K` (for RK: the step count).
    pub fn k(&self) -> usize {
        match self {
            Strategy::Naive { k }
            | Strategy::Euler { k, .. }
            | Strategy::RkAnchored { k, .. }
            | Strategy::HeavyBall { k, .. }
            | Strategy::Anderson { k, .. }
            | Strategy::Aitken { k }
            | Strategy::UniformLoop { k }
            | Strategy::NormStab { k, .. }
            | Strategy::PolyBlend { k, .. } => *k,
            Strategy::EulerSched { alphas } => alphas.len(),
            Strategy::RkGeneric { steps, .. } => *steps,
        }
    }

    /// Same strategy family at a different `K`. Fails for strategies whose
    /// parameters are tied to `K` (schedules, blend weights).
    pub fn with_k(&self, k: usize) -> Result<Self, LoopError> {
        let mut s = self.clone();
        match &mut s {
            Strategy::Naive { k: kk }
            | Strategy::Euler { k: kk, .. }
            | Strategy::RkAnchored { k: kk, .. }
            | Strategy::HeavyBall { k: kk, .. }
            | Strategy::Anderson { k: kk, .. }
            | Strategy::Aitken { k: kk }
            | Strategy::UniformLoop { k: kk }
            | Strategy::NormStab { k: kk, .. } => *kk = k,
            Strategy::RkGeneric { h, steps, .. } => {
                *h = 1.0 / k.max(1) as f64;
                *steps = k;
            }
            Strategy::EulerSched { .. } | Strategy::PolyBlend { .. } => {
                if k != self.k() {
                    return Err(LoopError::InvalidStrategy(format!(
                        "{} has K fixed by its parameters",
                        self.label()
                    )));
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Evaluations of `g` one application costs.
    pub fn forward_passes(&self) -> usize {
        match self {
            Strategy::RkGeneric { tableau, steps, .. } => tableau.stages() * steps,
            other => other.k(),
        }
    }

    /// Short human-readable name used in reports.
    pub fn label(&self) -> String {
        match self {
            Strategy::Naive { .. } => "naive".into(),
            Strategy::Euler { alpha: None, .. } => "euler".into(),
            Strategy::Euler { alpha: Some(a), .. } => format!("euler(alpha={a})"),
            Strategy::EulerSched { alphas } => format!("euler_sched({})", join(alphas)),
            Strategy::RkGeneric { tableau, .. } => tableau.name().unwrap_or("rk").to_string(),
            Strategy::RkAnchored { beta, .. } => format!("rk_anchored(beta={beta})"),
            Strategy::HeavyBall { alpha, beta, .. } => {
                format!("heavy_ball(alpha={alpha},beta={beta})")
            }
            Strategy::Anderson { m, beta, .. } => format!("anderson(m={m},beta={beta})"),
            Strategy::Aitken { .. } => "aitken".into(),
            Strategy::UniformLoop { .. } => "uniform_loop".into(),
            Strategy::NormStab { alpha, .. } => format!("norm_stab(alpha={alpha})"),
            Strategy::PolyBlend { weights, .. } => format!("poly_blend({})", join(weights)),
        }
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::InvalidStrategy(m));
        if self.k() == 0 {
            return bad(format!("{}: K must be >= 1", self.label()));
        }
        match self {
            Strategy::Euler { alpha: Some(a), .. } if !a.is_finite() => {
                bad("euler alpha must be finite".into())
            }
            Strategy::EulerSched { alphas } if alphas.iter().any(|a| !a.is_finite()) => {
                bad("euler_sched alphas must be finite".into())
            }
            Strategy::RkGeneric { h, .. } if !(*h > 0.0 && h.is_finite()) => {
                bad(format!("rk step size h = {h} must be positive"))
            }
            Strategy::RkAnchored { beta, .. } if !(0.0..=1.0).contains(beta) => {
                bad(format!("rk_anchored beta = {beta} outside [0, 1]"))
            }
            Strategy::HeavyBall { alpha, beta, .. } if !(alpha.is_finite() && beta.is_finite()) => {
                bad("heavy_ball parameters must be finite".into())
            }
            Strategy::Anderson { beta, .. } if !beta.is_finite() => {
                bad("anderson beta must be finite".into())
            }
            Strategy::Aitken { k } if k % 2 != 0 => Err(LoopError::AitkenOddK(*k)),
            Strategy::NormStab { alpha, .. } if !alpha.is_finite() => {
                bad("norm_stab alpha must be finite".into())
            }
            Strategy::PolyBlend { k, weights } => {
                if weights.len() != k + 1 {
                    return bad(format!(
                        "poly_blend needs K+1 = {} weights, got {}",
                        k + 1,
                        weights.len()
                    ));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return bad(format!("poly_blend weights sum to {sum}, not 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants() {
        assert!(Strategy::Naive { k: 0 }.validate().is_err());
        assert!(matches!(
            Strategy::Aitken { k: 3 }.validate(),
            Err(LoopError::AitkenOddK(3))
        ));
        assert!(Strategy::RkAnchored { k: 2, beta: 1.5 }.validate().is_err());
        assert!(Strategy::PolyBlend {
            k: 2,
            weights: vec![0.5, 0.5]
        }
        .validate()
        .is_err());
        assert!(Strategy::PolyBlend {
            k: 2,
            weights: vec![0.4, 0.2, 0.5]
        }
        .validate()
        .is_err());
        assert!(Strategy::PolyBlend {
            k: 2,
            weights: vec![0.4, 0.2, 0.4]
        }
        .validate()
        .is_ok());
        assert!(Strategy::EulerSched { alphas: vec![] }.validate().is_err());
    }

    #[test]
    fn pass_counts() {
        assert_eq!(Strategy::euler(3).forward_passes(), 3);
        assert_eq!(
            Strategy::rk_uniform(ButcherTableau::heun(), 3).forward_passes(),
            6
        );
        assert_eq!(
            Strategy::rk_uniform(ButcherTableau::rk4(), 2).forward_passes(),
            8
        );
        assert_eq!(
            Strategy::EulerSched {
                alphas: vec![0.6, 0.4]
            }
            .forward_passes(),
            2
        );
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"kind":"anderson","k":8,"m":3,"beta":1.0}"#;
        let s: Strategy = serde_json::from_str(text).unwrap();
        assert_eq!(
            s,
            Strategy::Anderson {
                k: 8,
                m: 3,
                beta: 1.0
            }
        );
        let rk: Strategy =
            serde_json::from_str(r#"{"kind":"rk_generic","tableau":"rk4","h":0.5,"steps":2}"#)
                .unwrap();
        assert_eq!(rk.forward_passes(), 8);
        assert!(serde_json::from_str::<Strategy>(r#"{"kind":"naive","k":1,"x":2}"#).is_err());
    }

    #[test]
    fn with_k_rescales_rk() {
        let s = Strategy::rk_uniform(ButcherTableau::heun(), 1)
            .with_k(4)
            .unwrap();
        assert_eq!(s, Strategy::rk_uniform(ButcherTableau::heun(), 4));
        let sched = Strategy::EulerSched {
            alphas: vec![0.6, 0.4],
        };
        assert!(sched.with_k(3).is_err());
        assert!(sched.with_k(2).is_ok());
    }
}
