use serde::{Deserialize, Serialize};

use super::LoopError;

/// Coefficients of an explicit Runge-Kutta method: strictly lower-triangular
/// stage matrix `a` and output weights `b`.
///
/// In JSON a tableau is either a name (`"euler"`, `"midpoint"`, `"heun"`,
/// `"rk4"`) or an explicit `{"a": [[..]], "b": [..]}` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableauRepr", into = "TableauRepr")]
pub struct ButcherTableau {
    name: Option<String>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TableauRepr {
    Named(String),
    Explicit(ExplicitRepr),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplicitRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl TryFrom<TableauRepr> for ButcherTableau {
    type Error = LoopError;

    fn try_from(r: TableauRepr) -> Result<Self, LoopError> {
        match r {
            TableauRepr::Named(n) => Self::named(&n),
            TableauRepr::Explicit(ExplicitRepr { a, b }) => Self::new(a, b),
        }
    }
}

impl From<ButcherTableau> for TableauRepr {
    fn from(t: ButcherTableau) -> Self {
        match t.name {
            Some(n) if n != "anchored" => TableauRepr::Named(n),
            _ => TableauRepr::Explicit(ExplicitRepr { a: t.a, b: t.b }),
        }
    }
}

impl ButcherTableau {
    /// Validates squareness and explicitness (`a[i][j] == 0` for `j >= i`).
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self, LoopError> {
        let s = b.len();
        if s == 0 || a.len() != s || a.iter().any(|row| row.len() != s) {
            return Err(LoopError::InvalidStrategy(format!(
                "tableau must be s x s with s = len(b) = {s} >= 1"
            )));
        }
        for (i, row) in a.iter().enumerate() {
            if row[i..].iter().any(|&v| v != 0.0) {
                return Err(LoopError::NonExplicitTableau { stage: i });
            }
        }
        if a.iter().flatten().chain(&b).any(|v| !v.is_finite()) {
            return Err(LoopError::InvalidStrategy(
                "non-finite tableau entry".into(),
            ));
        }
        Ok(Self { name: None, a, b })
    }

    fn with_name(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn named(name: &str) -> Result<Self, LoopError> {
        match name {
            "euler" => Ok(Self::euler()),
            "midpoint" => Ok(Self::midpoint()),
            "heun" => Ok(Self::heun()),
            "rk4" => Ok(Self::rk4()),
            other => Err(LoopError::InvalidStrategy(format!(
                "unknown tableau {other:?}"
            ))),
        }
    }

    pub fn euler() -> Self {
        Self::new(vec![vec![0.0]], vec![1.0])
            .unwrap()
            .with_name("euler")
    }

    pub fn midpoint() -> Self {
        Self::new(vec![vec![0.0, 0.0], vec![0.5, 0.0]], vec![0.0, 1.0])
            .unwrap()
            .with_name("midpoint")
    }

    pub fn heun() -> Self {
        Self::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.5, 0.5])
            .unwrap()
            .with_name("heun")
    }

    pub fn rk4() -> Self {
        Self::new(
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        )
        .unwrap()
        .with_name("rk4")
    }

    /// `K`-stage tableau whose single `h = 1` step equals
    /// `beta * g(x0) + (1 - beta) * (K damped Euler substeps)`:
    /// `a[i][j] = 1/K` for `j < i`, `b[0] = beta + (1-beta)/K`,
    /// `b[i] = (1-beta)/K` otherwise.
    pub fn anchored(k: usize, beta: f64) -> Result<Self, LoopError> {
        if k == 0 || !(0.0..=1.0).contains(&beta) {
            return Err(LoopError::InvalidStrategy(format!(
                "anchored tableau needs K >= 1 and beta in [0,1], got K={k} beta={beta}"
            )));
        }
        let inv = 1.0 / k as f64;
        let a = (0..k)
            .map(|i| (0..k).map(|j| if j < i { inv } else { 0.0 }).collect())
            .collect();
        let mut b = vec![(1.0 - beta) * inv; k];
        b[0] = beta + (1.0 - beta) * inv;
        Ok(Self::new(a, b)?.with_name("anchored"))
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchored_weights_k2_half() {
        let t = ButcherTableau::anchored(2, 0.5).unwrap();
        assert_eq!(t.weights(), &[0.75, 0.25]);
        assert_eq!(t.a(1, 0), 0.5);
    }

    #[test]
    fn anchored_weights_sum_to_one() {
        for k in 1..8 {
            for beta in [0.0, 0.25, 0.5, 1.0] {
                let t = ButcherTableau::anchored(k, beta).unwrap();
                let s: f64 = t.weights().iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(t.weights().iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn implicit_tableau_rejected() {
        let err = ButcherTableau::new(vec![vec![0.0, 0.5], vec![0.5, 0.0]], vec![0.5, 0.5]);
        assert!(matches!(
            err,
            Err(LoopError::NonExplicitTableau { stage: 0 })
        ));
    }

    #[test]
    fn json_forms() {
        let t: ButcherTableau = serde_json::from_str("\"heun\"").unwrap();
        assert_eq!(t, ButcherTableau::heun());
        let t: ButcherTableau = serde_json::from_str(r#"{"a":[[0]],"b":[1]}"#).unwrap();
        assert_eq!(t.weights(), &[1.0]);
        assert!(serde_json::from_str::<ButcherTableau>(r#"{"a":[[1]],"b":[1]}"#).is_err());
        assert_eq!(
            serde_json::to_string(&ButcherTableau::rk4()).unwrap(),
            "\"rk4\""
        );
    }
}
