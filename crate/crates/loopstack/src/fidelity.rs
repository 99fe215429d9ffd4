use std::fmt::Write as _;
use std::time::Instant;

use loopstack_core::loop_engine::{
    run_loop, ButcherTableau, IterationMode, LoopTrace, LoopWindow, Strategy,
};
use loopstack_core::model::{HiddenState, Model};
use loopstack_core::numerics::{is_deterministic, SeededRng};
use rayon::prelude::*;

use crate::config::FidelitySection;
use crate::HarnessError;

/// Any activation above this magnitude marks a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

pub const FIDELITY_HEADER: &str = "strategy,K,mode,mean_dev,p90_dev,fwd_passes,wall_ms";
pub const SWEEP_HEADER: &str =
    "strategy,K,mode,mean_dev,p90_dev,fwd_passes,wall_ms,window_a,window_b,diverged";

/// Seeded random prompts used to draw probe states.
pub fn probe_prompts(model: &Model, count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let vocab = model.config.vocab_size;
    let mut rng = SeededRng::new(seed).fork(0x9b0e);
    (0..count)
        .map(|_| (0..len).map(|_| rng.below(vocab) as u32).collect())
        .collect()
}

/// Activations entering the window at `a` for each prompt.
pub fn probe_states(
    model: &Model,
    a: usize,
    prompts: &[Vec<u32>],
) -> Result<Vec<HiddenState>, HarnessError> {
    prompts
        .iter()
        .map(|p| Ok(model.run_layers(0..a, model.embed(p)?, None)?))
        .collect()
}

/// Outcome of one run: the endpoint, or `None` if it blew up.
fn guarded_run(
    model: &Model,
    window: LoopWindow,
    mode: IterationMode,
    strategy: &Strategy,
    x: &HiddenState,
) -> Result<Option<HiddenState>, HarnessError> {
    let mut trace = LoopTrace::default();
    match run_loop(model, window, mode, strategy, x, Some(&mut trace)) {
        Ok(out) => {
            let blown = trace.max_activation > DIVERGENCE_THRESHOLD
                || !trace.max_activation.is_finite()
                || !out.is_finite()
                || out.max_abs() > DIVERGENCE_THRESHOLD;
            Ok((!blown).then_some(out))
        }
        Err(e) if e.is_divergence() => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Reference endpoints from RK4 with `substeps` uniform steps over `[0, 1]`.
/// A diverged reference is `None`.
pub fn reference_endpoints(
    model: &Model,
    window: LoopWindow,
    mode: IterationMode,
    probes: &[HiddenState],
    substeps: usize,
) -> Result<Vec<Option<HiddenState>>, HarnessError> {
    let rk4 = Strategy::rk_uniform(ButcherTableau::rk4(), substeps);
    probes
        .iter()
        .map(|x| guarded_run(model, window, mode, &rk4, x))
        .collect()
}

/// One (window, strategy, K, mode) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: String,
    pub k: usize,
    pub mode: IterationMode,
    pub window: LoopWindow,
    /// Per-probe deviation; infinite where the run or reference diverged.
    pub deviations: Vec<f64>,
    pub mean_dev: f64,
    pub p90_dev: f64,
    pub fwd_passes: usize,
    pub wall_ms: f64,
    pub diverged: bool,
}

impl Cell {
    fn fidelity_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            csv_field(&self.strategy),
            self.k,
            self.mode.as_str(),
            self.mean_dev,
            self.p90_dev,
            self.fwd_passes,
            self.wall_ms
        )
    }

    fn sweep_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.fidelity_row(),
            self.window.a,
            self.window.b,
            self.diverged
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Nearest-rank quantile; infinities sort last.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn evaluate_cell(
    model: &Model,
    window: LoopWindow,
    mode: IterationMode,
    strategy: &Strategy,
    probes: &[HiddenState],
    references: &[Option<HiddenState>],
) -> Result<Cell, HarnessError> {
    let start = Instant::now();
    let mut deviations = Vec::with_capacity(probes.len());
    for (x, reference) in probes.iter().zip(references) {
        let dev = match (guarded_run(model, window, mode, strategy, x)?, reference) {
            (Some(out), Some(r)) => out.distance(r),
            _ => f64::INFINITY,
        };
        deviations.push(dev);
    }
    let wall_ms = if is_deterministic() {
        0.0
    } else {
        start.elapsed().as_secs_f64() * 1e3
    };
    let diverged = deviations.iter().any(|d| !d.is_finite());
    let mean_dev = if deviations.is_empty() {
        f64::NAN
    } else {
        deviations.iter().sum::<f64>() / deviations.len() as f64
    };
    Ok(Cell {
        strategy: strategy.label(),
        k: strategy.k(),
        mode,
        window,
        p90_dev: quantile(&deviations, 0.9),
        mean_dev,
        deviations,
        fwd_passes: strategy.forward_passes(),
        wall_ms,
        diverged,
    })
}

/// Every template at every `K` (or as given when `ks` is empty).
pub fn expand_strategies(
    templates: &[Strategy],
    ks: &[usize],
) -> Result<Vec<Strategy>, HarnessError> {
    let mut out = Vec::new();
    for t in templates {
        if ks.is_empty() {
            t.validate()?;
            out.push(t.clone());
        } else {
            for &k in ks {
                out.push(t.with_k(k)?);
            }
        }
    }
    Ok(out)
}

/// Worker pool sized by `LOOPSTACK_THREADS`, else the hardware default.
pub fn worker_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let threads = match std::env::var("LOOPSTACK_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            HarnessError::Config(format!("LOOPSTACK_THREADS = {v:?} is not a count"))
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FidelityReport {
    pub cells: Vec<Cell>,
    /// Probes whose reference integration diverged, per mode.
    pub diverged_references: usize,
}

impl FidelityReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{FIDELITY_HEADER}\n");
        for c in &self.cells {
            writeln!(s, "{}", c.fidelity_row()).unwrap();
        }
        s
    }

    /// Long-form per-probe deviations.
    pub fn probes_csv(&self) -> String {
        let mut s = "strategy,K,mode,probe,dev\n".to_string();
        for c in &self.cells {
            for (i, d) in c.deviations.iter().enumerate() {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    csv_field(&c.strategy),
                    c.k,
                    c.mode.as_str(),
                    i,
                    d
                )
                .unwrap();
            }
        }
        s
    }

    pub fn find(&self, label: &str, k: usize, mode: IterationMode) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.strategy == label && c.k == k && c.mode == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub cells: Vec<Cell>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for c in &self.cells {
            writeln!(s, "{}", c.sweep_row()).unwrap();
        }
        s
    }
}

struct Job<'a> {
    window: LoopWindow,
    mode: IterationMode,
    strategy: Strategy,
    probes: &'a [HiddenState],
    references: &'a [Option<HiddenState>],
}

fn run_jobs(model: &Model, jobs: &[Job<'_>]) -> Result<Vec<Cell>, HarnessError> {
    let run =
        |j: &Job<'_>| evaluate_cell(model, j.window, j.mode, &j.strategy, j.probes, j.references);
    worker_pool()?.install(|| jobs.par_iter().map(run).collect())
}

/// Deviation of every configured strategy from the RK4 reference endpoint
/// at the given window.
pub fn cmd_fidelity(
    model: &Model,
    window: LoopWindow,
    section: &FidelitySection,
    seed: u64,
) -> Result<FidelityReport, HarnessError> {
    sweep_windows(model, &[window], section, seed).map(|(cells, diverged_references)| {
        FidelityReport {
            cells,
            diverged_references,
        }
    })
}

/// The full window x strategy x K x mode grid.
pub fn cmd_sweep(
    model: &Model,
    windows: &[LoopWindow],
    section: &FidelitySection,
    seed: u64,
) -> Result<SweepReport, HarnessError> {
    Ok(SweepReport {
        cells: sweep_windows(model, windows, section, seed)?.0,
    })
}

fn sweep_windows(
    model: &Model,
    windows: &[LoopWindow],
    section: &FidelitySection,
    seed: u64,
) -> Result<(Vec<Cell>, usize), HarnessError> {
    let strategies = expand_strategies(&section.strategies, &section.ks)?;
    if strategies.is_empty() {
        return Ok((Vec::new(), 0));
    }
    if section.probes == 0 || section.prompt_len == 0 || section.reference_substeps == 0 {
        return Err(HarnessError::Config(
            "probes, prompt_len and reference_substeps must be positive".into(),
        ));
    }
    let prompts = probe_prompts(model, section.probes, section.prompt_len, seed);
    let mut bundles = Vec::new();
    let mut diverged_references = 0;
    for &window in windows {
        window.validate(model.n_layers())?;
        let probes = probe_states(model, window.a, &prompts)?;
        for &mode in &section.modes {
            let refs =
                reference_endpoints(model, window, mode, &probes, section.reference_substeps)?;
            diverged_references += refs.iter().filter(|r| r.is_none()).count();
            bundles.push((window, mode, probes.clone(), refs));
        }
    }
    let mut jobs = Vec::new();
    for (window, mode, probes, refs) in &bundles {
        for s in &strategies {
            jobs.push(Job {
                window: *window,
                mode: *mode,
                strategy: s.clone(),
                probes,
                references: refs,
            });
        }
    }
    // rows are grouped window, strategy, K, mode
    let order = |j: &Job<'_>| {
        let wi = windows.iter().position(|w| *w == j.window).unwrap();
        let si = strategies.iter().position(|s| *s == j.strategy).unwrap();
        let mi = section.modes.iter().position(|m| *m == j.mode).unwrap();
        (wi, si, mi)
    };
    jobs.sort_by_key(order);
    Ok((run_jobs(model, &jobs)?, diverged_references))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_quantile() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.9), 9.0);
        assert_eq!(quantile(&v, 1.0), 10.0);
        assert_eq!(quantile(&[3.0, f64::INFINITY], 0.9), f64::INFINITY);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn expansion_applies_every_k() {
        let s =
            expand_strategies(&[Strategy::euler(1), Strategy::Naive { k: 1 }], &[2, 4]).unwrap();
        assert_eq!(
            s,
            vec![
                Strategy::euler(2),
                Strategy::euler(4),
                Strategy::Naive { k: 2 },
                Strategy::Naive { k: 4 }
            ]
        );
        assert!(expand_strategies(&[Strategy::Aitken { k: 2 }], &[3]).is_err());
    }

    #[test]
    fn labels_with_commas_are_quoted() {
        assert_eq!(
            csv_field("heavy_ball(alpha=0.5,beta=0.1)"),
            "\"heavy_ball(alpha=0.5,beta=0.1)\""
        );
        assert_eq!(csv_field("euler"), "euler");
    }
}
