//! Benchmark harness for looped-window inference: fidelity against an RK4
//! reference, strategy sweeps, decode demos, cache audits and the toy lab.

pub mod config;
pub mod decode_cmd;
mod error;
pub mod fidelity;
pub mod toy_cmd;

use std::path::{Path, PathBuf};

use loopstack_core::loop_engine::{
    default_window, LoopWindow, DEFAULT_DEPTH_FRACTION, DEFAULT_WINDOW_WIDTH,
};
use loopstack_core::model::{save_weights, Model};
use loopstack_core::numerics::set_deterministic;
use loopstack_core::toy::{ToyConfig, DEFAULT_SEED};

pub use config::{RunConfig, Task};
pub use error::HarnessError;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

/// Files written and log lines produced by a run.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub log: Vec<String>,
}

struct Output {
    dir: PathBuf,
    outcome: RunOutcome,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        Ok(Self {
            dir,
            outcome: RunOutcome::default(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| HarnessError::io(&path, e))?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn log(&mut self, line: impl Into<String>) {
        self.outcome.log.push(line.into());
    }
}

fn output_dir(cfg: &RunConfig, opts: &RunOptions) -> PathBuf {
    match (&opts.out, &cfg.output.dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => cfg.resolve_path(d),
        (None, None) => PathBuf::from("out"),
    }
}

/// The loop section's window, or the default-depth window.
fn base_window(cfg: &RunConfig, model: &Model) -> Result<LoopWindow, HarnessError> {
    match &cfg.loop_section {
        Some(_) => Ok(cfg.loop_config(model.n_layers())?.window),
        None => Ok(default_window(
            model.n_layers(),
            DEFAULT_WINDOW_WIDTH,
            DEFAULT_DEPTH_FRACTION,
        )?),
    }
}

/// Loads a config file and runs `task` on it.
pub fn run_file(task: Task, path: &Path, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    let cfg = RunConfig::load(path)?;
    run(task, cfg, opts)
}

pub fn run(task: Task, mut cfg: RunConfig, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    cfg.check_task(task)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    set_deterministic(opts.deterministic || cfg.deterministic);
    let seed = cfg.seed;
    let mut out = Output::new(output_dir(&cfg, opts))?;

    match task {
        Task::MakeModel => {
            if !matches!(cfg.model, Some(config::ModelSource::Synthetic { .. })) {
                return Err(HarnessError::Config(
                    "make-model needs a `synthetic` model source".into(),
                ));
            }
            let model = cfg.model()?;
            let path = out.dir.join("model.tflt");
            save_weights(&model, &path)?;
            out.outcome.files.push(path.clone());
            out.log(format!(
                "wrote {} ({} layers, d_model {})",
                path.display(),
                model.n_layers(),
                model.d_model()
            ));
        }
        Task::Fidelity => {
            let model = cfg.model()?;
            let section = RunConfig::require(&cfg.fidelity, "fidelity")?;
            let window = base_window(&cfg, &model)?;
            let report = fidelity::cmd_fidelity(&model, window, section, seed)?;
            out.log(format!(
                "fidelity: distance to a {}-substep RK4 endpoint of the window field on [{}, {}] \
                 (a desk-scale proxy for task quality)",
                section.reference_substeps, window.a, window.b
            ));
            if report.diverged_references > 0 {
                out.log(format!(
                    "warning: {} reference integrations diverged; affected cells report inf",
                    report.diverged_references
                ));
            }
            out.write("fidelity.csv", report.to_csv())?;
            out.write("fidelity_probes.csv", report.probes_csv())?;
        }
        Task::Sweep => {
            let model = cfg.model()?;
            let section = RunConfig::require(&cfg.sweep, "sweep")?;
            let windows = if section.windows.is_empty() {
                vec![base_window(&cfg, &model)?]
            } else {
                section.windows.clone()
            };
            let report = fidelity::cmd_sweep(&model, &windows, &section.grid(), seed)?;
            let diverged = report.cells.iter().filter(|c| c.diverged).count();
            out.log(format!(
                "sweep: {} cells, {} diverged",
                report.cells.len(),
                diverged
            ));
            out.write("sweep.csv", report.to_csv())?;
        }
        Task::Gen => {
            let model = cfg.model()?;
            let lc = cfg.loop_config(model.n_layers())?;
            let default = config::GenSection::default();
            let section = cfg.gen.as_ref().unwrap_or(&default);
            let report = decode_cmd::cmd_gen(&model, &lc, section, seed)?;
            out.log(format!(
                "gen: {} prompt tokens, {} generated",
                report.prompt.len(),
                report.steps.len()
            ));
            out.write("tokens.txt", report.tokens_text())?;
            out.write("gen.csv", report.to_csv())?;
        }
        Task::CacheAudit => {
            let model = cfg.model()?;
            let lc = cfg.loop_config(model.n_layers())?;
            let default = config::AuditSection::default();
            let section = cfg.audit.as_ref().unwrap_or(&default);
            let log = decode_cmd::cmd_cache_audit(&model, &lc, section, seed)?;
            let mut text = log.join("\n");
            text.push('\n');
            out.write("audit.log", text)?;
            out.outcome.log.extend(log);
        }
        Task::Toy => {
            let default = config::ToySection {
                lab: ToyConfig::default(),
                seed: None,
                bounds: None,
            };
            let section = cfg.toy.as_ref().unwrap_or(&default);
            let toy_seed = section.seed.or(opts.seed).unwrap_or(DEFAULT_SEED);
            let report = toy_cmd::cmd_toy(&section.lab, toy_seed, section.bounds)?;
            out.log(format!("toy: seed {toy_seed}"));
            out.outcome
                .log
                .extend(report.checks_text().lines().map(str::to_string));
            out.write("toy_mse.csv", report.mse_csv())?;
            out.write("toy_checks.txt", report.checks_text())?;
            out.write("toy_train_loss.csv", report.loss_csv())?;
            out.write("toy_grid.csv", report.grid_csv()?)?;
            out.write("toy_scatter.csv", report.scatter_csv()?)?;
        }
    }
    Ok(out.outcome)
}
