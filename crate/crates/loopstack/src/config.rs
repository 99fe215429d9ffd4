use std::path::{Path, PathBuf};

use loopstack_core::decode::{CacheStrategy, DecodeMode, Sampler};
use loopstack_core::loop_engine::{
    default_window, IterationMode, LoopConfig, LoopWindow, Strategy, DEFAULT_DEPTH_FRACTION,
    DEFAULT_WINDOW_WIDTH,
};
use loopstack_core::model::{load_weights, Model, ModelConfig};
use loopstack_core::toy::ToyConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Fidelity,
    Sweep,
    Toy,
    Gen,
    CacheAudit,
    MakeModel,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Fidelity => "fidelity",
            Task::Sweep => "sweep",
            Task::Toy => "toy",
            Task::Gen => "gen",
            Task::CacheAudit => "cache-audit",
            Task::MakeModel => "make-model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// A weight file, relative to the config file.
    Path(PathBuf),
    Synthetic {
        config: ModelConfig,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    #[serde(default)]
    pub window: Option<LoopWindow>,
    #[serde(default)]
    pub depth_fraction: Option<f64>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub mode: IterationMode,
    pub strategy: Strategy,
    /// Overrides the strategy's own iteration count.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub cache_strategy: CacheStrategy,
    #[serde(default)]
    pub decode_mode: DecodeMode,
}

impl LoopSection {
    /// Resolves the window for a model of `n_layers` and applies `K`.
    pub fn resolve(&self, n_layers: usize) -> Result<LoopConfig, HarnessError> {
        let window = resolve_window(self.window, self.depth_fraction, self.width, n_layers)?;
        let strategy = match self.k {
            Some(k) => self.strategy.with_k(k)?,
            None => self.strategy.clone(),
        };
        let cfg = LoopConfig::new(window, self.mode, strategy)
            .with_cache_strategy(self.cache_strategy)
            .with_decode_mode(self.decode_mode);
        cfg.validate(n_layers)?;
        Ok(cfg)
    }
}

fn resolve_window(
    window: Option<LoopWindow>,
    fraction: Option<f64>,
    width: Option<usize>,
    n_layers: usize,
) -> Result<LoopWindow, HarnessError> {
    let w = match (window, fraction.or(width.map(|_| DEFAULT_DEPTH_FRACTION))) {
        (Some(_), Some(_)) => {
            return Err(HarnessError::Config(
                "give either `window` or `depth_fraction`/`width`, not both".into(),
            ))
        }
        (Some(w), None) => w,
        (None, f) => default_window(
            n_layers,
            width.unwrap_or(DEFAULT_WINDOW_WIDTH),
            f.unwrap_or(DEFAULT_DEPTH_FRACTION),
        )?,
    };
    w.validate(n_layers)?;
    Ok(w)
}

fn default_probes() -> usize {
    16
}

fn default_prompt_len() -> usize {
    8
}

fn default_reference_substeps() -> usize {
    64
}

fn default_modes() -> Vec<IterationMode> {
    vec![IterationMode::Block]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelitySection {
    /// Strategy templates; each is run at every entry of `ks`.
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<IterationMode>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_reference_substeps")]
    pub reference_substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<IterationMode>,
    /// Windows to sweep; empty means the loop section's window.
    #[serde(default)]
    pub windows: Vec<LoopWindow>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_reference_substeps")]
    pub reference_substeps: usize,
}

impl SweepSection {
    /// The strategy/K/mode part of the grid.
    pub fn grid(&self) -> FidelitySection {
        FidelitySection {
            strategies: self.strategies.clone(),
            ks: self.ks.clone(),
            modes: self.modes.clone(),
            probes: self.probes,
            prompt_len: self.prompt_len,
            reference_substeps: self.reference_substeps,
        }
    }
}

fn default_max_new() -> usize {
    16
}

fn default_audit_max_new() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// Prompt token ids; a seeded random prompt of `prompt_len` when empty.
    #[serde(default)]
    pub prompt: Vec<u32>,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default = "greedy")]
    pub sampler: Sampler,
}

fn greedy() -> Sampler {
    Sampler::Greedy
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            prompt: Vec::new(),
            prompt_len: default_prompt_len(),
            max_new: default_max_new(),
            sampler: Sampler::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default)]
    pub prompt: Vec<u32>,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_audit_max_new")]
    pub max_new: usize,
    /// Test hook: turn cache crops into no-ops so the audit must fail.
    #[serde(default)]
    pub disable_crop: bool,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            prompt: Vec::new(),
            prompt_len: default_prompt_len(),
            max_new: default_audit_max_new(),
            disable_crop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySection {
    #[serde(default)]
    pub lab: ToyConfig,
    /// Lab seed; the run seed when absent and given on the command line.
    #[serde(default)]
    pub seed: Option<u64>,
    /// `[z1_min, z1_max, z2_min, z2_max]`; derived from the scatters if absent.
    #[serde(default)]
    pub bounds: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// One JSON document describing a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub model: Option<ModelSource>,
    #[serde(rename = "loop", default)]
    pub loop_section: Option<LoopSection>,
    #[serde(default)]
    pub fidelity: Option<FidelitySection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub gen: Option<GenSection>,
    #[serde(default)]
    pub audit: Option<AuditSection>,
    #[serde(default)]
    pub toy: Option<ToySection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn check_task(&self, task: Task) -> Result<(), HarnessError> {
        match self.task {
            Some(t) if t != task => Err(HarnessError::Config(format!(
                "config is for task `{}` but `{}` was requested",
                t.as_str(),
                task.as_str()
            ))),
            _ => Ok(()),
        }
    }

    pub fn model(&self) -> Result<Model, HarnessError> {
        match &self.model {
            None => Err(HarnessError::Config("missing `model` section".into())),
            Some(ModelSource::Path(p)) => Ok(load_weights(self.resolve_path(p))?),
            Some(ModelSource::Synthetic { config, seed }) => {
                Ok(Model::random(config, seed.unwrap_or(self.seed))?)
            }
        }
    }

    pub fn loop_config(&self, n_layers: usize) -> Result<LoopConfig, HarnessError> {
        self.loop_section
            .as_ref()
            .ok_or_else(|| HarnessError::Config("missing `loop` section".into()))?
            .resolve(n_layers)
    }

    pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, HarnessError> {
        section
            .as_ref()
            .ok_or_else(|| HarnessError::Config(format!("missing `{name}` section")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "model": {"synthetic": {"config": {"n_layers": 8, "d_model": 16, "n_heads": 2,
            "head_dim": 8, "ffn_hidden": 32, "vocab_size": 32}, "seed": 3}},
        "loop": {"strategy": {"kind": "euler", "k": 2}, "k": 4}
    }"#;

    #[test]
    fn defaults_fill_the_loop_section() {
        let cfg = RunConfig::from_json(BASE).unwrap();
        let model = cfg.model().unwrap();
        let lc = cfg.loop_config(model.n_layers()).unwrap();
        assert_eq!(lc.window, LoopWindow::new(3, 6));
        assert_eq!(lc.strategy, Strategy::euler(4));
        assert_eq!(lc.cache_strategy, CacheStrategy::Last);
        assert_eq!(lc.decode_mode, DecodeMode::Full);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = BASE.replacen("\"loop\"", "\"extra\": 1, \"loop\"", 1);
        assert!(matches!(
            RunConfig::from_json(&bad),
            Err(HarnessError::Config(_))
        ));
        let bad = BASE.replace("\"k\": 4", "\"k\": 4, \"alpha\": 0.3");
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn window_and_fraction_are_exclusive() {
        let s = LoopSection {
            window: Some(LoopWindow::new(1, 2)),
            depth_fraction: Some(0.5),
            width: None,
            mode: IterationMode::Block,
            strategy: Strategy::euler(2),
            k: None,
            cache_strategy: CacheStrategy::Last,
            decode_mode: DecodeMode::Full,
        };
        assert!(matches!(s.resolve(8), Err(HarnessError::Config(_))));
        let s = LoopSection {
            window: None,
            depth_fraction: Some(0.5),
            width: Some(4),
            ..s
        };
        assert_eq!(s.resolve(28).unwrap().window, LoopWindow::new(12, 15));
    }

    #[test]
    fn invalid_strategies_are_config_errors() {
        let bad = BASE.replace(
            r#"{"kind": "euler", "k": 2}, "k": 4"#,
            r#"{"kind": "aitken", "k": 3}"#,
        );
        let cfg = RunConfig::from_json(&bad).unwrap();
        let err = cfg.loop_config(8).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn task_mismatch_is_reported() {
        let cfg = RunConfig::from_json(&BASE.replacen('{', r#"{"task": "gen","#, 1)).unwrap();
        assert!(cfg.check_task(Task::Gen).is_ok());
        assert!(cfg.check_task(Task::Sweep).is_err());
    }
}
