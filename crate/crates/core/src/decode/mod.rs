//! KV-cache-correct decoding under the loop wrapper.
//!
//! Loop-body evaluations never leave entries behind: during prefill they run
//! without a cache, during decode they read it and are cropped back to a
//! snapshot. A single stash pass then writes the canonical entries.

mod sample;

pub use sample::Sampler;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::loop_engine::{
    apply_strategy, IterationMode, LoopConfig, LoopError, LoopTrace, LoopWindow, WindowField,
};
use crate::model::{CacheEvent, HiddenState, KvCache, Model};
use crate::numerics::Matrix;

/// Which hidden state feeds the stash pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStrategy {
    First,
    #[default]
    Last,
    None,
}

impl CacheStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            CacheStrategy::First => "first",
            CacheStrategy::Last => "last",
            CacheStrategy::None => "none",
        }
    }
}

impl FromStr for CacheStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(CacheStrategy::First),
            "last" => Ok(CacheStrategy::Last),
            "none" => Ok(CacheStrategy::None),
            other => Err(format!("unknown cache strategy `{other}`")),
        }
    }
}

/// Whether incremental decode steps run the loop. Prefill always loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Bypass,
    #[default]
    Full,
    FirstN(usize),
}

impl DecodeMode {
    /// Whether the step that consumes generated token `index` loops.
    pub fn loops_at(&self, index: usize) -> bool {
        match *self {
            DecodeMode::Bypass => false,
            DecodeMode::Full => true,
            DecodeMode::FirstN(n) => index < n,
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Bypass => f.write_str("bypass"),
            DecodeMode::Full => f.write_str("full"),
            DecodeMode::FirstN(n) => write!(f, "first_n:{n}"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bypass" => Ok(DecodeMode::Bypass),
            "full" => Ok(DecodeMode::Full),
            _ => s
                .strip_prefix("first_n:")
                .and_then(|n| n.parse().ok())
                .map(DecodeMode::FirstN)
                .ok_or_else(|| format!("unknown decode mode `{s}`")),
        }
    }
}

/// Per-loop-layer cache lengths recorded before the loop body runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheSnapshot {
    pub window: LoopWindow,
    pub lengths: Vec<usize>,
}

impl CacheSnapshot {
    pub fn take(cache: &KvCache, window: LoopWindow) -> Self {
        Self {
            window,
            lengths: window.layers().map(|i| cache.len(i)).collect(),
        }
    }

    pub fn len(&self, layer: usize) -> usize {
        self.lengths[layer - self.window.a]
    }

    /// Crops every loop layer back to its recorded length.
    pub fn restore(&self, cache: &mut KvCache) -> Result<(), LoopError> {
        for (i, &len) in self.window.layers().zip(&self.lengths) {
            cache.crop(i, len)?;
        }
        Ok(())
    }
}

/// Prefill under the loop wrapper. Returns logits for every position and
/// a fresh cache holding the prompt.
pub fn prefill(
    tokens: &[u32],
    model: &Model,
    config: &LoopConfig,
) -> Result<(Matrix<f32>, KvCache), LoopError> {
    let mut cache = model.new_cache();
    let logits = prefill_into(tokens, model, config, &mut cache, None)?;
    Ok((logits, cache))
}

/// Like [`prefill`] but writes into a caller-supplied (normally empty and
/// possibly audited) cache.
pub fn prefill_into(
    tokens: &[u32],
    model: &Model,
    config: &LoopConfig,
    cache: &mut KvCache,
    trace: Option<&mut LoopTrace>,
) -> Result<Matrix<f32>, LoopError> {
    config.validate(model.n_layers())?;
    let x = model.embed(tokens)?;
    let x = looped_pass(model, config, config.mode, x, cache, false, trace)?;
    Ok(model.head(&x)?)
}

/// One block-mode decode step on the new token's embedded state; returns
/// the final hidden state.
pub fn decode_step_block(
    x: &HiddenState,
    model: &Model,
    config: &LoopConfig,
    cache: &mut KvCache,
) -> Result<HiddenState, LoopError> {
    config.validate(model.n_layers())?;
    looped_pass(
        model,
        config,
        IterationMode::Block,
        x.clone(),
        cache,
        true,
        None,
    )
}

/// One layer-mode decode step; MoE routing is pinned per layer.
pub fn decode_step_layer(
    x: &HiddenState,
    model: &Model,
    config: &LoopConfig,
    cache: &mut KvCache,
) -> Result<HiddenState, LoopError> {
    config.validate(model.n_layers())?;
    looped_pass(
        model,
        config,
        IterationMode::Layer,
        x.clone(),
        cache,
        true,
        None,
    )
}

/// One decode step for `token`, looping iff `looped`. Returns its logits.
pub fn decode_step(
    token: u32,
    model: &Model,
    config: &LoopConfig,
    cache: &mut KvCache,
    looped: bool,
    trace: Option<&mut LoopTrace>,
) -> Result<Matrix<f32>, LoopError> {
    let x = model.embed(&[token])?;
    let x = if looped {
        config.validate(model.n_layers())?;
        looped_pass(model, config, config.mode, x, cache, true, trace)?
    } else {
        model.run_layers(0..model.n_layers(), x, Some(cache))?
    };
    Ok(model.head(&x)?)
}

fn looped_pass(
    model: &Model,
    config: &LoopConfig,
    mode: IterationMode,
    x: HiddenState,
    cache: &mut KvCache,
    body_reads_cache: bool,
    trace: Option<&mut LoopTrace>,
) -> Result<HiddenState, LoopError> {
    let w = config.window;
    let mut local = LoopTrace::default();
    let trace = trace.unwrap_or(&mut local);
    let mut x = model.run_layers(0..w.a, x, Some(&mut *cache))?;
    let x_a = x.clone();
    match mode {
        IterationMode::Block => {
            {
                let field = WindowField::new(model, w)?.record_routing();
                let mut field = if body_reads_cache {
                    field.with_cache(cache)
                } else {
                    field
                };
                let out = apply_strategy(&x, &mut field, &config.strategy);
                trace.absorb(&mut field);
                trace.window_evaluations += field.evaluations();
                x = out?;
            }
            let stash = match config.cache_strategy {
                CacheStrategy::Last => Some(x.clone()),
                CacheStrategy::First => Some(x_a),
                CacheStrategy::None => None,
            };
            if let Some(z) = stash {
                model.run_layers(w.a..w.b + 1, z, Some(&mut *cache))?;
            }
        }
        IterationMode::Layer => {
            let mut calls = 0;
            for i in w.layers() {
                let layer_input = x.clone();
                {
                    let field = WindowField::new(model, LoopWindow::new(i, i))?
                        .pin_routing()
                        .record_routing();
                    let mut field = if body_reads_cache {
                        field.with_cache(cache)
                    } else {
                        field
                    };
                    let out = apply_strategy(&x, &mut field, &config.strategy);
                    calls += field.layer_calls();
                    trace.absorb(&mut field);
                    x = out?;
                }
                let stash = match config.cache_strategy {
                    CacheStrategy::Last => Some(x.clone()),
                    CacheStrategy::First => Some(layer_input),
                    CacheStrategy::None => None,
                };
                if let Some(z) = stash {
                    model.layer_forward(i, &z, Some(cache.slot_mut(i)), None)?;
                }
            }
            trace.window_evaluations += calls / w.width();
        }
    }
    Ok(model.run_layers(w.b + 1..model.n_layers(), x, Some(cache))?)
}

/// Everything observed during [`generate_traced`].
#[derive(Debug, Clone, Default)]
pub struct GenerationTrace {
    pub tokens: Vec<u32>,
    /// Whether each decode step ran the loop.
    pub looped: Vec<bool>,
    pub lengths_after_prefill: Vec<usize>,
    /// Cache lengths after each decode step.
    pub lengths: Vec<Vec<usize>>,
    pub loop_trace: LoopTrace,
}

/// Autoregressive generation of `max_new` tokens. Every generated token is
/// also fed back through the model, so a prompt of `T` tokens leaves
/// `T + max_new` entries per layer.
pub fn generate(
    tokens: &[u32],
    model: &Model,
    config: &LoopConfig,
    max_new: usize,
    sampler: &Sampler,
) -> Result<Vec<u32>, LoopError> {
    let mut cache = model.new_cache();
    Ok(generate_traced(tokens, model, config, max_new, sampler, &mut cache)?.tokens)
}

pub fn generate_traced(
    tokens: &[u32],
    model: &Model,
    config: &LoopConfig,
    max_new: usize,
    sampler: &Sampler,
    cache: &mut KvCache,
) -> Result<GenerationTrace, LoopError> {
    let mut trace = GenerationTrace::default();
    if max_new == 0 {
        return Ok(trace);
    }
    let mut rng = sampler.rng();
    let logits = prefill_into(tokens, model, config, cache, Some(&mut trace.loop_trace))?;
    trace.lengths_after_prefill = cache.lengths();
    let mut last = logits.row(logits.rows() - 1).to_vec();
    for index in 0..max_new {
        let token = sampler.sample(&last, rng.as_mut());
        trace.tokens.push(token);
        let looped = config.decode_mode.loops_at(index);
        let logits = decode_step(
            token,
            model,
            config,
            cache,
            looped,
            Some(&mut trace.loop_trace),
        )?;
        trace.looped.push(looped);
        trace.lengths.push(cache.lengths());
        last = logits.row(0).to_vec();
    }
    Ok(trace)
}

/// Replays one layer's audit log from `start` entries. Every crop must
/// return the slot to `start`; returns the net change in length.
pub fn audit_balance(start: usize, events: &[CacheEvent]) -> Result<isize, String> {
    let mut len = start;
    for (n, e) in events.iter().enumerate() {
        match *e {
            CacheEvent::Append { count } => len += count,
            CacheEvent::Crop { from, to } => {
                if from != len {
                    return Err(format!("event {n}: crop from {from} but slot held {len}"));
                }
                if to != start {
                    return Err(format!("event {n}: crop to {to}, snapshot was {start}"));
                }
                len = to;
            }
        }
    }
    Ok(len as isize - start as isize)
}
