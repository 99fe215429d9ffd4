use std::fmt::Write as _;
use std::time::Instant;

use loopstack_core::decode::{audit_balance, decode_step, prefill_into, CacheStrategy, Sampler};
use loopstack_core::loop_engine::{LoopConfig, LoopError, LoopTrace};
use loopstack_core::model::Model;
use loopstack_core::numerics::is_deterministic;

use crate::config::{AuditSection, GenSection};
use crate::fidelity::probe_prompts;
use crate::HarnessError;

pub const GEN_HEADER: &str = "step,token,looped,extra_block_evals,wall_ms";

/// The configured prompt, or a seeded random one of `len` tokens.
pub fn resolve_prompt(model: &Model, prompt: &[u32], len: usize, seed: u64) -> Vec<u32> {
    if prompt.is_empty() {
        probe_prompts(model, 1, len, seed).remove(0)
    } else {
        prompt.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenStep {
    pub token: u32,
    pub looped: bool,
    /// Window layer applications beyond the single pass an unlooped step
    /// makes, including the cache-stash pass.
    pub extra_block_evals: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenReport {
    pub prompt: Vec<u32>,
    pub steps: Vec<GenStep>,
}

impl GenReport {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{GEN_HEADER}\n");
        for (i, st) in self.steps.iter().enumerate() {
            writeln!(
                s,
                "{i},{},{},{},{}",
                st.token, st.looped, st.extra_block_evals, st.wall_ms
            )
            .unwrap();
        }
        s
    }

    pub fn tokens_text(&self) -> String {
        let t: Vec<String> = self.tokens().iter().map(u32::to_string).collect();
        format!("{}\n", t.join(" "))
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    if is_deterministic() {
        0.0
    } else {
        start.elapsed().as_secs_f64() * 1e3
    }
}

/// Extra window layer calls of one decode step.
fn extra_evals(config: &LoopConfig, looped: bool, trace: &LoopTrace) -> usize {
    if !looped {
        return 0;
    }
    let stash = match config.cache_strategy {
        CacheStrategy::None => 0,
        _ => config.window.width(),
    };
    (trace.layer_calls + stash).saturating_sub(config.window.width())
}

/// Generation with per-step timing and evaluation counts.
pub fn cmd_gen(
    model: &Model,
    config: &LoopConfig,
    section: &GenSection,
    seed: u64,
) -> Result<GenReport, HarnessError> {
    let prompt = resolve_prompt(model, &section.prompt, section.prompt_len, seed);
    let mut report = GenReport {
        prompt: prompt.clone(),
        steps: Vec::with_capacity(section.max_new),
    };
    if section.max_new == 0 {
        return Ok(report);
    }
    let mut cache = model.new_cache();
    let logits = prefill_into(&prompt, model, config, &mut cache, None)?;
    let mut last = logits.row(logits.rows() - 1).to_vec();
    let mut rng = section.sampler.rng();
    for index in 0..section.max_new {
        let token = section.sampler.sample(&last, rng.as_mut());
        let looped = config.decode_mode.loops_at(index);
        let mut trace = LoopTrace::default();
        let start = Instant::now();
        let logits = decode_step(token, model, config, &mut cache, looped, Some(&mut trace))?;
        report.steps.push(GenStep {
            token,
            looped,
            extra_block_evals: extra_evals(config, looped, &trace),
            wall_ms: elapsed_ms(start),
        });
        last = logits.row(0).to_vec();
    }
    Ok(report)
}

fn expected_after_prefill(config: &LoopConfig, layer: usize, t: usize) -> usize {
    let in_window = config.window.layers().contains(&layer);
    if in_window && config.cache_strategy == CacheStrategy::None {
        0
    } else {
        t
    }
}

/// Instrumented generation checking that every loop body leaves the cache
/// where it found it and each step grows every written slot by one.
/// Returns the audit log; a violation is an [`HarnessError::Invariant`].
pub fn cmd_cache_audit(
    model: &Model,
    config: &LoopConfig,
    section: &AuditSection,
    seed: u64,
) -> Result<Vec<String>, HarnessError> {
    let prompt = resolve_prompt(model, &section.prompt, section.prompt_len, seed);
    let t = prompt.len();
    let mut log = vec![format!(
        "audit: window [{}, {}], mode {}, strategy {}, K {}, c={}, decode {}, prompt {} tokens",
        config.window.a,
        config.window.b,
        config.mode.as_str(),
        config.strategy.label(),
        config.strategy.k(),
        config.cache_strategy.as_str(),
        config.decode_mode,
        t
    )];
    let mut cache = model.new_cache();
    cache.enable_audit();
    cache.set_crop_disabled(section.disable_crop);
    let logits = prefill_into(&prompt, model, config, &mut cache, None).map_err(audit_error)?;
    cache.drain_events();
    let lengths = cache.lengths();
    for (layer, &len) in lengths.iter().enumerate() {
        let want = expected_after_prefill(config, layer, t);
        if len != want {
            return Err(HarnessError::Invariant(format!(
                "after prefill layer {layer} holds {len} entries, expected {want}"
            )));
        }
    }
    log.push(format!("prefill: OK, lengths {lengths:?}"));

    let mut last = logits.row(logits.rows() - 1).to_vec();
    let sampler = Sampler::Greedy;
    for index in 0..section.max_new {
        let token = sampler.sample(&last, None);
        let looped = config.decode_mode.loops_at(index);
        let before = cache.lengths();
        let logits =
            decode_step(token, model, config, &mut cache, looped, None).map_err(audit_error)?;
        let events = cache.drain_events();
        let after = cache.lengths();
        let mut skipped = 0;
        for layer in 0..model.n_layers() {
            let silent = looped
                && config.cache_strategy == CacheStrategy::None
                && config.window.layers().contains(&layer);
            let want = if silent { 0 } else { 1 };
            let net = audit_balance(before[layer], &events[layer]).map_err(|m| {
                HarnessError::Invariant(format!("step {index}, layer {layer}: {m}"))
            })?;
            let delta = after[layer] as isize - before[layer] as isize;
            if net != delta || delta != want {
                return Err(HarnessError::Invariant(format!(
                    "step {index}, layer {layer}: cache grew by {delta}, expected {want}"
                )));
            }
            skipped += usize::from(silent);
        }
        log.push(if skipped == 0 {
            format!("step {index}: OK, delta=1/layer/step")
        } else {
            format!(
                "step {index}: OK, delta=1/layer/step ({skipped} loop layers unwritten, c=none)"
            )
        });
        last = logits.row(0).to_vec();
    }
    log.push(format!("final lengths {:?}", cache.lengths()));
    Ok(log)
}

fn audit_error(e: LoopError) -> HarnessError {
    match e {
        LoopError::CacheProtocol { .. } => HarnessError::Invariant(format!("audit failed: {e}")),
        other => other.into(),
    }
}
