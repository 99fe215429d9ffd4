use serde::{Deserialize, Serialize};

use super::{apply_strategy, Field, LoopError, Strategy};
use crate::decode::{CacheStrategy, DecodeMode};
use crate::model::{HiddenState, KvCache, Model, RoutingRecord};
use crate::numerics::{Matrix, Scalar};

/// Depth fraction at which [`default_window`] centers the window.
pub const DEFAULT_DEPTH_FRACTION: f64 = 0.525;
pub const DEFAULT_WINDOW_WIDTH: usize = 4;

/// Contiguous layer range `[a, b]`, both inclusive. Serialized as `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct LoopWindow {
    pub a: usize,
    pub b: usize,
}

impl From<(usize, usize)> for LoopWindow {
    fn from((a, b): (usize, usize)) -> Self {
        Self { a, b }
    }
}

impl From<LoopWindow> for (usize, usize) {
    fn from(w: LoopWindow) -> Self {
        (w.a, w.b)
    }
}

impl LoopWindow {
    pub fn new(a: usize, b: usize) -> Self {
        Self { a, b }
    }

    pub fn width(&self) -> usize {
        self.b + 1 - self.a
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), LoopError> {
        if self.a > self.b || self.b >= n_layers {
            return Err(LoopError::InvalidWindow {
                a: self.a,
                b: self.b,
                n_layers,
            });
        }
        Ok(())
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.a..=self.b
    }
}

/// Whether `g^(K)` iterates the whole window as one operator or each layer
/// `K` times before moving to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationMode {
    #[default]
    Block,
    Layer,
}

impl IterationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            IterationMode::Block => "block",
            IterationMode::Layer => "layer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub window: LoopWindow,
    #[serde(default)]
    pub mode: IterationMode,
    pub strategy: Strategy,
    #[serde(default)]
    pub cache_strategy: CacheStrategy,
    #[serde(default)]
    pub decode_mode: DecodeMode,
}

impl LoopConfig {
    pub fn new(window: LoopWindow, mode: IterationMode, strategy: Strategy) -> Self {
        Self {
            window,
            mode,
            strategy,
            cache_strategy: CacheStrategy::default(),
            decode_mode: DecodeMode::default(),
        }
    }

    pub fn with_cache_strategy(mut self, c: CacheStrategy) -> Self {
        self.cache_strategy = c;
        self
    }

    pub fn with_decode_mode(mut self, d: DecodeMode) -> Self {
        self.decode_mode = d;
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), LoopError> {
        self.window.validate(n_layers)?;
        self.strategy.validate()
    }
}

/// Window operator `g = L_b o ... o L_a` of a frozen model.
///
/// Without a cache, evaluations write nothing. With a cache (decode),
/// attention reads the cached past and every evaluation is followed by a
/// crop back to the lengths recorded when the cache was attached.
pub struct WindowField<'a> {
    model: &'a Model,
    window: LoopWindow,
    cache: Option<&'a mut KvCache>,
    snapshot: Vec<usize>,
    pin: bool,
    pinned: Vec<Option<RoutingRecord>>,
    routing_log: Option<Vec<RoutingRecord>>,
    evaluations: usize,
    layer_calls: usize,
    max_activation: f64,
}

impl<'a> WindowField<'a> {
    pub fn new(model: &'a Model, window: LoopWindow) -> Result<Self, LoopError> {
        window.validate(model.n_layers())?;
        Ok(Self {
            model,
            window,
            cache: None,
            snapshot: Vec::new(),
            pin: false,
            pinned: vec![None; window.width()],
            routing_log: None,
            evaluations: 0,
            layer_calls: 0,
            max_activation: 0.0,
        })
    }

    /// Attaches a decode cache and snapshots the window layers' lengths.
    pub fn with_cache(mut self, cache: &'a mut KvCache) -> Self {
        self.snapshot = self.window.layers().map(|i| cache.len(i)).collect();
        self.cache = Some(cache);
        self
    }

    /// Reuse each MoE layer's first routing decision for every later
    /// evaluation.
    pub fn pin_routing(mut self) -> Self {
        self.pin = true;
        self
    }

    pub fn record_routing(mut self) -> Self {
        self.routing_log = Some(Vec::new());
        self
    }

    pub fn routing_log(&self) -> &[RoutingRecord] {
        self.routing_log.as_deref().unwrap_or(&[])
    }

    pub fn take_routing_log(&mut self) -> Vec<RoutingRecord> {
        self.routing_log
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Individual layer applications performed so far.
    pub fn layer_calls(&self) -> usize {
        self.layer_calls
    }

    /// Largest `|value|` of any layer output produced so far.
    pub fn max_activation(&self) -> f64 {
        self.max_activation
    }
}

impl Field<f32> for WindowField<'_> {
    fn apply(&mut self, x: &HiddenState) -> Result<HiddenState, LoopError> {
        let mut y = x.clone();
        for (slot_idx, i) in self.window.layers().enumerate() {
            let slot = self.cache.as_deref_mut().map(|c| c.slot_mut(i));
            let pinned = if self.pin {
                self.pinned[slot_idx].as_ref()
            } else {
                None
            };
            let (out, routing) = self.model.layer_forward(i, &y, slot, pinned)?;
            self.layer_calls += 1;
            self.max_activation = self.max_activation.max(out.max_abs());
            if let Some(r) = routing {
                if self.pin && self.pinned[slot_idx].is_none() {
                    self.pinned[slot_idx] = Some(r.clone());
                }
                if let Some(log) = &mut self.routing_log {
                    log.push(r);
                }
            }
            y = out;
        }
        self.evaluations += 1;
        if let Some(cache) = self.cache.as_deref_mut() {
            for (slot_idx, i) in self.window.layers().enumerate() {
                let expected = self.snapshot[slot_idx];
                cache.crop(i, expected)?;
                let found = cache.len(i);
                if found != expected {
                    return Err(LoopError::CacheProtocol {
                        layer: i,
                        evaluation: self.evaluations,
                        expected,
                        found,
                    });
                }
            }
        }
        Ok(y)
    }
}

/// One application of the window operator, without cache writes.
pub fn window_operator_g(
    x: &HiddenState,
    window: LoopWindow,
    model: &Model,
) -> Result<HiddenState, LoopError> {
    WindowField::new(model, window)?.apply(x)
}

/// `F_g(x) = g(x) - x`, returned in `f64` so that `x + F_g(x)` rounds back
/// to exactly `g(x)`.
pub fn residual_field(
    x: &HiddenState,
    window: LoopWindow,
    model: &Model,
) -> Result<Matrix<f64>, LoopError> {
    let g = window_operator_g(x, window, model)?;
    Ok(g.cast::<f64>().sub(&x.cast::<f64>()))
}

/// `g` evaluated at the mean of all iterates so far.
pub fn uniform_loop_step<T: Scalar>(
    field: &mut dyn Field<T>,
    history: &[Matrix<T>],
) -> Result<Matrix<T>, LoopError> {
    let first = history
        .first()
        .ok_or_else(|| LoopError::InvalidStrategy("uniform loop needs one iterate".into()))?;
    let n = history.len() as f64;
    let mut sum = vec![0.0f64; first.data().len()];
    for x in history {
        for (s, v) in sum.iter_mut().zip(x.data()) {
            *s += v.to_f64();
        }
    }
    let mean = Matrix::new(
        first.rows(),
        first.cols(),
        sum.into_iter().map(|s| T::from_f64(s / n)).collect(),
    )?;
    field.apply(&mean)
}

/// Routing and cost observed while running a loop.
#[derive(Debug, Default, Clone)]
pub struct LoopTrace {
    /// Every MoE routing record produced, in evaluation order.
    pub routing: Vec<RoutingRecord>,
    pub window_evaluations: usize,
    pub layer_calls: usize,
    /// Largest `|value|` of any loop-body layer output.
    pub max_activation: f64,
}

impl LoopTrace {
    pub(crate) fn absorb(&mut self, field: &mut WindowField<'_>) {
        self.routing.extend(field.take_routing_log());
        self.layer_calls += field.layer_calls();
        self.max_activation = self.max_activation.max(field.max_activation());
    }
}

/// Runs `g^(K)` on `x` without touching any cache.
pub fn run_loop(
    model: &Model,
    window: LoopWindow,
    mode: IterationMode,
    strategy: &Strategy,
    x: &HiddenState,
    trace: Option<&mut LoopTrace>,
) -> Result<HiddenState, LoopError> {
    window.validate(model.n_layers())?;
    strategy.validate()?;
    let mut local = LoopTrace::default();
    let trace = trace.unwrap_or(&mut local);
    match mode {
        IterationMode::Block => {
            let mut field = WindowField::new(model, window)?.record_routing();
            let out = apply_strategy(x, &mut field, strategy);
            trace.absorb(&mut field);
            trace.window_evaluations += field.evaluations();
            out
        }
        IterationMode::Layer => {
            let mut x = x.clone();
            let mut calls = 0;
            for i in window.layers() {
                let mut field = WindowField::new(model, LoopWindow::new(i, i))?
                    .pin_routing()
                    .record_routing();
                let out = apply_strategy(&x, &mut field, strategy);
                calls += field.layer_calls();
                trace.absorb(&mut field);
                x = out?;
            }
            trace.window_evaluations += calls / window.width();
            Ok(x)
        }
    }
}

/// Pre-loop layers, `g^(K)` under `(mode, strategy)`, post-loop layers and
/// head. No cache is used.
pub fn looped_forward(
    tokens: &[u32],
    model: &Model,
    config: &LoopConfig,
) -> Result<Matrix<f32>, LoopError> {
    looped_forward_traced(tokens, model, config, None)
}

pub fn looped_forward_traced(
    tokens: &[u32],
    model: &Model,
    config: &LoopConfig,
    trace: Option<&mut LoopTrace>,
) -> Result<Matrix<f32>, LoopError> {
    config.validate(model.n_layers())?;
    let w = config.window;
    let x = model.embed(tokens)?;
    let x = model.run_layers(0..w.a, x, None)?;
    let x = run_loop(model, w, config.mode, &config.strategy, &x, trace)?;
    let x = model.run_layers(w.b + 1..model.n_layers(), x, None)?;
    Ok(model.head(&x)?)
}

/// Window of `width` layers whose center is nearest `fraction * n_layers`,
/// clamped into the network; ties go to the shallower window.
pub fn default_window(
    n_layers: usize,
    width: usize,
    fraction: f64,
) -> Result<LoopWindow, LoopError> {
    if n_layers == 0 || width == 0 || !fraction.is_finite() {
        return Err(LoopError::InvalidWindow {
            a: 0,
            b: width.saturating_sub(1),
            n_layers,
        });
    }
    let width = width.min(n_layers);
    let target = fraction * n_layers as f64;
    let half = (width as f64 - 1.0) / 2.0;
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for a in 0..=n_layers - width {
        let err = (a as f64 + half - target).abs();
        if err < best_err - 1e-12 {
            best = a;
            best_err = err;
        }
    }
    Ok(LoopWindow::new(best, best + width - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_windows() {
        assert_eq!(default_window(28, 4, 0.5).unwrap(), LoopWindow::new(12, 15));
        assert_eq!(
            default_window(36, 4, 0.46).unwrap(),
            LoopWindow::new(15, 18)
        );
        assert_eq!(default_window(6, 6, 0.5).unwrap(), LoopWindow::new(0, 5));
        assert_eq!(default_window(3, 10, 0.9).unwrap(), LoopWindow::new(0, 2));
        assert_eq!(default_window(10, 2, 1.0).unwrap(), LoopWindow::new(8, 9));
        assert!(default_window(10, 0, 0.5).is_err());
    }

    #[test]
    fn window_validation() {
        assert!(LoopWindow::new(2, 1).validate(4).is_err());
        assert!(LoopWindow::new(0, 4).validate(4).is_err());
        assert!(LoopWindow::new(0, 3).validate(4).is_ok());
        assert_eq!(LoopWindow::new(3, 6).width(), 4);
    }

    #[test]
    fn window_json_is_a_pair() {
        let w: LoopWindow = serde_json::from_str("[12, 15]").unwrap();
        assert_eq!(w, LoopWindow::new(12, 15));
        assert_eq!(serde_json::to_string(&w).unwrap(), "[12,15]");
    }
}
