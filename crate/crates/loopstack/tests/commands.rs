use loopstack::config::{AuditSection, FidelitySection, GenSection};
use loopstack::decode_cmd::{cmd_cache_audit, cmd_gen};
use loopstack::fidelity::{cmd_fidelity, cmd_sweep, SWEEP_HEADER};
use loopstack::HarnessError;
use loopstack_core::decode::{CacheStrategy, DecodeMode, Sampler};
use loopstack_core::loop_engine::{
    ButcherTableau, IterationMode, LoopConfig, LoopWindow, Strategy,
};
use loopstack_core::model::{from_bytes, to_bytes, Model, ModelConfig, MoeConfig};

fn dense(n_layers: usize, seed: u64) -> Model {
    Model::random(&ModelConfig::dense(n_layers, 16, 2, 32, 32), seed).unwrap()
}

fn moe(n_layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig::dense(n_layers, 16, 2, 32, 32).with_moe(MoeConfig {
        n_experts: 4,
        top_k: 2,
        expert_hidden: 16,
    });
    Model::random(&cfg, seed).unwrap()
}

fn section(strategies: Vec<Strategy>, ks: Vec<usize>) -> FidelitySection {
    FidelitySection {
        strategies,
        ks,
        modes: vec![IterationMode::Block],
        probes: 8,
        prompt_len: 6,
        reference_substeps: 64,
    }
}

#[test]
fn anchored_with_beta_one_matches_a_single_pass_exactly() {
    let model = dense(8, 1);
    let report = cmd_fidelity(
        &model,
        LoopWindow::new(3, 6),
        &section(
            vec![
                Strategy::Naive { k: 1 },
                Strategy::RkAnchored { k: 4, beta: 1.0 },
            ],
            vec![],
        ),
        3,
    )
    .unwrap();
    let naive = &report.cells[0];
    let anchored = &report.cells[1];
    assert_eq!(naive.deviations, anchored.deviations);
    assert!(naive.deviations.iter().all(|d| d.is_finite() && *d > 0.0));
}

#[test]
fn naive_fidelity_degrades_monotonically_with_k() {
    let model = dense(8, 2);
    let report = cmd_sweep(
        &model,
        &[LoopWindow::new(3, 6)],
        &section(vec![Strategy::Naive { k: 1 }], vec![1, 2, 4, 8]),
        5,
    )
    .unwrap();
    let means: Vec<f64> = report.cells.iter().map(|c| c.mean_dev).collect();
    assert_eq!(report.cells.len(), 4);
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn empty_strategy_list_gives_an_empty_report() {
    let model = dense(4, 3);
    let report = cmd_sweep(
        &model,
        &[LoopWindow::new(1, 2)],
        &section(vec![], vec![2]),
        1,
    )
    .unwrap();
    assert!(report.cells.is_empty());
    assert_eq!(report.to_csv(), format!("{SWEEP_HEADER}\n"));
}

#[test]
fn sweep_rows_follow_window_strategy_k_mode_order() {
    let model = dense(6, 4);
    let mut s = section(
        vec![Strategy::euler(1), Strategy::Naive { k: 1 }],
        vec![1, 2],
    );
    s.modes = vec![IterationMode::Block, IterationMode::Layer];
    s.probes = 2;
    let windows = [LoopWindow::new(1, 2), LoopWindow::new(3, 4)];
    let report = cmd_sweep(&model, &windows, &s, 1).unwrap();
    let keys: Vec<(usize, String, usize, &str)> = report
        .cells
        .iter()
        .map(|c| (c.window.a, c.strategy.clone(), c.k, c.mode.as_str()))
        .collect();
    assert_eq!(keys.len(), 16);
    assert_eq!(keys[0], (1, "euler".into(), 1, "block"));
    assert_eq!(keys[1], (1, "euler".into(), 1, "layer"));
    assert_eq!(keys[2], (1, "euler".into(), 2, "block"));
    assert_eq!(keys[4], (1, "naive".into(), 1, "block"));
    assert_eq!(keys[8], (3, "euler".into(), 1, "block"));
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert!(lines[1].ends_with(",1,2,false"));
}

#[test]
fn blown_up_cells_are_flagged_divergent() {
    let model = dense(6, 5);
    // normed blocks bound each residual, so blow-up needs a huge step
    let wild = Strategy::Euler {
        k: 2,
        alpha: Some(1e7),
    };
    let report = cmd_sweep(
        &model,
        &[LoopWindow::new(2, 3)],
        &section(vec![wild, Strategy::euler(2)], vec![]),
        1,
    )
    .unwrap();
    assert!(report.cells[0].diverged);
    assert_eq!(report.cells[0].mean_dev, f64::INFINITY);
    assert!(!report.cells[1].diverged);
}

/// The acceleration strategy grid. Anderson with `K = 8, m = 3, beta = 1`
/// is expected to be its divergent or worst cell.
fn acceleration_grid() -> Vec<Strategy> {
    let hb = |k, alpha, beta| Strategy::HeavyBall { k, alpha, beta };
    let an = |k, m, beta| Strategy::Anderson { k, m, beta };
    let sched = |alphas: &[f64]| Strategy::EulerSched {
        alphas: alphas.to_vec(),
    };
    vec![
        sched(&[0.6, 0.4]),
        hb(2, 0.5, 0.3),
        hb(2, 0.5, 0.5),
        hb(2, 0.7, 0.3),
        hb(4, 0.3, 0.5),
        sched(&[0.7, 0.5, 0.3, 0.1]),
        sched(&[0.7, 0.5, 0.3]),
        an(4, 2, 0.5),
        sched(&[0.3, 0.5, 0.7]),
        an(6, 3, 0.5),
        an(3, 2, 1.0),
        an(6, 2, 0.5),
        hb(4, 0.5, 0.3),
        sched(&[0.4, 0.6, 0.6, 0.4]),
        hb(4, 0.5, 0.5),
        an(4, 3, 1.0),
        hb(4, 0.5, 0.7),
        an(4, 2, 1.0),
        hb(3, 1.0, 0.5),
        Strategy::Aitken { k: 2 },
        Strategy::Aitken { k: 4 },
        Strategy::Aitken { k: 6 },
        an(6, 2, 1.0),
        an(8, 3, 1.0),
    ]
}

#[test]
fn anderson_k8_is_divergent_or_worst_on_most_seeds() {
    let grid = acceleration_grid();
    let target = Strategy::Anderson {
        k: 8,
        m: 3,
        beta: 1.0,
    };
    let mut s = section(grid, vec![]);
    s.probes = 6;
    let seeds = 1..=12u64;
    let mut hits = 0;
    let mut log = Vec::new();
    for seed in seeds.clone() {
        let model = dense(8, seed);
        let report = cmd_sweep(&model, &[LoopWindow::new(3, 6)], &s, seed).unwrap();
        let idx = s.strategies.iter().position(|x| *x == target).unwrap();
        let cell = &report.cells[idx];
        let worst = report
            .cells
            .iter()
            .max_by(|a, b| a.mean_dev.total_cmp(&b.mean_dev))
            .unwrap();
        let hit = cell.diverged || cell.mean_dev >= worst.mean_dev;
        hits += usize::from(hit);
        log.push(format!(
            "seed {seed}: anderson dev {:.3}, worst {} K={} dev {:.3}",
            cell.mean_dev, worst.strategy, worst.k, worst.mean_dev
        ));
    }
    let n = seeds.count();
    assert!(
        2 * hits >= n,
        "anderson K=8 divergent-or-worst on {hits}/{n} seeds\n{}",
        log.join("\n")
    );
}

fn loop_cfg(window: LoopWindow, mode: IterationMode, s: Strategy, c: CacheStrategy) -> LoopConfig {
    LoopConfig::new(window, mode, s).with_cache_strategy(c)
}

fn audit(n: usize) -> AuditSection {
    AuditSection {
        max_new: n,
        ..AuditSection::default()
    }
}

#[test]
fn cache_audit_reports_one_entry_per_layer_per_step() {
    for model in [dense(6, 7), moe(6, 8)] {
        for mode in [IterationMode::Block, IterationMode::Layer] {
            for c in [CacheStrategy::First, CacheStrategy::Last] {
                let lc = loop_cfg(
                    LoopWindow::new(2, 4),
                    mode,
                    Strategy::rk_uniform(ButcherTableau::heun(), 2),
                    c,
                );
                let log = cmd_cache_audit(&model, &lc, &audit(5), 1).unwrap();
                let steps: Vec<&String> = log.iter().filter(|l| l.starts_with("step ")).collect();
                assert_eq!(steps.len(), 5);
                for (i, l) in steps.iter().enumerate() {
                    assert_eq!(**l, format!("step {i}: OK, delta=1/layer/step"));
                }
                assert_eq!(
                    log.last().unwrap(),
                    "final lengths [13, 13, 13, 13, 13, 13]"
                );
            }
        }
    }
}

#[test]
fn disabled_crop_fails_the_audit_at_the_first_evaluation() {
    let model = dense(6, 9);
    let lc = loop_cfg(
        LoopWindow::new(2, 4),
        IterationMode::Block,
        Strategy::euler(3),
        CacheStrategy::Last,
    );
    let section = AuditSection {
        disable_crop: true,
        ..audit(4)
    };
    match cmd_cache_audit(&model, &lc, &section, 1) {
        Err(e @ HarnessError::Invariant(_)) => {
            assert_eq!(e.exit_code(), 2);
            let msg = e.to_string();
            assert!(msg.contains("evaluation 1"), "{msg}");
        }
        other => panic!("expected an invariant violation, got {other:?}"),
    }
}

#[test]
fn no_stash_keeps_loop_slots_empty_throughout() {
    let model = dense(6, 10);
    let lc = loop_cfg(
        LoopWindow::new(2, 4),
        IterationMode::Block,
        Strategy::euler(2),
        CacheStrategy::None,
    );
    let log = cmd_cache_audit(&model, &lc, &audit(3), 1).unwrap();
    assert!(log
        .iter()
        .any(|l| l == "prefill: OK, lengths [8, 8, 0, 0, 0, 8]"));
    assert_eq!(log.last().unwrap(), "final lengths [11, 11, 0, 0, 0, 11]");
}

fn gen_section(max_new: usize) -> GenSection {
    GenSection {
        max_new,
        ..GenSection::default()
    }
}

#[test]
fn extra_block_evaluations_follow_the_pass_count() {
    let model = Model::random(&ModelConfig::dense(36, 16, 2, 32, 32), 11).unwrap();
    let w = LoopWindow::new(16, 19);
    let width = w.width();
    // without a stash pass: W (K - 1) for one-pass-per-stage strategies
    let lc = loop_cfg(
        w,
        IterationMode::Block,
        Strategy::euler(3),
        CacheStrategy::None,
    );
    let report = cmd_gen(&model, &lc, &gen_section(4), 2).unwrap();
    assert!(report
        .steps
        .iter()
        .all(|s| s.extra_block_evals == width * 2));
    // the stash pass adds one more window application
    let lc = loop_cfg(
        w,
        IterationMode::Block,
        Strategy::euler(3),
        CacheStrategy::Last,
    );
    let report = cmd_gen(&model, &lc, &gen_section(4), 2).unwrap();
    assert!(report
        .steps
        .iter()
        .all(|s| s.extra_block_evals == width * 3));
    // multi-stage strategies cost W (passes - 1)
    let heun = Strategy::rk_uniform(ButcherTableau::heun(), 3);
    let passes = heun.forward_passes();
    let lc = loop_cfg(w, IterationMode::Layer, heun, CacheStrategy::None);
    let report = cmd_gen(&model, &lc, &gen_section(2), 2).unwrap();
    assert!(report
        .steps
        .iter()
        .all(|s| s.extra_block_evals == width * (passes - 1)));
}

#[test]
fn decode_modes_control_which_steps_loop() {
    let model = dense(6, 12);
    let base = loop_cfg(
        LoopWindow::new(2, 3),
        IterationMode::Block,
        Strategy::euler(2),
        CacheStrategy::Last,
    );
    let report = cmd_gen(
        &model,
        &base.clone().with_decode_mode(DecodeMode::Bypass),
        &gen_section(3),
        1,
    )
    .unwrap();
    assert!(report
        .steps
        .iter()
        .all(|s| !s.looped && s.extra_block_evals == 0));
    let report = cmd_gen(
        &model,
        &base.with_decode_mode(DecodeMode::FirstN(2)),
        &gen_section(4),
        1,
    )
    .unwrap();
    let looped: Vec<bool> = report.steps.iter().map(|s| s.looped).collect();
    assert_eq!(looped, [true, true, false, false]);
}

#[test]
fn zero_new_tokens_give_empty_output() {
    let model = dense(4, 13);
    let lc = loop_cfg(
        LoopWindow::new(1, 2),
        IterationMode::Block,
        Strategy::euler(2),
        CacheStrategy::Last,
    );
    let report = cmd_gen(&model, &lc, &gen_section(0), 1).unwrap();
    assert!(report.steps.is_empty());
    assert_eq!(report.tokens_text(), "\n");
    assert_eq!(report.to_csv().lines().count(), 1);
}

#[test]
fn bypass_decode_costs_about_the_same_as_unlooped_decode() {
    let model = Model::random(&ModelConfig::dense(12, 64, 4, 128, 64), 14).unwrap();
    let w = LoopWindow::new(5, 8);
    let bypass = loop_cfg(
        w,
        IterationMode::Block,
        Strategy::euler(3),
        CacheStrategy::Last,
    )
    .with_decode_mode(DecodeMode::Bypass);
    let plain = loop_cfg(
        w,
        IterationMode::Block,
        Strategy::Naive { k: 1 },
        CacheStrategy::Last,
    )
    .with_decode_mode(DecodeMode::Bypass);
    loopstack_core::numerics::set_deterministic(false);
    let section = GenSection {
        max_new: 24,
        sampler: Sampler::Greedy,
        ..GenSection::default()
    };
    let decode_ms = |cfg: &LoopConfig| {
        (0..5)
            .map(|_| {
                let r = cmd_gen(&model, cfg, &section, 3).unwrap();
                r.steps.iter().map(|s| s.wall_ms).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (b, p) = (decode_ms(&bypass), decode_ms(&plain));
    loopstack_core::numerics::set_deterministic(true);
    // both run the same plain decode path; allow scheduler noise
    assert!(
        b <= p * 1.25 + 1.0,
        "bypass {b:.2} ms vs unlooped {p:.2} ms"
    );
}

#[test]
fn synthetic_models_are_reproducible_and_cache_consistent() {
    let cfg = ModelConfig::dense(4, 32, 4, 64, 64).with_moe(MoeConfig {
        n_experts: 4,
        top_k: 2,
        expert_hidden: 32,
    });
    let a = to_bytes(&Model::random(&cfg, 21).unwrap()).unwrap();
    let b = to_bytes(&Model::random(&cfg, 21).unwrap()).unwrap();
    assert_eq!(a, b);
    let model = from_bytes(&a).unwrap();
    let tokens = [3u32, 9, 27, 17, 51, 2];
    let full = model.forward(&tokens, None).unwrap();
    let mut cache = model.new_cache();
    model.forward(&tokens[..3], Some(&mut cache)).unwrap();
    for (i, t) in tokens[3..].iter().enumerate() {
        let step = model.forward(&[*t], Some(&mut cache)).unwrap();
        let diff = step
            .row(0)
            .iter()
            .zip(full.row(3 + i))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-4, "position {}: {diff}", 3 + i);
    }
}
