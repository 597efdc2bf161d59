//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). A positional argument
//! filters criteria by substring of their slug; `cargo test <filter>` for
//! another target therefore skips the slow toy runs here.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use m2d_clap::autodiff::Graph;
use m2d_clap::config::RunConfig;
use m2d_clap::datakit::{self, caption_digest, EmbeddingCache};
use m2d_clap::eval::{self, Direction, RetrievalResult};
use m2d_clap::frontend::{summarize_features, PatchGrid, PATCH_DIM};
use m2d_clap::losses::{self, LossWeights, TAU_MIN};
use m2d_clap::masking::{masked_count, sample_partition, MaskPartition};
use m2d_clap::network::{names, ModelConfig, ModelState, Params, ProjectorKind, TAU_INIT};
use m2d_clap::pipeline;
use m2d_clap::trainer::{
    self, ema_decay_at, epoch_means, lr_at, run_stage, OptimizerState, Stage1Example, Stage2Example, StageConfig,
    StageData, StageOutcome,
};
use m2d_clap::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    slug: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: 1, slug: "loss_identities", budget: secs(1), run: loss_identities },
        Criterion { id: 2, slug: "nt_xent_oracle", budget: secs(5), run: nt_xent_oracle },
        Criterion { id: 3, slug: "gradient_checks", budget: secs(60), run: gradient_checks },
        Criterion { id: 4, slug: "masking_exactness", budget: secs(10), run: masking_exactness },
        Criterion { id: 5, slug: "schedule_endpoints", budget: secs(1), run: schedule_endpoints },
        Criterion { id: 6, slug: "freeze_contracts", budget: secs(60), run: freeze_contracts },
        Criterion { id: 7, slug: "temperature_floor", budget: secs(5), run: temperature_floor },
        Criterion { id: 8, slug: "feature_shape_law", budget: secs(5), run: feature_shape_law },
        Criterion { id: 9, slug: "retrieval_oracle", budget: secs(5), run: retrieval_oracle },
        Criterion { id: 10, slug: "zero_shot_protocol", budget: secs(5), run: zero_shot_protocol },
        Criterion { id: 11, slug: "toy_end_to_end", budget: secs(600), run: toy_end_to_end },
        Criterion { id: 12, slug: "clap_weight_ablation", budget: secs(1200), run: clap_weight_ablation },
        Criterion { id: 13, slug: "format_round_trips", budget: secs(10), run: format_round_trips },
    ];
    let selected: Vec<&Criterion> = criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.slug.contains(f.as_str())))
        .collect();
    if selected.is_empty() {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let over = elapsed > c.budget;
        let (tag, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {:?} budget", c.budget)),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] {:02} {} ({:.2} s): {detail}", c.id, c.slug, elapsed.as_secs_f64());
    }
    println!(
        "acceptance: {} passed, {failed} failed of {}",
        selected.len() - failed,
        selected.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// 1 ------------------------------------------------------------------------

fn loss_identities() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let (b, d) = (1 + trial % 8, 2 + trial % 31);
        let t = Matrix::randn(b, d, &mut r);
        let mut parallel = t.clone();
        let mut ortho = Matrix::randn(b, d, &mut r);
        for i in 0..b {
            let c = r.random_range(0.01..100.0);
            parallel.row_mut(i).iter_mut().for_each(|v| *v *= c);
            let tr = t.row(i).to_vec();
            let k = dot(ortho.row(i), &tr) / dot(&tr, &tr);
            ortho.row_mut(i).iter_mut().zip(&tr).for_each(|(v, x)| *v -= k * x);
        }
        let anti = parallel.scale(-1.0);
        for (pred, want) in [(&parallel, 0.0), (&ortho, 2.0), (&anti, 4.0)] {
            let got = losses::m2d_loss(pred, &t).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let (p, q) = (g.constant(pred.clone()), g.constant(t.clone()));
            let l = losses::m2d_loss_graph(&mut g, p, q);
            let graph = g.value(l).to_scalar();
            worst = worst.max((got - want).abs()).max((graph - want).abs());
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:.3e} > 1e-6");
    Ok(format!("150 batches, max |loss - {{0,2,4}}| = {worst:.2e}"))
}

// 2 ------------------------------------------------------------------------

/// Direct evaluation: plain exponentials, no log-sum-exp.
fn nt_xent_brute(s: &Matrix, tau: f64) -> f64 {
    let b = s.rows();
    let mut total = 0.0;
    for i in 0..b {
        let num = (s.get(i, i) / tau).exp();
        let col: f64 = (0..b).map(|k| (s.get(k, i) / tau).exp()).sum();
        let row: f64 = (0..b).map(|k| (s.get(i, k) / tau).exp()).sum();
        total += (num / col).ln() + (num / row).ln();
    }
    -total / (2 * b) as f64
}

fn nt_xent_oracle() -> Outcome {
    let mut r = rng(2);
    let (mut worst, mut worst_sym): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let b = r.random_range(1..=8);
        let d = r.random_range(2..=16);
        let a = Matrix::randn(b, d, &mut r);
        let t = Matrix::randn(b, d, &mut r);
        let s = losses::similarity_matrix(&losses::SemanticBatch::new(a, t).unwrap());
        let tau = r.random_range(TAU_MIN..=1.0);
        let got = losses::clap_loss(&s, tau).map_err(|e| e.to_string())?;
        if b == 1 {
            ensure!(got == 0.0, "B=1 gave {got:e}, not exactly 0");
        }
        worst = worst.max((got - nt_xent_brute(&s, tau)).abs());
        worst_sym = worst_sym.max((got - losses::clap_loss(&s.transpose(), tau).unwrap()).abs());

        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let tv = g.constant(Matrix::scalar(tau));
        let l = losses::clap_loss_graph(&mut g, sv, tv);
        worst = worst.max((g.value(l).to_scalar() - got).abs());
    }
    ensure!(worst <= 1e-9, "max |loss - oracle| {worst:.3e} > 1e-9");
    ensure!(worst_sym <= 1e-12, "transpose asymmetry {worst_sym:.3e}");
    Ok(format!("1000 matrices, max oracle error {worst:.2e}, transpose gap {worst_sym:.2e}, B=1 exactly 0"))
}

// 3 ------------------------------------------------------------------------

fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        pred_depth: 1,
        pred_heads: 2,
        projector: ProjectorKind::Transformer,
        proj_blocks: 1,
        proj_heads: 1,
        proj_ffn: 8,
        text_embed_dim: 6,
        text_max_len: 5,
        text_depth: 1,
        text_heads: 2,
        n_f: 1,
        n_t: 4,
        init_std: 0.3,
        ..ModelConfig::desk()
    }
}

fn random_grid(cfg: &ModelConfig, r: &mut ChaCha8Rng) -> PatchGrid {
    PatchGrid {
        patches: Matrix::randn(cfg.n_f * cfg.n_t, PATCH_DIM, r),
        n_f: cfg.n_f,
        n_t: cfg.n_t,
    }
}

fn with_entry(state: &ModelState, name: &str, idx: usize, delta: f64) -> ModelState {
    let mut s = state.clone();
    s.visit_mut("", &mut |n, m| {
        if n == name {
            m.data_mut()[idx] += delta;
        }
    });
    s
}

struct GradCheck {
    worst: f64,
    worst_name: String,
    tensors: usize,
    entries: usize,
}

/// Central differences on up to 16 entries of every tensor that has a
/// gradient; error is `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`.
fn grad_check(state: &ModelState, loss: &dyn Fn(&ModelState) -> (Graph, m2d_clap::autodiff::Var)) -> GradCheck {
    const H: f64 = 1e-5;
    let (g, l) = loss(state);
    let grads = g.backward(l).expect("backward");
    let eval = |s: &ModelState| {
        let (g, l) = loss(s);
        g.value(l).to_scalar()
    };
    let mut out = GradCheck {
        worst: 0.0,
        worst_name: String::new(),
        tensors: 0,
        entries: 0,
    };
    for (name, grad) in grads.iter() {
        let n = grad.len();
        let stride = n.div_ceil(16).max(1);
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for idx in (0..n).step_by(stride) {
            let up = eval(&with_entry(state, name, idx, H));
            let down = eval(&with_entry(state, name, idx, -H));
            a.push(grad.data()[idx]);
            num.push((up - down) / (2.0 * H));
        }
        let diff: Vec<f64> = a.iter().zip(&num).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&num));
        let rel = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
        if rel > out.worst {
            out.worst = rel;
            out.worst_name = name.to_string();
        }
        out.tensors += 1;
        out.entries += a.len();
    }
    out
}

fn expect_all_trainable(state: &ModelState, loss: &dyn Fn(&ModelState) -> (Graph, m2d_clap::autodiff::Var), frozen: &[&str]) -> Result<(), String> {
    let (g, l) = loss(state);
    let grads = g.backward(l).map_err(|e| e.to_string())?;
    for name in state.param_names() {
        let should = !frozen.iter().any(|p| name.starts_with(p));
        ensure!(grads.contains(&name) == should, "{name}: gradient present = {}", grads.contains(&name));
    }
    Ok(())
}

fn gradient_checks() -> Outcome {
    let mut r = rng(3);
    let cfg = tiny_config();
    let mut report = Vec::new();
    let mut worst: f64 = 0.0;

    for kind in [ProjectorKind::Transformer, ProjectorKind::Mlp] {
        let cfg = ModelConfig { projector: kind, ..cfg.clone() };
        let mut state = ModelState::new(cfg.clone(), &mut r).map_err(|e| e.to_string())?;
        // Distinct target weights, so the stop-gradient branch is not a copy.
        state.target.visit_mut("", &mut |_, m| {
            m.data_mut().iter_mut().for_each(|v| *v *= 1.1);
        });
        let batch: Vec<Stage1Example> = (0..3)
            .map(|_| Stage1Example {
                grid: random_grid(&cfg, &mut r),
                text_embedding: (0..cfg.text_embed_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let parts: Vec<MaskPartition> = batch
            .iter()
            .map(|ex| sample_partition(ex.grid.len(), 0.5, &mut r).unwrap())
            .collect();
        let weights = LossWeights { lambda_m2d: 1.0, lambda_clap: 0.5 };
        let loss = |s: &ModelState| {
            let sg = trainer::stage1_loss_graph(s, &batch, &parts, weights).expect("stage-1 graph");
            (sg.graph, sg.total)
        };
        expect_all_trainable(&state, &loss, &[names::TARGET])?;
        let c = grad_check(&state, &loss);
        worst = worst.max(c.worst);
        report.push(format!("stage1/{kind:?} {} tensors worst {:.1e} ({})", c.tensors, c.worst, c.worst_name));
    }

    let mut state = ModelState::new(cfg.clone(), &mut r).map_err(|e| e.to_string())?;
    state.attach_text_encoder(7, &mut r).map_err(|e| e.to_string())?;
    let batch: Vec<Stage2Example> = (0..3)
        .map(|i| Stage2Example {
            grid: random_grid(&cfg, &mut r),
            tokens: (0..2 + i).map(|_| r.random_range(0..7)).collect(),
        })
        .collect();
    let parts: Vec<MaskPartition> = batch
        .iter()
        .map(|ex| sample_partition(ex.grid.len(), 0.25, &mut r).unwrap())
        .collect();
    let loss = |s: &ModelState| trainer::stage2_loss_graph(s, &batch, &parts).expect("stage-2 graph");
    expect_all_trainable(&state, &loss, &[names::TARGET, names::ONLINE, names::PREDICTOR])?;
    let c = grad_check(&state, &loss);
    worst = worst.max(c.worst);
    report.push(format!("stage2/text-encoder {} tensors worst {:.1e} ({})", c.tensors, c.worst, c.worst_name));

    ensure!(worst <= 1e-4, "relative error {worst:.3e} > 1e-4: {}", report.join("; "));
    Ok(report.join("; "))
}

// 4 ------------------------------------------------------------------------

/// `round_half_up(k·n/100)` in integers.
fn exact_count(k: usize, n: usize) -> usize {
    (2 * k * n + 100) / 200
}

/// Upper 3σ bound of a χ² variable with `dof` degrees of freedom.
fn chi2_bound(dof: f64) -> f64 {
    dof + 3.0 * (2.0 * dof).sqrt()
}

fn masking_exactness() -> Outcome {
    let mut r = rng(4);
    let mut cases = 0;
    for n in 1..=200 {
        for k in 0..=100 {
            let ratio = k as f64 / 100.0;
            let want = exact_count(k, n);
            ensure!(masked_count(n, ratio) == want, "count({n}, {ratio}) = {} != {want}", masked_count(n, ratio));
            let p = sample_partition(n, ratio, &mut r).map_err(|e| e.to_string())?;
            ensure!(p.masked_idx.len() == want, "partition({n}, {ratio}) masked {}", p.masked_idx.len());
            let mut seen = vec![0u8; n];
            for &i in p.masked_idx.iter().chain(&p.visible_idx) {
                ensure!(i < n, "index {i} outside {n}");
                seen[i] += 1;
            }
            ensure!(seen.iter().all(|&c| c == 1), "partition({n}, {ratio}) not disjoint and exhaustive");
            cases += 1;
        }
    }

    // Marginals: each position masked with p = m/n. The counts of an
    // m-subset sampler are negatively correlated; the (n-1)/n factor makes
    // the statistic χ²(n-1).
    let (n, ratio, draws) = (20usize, 0.3, 20_000usize);
    let m = masked_count(n, ratio);
    let mut counts = vec![0f64; n];
    for _ in 0..draws {
        for i in sample_partition(n, ratio, &mut r).unwrap().masked_idx {
            counts[i] += 1.0;
        }
    }
    let p = m as f64 / n as f64;
    let e = draws as f64 * p;
    let var = draws as f64 * p * (1.0 - p);
    let chi_pos: f64 = counts.iter().map(|c| (c - e).powi(2) / var).sum::<f64>() * (n - 1) as f64 / n as f64;
    let bound_pos = chi2_bound((n - 1) as f64);
    ensure!(chi_pos <= bound_pos, "position χ² {chi_pos:.1} > {bound_pos:.1}");

    // Whole subsets: all C(6,2) = 15 masks equally likely.
    let draws = 30_000;
    let mut subsets: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for _ in 0..draws {
        *subsets.entry(sample_partition(6, 0.3, &mut r).unwrap().masked_idx).or_default() += 1.0;
    }
    ensure!(subsets.len() == 15, "only {} of 15 subsets drawn", subsets.len());
    let e = draws as f64 / 15.0;
    let chi_sub: f64 = subsets.values().map(|c| (c - e).powi(2) / e).sum();
    let bound_sub = chi2_bound(14.0);
    ensure!(chi_sub <= bound_sub, "subset χ² {chi_sub:.1} > {bound_sub:.1}");
    Ok(format!(
        "{cases} (n, ratio) cases exact; position χ²={chi_pos:.1} ≤ {bound_pos:.1}, subset χ²={chi_sub:.1} ≤ {bound_sub:.1}"
    ))
}

// 5 ------------------------------------------------------------------------

fn schedule_endpoints() -> Outcome {
    let mut worst: f64 = 0.0;
    for total in [1usize, 2, 7, 100, 3000, 123_457] {
        let a = ema_decay_at(0, total, 0.99995, 0.99999).unwrap();
        let b = ema_decay_at(total, total, 0.99995, 0.99999).unwrap();
        ensure!(a == 0.99995, "ema_decay_at(0) = {a:.17}");
        ensure!(b == 0.99999, "ema_decay_at({total}) = {b:.17}");
        let mut prev = a;
        for s in (0..=total).step_by(total.div_ceil(50)) {
            let v = ema_decay_at(s, total, 0.99995, 0.99999).unwrap();
            ensure!(v >= prev && v <= 0.99999, "ema not monotone at {s}/{total}");
            prev = v;
        }
    }
    for (total, warm, base) in [(100usize, 10usize, 3e-4), (3000, 200, 3e-6), (60, 2, 1e-4), (10_000, 3333, 1.0)] {
        // Linear extrapolation of the warm-up ramp to the boundary.
        let l1 = lr_at(warm - 1, total, warm, base).unwrap();
        let l2 = lr_at(warm - 2, total, warm, base).unwrap_or(0.0);
        let left = l1 + (l1 - l2);
        let at = lr_at(warm, total, warm, base).unwrap();
        let right = lr_at(warm + 1, total, warm, base).unwrap();
        worst = worst.max((left - at).abs()).max((at - base).abs());
        ensure!(right <= at && at - right < base * 1e-3, "decay starts with a jump at {warm}");
        ensure!(lr_at(total, total, warm, base).unwrap().abs() < 1e-12 * base.max(1.0), "lr does not reach 0");
    }
    ensure!(worst <= 1e-12, "lr discontinuity {worst:.3e} at warm-up boundary");
    Ok(format!("ema endpoints exact for 6 lengths; lr boundary gap {worst:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn freeze_contracts() -> Outcome {
    let mut r = rng(6);
    let cfg = ModelConfig { n_t: 6, n_f: 2, ..tiny_config() };
    let mut state = ModelState::new(cfg.clone(), &mut r).map_err(|e| e.to_string())?;

    // Stage 1: gradients never name the target encoder; a step with decay 1
    // leaves it untouched while the online encoder moves.
    let s1cfg = StageConfig::stage1();
    let batch: Vec<Stage1Example> = (0..4)
        .map(|_| Stage1Example {
            grid: random_grid(&cfg, &mut r),
            text_embedding: (0..cfg.text_embed_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let parts: Vec<MaskPartition> = batch.iter().map(|ex| sample_partition(ex.grid.len(), 0.7, &mut r).unwrap()).collect();
    let sg = trainer::stage1_loss_graph(&state, &batch, &parts, s1cfg.weights).map_err(|e| e.to_string())?;
    let grads = sg.graph.backward(sg.total).map_err(|e| e.to_string())?;
    let leaked: Vec<&str> = grads.names().filter(|n| n.starts_with(names::TARGET)).collect();
    ensure!(leaked.is_empty(), "target encoder received gradients: {leaked:?}");
    let (t0, o0) = (state.digest(names::TARGET), state.digest(names::ONLINE));
    let mut opt = OptimizerState::for_stage(&s1cfg);
    trainer::stage1_step(&mut state, &batch, &s1cfg, &mut r, &mut opt, 1e-3, 1.0).map_err(|e| e.to_string())?;
    ensure!(state.digest(names::TARGET) == t0, "target moved under decay 1");
    ensure!(state.digest(names::ONLINE) != o0, "online encoder did not train");

    // Stage 2: 100 steps leave the audio encoder byte-identical.
    state.attach_text_encoder(9, &mut r).map_err(|e| e.to_string())?;
    let batch: Vec<Stage2Example> = (0..4)
        .map(|i| Stage2Example {
            grid: random_grid(&cfg, &mut r),
            tokens: vec![2 + i, 1 + i % 3, 1],
        })
        .collect();
    let before = [names::ONLINE, names::TARGET, names::PREDICTOR, names::PROJECTOR, names::TEXT].map(|p| state.digest(p));
    for s2cfg in [StageConfig::stage2(), StageConfig::stage2_1()] {
        let mut opt = OptimizerState::for_stage(&s2cfg);
        for _ in 0..50 {
            trainer::stage2_step(&mut state, &batch, &s2cfg, &mut r, &mut opt, 1e-3).map_err(|e| e.to_string())?;
        }
    }
    let after = [names::ONLINE, names::TARGET, names::PREDICTOR, names::PROJECTOR, names::TEXT].map(|p| state.digest(p));
    ensure!(after[0] == before[0], "online encoder digest changed");
    ensure!(after[1] == before[1], "target encoder digest changed");
    ensure!(after[2] == before[2], "predictor digest changed");
    ensure!(after[3] != before[3] && after[4] != before[4], "projector or text encoder did not train");
    Ok("no target gradients in stage 1; audio encoder digest identical after 100 stage-2/2.1 steps".into())
}

// 7 ------------------------------------------------------------------------

fn temperature_floor() -> Outcome {
    let mut r = rng(7);
    let state0 = ModelState::new(tiny_config(), &mut r).map_err(|e| e.to_string())?;
    ensure!(state0.tau() == TAU_INIT && TAU_INIT == 0.07, "initial τ {}", state0.tau());

    // Matched pairs always score highest, so the loss falls as τ shrinks;
    // the 0.1 margin keeps the gradient representable down to the floor.
    let mut state = state0.clone();
    let mut opt = OptimizerState::new(0.9, 0.95, 0.0);
    let s = Matrix::identity(6).map(|v| 0.9 + 0.1 * v);
    let (mut min_raw, mut min_clipped) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..500 {
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let tv = g.param(names::TAU, &state.tau, true);
        let l = losses::clap_loss_graph(&mut g, sv, tv);
        let grads = g.backward(l).map_err(|e| e.to_string())?;
        ensure!(grads.get(names::TAU).unwrap().to_scalar() > 0.0, "gradient does not push τ down");
        opt.apply(&mut state, &grads, 0.05);
        min_raw = min_raw.min(state.tau());
        state.tau = Matrix::scalar(losses::clip_temperature(state.tau()));
        min_clipped = min_clipped.min(state.tau());
        ensure!(state.tau() >= TAU_MIN && 1.0 / state.tau() <= 100.0, "τ {} below floor", state.tau());
    }
    ensure!(min_raw < TAU_MIN, "optimizer never pushed τ below the floor (min {min_raw})");

    // The training steps clip as well, even at an absurd learning rate.
    let cfg = state0.config.clone();
    let mut state = state0.clone();
    let batch: Vec<Stage1Example> = (0..4)
        .map(|_| Stage1Example {
            grid: random_grid(&cfg, &mut r),
            text_embedding: (0..cfg.text_embed_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let s1 = StageConfig { weights: LossWeights::CLAP_ONLY, ..StageConfig::stage1() };
    let mut opt = OptimizerState::for_stage(&s1);
    for _ in 0..20 {
        trainer::stage1_step(&mut state, &batch, &s1, &mut r, &mut opt, 1.0, 0.999).map_err(|e| e.to_string())?;
        ensure!(state.tau() >= TAU_MIN, "stage-1 step left τ = {}", state.tau());
    }
    Ok(format!(
        "τ₀ = 0.07; 500 adversarial steps: raw min {min_raw:.4}, clipped min {min_clipped:.4}; stage-1 steps at lr 1 end at τ = {:.4}",
        state.tau()
    ))
}

// 8 ------------------------------------------------------------------------

fn feature_shape_law() -> Outcome {
    let mut r = rng(8);
    let (n_f, n_t, d) = (5, 38, 768);
    let z: Vec<Matrix> = (0..2).map(|_| Matrix::randn(n_f * n_t, d, &mut r)).collect();
    let (frames, clip) = summarize_features(&z, n_f, n_t).map_err(|e| e.to_string())?;
    ensure!(frames.iter().all(|f| f.shape() == (n_t, 3840)), "frame shape {:?}", frames[0].shape());
    ensure!(clip.shape() == (2, 3840), "clip shape {:?}", clip.shape());

    for trial in 0..200 {
        let (n_f, n_t, d, b) = (1 + trial % 4, 1 + trial % 7, 1 + trial % 5, 1 + trial % 3);
        let z: Vec<Matrix> = (0..b).map(|_| Matrix::randn(n_f * n_t, d, &mut r)).collect();
        let (frames, clip) = summarize_features(&z, n_f, n_t).map_err(|e| e.to_string())?;
        for (bi, item) in z.iter().enumerate() {
            for f in 0..n_f {
                for t in 0..n_t {
                    for k in 0..d {
                        let want = item.get(f * n_t + t, k);
                        ensure!(frames[bi].get(t, f * d + k) == want, "frame mismatch at b{bi} f{f} t{t} d{k}");
                    }
                }
                for k in 0..d {
                    let mean = (0..n_t).map(|t| item.get(f * n_t + t, k)).sum::<f64>() / n_t as f64;
                    ensure!((clip.get(bi, f * d + k) - mean).abs() <= 1e-12, "clip mean mismatch");
                }
            }
        }
    }
    Ok("D=768, n_f=5: frames 38×3840, clip 3840; 200 random permutation-oracle cases equal".into())
}

// 9 ------------------------------------------------------------------------

/// Full sort of the gallery, descending score, ties by gallery index.
fn retrieval_oracle_metrics(s: &Matrix, gt: &[Vec<usize>]) -> (f64, f64, f64, f64) {
    let (mut r1, mut r5, mut r10, mut map) = (0.0, 0.0, 0.0, 0.0);
    for (q, rel) in gt.iter().enumerate() {
        let mut order: Vec<usize> = (0..s.cols()).collect();
        order.sort_by(|&a, &b| s.get(q, b).partial_cmp(&s.get(q, a)).unwrap().then(a.cmp(&b)));
        let first = order.iter().position(|i| rel.contains(i)).unwrap() + 1;
        r1 += f64::from(first <= 1);
        r5 += f64::from(first <= 5);
        r10 += f64::from(first <= 10);
        let mut hits = 0;
        let mut ap = 0.0;
        for (k, item) in order.iter().take(10).enumerate() {
            if rel.contains(item) {
                hits += 1;
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        let mut distinct = rel.clone();
        distinct.sort_unstable();
        distinct.dedup();
        map += ap / distinct.len().min(10) as f64;
    }
    let n = s.rows() as f64;
    (r1 / n, r5 / n, r10 / n, map / n)
}

fn retrieval_oracle() -> Outcome {
    let mut r = rng(9);
    for m in 0..100 {
        let mut s = Matrix::randn(32, 32, &mut r);
        if m % 4 == 0 {
            // Coarse scores force ties.
            s = s.map(|v| (v * 2.0).round() / 2.0);
        }
        let gt: Vec<Vec<usize>> = (0..32)
            .map(|q| {
                if m % 2 == 0 {
                    vec![q]
                } else {
                    (0..r.random_range(1..=12)).map(|_| r.random_range(0..32)).collect()
                }
            })
            .collect();
        for dir in [Direction::TextToAudio, Direction::AudioToText] {
            let (s, gt) = match dir {
                Direction::TextToAudio => (s.clone(), gt.clone()),
                Direction::AudioToText => (s.transpose(), gt.clone()),
            };
            let got = eval::retrieval_metrics(&s, &gt, dir).map_err(|e| e.to_string())?;
            let (r1, r5, r10, map) = retrieval_oracle_metrics(&s, &gt);
            let want = RetrievalResult { r_at_1: r1, r_at_5: r5, r_at_10: r10, map_at_10: map, direction: dir };
            ensure!(got == want, "matrix {m}: {got:?} != oracle {want:?}");
        }
    }
    let ident = Matrix::identity(32);
    let gt: Vec<Vec<usize>> = (0..32).map(|q| vec![q]).collect();
    let got = eval::retrieval_metrics(&ident, &gt, Direction::TextToAudio).unwrap();
    ensure!(
        [got.r_at_1, got.r_at_5, got.r_at_10, got.map_at_10] == [1.0; 4],
        "identity gave {got:?}"
    );
    Ok("100 matrices × 2 directions bit-identical to the sorting oracle; identity gives 1.0".into())
}

// 10 -----------------------------------------------------------------------

fn zero_shot_protocol() -> Outcome {
    let (c, d, per) = (10, 64, 100);
    let classes = datakit::orthonormal_rows(c, d, 10).map_err(|e| e.to_string())?;
    // SNR 20 dB: noise power a hundredth of the unit row's power.
    let sigma = (1.0 / (100.0 * d as f64)).sqrt();
    let mut r = rng(10);
    let noise = Matrix::randn(c * per, d, &mut r);
    let mut audio = Matrix::zeros(c * per, d);
    let (mut sig_p, mut noise_p) = (0.0, 0.0);
    for i in 0..c * per {
        for k in 0..d {
            let (s, n) = (classes.get(i / per, k), sigma * noise.get(i, k));
            sig_p += s * s;
            noise_p += n * n;
            audio.set(i, k, s + n);
        }
    }
    let snr = 10.0 * (sig_p / noise_p).log10();
    let pred = eval::zero_shot_classify(&audio, &classes).map_err(|e| e.to_string())?;
    let correct = pred.iter().enumerate().filter(|&(i, &p)| p == i / per).count();
    ensure!(correct == c * per, "accuracy {correct}/{} at {snr:.1} dB", c * per);

    let fixture = include_str!("fixtures/caption_templates.tsv");
    let mut lines = 0;
    for line in fixture.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        ensure!(cols.len() == 3, "bad fixture line {line:?}");
        let labels: Vec<&str> = cols[1].split('|').collect();
        let got = eval::caption_from_label(cols[0], &labels).map_err(|e| e.to_string())?;
        ensure!(got.as_bytes() == cols[2].as_bytes(), "{}: {got:?} != {:?}", cols[0], cols[2]);
        lines += 1;
    }
    Ok(format!("accuracy 100% at {snr:.1} dB over {} clips; {lines} caption templates byte-match", c * per))
}

// 11 / 12 ------------------------------------------------------------------

const TOY_SEED: u64 = 2024;

struct ToyData {
    train: Vec<Stage1Example>,
    heldout_grids: Vec<PatchGrid>,
    heldout_classes: Vec<usize>,
    class_embeddings: Matrix,
}

fn toy_data() -> &'static ToyData {
    static DATA: OnceLock<ToyData> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = RunConfig::default();
        let frames = pipeline::frames_for_duration(cfg.data.duration_s);
        let train = datakit::synth_corpus(cfg.data.classes, cfg.data.per_class, cfg.data.duration_s, TOY_SEED).unwrap();
        let held = datakit::synth_corpus(
            cfg.data.classes,
            cfg.data.heldout_per_class,
            cfg.data.duration_s,
            TOY_SEED ^ 0x5eed,
        )
        .unwrap();
        let grids = pipeline::grids_from_waveforms(&train.waveforms, frames).unwrap();
        let captions: Vec<String> = train.entries.iter().map(|e| e.caption.clone()).collect();
        let cache = train.embedding_cache().unwrap();
        ToyData {
            train: pipeline::stage1_examples(&grids, &captions, &cache).unwrap(),
            heldout_grids: pipeline::grids_from_waveforms(&held.waveforms, frames).unwrap(),
            heldout_classes: (0..held.entries.len()).map(|i| held.class_of(i)).collect(),
            class_embeddings: train.class_embeddings,
        }
    })
}

struct ToyRun {
    outcome: StageOutcome,
    reduction: f64,
    zero_shot: f64,
    seconds: f64,
}

fn toy_run(lambda_clap: f64) -> ToyRun {
    let start = Instant::now();
    let data = toy_data();
    let run_cfg = RunConfig::default();
    let cfg = StageConfig {
        weights: LossWeights { lambda_m2d: 1.0, lambda_clap },
        ..run_cfg.stage1.clone()
    };
    let state = ModelState::new(run_cfg.model.clone(), &mut rng(TOY_SEED)).unwrap();
    let outcome = run_stage(&cfg, StageData::Stage1(&data.train), &state, TOY_SEED, None).unwrap();
    let means = epoch_means(&outcome.log);
    let reduction = 1.0 - means.last().unwrap() / means[0];
    let zero_shot = toy_zero_shot(&outcome.state, data);
    ToyRun {
        outcome,
        reduction,
        zero_shot,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn toy_zero_shot(state: &ModelState, data: &ToyData) -> f64 {
    let audio: Vec<Vec<f64>> = data.heldout_grids.iter().map(|g| pipeline::audio_semantic(state, g).unwrap()).collect();
    let text: Vec<Vec<f64>> = (0..data.class_embeddings.rows())
        .map(|c| pipeline::text_semantic(state, data.class_embeddings.row(c)).unwrap())
        .collect();
    let pred = eval::zero_shot_classify(&Matrix::from_rows(&audio), &Matrix::from_rows(&text)).unwrap();
    let correct = pred.iter().zip(&data.heldout_classes).filter(|(p, c)| p == c).count();
    correct as f64 / pred.len() as f64
}

fn toy_main_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| toy_run(LossWeights::STAGE1.lambda_clap))
}

fn toy_end_to_end() -> Outcome {
    let run = toy_main_run();
    let again = toy_run(LossWeights::STAGE1.lambda_clap);
    ensure!(
        again.outcome.log == run.outcome.log && again.outcome.state == run.outcome.state,
        "rerun with the same seed diverged"
    );
    let summary = format!(
        "loss reduction {:.1}% (≥ 30%), held-out zero-shot {:.1}% (≥ 90%), deterministic rerun identical, {:.0} s per run",
        100.0 * run.reduction,
        100.0 * run.zero_shot,
        run.seconds
    );
    ensure!(run.reduction >= 0.30 && run.zero_shot >= 0.90, "{summary}");
    Ok(summary)
}

fn clap_weight_ablation() -> Outcome {
    let with = toy_main_run();
    let without = toy_run(0.0);
    println!("      lambda_clap | zero-shot acc | loss reduction");
    for (l, run) in [(0.0, &without), (LossWeights::STAGE1.lambda_clap, with)] {
        println!("      {l:>11} | {:>12.1}% | {:>13.1}%", 100.0 * run.zero_shot, 100.0 * run.reduction);
    }
    let summary = format!(
        "λ=0: {:.1}% (≤ 40%), λ=0.01: {:.1}% (≥ 90%)",
        100.0 * without.zero_shot,
        100.0 * with.zero_shot
    );
    ensure!(without.zero_shot <= 0.40 && with.zero_shot >= 0.90, "{summary}");
    Ok(summary)
}

// 13 -----------------------------------------------------------------------

fn checkpoint_bytes(s: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    s.write_to(&mut buf).unwrap();
    buf
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(13);

    let mut states = vec![ModelState::new(ModelConfig::desk(), &mut r).unwrap()];
    let mut with_text = ModelState::new(tiny_config(), &mut r).unwrap();
    with_text.attach_text_encoder(11, &mut r).unwrap();
    states.push(with_text);
    let mut mlp = ModelState::new(ModelConfig { projector: ProjectorKind::Mlp, ..tiny_config() }, &mut r).unwrap();
    mlp.tau = Matrix::scalar(0.0123456789);
    states.push(mlp);
    for (i, s) in states.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.m2dk"));
        s.save(&path).map_err(|e| e.to_string())?;
        let first = std::fs::read(&path).unwrap();
        let loaded = ModelState::load(&path).map_err(|e| e.to_string())?;
        let again = checkpoint_bytes(&loaded);
        ensure!(first == again, "checkpoint {i} changed on save→load→save");
        ensure!(checkpoint_bytes(&ModelState::load(&path).unwrap()) == first, "reload {i} not stable");
        ensure!(loaded.param_names() == s.param_names(), "checkpoint {i} lost parameters");
        ensure!((loaded.tau() - s.tau()).abs() <= 1e-7 * s.tau(), "τ not preserved");
    }

    let mut sizes = Vec::new();
    for (rows, dim) in [(0usize, 4096usize), (0, 1), (10_000, 4096)] {
        let mut cache = EmbeddingCache::new(dim);
        for i in 0..rows {
            let v: Vec<f64> = (0..dim).map(|k| ((i * 31 + k * 7) % 997) as f64 / 997.0 - 0.5).collect();
            cache.insert(&format!("caption number {i}"), &v).map_err(|e| e.to_string())?;
        }
        let path = dir.path().join(format!("c{rows}-{dim}.m2dc"));
        datakit::cache_write(&path, cache.dim, &cache.rows).map_err(|e| e.to_string())?;
        let first = std::fs::read(&path).unwrap();
        let back = datakit::cache_read(&path).map_err(|e| e.to_string())?;
        ensure!(back == cache, "cache {rows}×{dim} contents changed");
        let mut again = Vec::new();
        back.write_to(&mut again).map_err(|e| e.to_string())?;
        ensure!(again == first, "cache {rows}×{dim} bytes changed");
        if rows > 0 {
            ensure!(back.rows.contains_key(&caption_digest("caption number 9999")), "lookup by digest failed");
        }
        sizes.push(first.len());
    }
    Ok(format!(
        "3 checkpoints byte-stable; caches of 0, 0 and 10000×4096 rows byte-stable ({} bytes)",
        sizes[2]
    ))
}
