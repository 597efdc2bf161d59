//! Stage orchestration: schedules, the adaptive-moment optimizer, EMA target
//! updates and the per-stage training steps.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::frontend::PatchGrid;
use crate::losses::{self, clip_temperature, LossWeights};
use crate::masking::{sample_partition, MaskPartition};
use crate::network::{names, standardize_targets, EncoderParams, Linear, ModelState, Params};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "1")]
    Stage1,
    #[serde(rename = "1.1")]
    Stage1_1,
    #[serde(rename = "2")]
    Stage2,
    #[serde(rename = "2.1")]
    Stage2_1,
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stage1 => "1",
            Self::Stage1_1 => "1.1",
            Self::Stage2 => "2",
            Self::Stage2_1 => "2.1",
        })
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::Stage1),
            "1.1" => Ok(Self::Stage1_1),
            "2" => Ok(Self::Stage2),
            "2.1" => Ok(Self::Stage2_1),
            other => Err(Error::InvalidConfig(format!("unknown stage {other:?}"))),
        }
    }
}

/// Full hyperparameter record of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weights: LossWeights,
    /// Stages 2/2.1: the audio encoder is frozen. Stage 1.1: head-only tuning.
    pub freeze_audio_encoder: bool,
    pub ema_start: f64,
    pub ema_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: StageId::Stage1,
            mask_ratio: 0.7,
            epochs: 300,
            warmup_epochs: 20,
            batch_size: 2048,
            base_lr: 3e-4,
            weights: LossWeights::STAGE1,
            freeze_audio_encoder: false,
            ema_start: 0.99995,
            ema_end: 0.99999,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
        }
    }

    pub fn stage1_1() -> Self {
        Self {
            stage: StageId::Stage1_1,
            mask_ratio: 0.0,
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 64,
            base_lr: 1e-4,
            weights: LossWeights::CLAP_ONLY,
            ..Self::stage1()
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: StageId::Stage2,
            mask_ratio: 0.3,
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 2048,
            base_lr: 3e-6,
            weights: LossWeights::CLAP_ONLY,
            freeze_audio_encoder: true,
            ..Self::stage1()
        }
    }

    pub fn stage2_1() -> Self {
        Self {
            stage: StageId::Stage2_1,
            mask_ratio: 0.0,
            ..Self::stage2()
        }
    }

    pub fn for_stage(stage: StageId) -> Self {
        match stage {
            StageId::Stage1 => Self::stage1(),
            StageId::Stage1_1 => Self::stage1_1(),
            StageId::Stage2 => Self::stage2(),
            StageId::Stage2_1 => Self::stage2_1(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs".into());
        }
        if !(self.base_lr >= 0.0) {
            return bad("base_lr must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(0.0..=1.0).contains(&self.ema_end) {
            return bad("EMA decay must lie in [0, 1]".into());
        }
        self.weights.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        match self.stage {
            StageId::Stage2 | StageId::Stage2_1 if !self.freeze_audio_encoder => {
                bad(format!("stage {} requires a frozen audio encoder", self.stage))
            }
            StageId::Stage2_1 if self.mask_ratio != 0.0 => bad("stage 2.1 uses no masking".into()),
            _ => Ok(()),
        }
    }
}

/// `start + (end - start) · step / total`.
pub fn ema_decay_at(step: usize, total_steps: usize, start: f64, end: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return invalid(format!("step {step} outside 0..={total_steps}"));
    }
    if step == total_steps {
        return Ok(end);
    }
    Ok(start + (end - start) * step as f64 / total_steps as f64)
}

/// Linear warm-up to `base_lr`, then half-cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps || step > total_steps {
        return invalid(format!("step {step} / warm-up {warmup_steps} outside 0..={total_steps}"));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `target ← α·target + (1-α)·online`, elementwise.
pub fn ema_update(target: &EncoderParams, online: &EncoderParams, alpha: f64) -> Result<EncoderParams> {
    let mut out = target.clone();
    ema_update_in_place(&mut out, online, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(target: &mut EncoderParams, online: &EncoderParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("EMA decay {alpha} outside [0, 1]"));
    }
    let mut src = Vec::new();
    online.visit("", &mut |_, m| src.push(m.clone()));
    let mut i = 0;
    let mut mismatch = false;
    target.visit_mut("", &mut |_, m| {
        match src.get(i) {
            Some(o) if o.shape() == m.shape() => {
                for (t, &s) in m.data_mut().iter_mut().zip(o.data()) {
                    *t = alpha * *t + (1.0 - alpha) * s;
                }
            }
            _ => mismatch = true,
        }
        i += 1;
    });
    if mismatch || i != src.len() {
        return invalid("online and target encoders differ in shape");
    }
    Ok(())
}

/// Decoupled-weight-decay Adam. Weight decay applies to weight matrices
/// (`*.w`) only.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: HashMap<String, (Matrix, Matrix)>,
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn for_stage(cfg: &StageConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.weight_decay)
    }

    pub fn moments(&self, name: &str) -> Option<&(Matrix, Matrix)> {
        self.moments.get(name)
    }

    /// Updates every parameter of `params` that has a gradient; others are untouched.
    pub fn apply<P: Params + ?Sized>(&mut self, params: &mut P, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())));
            let decay = if name.ends_with(".w") { wd } else { 0.0 };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv -= lr * (update + decay * *pv);
            }
        });
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Example {
    pub grid: PatchGrid,
    pub text_embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Stage2Example {
    pub grid: PatchGrid,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub grid: PatchGrid,
    /// Multi-hot targets.
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub loss_total: f64,
    pub loss_m2d: f64,
    pub loss_clap: f64,
    pub partitions: Vec<MaskPartition>,
}

fn check_stage(cfg: &StageConfig, allowed: &[StageId]) -> Result<()> {
    if !allowed.contains(&cfg.stage) {
        return invalid(format!("step does not accept stage {} configuration", cfg.stage));
    }
    cfg.validate()
}

/// Graph pieces shared by the contrastive branches.
fn clap_branch(g: &mut Graph, state: &ModelState, audio: &[Var], text: &[Var]) -> Result<Var> {
    let a = g.concat_rows(audio);
    let t = g.concat_rows(text);
    losses::SemanticBatch::new(g.value(a).clone(), g.value(t).clone())?;
    let s = losses::similarity_graph(g, a, t);
    let tau = g.param(names::TAU, &state.tau, true);
    Ok(losses::clap_loss_graph(g, s, tau))
}

/// Forward graph of the stage-1 objective for fixed partitions.
pub struct Stage1Graph {
    pub graph: Graph,
    pub total: Var,
    pub m2d: Var,
    pub clap: Var,
}

/// Builds the joint masked-prediction + contrastive loss.
///
/// Per sample: the online encoder sees the visible patches, the predictor
/// predicts the masked-patch features, and the target encoder (constants,
/// so no gradient) encodes the masked patches into standardized targets.
/// The audio projector summarizes the visible features and the embedding
/// map turns the cached caption embedding into the paired text feature.
pub fn stage1_loss_graph(
    state: &ModelState,
    batch: &[Stage1Example],
    parts: &[MaskPartition],
    weights: LossWeights,
) -> Result<Stage1Graph> {
    if batch.is_empty() || batch.len() != parts.len() {
        return invalid(format!("{} examples for {} partitions", batch.len(), parts.len()));
    }
    let mut g = Graph::new();
    let mut m2d_terms = Vec::with_capacity(batch.len());
    let mut masked_total = 0usize;
    let (mut audio, mut text) = (Vec::new(), Vec::new());
    for (ex, part) in batch.iter().zip(parts) {
        if part.n != ex.grid.len() || part.visible_idx.is_empty() || part.masked_idx.is_empty() {
            return invalid("stage 1 needs both visible and masked patches");
        }
        let z_v = state.online.forward(&mut g, names::ONLINE, &ex.grid, &part.visible_idx, true)?;
        let pe = state.online.posenc_for(&ex.grid)?;
        let pred = state.predictor.forward(&mut g, names::PREDICTOR, z_v, &pe, part, true);
        let z_m = state.target.forward(&mut g, names::TARGET, &ex.grid, &part.masked_idx, false)?;
        let target = g.constant(standardize_targets(g.value(z_m), state.config.target_norm)?);
        m2d_terms.push(losses::m2d_loss_sum_graph(&mut g, pred, target));
        masked_total += part.masked_idx.len();
        audio.push(state.projector.forward(&mut g, names::PROJECTOR, z_v, true));
        text.push(state.text.forward_embedding(&mut g, names::TEXT, &ex.text_embedding, true)?);
    }
    let m2d_sum = g.concat_cols(&m2d_terms);
    let m2d_sum = g.sum_all(m2d_sum);
    let m2d = g.scale(m2d_sum, 1.0 / masked_total as f64);
    let clap = clap_branch(&mut g, state, &audio, &text)?;
    let wm = g.scale(m2d, weights.lambda_m2d);
    let wc = g.scale(clap, weights.lambda_clap);
    let total = g.add(wm, wc);
    Ok(Stage1Graph {
        graph: g,
        total,
        m2d,
        clap,
    })
}

/// One stage-1 optimizer step. Afterwards the temperature is clipped and
/// the target encoder takes an EMA step with decay `ema_alpha`.
pub fn stage1_step<R: Rng + ?Sized>(
    state: &mut ModelState,
    batch: &[Stage1Example],
    cfg: &StageConfig,
    rng: &mut R,
    opt: &mut OptimizerState,
    lr: f64,
    ema_alpha: f64,
) -> Result<StepReport> {
    check_stage(cfg, &[StageId::Stage1])?;
    let partitions = batch
        .iter()
        .map(|ex| sample_partition(ex.grid.len(), cfg.mask_ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    let sg = stage1_loss_graph(state, batch, &partitions, cfg.weights)?;
    let grads = sg.graph.backward(sg.total)?;
    debug_assert!(grads.names().all(|n| !n.starts_with(names::TARGET)));
    opt.apply(state, &grads, lr);
    state.tau = Matrix::scalar(clip_temperature(state.tau()));
    ema_update_in_place(&mut state.target, &state.online, ema_alpha)?;
    let v = |x: Var| sg.graph.value(x).to_scalar();
    Ok(StepReport {
        loss_total: v(sg.total),
        loss_m2d: v(sg.m2d),
        loss_clap: v(sg.clap),
        partitions,
    })
}

/// Contrastive loss of stage 2/2.1 with the audio encoder as constants.
pub fn stage2_loss_graph(state: &ModelState, batch: &[Stage2Example], parts: &[MaskPartition]) -> Result<(Graph, Var)> {
    if !state.has_text_encoder() {
        return invalid("stage 2 needs a text encoder; attach one first");
    }
    if batch.is_empty() || batch.len() != parts.len() {
        return invalid(format!("{} examples for {} partitions", batch.len(), parts.len()));
    }
    let mut g = Graph::new();
    let (mut audio, mut text) = (Vec::new(), Vec::new());
    for (ex, part) in batch.iter().zip(parts) {
        if part.n != ex.grid.len() || part.visible_idx.is_empty() {
            return invalid("no visible patches");
        }
        let z_v = state.online.forward(&mut g, names::ONLINE, &ex.grid, &part.visible_idx, false)?;
        audio.push(state.projector.forward(&mut g, names::PROJECTOR, z_v, true));
        text.push(state.text.forward_tokens(&mut g, names::TEXT, &ex.tokens, true)?);
    }
    let loss = clap_branch(&mut g, state, &audio, &text)?;
    Ok((g, loss))
}

/// Contrastive step with the audio encoder frozen: only the projector, the
/// text encoder and the temperature move.
pub fn stage2_step<R: Rng + ?Sized>(
    state: &mut ModelState,
    batch: &[Stage2Example],
    cfg: &StageConfig,
    rng: &mut R,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<StepReport> {
    check_stage(cfg, &[StageId::Stage2, StageId::Stage2_1])?;
    let partitions = batch
        .iter()
        .map(|ex| sample_partition(ex.grid.len(), cfg.mask_ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    let (g, loss) = stage2_loss_graph(state, batch, &partitions)?;
    let grads = g.backward(loss)?;
    debug_assert!(grads.names().all(|n| !n.starts_with(names::ONLINE)));
    opt.apply(state, &grads, lr);
    state.tau = Matrix::scalar(clip_temperature(state.tau()));
    let loss = g.value(loss).to_scalar();
    Ok(StepReport {
        loss_total: loss,
        loss_m2d: 0.0,
        loss_clap: loss,
        partitions,
    })
}

/// Clip feature (time average of the frequency-concatenated patch features)
/// of an encoder output `[n_f·n_t × D]`, as a `[1 × n_f·D]` graph node.
pub fn clip_feature_graph(g: &mut Graph, z: Var, n_f: usize, n_t: usize) -> Var {
    let parts: Vec<Var> = (0..n_f)
        .map(|f| {
            let idx: Vec<usize> = (f * n_t..(f + 1) * n_t).collect();
            let rows = g.gather_rows(z, &idx);
            g.mean_rows(rows)
        })
        .collect();
    g.concat_cols(&parts)
}

/// Parameters of the supervised head plus the encoder being tuned.
struct FinetuneModel<'a> {
    state: &'a mut ModelState,
    head: &'a mut Linear,
}

impl Params for FinetuneModel<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.state.visit(prefix, f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.state.visit_mut(prefix, f);
        self.head.visit_mut("head", f);
    }
}

/// One multi-label fine-tuning step on clip features; returns the mean BCE.
pub fn finetune_step(
    state: &mut ModelState,
    head: &mut Linear,
    batch: &[LabeledExample],
    cfg: &StageConfig,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    check_stage(cfg, &[StageId::Stage1_1])?;
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let classes = head.w.cols();
    let mut g = Graph::new();
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Matrix::zeros(batch.len(), classes);
    for (i, ex) in batch.iter().enumerate() {
        if ex.labels.len() != classes {
            return invalid(format!("example has {} labels, head has {classes}", ex.labels.len()));
        }
        let all: Vec<usize> = (0..ex.grid.len()).collect();
        let z = state
            .online
            .forward(&mut g, names::ONLINE, &ex.grid, &all, !cfg.freeze_audio_encoder)?;
        let clip = clip_feature_graph(&mut g, z, ex.grid.n_f, ex.grid.n_t);
        logits.push(head.forward(&mut g, "head", clip, true));
        targets.row_mut(i).copy_from_slice(&ex.labels);
    }
    let logits = g.concat_rows(&logits);
    let loss = g.bce_with_logits(logits, &targets);
    let grads = g.backward(loss)?;
    opt.apply(&mut FinetuneModel { state, head }, &grads, lr);
    Ok(g.value(loss).to_scalar())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub state: ModelState,
    pub head: Linear,
    pub epoch_losses: Vec<f64>,
}

/// Supervised multi-label fine-tuning of the online encoder with a linear
/// head on the clip feature (head only when the encoder is frozen).
pub fn stage1_1_finetune(
    state: &ModelState,
    data: &[LabeledExample],
    cfg: &StageConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    check_stage(cfg, &[StageId::Stage1_1])?;
    let first = data.first().ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = first.grid.n_f * state.config.dim;
    let mut head = Linear::new(feat, first.labels.len(), state.config.init_std, &mut rng);
    let mut state = state.clone();
    let mut opt = OptimizerState::for_stage(cfg);
    let schedule = Schedule::new(cfg, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let lr = schedule.lr(step)?;
            sum += finetune_step(&mut state, &mut head, &batch, cfg, &mut opt, lr)?;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(FinetuneOutcome {
        state,
        head,
        epoch_losses,
    })
}

/// Step-level schedules derived from a stage config and dataset size.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    base_lr: f64,
    ema_start: f64,
    ema_end: f64,
}

impl Schedule {
    pub fn new(cfg: &StageConfig, dataset_len: usize) -> Self {
        let steps_per_epoch = dataset_len.div_ceil(cfg.batch_size).max(1);
        Self {
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
            warmup_steps: steps_per_epoch * cfg.warmup_epochs,
            base_lr: cfg.base_lr,
            ema_start: cfg.ema_start,
            ema_end: cfg.ema_end,
        }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        lr_at(step, self.total_steps, self.warmup_steps, self.base_lr)
    }

    /// Decay used for the update made by optimizer step `step` (0-based);
    /// the final step uses the end value.
    pub fn ema(&self, step: usize) -> Result<f64> {
        ema_decay_at(step + 1, self.total_steps, self.ema_start, self.ema_end)
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_m2d: f64,
    pub loss_clap: f64,
    pub lr: f64,
    pub ema: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,loss_total,loss_m2d,loss_clap,lr,ema";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9}",
            self.epoch, self.step, self.loss_total, self.loss_m2d, self.loss_clap, self.lr, self.ema
        )
    }
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOSS_LOG_HEADER}")?;
    for r in records {
        writeln!(f, "{}", r.csv_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Mean total loss of each epoch, in order.
pub fn epoch_means(records: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.loss_total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss_total, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

pub enum StageData<'a> {
    Stage1(&'a [Stage1Example]),
    Stage2(&'a [Stage2Example]),
}

impl StageData<'_> {
    fn len(&self) -> usize {
        match self {
            Self::Stage1(d) => d.len(),
            Self::Stage2(d) => d.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub state: ModelState,
    pub log: Vec<LossRecord>,
}

/// Runs every epoch of a pre-training stage.
///
/// Deterministic for a fixed `seed`. With `checkpoint_dir` set, writes
/// `epoch-NNN.m2dk` after each epoch and `final.m2dk` at the end.
pub fn run_stage(
    cfg: &StageConfig,
    data: StageData<'_>,
    state: &ModelState,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    match (&data, cfg.stage) {
        (StageData::Stage1(_), StageId::Stage1) | (StageData::Stage2(_), StageId::Stage2 | StageId::Stage2_1) => {}
        _ => return Err(Error::InvalidConfig(format!("data does not fit stage {}", cfg.stage))),
    }
    if data.len() == 0 {
        return invalid("empty training data");
    }
    let mut state = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::for_stage(cfg);
    let schedule = Schedule::new(cfg, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(schedule.total_steps);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = schedule.lr(step)?;
            let (report, ema) = match &data {
                StageData::Stage1(d) => {
                    let batch: Vec<Stage1Example> = chunk.iter().map(|&i| d[i].clone()).collect();
                    let ema = schedule.ema(step)?;
                    (stage1_step(&mut state, &batch, cfg, &mut rng, &mut opt, lr, ema)?, ema)
                }
                StageData::Stage2(d) => {
                    let batch: Vec<Stage2Example> = chunk.iter().map(|&i| d[i].clone()).collect();
                    (stage2_step(&mut state, &batch, cfg, &mut rng, &mut opt, lr)?, 0.0)
                }
            };
            if !report.loss_total.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite loss at step {step}")));
            }
            log.push(LossRecord {
                epoch,
                step,
                loss_total: report.loss_total,
                loss_m2d: report.loss_m2d,
                loss_clap: report.loss_clap,
                lr,
                ema,
            });
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            state.save(&dir.join(format!("epoch-{epoch:03}.m2dk")))?;
        }
    }
    if let Some(dir) = checkpoint_dir {
        state.save(&dir.join("final.m2dk"))?;
    }
    Ok(StageOutcome { state, log })
}
