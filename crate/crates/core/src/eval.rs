//! Linear probe, zero-shot classification, retrieval metrics, projector
//! attention maps and feature/metric file I/O.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_softmax_rows, sigmoid, softmax_rows, Graph};
use crate::error::{invalid, Error, Result};
use crate::frontend::{patchify, LogMel, MelSpectrogram, PatchGrid, Waveform, PATCH};
use crate::network::{AudioProjectorParams, ModelState};
use crate::tensor::{matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// Class index per row.
    Single { ids: Vec<usize>, classes: usize },
    /// Multi-hot `[N × C]`.
    Multi(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Self::Single { ids, .. } => ids.len(),
            Self::Multi(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Single { classes, .. } => *classes,
            Self::Multi(m) => m.cols(),
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Self::Single { ids, classes } => Self::Single {
                ids: idx.iter().map(|&i| ids[i]).collect(),
                classes: *classes,
            },
            Self::Multi(m) => Self::Multi(m.select_rows(idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatureSet {
    pub features: Matrix,
    pub labels: Labels,
    pub split: Split,
}

impl LabeledFeatureSet {
    pub fn new(features: Matrix, labels: Labels, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return invalid(format!("{} feature rows for {} labels", features.rows(), labels.len()));
        }
        match &labels {
            Labels::Single { ids, classes } => {
                if let Some(&bad) = ids.iter().find(|&&c| c >= *classes) {
                    return invalid(format!("label {bad} outside {classes} classes"));
                }
            }
            Labels::Multi(m) => {
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return invalid("multi-hot labels must be 0 or 1");
                }
            }
        }
        if !features.is_finite() {
            return invalid("non-finite feature values");
        }
        Ok(Self { features, labels, split })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            max_epochs: 200,
            patience: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Accuracy (single-label) or macro mAP (multi-label) on the test split.
    pub test_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_history: Vec<f64>,
}

struct LinearHead {
    w: Matrix,
    b: Vec<f64>,
}

impl LinearHead {
    fn logits(&self, x: &Matrix) -> Matrix {
        let mut out = matmul(x, false, &self.w, false);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.b) {
                *o += b;
            }
        }
        out
    }
}

fn standardizer(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((s, v), m) in std.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = std.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_standardizer(x: &Matrix, (mean, std): &(Vec<f64>, Vec<f64>)) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Mean loss and `dL/dlogits` (softmax CE or sigmoid BCE).
fn loss_and_grad(logits: &Matrix, labels: &Labels) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    match labels {
        Labels::Single { ids, .. } => {
            let logp = log_softmax_rows(logits);
            let mut grad = softmax_rows(logits);
            let mut loss = 0.0;
            for (r, &c) in ids.iter().enumerate() {
                loss -= logp.get(r, c);
                grad.set(r, c, grad.get(r, c) - 1.0);
            }
            (loss / n, grad.scale(1.0 / n))
        }
        Labels::Multi(t) => {
            let count = logits.len() as f64;
            let mut loss = 0.0;
            let grad = logits.zip_map(t, |x, y| (sigmoid(x) - y) / count);
            for (&x, &y) in logits.data().iter().zip(t.data()) {
                loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
            (loss / count, grad)
        }
    }
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn accuracy(logits: &Matrix, ids: &[usize]) -> f64 {
    let hits = ids
        .iter()
        .enumerate()
        .filter(|&(r, &c)| argmax(logits.row(r)) == c)
        .count();
    hits as f64 / ids.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Macro average precision over classes that have at least one positive.
pub fn mean_average_precision(scores: &Matrix, targets: &Matrix) -> f64 {
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..scores.cols() {
        let mut order: Vec<usize> = (0..scores.rows()).collect();
        order.sort_by(|&a, &b| scores.get(b, c).total_cmp(&scores.get(a, c)).then(a.cmp(&b)));
        let positives = (0..targets.rows()).filter(|&r| targets.get(r, c) > 0.5).count();
        if positives == 0 {
            continue;
        }
        let mut hits = 0;
        let mut ap = 0.0;
        for (rank, &r) in order.iter().enumerate() {
            if targets.get(r, c) > 0.5 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / positives as f64;
        classes += 1;
    }
    if classes == 0 {
        0.0
    } else {
        total / classes as f64
    }
}

fn metric(logits: &Matrix, labels: &Labels) -> f64 {
    match labels {
        Labels::Single { ids, .. } => accuracy(logits, ids),
        Labels::Multi(t) => mean_average_precision(logits, t),
    }
}

/// Trains one linear layer on frozen features with Adam, early-stopping on
/// the validation metric (ties broken by lower validation loss), and
/// reports the test metric of the best epoch's weights. Features are
/// standardized with training-split statistics.
pub fn linear_probe(
    train: &LabeledFeatureSet,
    val: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    for (name, s) in [("train", train), ("val", val), ("test", test)] {
        if s.is_empty() {
            return invalid(format!("empty {name} split"));
        }
    }
    let (f, c) = (train.features.cols(), train.labels.classes());
    if [val, test]
        .iter()
        .any(|s| s.features.cols() != f || s.labels.classes() != c)
    {
        return invalid("splits disagree on feature width or class count");
    }
    if matches!(
        (&train.labels, &val.labels, &test.labels),
        (Labels::Single { .. }, Labels::Single { .. }, Labels::Single { .. })
            | (Labels::Multi(_), Labels::Multi(_), Labels::Multi(_))
    ) == false
    {
        return invalid("splits mix single- and multi-label targets");
    }
    if cfg.batch_size == 0 {
        return invalid("batch_size must be positive");
    }
    let norm = standardizer(&train.features);
    let xtr = apply_standardizer(&train.features, &norm);
    let xva = apply_standardizer(&val.features, &norm);
    let xte = apply_standardizer(&test.features, &norm);

    let mut head = LinearHead {
        w: Matrix::zeros(f, c),
        b: vec![0.0; c],
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut mw = Matrix::zeros(f, c);
    let mut vw = Matrix::zeros(f, c);
    let mut mb = vec![0.0; c];
    let mut vb = vec![0.0; c];
    let mut t = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_weights = (head.w.clone(), head.b.clone());
    let mut best_epoch = 0;
    let mut val_history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = xtr.select_rows(chunk);
            let labels = train.labels.select(chunk);
            let (_, dlogits) = loss_and_grad(&head.logits(&x), &labels);
            let gw = matmul(&x, true, &dlogits, false);
            let gb: Vec<f64> = (0..c).map(|j| (0..dlogits.rows()).map(|r| dlogits.get(r, j)).sum()).collect();
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for (((p, &g), m), v) in head
                .w
                .data_mut()
                .iter_mut()
                .zip(gw.data())
                .zip(mw.data_mut())
                .zip(vw.data_mut())
                .chain(head.b.iter_mut().zip(&gb).zip(mb.iter_mut()).zip(vb.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        epochs_run = epoch;
        let vl = head.logits(&xva);
        let vm = metric(&vl, &val.labels);
        let (vloss, _) = loss_and_grad(&vl, &val.labels);
        val_history.push(vm);
        if vm > best.0 || (vm == best.0 && vloss < best.1) {
            best = (vm, vloss);
            best_epoch = epoch;
            best_weights = (head.w.clone(), head.b.clone());
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    head.w = best_weights.0;
    head.b = best_weights.1;
    Ok(ProbeResult {
        test_metric: metric(&head.logits(&xte), &test.labels),
        best_epoch,
        epochs_run,
        val_history,
    })
}

pub const CREMAD_PHRASES: [&str; 6] = [
    "angry person talking",
    "someone talking in disgust",
    "someone talking with a sense of fear",
    "someone talking happily and joyfully",
    "someone talking calmly",
    "someone talking sadly",
];

/// CREMA-D emotion codes in phrase order.
pub const CREMAD_CODES: [&str; 6] = ["ANG", "DIS", "FEA", "HAP", "NEU", "SAD"];

/// Zero-shot caption for a task's label(s). Multi-label tasks
/// (`audioset`, `fsd50k`) join labels with ", "; CREMA-D takes an emotion
/// code or its phrase index.
pub fn caption_from_label(task: &str, labels: &[&str]) -> Result<String> {
    let task = task.to_ascii_lowercase();
    let task = task.trim_end_matches("-style");
    let single = || -> Result<&str> {
        match labels {
            [one] => Ok(one),
            _ => invalid(format!("task {task} takes exactly one label, got {}", labels.len())),
        }
    };
    match task {
        "as" | "audioset" | "fsd" | "fsd50k" => {
            if labels.is_empty() {
                return invalid("no labels");
            }
            Ok(format!("{} can be heard", labels.join(", ")))
        }
        "esc50" | "esc-50" | "us8k" | "urbansound8k" => Ok(format!("{} can be heard", single()?)),
        "gtzan" => Ok(format!("{} music can be heard", single()?)),
        "nsynth" => Ok(format!("the musical instrument sound of {} can be heard", single()?)),
        "cremad" | "crema-d" | "crm-d" => {
            let l = single()?;
            let idx = CREMAD_CODES
                .iter()
                .position(|c| c.eq_ignore_ascii_case(l))
                .or_else(|| l.parse::<usize>().ok().filter(|&i| i < 6))
                .ok_or_else(|| Error::InvalidInput(format!("unknown CREMA-D label {l:?}")))?;
            Ok(format!("{} can be heard", CREMAD_PHRASES[idx]))
        }
        other => invalid(format!("no caption template for task {other:?}")),
    }
}

fn unit_rows(m: &Matrix, what: &str) -> Result<Matrix> {
    let norms = m.row_norms();
    if let Some(r) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return invalid(format!("{what} row {r} has zero or non-finite norm"));
    }
    let mut out = m.clone();
    for (r, n) in norms.into_iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Cosine-similarity argmax per audio row; ties go to the lowest class index.
pub fn zero_shot_classify(audio: &Matrix, classes: &Matrix) -> Result<Vec<usize>> {
    if audio.cols() != classes.cols() {
        return invalid(format!("audio dim {} vs class dim {}", audio.cols(), classes.cols()));
    }
    if classes.rows() == 0 {
        return invalid("no classes");
    }
    let s = matmul(&unit_rows(audio, "audio")?, false, &unit_rows(classes, "class")?, true);
    Ok((0..s.rows()).map(|r| argmax(s.row(r))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    TextToAudio,
    AudioToText,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub map_at_10: f64,
    pub direction: Direction,
}

/// 1-based rank of gallery item `j` in descending-score order, ties broken
/// by gallery index.
fn rank_of(row: &[f64], j: usize) -> usize {
    let s = row[j];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < j))
        .count()
}

/// R@1/5/10 and mAP@10 for similarity rows `s[q][g]`; `ground_truth[q]`
/// lists the relevant gallery items of query `q`. AP@10 is
/// `Σ_{k≤10, item k relevant} precision@k / min(|relevant|, 10)`.
pub fn retrieval_metrics(s: &Matrix, ground_truth: &[Vec<usize>], direction: Direction) -> Result<RetrievalResult> {
    if ground_truth.len() != s.rows() || s.rows() == 0 {
        return invalid(format!("{} ground-truth lists for {} queries", ground_truth.len(), s.rows()));
    }
    if !s.is_finite() {
        return invalid("non-finite similarity");
    }
    let (mut r1, mut r5, mut r10, mut map) = (0.0, 0.0, 0.0, 0.0);
    for (q, rel) in ground_truth.iter().enumerate() {
        if rel.is_empty() {
            return invalid(format!("query {q} has no relevant item"));
        }
        let row = s.row(q);
        let mut ranks = Vec::with_capacity(rel.len());
        for &j in rel {
            if j >= s.cols() {
                return invalid(format!("relevant item {j} outside gallery of {}", s.cols()));
            }
            ranks.push(rank_of(row, j));
        }
        ranks.sort_unstable();
        ranks.dedup();
        let best = ranks[0];
        r1 += f64::from(best <= 1);
        r5 += f64::from(best <= 5);
        r10 += f64::from(best <= 10);
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .take_while(|&(_, &r)| r <= 10)
            .map(|(hits, &r)| (hits + 1) as f64 / r as f64)
            .sum();
        map += ap / ranks.len().min(10) as f64;
    }
    let n = s.rows() as f64;
    Ok(RetrievalResult {
        r_at_1: r1 / n,
        r_at_5: r5 / n,
        r_at_10: r10 / n,
        map_at_10: map / n,
        direction,
    })
}

/// Attention of the projector's class-token query over the `k` patch keys
/// (softmax of `q·Kᵀ/√d` with the class token's own key left out).
pub fn attention_map(ap: &AudioProjectorParams, z: &Matrix) -> Result<Vec<f64>> {
    let AudioProjectorParams::Transformer { class_token, blocks } = ap else {
        return Err(Error::Unsupported("attention maps need a transformer projector".into()));
    };
    let [block] = blocks.as_slice() else {
        return Err(Error::Unsupported(format!(
            "attention maps need a single-block projector, got {} blocks",
            blocks.len()
        )));
    };
    if block.heads != 1 {
        return Err(Error::Unsupported(format!(
            "attention maps need a single-head projector, got {} heads",
            block.heads
        )));
    }
    if z.rows() == 0 || z.cols() != class_token.cols() {
        return invalid(format!("patch features {:?} for projector dim {}", z.shape(), class_token.cols()));
    }
    let d = class_token.cols();
    let mut g = Graph::new();
    let x = g.constant(Matrix::vstack(&[class_token, z]));
    let h = block.ln1.forward(&mut g, "ln1", x, false);
    let qkv = block.qkv.forward(&mut g, "qkv", h, false);
    let qkv = g.value(qkv);
    let q = &qkv.row(0)[..d];
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (1..qkv.rows())
        .map(|r| q.iter().zip(&qkv.row(r)[d..2 * d]).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    Ok(softmax_rows(&Matrix::row_vector(&logits)).into_vec())
}

/// Attention weights (patch order `f·n_t + t`) as an 8-bit grayscale PGM,
/// highest frequency on top, each patch drawn as `scale × scale` pixels.
pub fn write_attention_pgm(path: &Path, weights: &[f64], n_f: usize, n_t: usize, scale: usize) -> Result<()> {
    if weights.len() != n_f * n_t || scale == 0 {
        return invalid(format!("{} weights for a {n_f}x{n_t} grid", weights.len()));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let (w, h) = (n_t * scale, n_f * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        let f = n_f - 1 - y / scale;
        for x in 0..w {
            let v = weights[f * n_t + x / scale];
            let px = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            out.push(px.clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Splits a standardized spectrogram into consecutive `chunk_frames`
/// windows; the last window is zero-padded.
pub fn chunk_grids(mel: &MelSpectrogram, chunk_frames: usize) -> Result<Vec<PatchGrid>> {
    if chunk_frames == 0 || chunk_frames % PATCH != 0 {
        return invalid(format!("chunk length {chunk_frames} is not a positive multiple of {PATCH}"));
    }
    let frames = mel.frames().max(1);
    (0..frames.div_ceil(chunk_frames))
        .map(|i| {
            let start = i * chunk_frames;
            let mut chunk = Matrix::zeros(mel.bins(), chunk_frames);
            for f in 0..mel.bins() {
                for t in start..(start + chunk_frames).min(mel.frames()) {
                    chunk.set(f, t - start, mel.values.get(f, t));
                }
            }
            patchify(&MelSpectrogram { values: chunk })
        })
        .collect()
}

/// Clip feature of a clip of any length: the average over consecutive
/// encoder-length chunks.
pub fn clip_feature_chunked(state: &ModelState, logmel: &LogMel, w: &Waveform) -> Result<Vec<f64>> {
    let mel = crate::frontend::standardize(
        &logmel.compute(w)?,
        crate::frontend::NORM_MEAN,
        crate::frontend::NORM_STD,
    )?;
    let grids = chunk_grids(&mel, state.config.n_t * PATCH)?;
    let mut acc: Vec<f64> = Vec::new();
    for g in &grids {
        let f = crate::pipeline::clip_feature(state, g)?;
        if acc.is_empty() {
            acc = vec![0.0; f.len()];
        }
        acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
    }
    let n = grids.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

const FEATURE_MAGIC: &[u8; 4] = b"M2DF";
const FEATURE_VERSION: u32 = 1;

/// Sidecar manifest path: `<path>.ids`.
pub fn feature_ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Header `M2DF`, u32 version, u64 rows, u32 cols, then row-major f32 LE;
/// ids go one per line into the sidecar.
pub fn write_features(path: &Path, features: &Matrix, ids: &[String]) -> Result<()> {
    if ids.len() != features.rows() {
        return invalid(format!("{} ids for {} feature rows", ids.len(), features.rows()));
    }
    if let Some(bad) = ids.iter().find(|id| id.contains('\n') || id.is_empty()) {
        return invalid(format!("id {bad:?} cannot be stored one per line"));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(features.rows() as u64).to_le_bytes())?;
    w.write_all(&(features.cols() as u32).to_le_bytes())?;
    for &v in features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let mut side = BufWriter::new(std::fs::File::create(feature_ids_path(path))?);
    for id in ids {
        writeln!(side, "{id}")?;
    }
    side.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<(Matrix, Vec<String>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 20];
    read_exact(&mut r, &mut head)?;
    if &head[..4] != FEATURE_MAGIC {
        return Err(Error::Format("bad feature-file magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature-file version {version}")));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    read_exact(&mut r, &mut bytes)?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after feature data".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let side = feature_ids_path(path);
    if !side.exists() {
        return Err(Error::MissingInput(side));
    }
    let ids: Vec<String> = BufReader::new(std::fs::File::open(&side)?)
        .lines()
        .collect::<std::io::Result<_>>()?;
    if ids.len() != rows {
        return Err(Error::Format(format!("{} ids for {rows} feature rows", ids.len())));
    }
    Ok((Matrix::from_vec(rows, cols, data), ids))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

/// `metric,value` CSV.
pub fn write_metrics_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v:.6}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn format_metrics_table(rows: &[(String, f64)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>8}\n", "metric", "value");
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v:>8.4}");
    }
    out
}
