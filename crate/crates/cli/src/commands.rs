use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use m2d_clap::config::RunConfig;
use m2d_clap::datakit::{
    cache_read, load_manifest, synth_corpus, write_manifest, write_wav, EmbeddingCache, ManifestEntry, Source,
    Tokenizer,
};
use m2d_clap::eval::{
    attention_map, caption_from_label, clip_feature_chunked, format_metrics_table, linear_probe, read_features,
    retrieval_metrics, write_attention_pgm, write_features, write_metrics_csv, zero_shot_classify, Direction,
    LabeledFeatureSet, Labels, ProbeConfig, Split,
};
use m2d_clap::frontend::{LogMel, PatchGrid, PATCH};
use m2d_clap::network::{encode_all, encode_text, ModelState};
use m2d_clap::pipeline::{audio_semantic, grids_from_waveforms, labeled_examples, stage1_examples, stage2_examples, text_semantic};
use m2d_clap::trainer::{
    run_stage, stage1_1_finetune, write_loss_log, LossRecord, StageData, StageOutcome,
};
use m2d_clap::{Error, Matrix, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Command, Common, Inputs, SynthArgs};

const TRAIN: &str = "train";
const HELDOUT: &str = "heldout";
const CACHE_FILE: &str = "embeddings.m2dc";
const VOCAB_FILE: &str = "vocab.txt";
const FINAL: &str = "final.m2dk";

struct Env {
    cfg: RunConfig,
    root: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

impl Env {
    fn new(common: &Common, verb: &str, tweak: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &common.set {
            cfg.set(s)?;
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        tweak(&mut cfg);
        cfg.validate()?;
        let root = common
            .out
            .clone()
            .or_else(|| std::env::var_os("M2DC_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let data = common.data.clone().unwrap_or_else(|| root.join("data"));
        let run = if verb == "synth-data" { data.clone() } else { root.join(verb) };
        Ok(Self { cfg, root, data, run })
    }

    /// Creates the run directory and freezes the effective config into it.
    fn start(&self) -> Result<()> {
        std::fs::create_dir_all(&self.run)?;
        std::fs::write(self.run.join("config.txt"), self.cfg.to_text())?;
        Ok(())
    }

    fn checkpoint(&self, inputs: &Inputs, default_verb: &str) -> PathBuf {
        inputs
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.root.join(default_verb).join(FINAL))
    }

    fn frames(&self) -> usize {
        self.cfg.model.n_t * PATCH
    }

    fn split(&self, name: &str) -> Result<Split_> {
        let entries = load_manifest(&self.data.join(format!("{name}.jsonl")))?;
        if entries.is_empty() {
            return Err(Error::InvalidInput(format!("{name} manifest is empty")));
        }
        let waves = entries
            .iter()
            .map(|e| e.waveform(&self.data))
            .collect::<Result<Vec<_>>>()?;
        let grids = grids_from_waveforms(&waves, self.frames())?;
        Ok(Split_ { entries, grids })
    }

    fn cache(&self) -> Result<EmbeddingCache> {
        cache_read(&self.data.join(CACHE_FILE))
    }

    fn metrics(&self, rows: &[(String, f64)]) -> Result<()> {
        write_metrics_csv(&self.run.join("metrics.csv"), rows)?;
        print!("{}", format_metrics_table(rows));
        Ok(())
    }
}

struct Split_ {
    entries: Vec<ManifestEntry>,
    grids: Vec<PatchGrid>,
}

impl Split_ {
    fn captions(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.caption.clone()).collect()
    }
}

fn load_state(path: &Path) -> Result<ModelState> {
    ModelState::load(path)
}

fn vocab_beside(checkpoint: &Path) -> Result<Tokenizer> {
    Tokenizer::load(&checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

/// Sorted label vocabulary of the entries' first labels.
fn label_index(entries: &[ManifestEntry]) -> Result<Vec<String>> {
    let set: BTreeSet<String> = entries
        .iter()
        .map(|e| {
            e.labels
                .first()
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("entry {:?} has no label", e.id)))
        })
        .collect::<Result<_>>()?;
    Ok(set.into_iter().collect())
}

fn class_ids(entries: &[ManifestEntry], labels: &[String]) -> Result<Vec<usize>> {
    entries
        .iter()
        .map(|e| {
            let l = e.labels.first().map(String::as_str).unwrap_or_default();
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::InvalidInput(format!("label {l:?} of {:?} not seen in training", e.id)))
        })
        .collect()
}

/// Text features of captions: cached embeddings through the stage-1 map, or
/// the stage-2 text encoder.
fn text_features(env: &Env, state: &ModelState, checkpoint: &Path, captions: &[String]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = if state.has_text_encoder() {
        let tok = vocab_beside(checkpoint)?;
        let m2d_clap::network::TextPathParams::Encoder(enc) = &state.text else { unreachable!() };
        let max_len = enc.max_len();
        captions
            .iter()
            .map(|c| encode_text(&state.text, &tok.encode(c, max_len)))
            .collect::<Result<_>>()?
    } else {
        let cache = env.cache()?;
        captions
            .iter()
            .map(|c| {
                let e = cache
                    .get(c)
                    .ok_or_else(|| Error::InvalidInput(format!("no cached embedding for caption {c:?}")))?;
                text_semantic(state, &e)
            })
            .collect::<Result<_>>()?
    };
    Ok(Matrix::from_rows(&rows))
}

fn audio_features(state: &ModelState, grids: &[PatchGrid]) -> Result<Matrix> {
    let rows = grids
        .iter()
        .map(|g| audio_semantic(state, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows))
}

fn finish_stage(env: &Env, out: &StageOutcome) -> Result<()> {
    write_loss_log(&env.run.join("loss_log.csv"), &out.log)?;
    let means = m2d_clap::trainer::epoch_means(&out.log);
    let mut rows = vec![("tau".to_string(), out.state.tau())];
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        rows.push(("loss_epoch1".into(), *first));
        rows.push(("loss_final_epoch".into(), *last));
        rows.push(("loss_reduction".into(), 1.0 - last / first));
    }
    env.metrics(&rows)
}

pub fn dispatch(common: &Common, command: Command) -> Result<()> {
    match command {
        Command::SynthData(args) => synth_data(common, &args),
        Command::PretrainStage1 => pretrain_stage1(common),
        Command::FinetuneStage1_1(inputs) => finetune_stage1_1(common, &inputs),
        Command::PretrainStage2(inputs) => pretrain_stage2(common, &inputs, false),
        Command::RefineStage2_1(inputs) => pretrain_stage2(common, &inputs, true),
        Command::ExtractFeatures(inputs) => extract_features(common, &inputs),
        Command::EvalLinear { features } => eval_linear(common, features),
        Command::EvalZeroshot(inputs) => eval_zeroshot(common, &inputs),
        Command::EvalRetrieval(inputs) => eval_retrieval(common, &inputs),
        Command::ExportAttention(inputs) => export_attention(common, &inputs),
    }
}

fn synth_data(common: &Common, args: &SynthArgs) -> Result<()> {
    let env = Env::new(common, "synth-data", |c| {
        if let Some(v) = args.classes {
            c.data.classes = v;
        }
        if let Some(v) = args.per_class {
            c.data.per_class = v;
        }
        if let Some(v) = args.heldout_per_class {
            c.data.heldout_per_class = v;
        }
        if let Some(v) = args.duration {
            c.data.duration_s = v;
        }
    })?;
    env.start()?;
    let d = &env.cfg.data;
    let train = synth_corpus(d.classes, d.per_class, d.duration_s, env.cfg.seed)?;
    let mut heldout = synth_corpus(d.classes, d.heldout_per_class, d.duration_s, env.cfg.seed ^ 0x5eed)?;
    heldout.class_embeddings = train.class_embeddings.clone();
    std::fs::create_dir_all(env.data.join("wav"))?;
    for (name, corpus) in [(TRAIN, &train), (HELDOUT, &heldout)] {
        let mut entries = Vec::with_capacity(corpus.entries.len());
        for (e, w) in corpus.entries.iter().zip(&corpus.waveforms) {
            let id = format!("{name}-{}", e.id);
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(&env.data.join(&rel), w)?;
            entries.push(ManifestEntry {
                id,
                source: Source::Path(rel),
                ..e.clone()
            });
        }
        write_manifest(&env.data.join(format!("{name}.jsonl")), &entries)?;
    }
    let cache = train.embedding_cache()?;
    m2d_clap::datakit::cache_write(&env.data.join(CACHE_FILE), cache.dim, &cache.rows)?;
    println!(
        "wrote {} train and {} held-out clips to {}",
        train.entries.len(),
        heldout.entries.len(),
        env.data.display()
    );
    Ok(())
}

fn pretrain_stage1(common: &Common) -> Result<()> {
    let env = Env::new(common, "pretrain-stage1", |_| {})?;
    let train = env.split(TRAIN)?;
    let cache = env.cache()?;
    env.start()?;
    let data = stage1_examples(&train.grids, &train.captions(), &cache)?;
    let mut rng = ChaCha8Rng::seed_from_u64(env.cfg.seed);
    let state = ModelState::new(env.cfg.model.clone(), &mut rng)?;
    let out = run_stage(&env.cfg.stage1, StageData::Stage1(&data), &state, env.cfg.seed, Some(&env.run))?;
    finish_stage(&env, &out)
}

fn finetune_stage1_1(common: &Common, inputs: &Inputs) -> Result<()> {
    let env = Env::new(common, "finetune-stage1.1", |_| {})?;
    let ckpt = env.checkpoint(inputs, "pretrain-stage1");
    let state = load_state(&ckpt)?;
    let train = env.split(TRAIN)?;
    env.start()?;
    let labels = label_index(&train.entries)?;
    let ids = class_ids(&train.entries, &labels)?;
    let data = labeled_examples(&train.grids, &ids, labels.len());
    let out = stage1_1_finetune(&state, &data, &env.cfg.stage1_1, env.cfg.seed)?;
    out.state.save(&env.run.join(FINAL))?;
    let log: Vec<LossRecord> = out
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, &l)| LossRecord {
            epoch: e + 1,
            step: e,
            loss_total: l,
            loss_m2d: 0.0,
            loss_clap: 0.0,
            lr: env.cfg.stage1_1.base_lr,
            ema: 0.0,
        })
        .collect();
    write_loss_log(&env.run.join("loss_log.csv"), &log)?;
    let rows: Vec<(String, f64)> = out
        .epoch_losses
        .last()
        .map(|&l| vec![("bce_final_epoch".to_string(), l)])
        .unwrap_or_default();
    env.metrics(&rows)
}

fn pretrain_stage2(common: &Common, inputs: &Inputs, refine: bool) -> Result<()> {
    let (verb, from) = if refine {
        ("refine-stage2.1", "pretrain-stage2")
    } else {
        ("pretrain-stage2", "pretrain-stage1")
    };
    let env = Env::new(common, verb, |_| {})?;
    let ckpt = env.checkpoint(inputs, from);
    let mut state = load_state(&ckpt)?;
    let train = env.split(TRAIN)?;
    let captions = train.captions();
    if let Some(e) = train.entries.iter().find(|e| e.caption.is_empty()) {
        return Err(Error::InvalidInput(format!("entry {:?} has no caption", e.id)));
    }
    let tok = if refine {
        if !state.has_text_encoder() {
            return Err(Error::InvalidInput(format!("{} has no text encoder", ckpt.display())));
        }
        vocab_beside(&ckpt)?
    } else {
        let tok = Tokenizer::build(captions.iter().map(String::as_str));
        let mut rng = ChaCha8Rng::seed_from_u64(env.cfg.seed);
        state.attach_text_encoder(tok.len(), &mut rng)?;
        tok
    };
    env.start()?;
    tok.save(&env.run.join(VOCAB_FILE))?;
    let data = stage2_examples(&train.grids, &captions, &tok, env.cfg.model.text_max_len);
    let stage = if refine { &env.cfg.stage2_1 } else { &env.cfg.stage2 };
    let out = run_stage(stage, StageData::Stage2(&data), &state, env.cfg.seed, Some(&env.run))?;
    finish_stage(&env, &out)
}

fn extract_features(common: &Common, inputs: &Inputs) -> Result<()> {
    let env = Env::new(common, "extract-features", |_| {})?;
    let ckpt = env.checkpoint(inputs, "pretrain-stage1");
    let state = load_state(&ckpt)?;
    env.start()?;
    let logmel = LogMel::new();
    for name in [TRAIN, HELDOUT] {
        let entries = load_manifest(&env.data.join(format!("{name}.jsonl")))?;
        let rows = entries
            .iter()
            .map(|e| clip_feature_chunked(&state, &logmel, &e.waveform(&env.data)?))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
        write_features(&env.run.join(format!("{name}.m2df")), &Matrix::from_rows(&rows), &ids)?;
        println!("{name}: {} clips, {} dims", rows.len(), rows.first().map_or(0, Vec::len));
    }
    Ok(())
}

fn eval_linear(common: &Common, features: Option<PathBuf>) -> Result<()> {
    let env = Env::new(common, "eval-linear", |_| {})?;
    let dir = features.unwrap_or_else(|| env.root.join("extract-features"));
    let (xtr, id_tr) = read_features(&dir.join(format!("{TRAIN}.m2df")))?;
    let (xte, id_te) = read_features(&dir.join(format!("{HELDOUT}.m2df")))?;
    let by_id = |name: &str, ids: &[String]| -> Result<Vec<ManifestEntry>> {
        let entries: BTreeMap<String, ManifestEntry> = load_manifest(&env.data.join(format!("{name}.jsonl")))?
            .into_iter()
            .map(|e| (e.id.clone(), e))
            .collect();
        ids.iter()
            .map(|id| {
                entries
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("feature id {id:?} not in {name} manifest")))
            })
            .collect()
    };
    let tr_entries = by_id(TRAIN, &id_tr)?;
    let te_entries = by_id(HELDOUT, &id_te)?;
    env.start()?;
    let labels = label_index(&tr_entries)?;
    let classes = labels.len();
    let y_tr = class_ids(&tr_entries, &labels)?;
    let y_te = class_ids(&te_entries, &labels)?;

    let mut order: Vec<usize> = (0..xtr.rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(env.cfg.seed));
    let n_val = ((xtr.rows() as f64 * env.cfg.probe.val_fraction).round() as usize).clamp(1, xtr.rows() - 1);
    let (val_idx, tr_idx) = order.split_at(n_val);
    let set = |idx: &[usize], split| {
        LabeledFeatureSet::new(
            xtr.select_rows(idx),
            Labels::Single {
                ids: idx.iter().map(|&i| y_tr[i]).collect(),
                classes,
            },
            split,
        )
    };
    let train = set(tr_idx, Split::Train)?;
    let val = set(val_idx, Split::Val)?;
    let test = LabeledFeatureSet::new(xte, Labels::Single { ids: y_te, classes }, Split::Test)?;
    let p = &env.cfg.probe;
    let cfg = ProbeConfig {
        lr: p.lr,
        max_epochs: p.max_epochs,
        patience: p.patience,
        batch_size: p.batch_size,
        seed: env.cfg.seed,
    };
    let r = linear_probe(&train, &val, &test, &cfg)?;
    env.metrics(&[
        ("linear_accuracy".into(), r.test_metric),
        ("best_epoch".into(), r.best_epoch as f64),
        ("epochs_run".into(), r.epochs_run as f64),
    ])
}

/// One caption per class, in label order.
fn class_captions(env: &Env, entries: &[ManifestEntry], labels: &[String]) -> Result<Vec<String>> {
    labels
        .iter()
        .map(|l| match env.cfg.eval.zeroshot_captions.as_str() {
            "template" => caption_from_label(&env.cfg.eval.task, &[l.as_str()]),
            _ => Ok(entries
                .iter()
                .find(|e| e.labels.first() == Some(l))
                .map(|e| e.caption.clone())
                .unwrap_or_default()),
        })
        .collect()
}

fn eval_zeroshot(common: &Common, inputs: &Inputs) -> Result<()> {
    let env = Env::new(common, "eval-zeroshot", |_| {})?;
    let ckpt = env.checkpoint(inputs, "pretrain-stage1");
    let state = load_state(&ckpt)?;
    let train_entries = load_manifest(&env.data.join(format!("{TRAIN}.jsonl")))?;
    let heldout = env.split(HELDOUT)?;
    env.start()?;
    let labels = label_index(&train_entries)?;
    let truth = class_ids(&heldout.entries, &labels)?;
    let captions = class_captions(&env, &train_entries, &labels)?;
    let classes = text_features(&env, &state, &ckpt, &captions)?;
    let audio = audio_features(&state, &heldout.grids)?;
    let pred = zero_shot_classify(&audio, &classes)?;
    let hits = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    env.metrics(&[
        ("zeroshot_accuracy".into(), hits as f64 / truth.len() as f64),
        ("classes".into(), labels.len() as f64),
        ("clips".into(), truth.len() as f64),
    ])
}

fn eval_retrieval(common: &Common, inputs: &Inputs) -> Result<()> {
    let env = Env::new(common, "eval-retrieval", |_| {})?;
    let ckpt = env.checkpoint(inputs, "pretrain-stage1");
    let state = load_state(&ckpt)?;
    let heldout = env.split(HELDOUT)?;
    env.start()?;
    let captions: Vec<String> = heldout
        .captions()
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let caption_of: Vec<usize> = heldout
        .entries
        .iter()
        .map(|e| captions.iter().position(|c| *c == e.caption).unwrap())
        .collect();
    let unit = |m: Matrix| -> Result<Matrix> { Ok(m2d_clap::losses::normalize_rows(&m)) };
    let text = unit(text_features(&env, &state, &ckpt, &captions)?)?;
    let audio = unit(audio_features(&state, &heldout.grids)?)?;
    let s = m2d_clap::tensor::matmul(&text, false, &audio, true);
    let t2a_gt: Vec<Vec<usize>> = (0..captions.len())
        .map(|c| (0..caption_of.len()).filter(|&i| caption_of[i] == c).collect())
        .collect();
    let a2t_gt: Vec<Vec<usize>> = caption_of.iter().map(|&c| vec![c]).collect();
    let t2a = retrieval_metrics(&s, &t2a_gt, Direction::TextToAudio)?;
    let a2t = retrieval_metrics(&s.transpose(), &a2t_gt, Direction::AudioToText)?;
    let mut rows = Vec::new();
    for (tag, r) in [("t2a", &t2a), ("a2t", &a2t)] {
        rows.push((format!("{tag}_r@1"), r.r_at_1));
        rows.push((format!("{tag}_r@5"), r.r_at_5));
        rows.push((format!("{tag}_r@10"), r.r_at_10));
        rows.push((format!("{tag}_map@10"), r.map_at_10));
    }
    env.metrics(&rows)
}

fn export_attention(common: &Common, inputs: &Inputs) -> Result<()> {
    let env = Env::new(common, "export-attention", |_| {})?;
    let ckpt = env.checkpoint(inputs, "pretrain-stage1");
    let state = load_state(&ckpt)?;
    let heldout = env.split(HELDOUT)?;
    env.start()?;
    let mut rows = Vec::new();
    for (e, g) in heldout.entries.iter().zip(&heldout.grids).take(env.cfg.eval.attention_clips) {
        let z = encode_all(&state.online, g)?;
        let w = attention_map(&state.projector, &z)?;
        let path = env.run.join(format!("{}.pgm", e.id));
        write_attention_pgm(&path, &w, g.n_f, g.n_t, env.cfg.eval.attention_scale)?;
        let peak = w.iter().copied().fold(0.0, f64::max);
        rows.push((format!("{}_peak", e.id), peak));
    }
    env.metrics(&rows)
}
