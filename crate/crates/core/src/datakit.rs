//! Manifests, the caption-embedding cache, a word tokenizer and the seeded
//! synthetic audio-caption corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::frontend::{Waveform, SAMPLE_RATE};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carrier {
    Sine,
    Noise,
    Chirp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_id: usize,
    pub carrier: Carrier,
    pub f0: f64,
    pub seed: u64,
}

const NOISE_FLOOR: f64 = 0.02;

impl SynthSpec {
    /// Deterministic waveform of `duration_s` seconds at 16 kHz.
    pub fn render(&self, duration_s: f64) -> Result<Waveform> {
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            return invalid(format!("duration {duration_s} must be positive"));
        }
        let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
        let sr = SAMPLE_RATE as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = 0.3 + 0.2 * rng.random::<f64>();
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let floor: f64 = StandardNormal.sample(&mut rng);
                let tone = match self.carrier {
                    Carrier::Sine => amp * (std::f64::consts::TAU * self.f0 * t + phase).sin(),
                    Carrier::Noise => amp * Distribution::<f64>::sample(&StandardNormal, &mut rng),
                    Carrier::Chirp => {
                        let k = self.f0 / duration_s;
                        amp * (std::f64::consts::TAU * (self.f0 * t + 0.5 * k * t * t) + phase).sin()
                    }
                };
                (tone + NOISE_FLOOR * floor) as f32
            })
            .collect();
        Ok(Waveform::new(samples))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub labels: Vec<String>,
    pub duration_s: f64,
}

impl ManifestEntry {
    /// Loads the entry's audio; relative paths resolve against `base`.
    pub fn waveform(&self, base: &Path) -> Result<Waveform> {
        match &self.source {
            Source::Path(p) => read_wav(&base.join(p)),
            Source::Synth(spec) => spec.render(self.duration_s),
        }
    }
}

pub fn fill_caption(labels: &[String]) -> String {
    format!("The sound of {}", labels.join(", "))
}

/// Parses a JSON Lines manifest. Blank lines are skipped; a missing caption
/// is filled from the labels.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_manifest(BufReader::new(std::fs::File::open(path)?))
}

pub fn parse_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Parse {
            line: lineno,
            message: err.to_string(),
        })?;
        if e.id.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty id".into(),
            });
        }
        if !(e.duration_s > 0.0) || !e.duration_s.is_finite() {
            return invalid(format!("entry {:?} (line {lineno}) has non-positive duration", e.id));
        }
        if !seen.insert(e.id.clone()) {
            return invalid(format!("duplicate id {:?} on line {lineno}", e.id));
        }
        if e.caption.is_empty() && !e.labels.is_empty() {
            e.caption = fill_caption(&e.labels);
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|err| Error::Format(err.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub type CaptionDigest = [u8; 32];

pub fn caption_digest(caption: &str) -> CaptionDigest {
    Sha256::digest(caption.as_bytes()).into()
}

const CACHE_MAGIC: &[u8; 4] = b"M2DC";
const CACHE_VERSION: u32 = 1;

/// Sentence embeddings keyed by caption digest, stored as 32-bit floats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub rows: BTreeMap<CaptionDigest, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, caption: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return invalid(format!("vector of length {} in a cache of dim {}", v.len(), self.dim));
        }
        self.rows.insert(caption_digest(caption), v.iter().map(|&x| x as f32).collect());
        Ok(())
    }

    pub fn get(&self, caption: &str) -> Option<Vec<f64>> {
        self.rows
            .get(&caption_digest(caption))
            .map(|v| v.iter().map(|&x| x as f64).collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::InvalidInput("dim too large".into()))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(32 + 4 * self.dim);
        for (digest, v) in &self.rows {
            if v.len() != self.dim {
                return invalid(format!("row of length {} in a cache of dim {}", v.len(), self.dim));
            }
            buf.clear();
            buf.extend_from_slice(digest);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 20];
        read_exact(r, &mut head)?;
        if &head[..4] != CACHE_MAGIC {
            return Err(Error::Format("bad cache magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
        let mut rows = BTreeMap::new();
        let mut rec = vec![0u8; 32 + 4 * dim];
        for _ in 0..count {
            read_exact(r, &mut rec)?;
            let digest: CaptionDigest = rec[..32].try_into().unwrap();
            let v = rec[32..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if rows.insert(digest, v).is_some() {
                return Err(Error::Format("duplicate caption digest".into()));
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after cache records".into()));
        }
        Ok(Self { dim, rows })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub fn cache_write(path: &Path, dim: usize, rows: &BTreeMap<CaptionDigest, Vec<f32>>) -> Result<()> {
    let cache = EmbeddingCache {
        dim,
        rows: rows.clone(),
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    cache.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cache_read(path: &Path) -> Result<EmbeddingCache> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    EmbeddingCache::read_from(&mut BufReader::new(std::fs::File::open(path)?))
}

pub const UNK: &str = "<unk>";
pub const END: &str = "<end>";
pub const UNK_ID: usize = 0;
pub const END_ID: usize = 1;

/// Lowercased runs of alphanumeric characters.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word vocabulary; ids 0 and 1 are the unknown and end tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary of every word in `captions`, sorted.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = captions
            .into_iter()
            .flat_map(words)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        Self::from_words(set)
    }

    fn from_words(list: Vec<String>) -> Self {
        let mut tokens = vec![UNK.to_string(), END.to_string()];
        tokens.extend(list.into_iter().filter(|w| w != UNK && w != END));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Word ids followed by the end token.
    pub fn tokenize(&self, caption: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = words(caption)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect();
        ids.push(END_ID);
        ids
    }

    /// As [`Tokenizer::tokenize`], truncated to `max_len` ids with the end
    /// token kept last.
    pub fn encode(&self, caption: &str, max_len: usize) -> Vec<usize> {
        let mut ids = self.tokenize(caption);
        if max_len > 0 && ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(END_ID);
        }
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != END_ID)
            .map(|&i| self.tokens.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens[2..] {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// One word per line, as written by [`Tokenizer::save`].
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_words(
            text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect(),
        ))
    }
}

pub fn synth_caption(class: usize) -> String {
    format!("the sound of class-{class} tone can be heard")
}

pub fn synth_label(class: usize) -> String {
    format!("class-{class} tone")
}

pub const LLM_DIM: usize = 4096;

/// Unit-norm, mutually orthogonal seeded random vectors (Gram-Schmidt).
pub fn orthonormal_rows(n: usize, dim: usize, seed: u64) -> Result<Matrix> {
    if n > dim {
        return invalid(format!("cannot fit {n} orthogonal rows in {dim} dims"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::randn(n, dim, &mut rng);
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let prev = m.row(j).to_vec();
            for (x, p) in m.row_mut(i).iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub waveforms: Vec<Waveform>,
    pub entries: Vec<ManifestEntry>,
    /// `[n_classes × 4096]`.
    pub class_embeddings: Matrix,
}

impl SynthCorpus {
    pub fn class_of(&self, i: usize) -> usize {
        match &self.entries[i].source {
            Source::Synth(s) => s.class_id,
            Source::Path(_) => unreachable!("synthetic corpus entries are synth specs"),
        }
    }

    /// Stage-1 embedding cache of the class captions.
    pub fn embedding_cache(&self) -> Result<EmbeddingCache> {
        let mut cache = EmbeddingCache::new(self.class_embeddings.cols());
        for c in 0..self.class_embeddings.rows() {
            cache.insert(&synth_caption(c), self.class_embeddings.row(c))?;
        }
        Ok(cache)
    }
}

/// Class `c` is a sine at `200·(c+1)` Hz over a seeded noise floor, with a
/// per-clip random phase and amplitude.
pub fn synth_corpus(n_classes: usize, per_class: usize, duration_s: f64, seed: u64) -> Result<SynthCorpus> {
    if n_classes < 2 {
        return invalid("synthetic corpus needs at least two classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_embeddings = orthonormal_rows(n_classes, LLM_DIM, rng.random())?;
    let mut waveforms = Vec::with_capacity(n_classes * per_class);
    let mut entries = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        for k in 0..per_class {
            let spec = SynthSpec {
                class_id: c,
                carrier: Carrier::Sine,
                f0: 200.0 * (c + 1) as f64,
                seed: rng.random(),
            };
            waveforms.push(spec.render(duration_s)?);
            entries.push(ManifestEntry {
                id: format!("c{c:02}-{k:04}"),
                source: Source::Synth(spec),
                caption: synth_caption(c),
                labels: vec![synth_label(c)],
                duration_s,
            });
        }
    }
    Ok(SynthCorpus {
        waveforms,
        entries,
        class_embeddings,
    })
}

fn wav_spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    }
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut writer = hound::WavWriter::create(path, wav_spec()).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Mono 16 kHz linear PCM (integer or float) to a waveform.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Unsupported(format!(
            "{}: need mono {SAMPLE_RATE} Hz, got {} channels at {} Hz",
            path.display(),
            spec.channels,
            spec.sample_rate
        )));
    }
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(wav_err)?;
    Ok(Waveform::new(samples))
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}
