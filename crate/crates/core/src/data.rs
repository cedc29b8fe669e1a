//! Dataset parsers, a word-level tokenizer, and deterministic batching.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pc::Feed;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Images scaled to `[0, 1]`, one row per item, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.features..(i + 1) * self.features]
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features,
            pixels: self.pixels[..n * self.features].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Gathers items into a batch with one-hot targets over `classes`.
    pub fn batch(&self, idx: &[usize], classes: usize) -> Result<LabeledBatch> {
        let mut x = Vec::with_capacity(idx.len() * self.features);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.item(i));
            labels.push(self.labels[i] as usize);
        }
        Ok(LabeledBatch {
            inputs: Tensor::new(vec![idx.len(), self.features], x)?,
            targets: one_hot(&labels, classes)?,
            labels,
        })
    }
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file into `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * dim {
        return Err(Error::Format(format!(
            "image file holds {} bytes, header promises {n} x {rows} x {cols}",
            body.len()
        )));
    }
    Ok((n, dim, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "label file holds {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    let (n, dim, pixels) = parse_idx_images(&read(images)?)?;
    let labels = parse_idx_labels(&read(labels)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    Ok(Dataset {
        features: dim,
        pixels,
        labels,
    })
}

/// Loads `{prefix}-images-idx3-ubyte` and `{prefix}-labels-idx1-ubyte` from
/// a directory, e.g. prefix `train` or `t10k`.
pub fn load_mnist_dir(dir: &Path, prefix: &str) -> Result<Dataset> {
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Parses CIFAR-10 binary batches: records of one label byte and 3072 pixel
/// bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::with_capacity(bytes.len());
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR-10 label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        features: CIFAR_RECORD - 1,
        pixels,
        labels,
    })
}

pub fn load_cifar10(paths: &[&Path]) -> Result<Dataset> {
    let mut all = Dataset {
        features: CIFAR_RECORD - 1,
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        let d = parse_cifar10(&bytes)?;
        all.pixels.extend(d.pixels);
        all.labels.extend(d.labels);
    }
    Ok(all)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(format!("label {l} out of range for {classes} classes")));
        }
        out[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn feed(&self) -> Feed {
        Feed::dense(self.inputs.clone(), Some(self.targets.clone()))
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Index chunks of a seeded permutation; the last chunk may be short.
pub fn batch_indices(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    shuffled(n, seed).chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
const MARKERS: [&str; 4] = ["<sos>", "<eos>", "<pad>", "<unk>"];

/// Word-level vocabulary with reserved marker ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Frequency-ranked vocabulary of `size - 4` words plus the four markers.
/// Ties are broken alphabetically.
pub fn build_vocab(corpus: &str, size: usize) -> Result<Tokenizer> {
    if size < 4 {
        return Err(Error::Invalid(format!("vocab size {size} must be at least 4")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in corpus.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let words = MARKERS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(size - 4).map(|(w, _)| w.to_string()))
        .collect();
    Ok(Tokenizer::from_words(words))
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Word ids without markers; unknown words map to `<unk>`.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins words with single spaces, dropping `<sos>`, `<eos>` and `<pad>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != SOS && i != EOS && i != PAD)
            .map(|&i| self.words.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Padded token rows `<sos> w.. <eos> <pad>..` of equal width.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<usize>>,
    /// Row lengths including both markers.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Next-token prediction feed: inputs are columns `0..W-1`, targets are
    /// one-hot columns `1..W`, and positions whose target is `<pad>` get
    /// weight 0.
    pub fn feed(&self, vocab: usize) -> Result<Feed> {
        let (b, w) = (self.ids.len(), self.width());
        if w < 2 {
            return Err(Error::Invalid("token rows need at least two entries".into()));
        }
        let s = w - 1;
        let mut input = Vec::with_capacity(b * s);
        let mut targets = Vec::with_capacity(b * s);
        let mut mask = Vec::with_capacity(b * s);
        for row in &self.ids {
            input.extend(row[..s].iter().map(|&i| i as f64));
            for &t in &row[1..] {
                targets.push(t);
                mask.push(if t == PAD { 0.0 } else { 1.0 });
            }
        }
        Ok(Feed {
            input: Tensor::new(vec![b, s], input)?,
            target: Some(one_hot(&targets, vocab)?),
            row_mask: Some(Tensor::new(vec![b * s], mask)?),
            noise: None,
            batch: b,
            seq: s,
        })
    }
}

/// Shuffles encoded sentences under `seed`, truncates each to `max_len - 2`
/// words, adds markers, and pads every batch to its longest row.
pub fn batch_lm(sentences: &[Vec<usize>], batch: usize, max_len: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if max_len < 3 {
        return Err(Error::Invalid(format!("max_len {max_len} must be at least 3")));
    }
    let mut out = Vec::new();
    for idx in batch_indices(sentences.len(), batch, seed) {
        let rows: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| {
                let s = &sentences[i];
                let mut r = Vec::with_capacity(max_len);
                r.push(SOS);
                r.extend_from_slice(&s[..s.len().min(max_len - 2)]);
                r.push(EOS);
                r
            })
            .collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lengths = rows.iter().map(Vec::len).collect();
        let ids = rows
            .into_iter()
            .map(|mut r| {
                r.resize(width, PAD);
                r
            })
            .collect();
        out.push(TokenBatch { ids, lengths });
    }
    Ok(out)
}

/// Non-empty lines of a UTF-8 text file.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}
