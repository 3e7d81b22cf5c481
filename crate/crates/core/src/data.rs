//! GLUE-style TSV loading, a word-level vocabulary, and the synthetic
//! easy/hard classification task used for desk-scale experiments.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Entry};
use crate::error::{bail, Error, Result};
use crate::model::TokenBatch;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    /// Binary F1 on class 1.
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// `[CLS] a ([SEP] b)`, unpadded.
    pub ids: Vec<u32>,
    pub label: usize,
    pub stratum: Option<Stratum>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
    pub metric: Metric,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.ids.len()).max().unwrap_or(0)
    }

    /// Padded batch of the examples at `indices`, plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let seqs: Vec<Vec<u32>> = indices.iter().map(|&i| self.examples[i].ids.clone()).collect();
        let labels = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok((TokenBatch::from_sequences(&seqs)?, labels))
    }

    /// Writes the dataset as a MEXT1 container of token-id tensors.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let width = self.max_len();
        let mut ids = Vec::with_capacity(n * width);
        for e in &self.examples {
            ids.extend_from_slice(&e.ids);
            ids.extend(std::iter::repeat_n(PAD, width - e.ids.len()));
        }
        let lengths: Vec<u32> = self.examples.iter().map(|e| e.ids.len() as u32).collect();
        let labels: Vec<u32> = self.examples.iter().map(|e| e.label as u32).collect();
        let strata: Vec<u32> = self
            .examples
            .iter()
            .map(|e| match e.stratum {
                None => 0,
                Some(Stratum::Easy) => 1,
                Some(Stratum::Hard) => 2,
            })
            .collect();
        let meta = serde_json::json!({
            "kind": "dataset",
            "classes": self.classes,
            "metric": self.metric,
        });
        let entries = vec![
            Entry::u32("ids", "data", vec![n, width], &ids),
            Entry::u32("lengths", "data", vec![n], &lengths),
            Entry::u32("labels", "data", vec![n], &labels),
            Entry::u32("strata", "data", vec![n], &strata),
        ];
        container::write(path, &meta, &entries)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let (meta, entries) = container::read(path)?;
        let find = |name: &str| -> Result<&Entry> {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Data(format!("dataset cache lacks {name:?}")))
        };
        let ids = find("ids")?;
        let width = ids.shape.get(1).copied().unwrap_or(0);
        let ids = ids.as_u32()?;
        let lengths = find("lengths")?.as_u32()?;
        let labels = find("labels")?.as_u32()?;
        let strata = find("strata")?.as_u32()?;
        let classes = meta["classes"].as_u64().unwrap_or(2) as usize;
        let metric = serde_json::from_value(meta["metric"].clone()).unwrap_or(Metric::Accuracy);
        let examples = (0..lengths.len())
            .map(|i| Example {
                ids: ids[i * width..i * width + lengths[i] as usize].to_vec(),
                label: labels[i] as usize,
                stratum: match strata[i] {
                    1 => Some(Stratum::Easy),
                    2 => Some(Stratum::Hard),
                    _ => None,
                },
            })
            .collect();
        Ok(Self {
            examples,
            classes,
            metric,
        })
    }
}

/// Lowercases, splits on whitespace, and splits punctuation into
/// single-character tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS] a ([SEP] b)` within `max_len` ids. The longer side of a pair
    /// is trimmed first.
    pub fn encode(&self, text_a: &str, text_b: Option<&str>, max_len: usize) -> Vec<u32> {
        let mut a: Vec<u32> = normalize(text_a).iter().map(|t| self.id(t)).collect();
        let mut b: Vec<u32> = text_b
            .map(|t| normalize(t).iter().map(|t| self.id(t)).collect())
            .unwrap_or_default();
        let specials = if text_b.is_some() { 2 } else { 1 };
        let budget = max_len.saturating_sub(specials);
        while a.len() + b.len() > budget {
            if a.len() >= b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        let mut ids = Vec::with_capacity(a.len() + b.len() + specials);
        ids.push(CLS);
        ids.extend(a);
        if text_b.is_some() {
            ids.push(SEP);
            ids.extend(b);
        }
        ids
    }

    /// Tokens for every non-padding, non-[CLS] id.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}

/// Frequency-ranked vocabulary over the normalized corpus: the four
/// specials, then the `max_size - 4` most frequent tokens, ties broken
/// lexicographically.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for t in normalize(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size.saturating_sub(SPECIALS.len()))
            .map(|(t, _)| t),
    );
    Vocab::from_tokens(tokens)
}

/// Column layout of a TSV task. Negative column indices count from the end
/// of each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub text_a: i64,
    #[serde(default)]
    pub text_b: Option<i64>,
    pub label: i64,
    pub metric: Metric,
    pub labels: Vec<String>,
}

impl TaskSpec {
    /// Built-in layouts of the GLUE classification tasks.
    pub fn glue(name: &str) -> Option<Self> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let spec = match name.to_ascii_lowercase().as_str() {
            "sst-2" | "sst2" => (0, None, 1, Metric::Accuracy, s(&["0", "1"])),
            "mrpc" => (3, Some(4), 0, Metric::F1, s(&["0", "1"])),
            "qqp" => (3, Some(4), 5, Metric::F1, s(&["0", "1"])),
            "qnli" => (1, Some(2), -1, Metric::Accuracy, s(&["not_entailment", "entailment"])),
            "rte" => (1, Some(2), -1, Metric::Accuracy, s(&["not_entailment", "entailment"])),
            "mnli" => (
                8,
                Some(9),
                -1,
                Metric::Accuracy,
                s(&["contradiction", "entailment", "neutral"]),
            ),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            text_a: spec.0,
            text_b: spec.1,
            label: spec.2,
            metric: spec.3,
            labels: spec.4,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    fn min_columns(&self) -> usize {
        [Some(self.text_a), self.text_b, Some(self.label)]
            .into_iter()
            .flatten()
            .map(|c| if c >= 0 { c as usize + 1 } else { (-c) as usize })
            .max()
            .unwrap_or(1)
    }
}

fn column<'a>(fields: &[&'a str], idx: i64) -> Option<&'a str> {
    let i = if idx >= 0 {
        idx as usize
    } else {
        fields.len().checked_sub((-idx) as usize)?
    };
    fields.get(i).copied()
}

/// One parsed TSV row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvRow {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Reads and validates every row of a task TSV (header first).
pub fn read_tsv(path: &Path, spec: &TaskSpec) -> Result<Vec<TsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("{} does not exist", path.display())),
        _ => Error::io(path, e),
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let need = spec.min_columns();
    let width = header.split('\t').count();
    if width < need {
        bail!(
            Data,
            "{}:1: header has {} columns, task {} needs {}",
            path.display(),
            width,
            spec.name,
            need
        );
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < need {
            bail!(
                Data,
                "{}:{}: malformed row with {} columns, expected at least {}",
                path.display(),
                lineno,
                fields.len(),
                need
            );
        }
        let get = |c: i64| {
            column(&fields, c)
                .ok_or_else(|| Error::Data(format!("{}:{}: missing column {}", path.display(), lineno, c)))
        };
        let label_s = get(spec.label)?.trim();
        let label = spec.labels.iter().position(|l| l == label_s).ok_or_else(|| {
            Error::Data(format!("{}:{}: unknown label {:?}", path.display(), lineno, label_s))
        })?;
        rows.push(TsvRow {
            text_a: get(spec.text_a)?.to_string(),
            text_b: spec.text_b.map(get).transpose()?.map(str::to_string),
            label,
        });
    }
    Ok(rows)
}

pub fn encode_rows(rows: &[TsvRow], spec: &TaskSpec, vocab: &Vocab, max_len: usize) -> Dataset {
    let examples = rows
        .iter()
        .map(|r| Example {
            ids: vocab.encode(&r.text_a, r.text_b.as_deref(), max_len),
            label: r.label,
            stratum: None,
        })
        .collect();
    Dataset {
        examples,
        classes: spec.classes(),
        metric: spec.metric,
    }
}

/// Reads a task TSV and encodes it with `vocab`.
pub fn load_tsv(path: &Path, spec: &TaskSpec, vocab: &Vocab, max_len: usize) -> Result<Dataset> {
    let rows = read_tsv(path, spec)?;
    Ok(encode_rows(&rows, spec, vocab, max_len))
}

/// Vocabulary built from the training split of a TSV task.
pub fn vocab_from_tsv(rows: &[TsvRow], max_size: usize) -> Vocab {
    build_vocab(
        rows.iter()
            .flat_map(|r| std::iter::once(r.text_a.as_str()).chain(r.text_b.as_deref())),
        max_size,
    )
}

/// Parameters of the synthetic binary task.
///
/// Easy examples carry a class marker as their first content token. Hard
/// examples start with a query token and are positive exactly when the
/// one partner token placed in the second half of the sequence is the
/// query's own partner; marginal token counts carry no label signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub easy_fraction: f64,
    /// Total length including [CLS].
    pub seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Train plus dev examples.
    pub size: usize,
    pub dev_fraction: f64,
    pub markers_per_class: usize,
    pub pairs: usize,
    /// Class markers sprinkled at random non-leading positions.
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            easy_fraction: 0.7,
            seq_len: 16,
            vocab_size: 64,
            seed: 0,
            size: 20_000,
            dev_fraction: 0.2,
            markers_per_class: 4,
            pairs: 4,
            distractors: 3,
        }
    }
}

impl SyntheticSpec {
    fn fillers_start(&self) -> usize {
        4 + 2 * self.markers_per_class + 2 * self.pairs
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            bail!(Config, "easy_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            bail!(Config, "dev_fraction must lie in [0, 1)");
        }
        if self.seq_len < 6 {
            bail!(Config, "seq_len must be at least 6");
        }
        if self.markers_per_class == 0 || self.pairs < 2 {
            bail!(Config, "need at least one marker per class and two pairs");
        }
        if self.distractors + 2 > self.seq_len - 1 {
            bail!(Config, "too many distractors for seq_len {}", self.seq_len);
        }
        if self.vocab_size < self.fillers_start() + 4 {
            bail!(
                Config,
                "vocab_size {} too small, need at least {}",
                self.vocab_size,
                self.fillers_start() + 4
            );
        }
        if self.size < 4 {
            bail!(Config, "size must be at least 4");
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        2
    }
}

fn marker(spec: &SyntheticSpec, class: usize, which: usize) -> u32 {
    (4 + class * spec.markers_per_class + which) as u32
}

fn query(spec: &SyntheticSpec, j: usize) -> u32 {
    (4 + 2 * spec.markers_per_class + j) as u32
}

fn partner(spec: &SyntheticSpec, j: usize) -> u32 {
    (4 + 2 * spec.markers_per_class + spec.pairs + j) as u32
}

fn gen_example(spec: &SyntheticSpec, stratum: Stratum, label: usize, rng: &mut ChaCha8Rng) -> Example {
    let len = spec.seq_len;
    let lo = spec.fillers_start();
    let mut ids: Vec<u32> = std::iter::once(CLS)
        .chain((1..len).map(|_| rng.gen_range(lo..spec.vocab_size) as u32))
        .collect();
    match stratum {
        Stratum::Easy => {
            ids[1] = marker(spec, label, rng.gen_range(0..spec.markers_per_class));
        }
        Stratum::Hard => {
            let j = rng.gen_range(0..spec.pairs);
            ids[1] = query(spec, j);
            let key = if label == 1 {
                j
            } else {
                (j + rng.gen_range(1..spec.pairs)) % spec.pairs
            };
            let pos = rng.gen_range(len / 2..len);
            ids[pos] = partner(spec, key);
        }
    }
    // Distractor markers go only onto filler slots, never over the key.
    let mut slots: Vec<usize> = (2..len).filter(|&p| ids[p] as usize >= lo).collect();
    slots.shuffle(rng);
    for &p in slots.iter().take(spec.distractors) {
        ids[p] = marker(spec, rng.gen_range(0..2), rng.gen_range(0..spec.markers_per_class));
    }
    Example {
        ids,
        label,
        stratum: Some(stratum),
    }
}

fn gen_split(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let n_easy = (n as f64 * spec.easy_fraction).round() as usize;
    let mut plan: Vec<(Stratum, usize)> = Vec::with_capacity(n);
    for (stratum, count) in [(Stratum::Easy, n_easy), (Stratum::Hard, n - n_easy)] {
        let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
        labels.shuffle(rng);
        plan.extend(labels.into_iter().map(|l| (stratum, l)));
    }
    plan.shuffle(rng);
    plan.into_iter()
        .map(|(s, l)| gen_example(spec, s, l, rng))
        .collect()
}

/// Seeded `(train, dev)` split of the synthetic task.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let n_dev = ((spec.size as f64) * spec.dev_fraction).round() as usize;
    let n_train = spec.size - n_dev;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = gen_split(spec, n_train, &mut rng);
    let dev = gen_split(spec, n_dev, &mut rng);
    let wrap = |examples| Dataset {
        examples,
        classes: 2,
        metric: Metric::Accuracy,
    };
    Ok((wrap(train), wrap(dev)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("Hello, World!  it's"), vec!["hello", ",", "world", "!", "it", "'", "s"]);
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab(["a a b"], 6);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(build_vocab(["a a b"], 6), v);
    }

    #[test]
    fn vocab_ties_are_lexicographic_and_capped() {
        let v = build_vocab(["c b a c b a d"], 6);
        assert_eq!(v.tokens()[4..], ["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn encode_pair_has_one_sep_and_respects_max_len() {
        let v = build_vocab(["the cat sat on the mat", "a dog ran"], 50);
        let ids = v.encode("the cat sat on the mat", Some("a dog ran"), 7);
        assert_eq!(ids.iter().filter(|&&i| i == SEP).count(), 1);
        assert!(ids.len() <= 7);
        assert_eq!(ids[0], CLS);
        let single = v.encode("the cat sat on the mat", None, 4);
        assert_eq!(single.len(), 4);
        assert!(!single.contains(&SEP));
    }

    #[test]
    fn decode_round_trip() {
        let v = build_vocab(["The cat, the hat."], 50);
        let ids = v.encode("The cat, the hat.", None, 32);
        assert_eq!(v.decode(&ids), normalize("The cat, the hat."));
    }

    #[test]
    fn glue_layouts() {
        for t in ["SST-2", "MRPC", "QQP", "QNLI", "RTE", "MNLI"] {
            assert!(TaskSpec::glue(t).is_some(), "{t}");
        }
        assert_eq!(TaskSpec::glue("mnli").unwrap().classes(), 3);
        assert!(TaskSpec::glue("sts-b").is_none());
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SyntheticSpec {
            size: 2000,
            ..Default::default()
        };
        let (a, b) = gen_synthetic(&spec).unwrap();
        let (c, d) = gen_synthetic(&spec).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.len() + b.len(), 2000);
        for split in [&a, &b] {
            for stratum in [Stratum::Easy, Stratum::Hard] {
                let ex: Vec<_> = split.examples.iter().filter(|e| e.stratum == Some(stratum)).collect();
                let pos = ex.iter().filter(|e| e.label == 1).count() as f64;
                let frac = pos / ex.len() as f64;
                assert!((frac - 0.5).abs() <= 0.02, "{stratum:?} {frac}");
            }
            let easy = split.examples.iter().filter(|e| e.stratum == Some(Stratum::Easy)).count();
            assert!((easy as f64 / split.len() as f64 - 0.7).abs() < 0.01);
        }
    }

    #[test]
    fn synthetic_structure() {
        let spec = SyntheticSpec {
            size: 400,
            ..Default::default()
        };
        let (train, _) = gen_synthetic(&spec).unwrap();
        for e in &train.examples {
            assert_eq!(e.ids.len(), spec.seq_len);
            assert_eq!(e.ids[0], CLS);
            match e.stratum.unwrap() {
                Stratum::Easy => assert_eq!(e.ids[1], marker(&spec, e.label, (e.ids[1] as usize - 4) % 4)),
                Stratum::Hard => {
                    let j = e.ids[1] - query(&spec, 0);
                    let keys: Vec<u32> = e.ids[2..]
                        .iter()
                        .copied()
                        .filter(|&t| t >= partner(&spec, 0) && t < partner(&spec, spec.pairs))
                        .collect();
                    assert_eq!(keys.len(), 1);
                    assert_eq!(keys[0] == partner(&spec, j as usize), e.label == 1);
                }
            }
        }
    }

    #[test]
    fn synthetic_validation() {
        let bad = SyntheticSpec {
            vocab_size: 10,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic(&bad), Err(Error::Config(_))));
    }
}
