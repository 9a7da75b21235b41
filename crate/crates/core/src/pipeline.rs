//! Corpus ingestion, vocabulary, batching, splits and the synthetic topic
//! grammar used for desk-scale experiments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

pub type Sentence = Vec<String>;

pub fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_owned).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// One sentence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(parse_corpus(&text))
}

pub fn parse_corpus(text: &str) -> Vec<Sentence> {
    text.lines()
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn write_corpus(path: &Path, corpus: &[Sentence]) -> Result<()> {
    let mut out = String::new();
    for s in corpus {
        out.push_str(&detokenize(s));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved entries followed by `tokens` in the given order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Tokens seen fewer than `min_count` times map to UNK. Ids are assigned
    /// by descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[Sentence], min_count: usize) -> Result<Self> {
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens for `ids`, stopping at the first EOS and skipping BOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }

    /// One token per line; line `k` holds id `k + NUM_RESERVED`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.entries().join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl LengthStats {
    pub fn of(lengths: impl IntoIterator<Item = usize>) -> Result<Self> {
        let xs: Vec<f64> = lengths.into_iter().map(|l| l as f64).collect();
        if xs.is_empty() {
            return Err(Error::Data("length statistics of an empty corpus".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }

    pub fn of_corpus(corpus: &[Sentence]) -> Result<Self> {
        Self::of(corpus.iter().map(Vec::len))
    }
}

/// `round(mean + 3 std)` of the sentence lengths.
pub fn truncation_cap(lengths: &[usize]) -> Result<usize> {
    let s = LengthStats::of(lengths.iter().copied())?;
    Ok((s.mean + 3.0 * s.std).round() as usize)
}

/// A padded minibatch. Row `b` of `ids` is `BOS w_1 .. w_n EOS PAD ..`.
/// Targets are `ids[b][1..]`; `mask[b][t]` is 1 exactly where target `t`
/// is a word or the closing EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    /// Word counts (without BOS/EOS) after truncation.
    pub lengths: Vec<usize>,
    pub mask: Vec<Vec<f64>>,
    /// Positions of the sentences in the source corpus.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_sentences(sentences: &[&[usize]], indices: Vec<usize>) -> Self {
        let t_max = sentences.iter().map(|s| s.len()).max().unwrap_or(0) + 2;
        let mut ids = Vec::with_capacity(sentences.len());
        let mut mask = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut row = Vec::with_capacity(t_max);
            row.push(BOS);
            row.extend_from_slice(s);
            row.push(EOS);
            row.resize(t_max, PAD);
            let mut m = vec![0.0; t_max - 1];
            m[..=s.len()].iter_mut().for_each(|x| *x = 1.0);
            ids.push(row);
            mask.push(m);
        }
        Self {
            lengths: sentences.iter().map(|s| s.len()).collect(),
            ids,
            mask,
            indices,
        }
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    /// Padded width including BOS and EOS.
    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Number of predicted tokens (words plus one EOS per sentence).
    pub fn num_targets(&self) -> usize {
        self.lengths.iter().map(|l| l + 1).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Sequential,
    /// Seeded permutation; pass a fresh seed per epoch.
    Shuffled(u64),
}

/// Split `corpus` (already encoded and truncated) into batches of at most
/// `batch_size` sentences.
pub fn make_batches(corpus: &[Vec<usize>], batch_size: usize, order: Order) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    if let Order::Shuffled(s) = order {
        idx.shuffle(&mut seed::rng(s));
    }
    idx.chunks(batch_size)
        .map(|chunk| {
            let sents: Vec<&[usize]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            Batch::from_sentences(&sents, chunk.to_vec())
        })
        .collect()
}

/// Encode every sentence and cut it to at most `cap` words.
pub fn encode_corpus(corpus: &[Sentence], vocab: &Vocabulary, cap: usize) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .map(|s| {
            let mut ids = vocab.encode(s);
            ids.truncate(cap);
            ids
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// 80/10/10 assignment from a seeded hash of the line index.
pub fn split_of(line: usize, seed: u64) -> Split {
    match seed::derive(seed, line as u64) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sentence>,
    pub valid: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

pub fn split_corpus(corpus: &[Sentence], seed: u64) -> Splits {
    let mut out = Splits::default();
    for (i, s) in corpus.iter().enumerate() {
        match split_of(i, seed) {
            Split::Train => out.train.push(s.clone()),
            Split::Valid => out.valid.push(s.clone()),
            Split::Test => out.test.push(s.clone()),
        }
    }
    out
}

/// A sentence generator in which each sentence picks a latent topic that
/// governs its content words, so that a code can carry information the
/// decoder cannot read from a short prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGrammarSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    pub function_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a slot holds a content word.
    pub content_prob: f64,
    /// Probability that a content word comes from the sentence topic.
    pub on_topic_prob: f64,
}

impl Default for ToyGrammarSpec {
    fn default() -> Self {
        Self {
            topics: 4,
            words_per_topic: 20,
            function_words: 20,
            min_len: 4,
            max_len: 12,
            content_prob: 0.55,
            on_topic_prob: 0.9,
        }
    }
}

const TOPIC_WORDS: [[&str; 20]; 4] = [
    [
        "ball", "team", "goal", "coach", "match", "score", "player", "league", "referee", "season",
        "stadium", "pitch", "striker", "keeper", "trophy", "fans", "kick", "defender", "final", "win",
    ],
    [
        "bread", "soup", "cheese", "apple", "kitchen", "chef", "salt", "butter", "dinner", "rice",
        "oven", "recipe", "sugar", "onion", "pepper", "lunch", "plate", "fork", "spoon", "tea",
    ],
    [
        "rain", "cloud", "storm", "wind", "snow", "sun", "sky", "thunder", "fog", "frost", "heat",
        "breeze", "weather", "winter", "summer", "hail", "lightning", "flood", "ice", "mist",
    ],
    [
        "song", "guitar", "drum", "band", "piano", "melody", "singer", "concert", "rhythm", "album",
        "violin", "chorus", "tune", "stage", "note", "bass", "lyric", "opera", "jazz", "record",
    ],
];

const FUNCTION_WORDS: [&str; 20] = [
    "the", "a", "of", "and", "in", "on", "with", "to", "was", "is", "for", "at", "by", "from",
    "that", "this", "very", "then", "not", "some",
];

impl ToyGrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.topics >= 1
            && self.words_per_topic >= 1
            && self.function_words >= 1
            && self.min_len >= 1
            && self.min_len <= self.max_len
            && (0.0..=1.0).contains(&self.content_prob)
            && (0.0..=1.0).contains(&self.on_topic_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid toy grammar {self:?}")))
        }
    }

    pub fn topic_word(&self, topic: usize, j: usize) -> String {
        match TOPIC_WORDS.get(topic).and_then(|ws| ws.get(j)) {
            Some(w) => (*w).to_owned(),
            None => format!("t{topic}w{j}"),
        }
    }

    pub fn function_word(&self, j: usize) -> String {
        match FUNCTION_WORDS.get(j) {
            Some(w) => (*w).to_owned(),
            None => format!("f{j}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub sentences: Vec<Sentence>,
    /// Topic of each sentence; diagnostics only, never given to a model.
    pub topics: Vec<usize>,
}

/// Zipf-like index in `0..n`, weight proportional to `1 / (j + 1)`.
fn zipf_index<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    let total: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for j in 0..n {
        u -= 1.0 / (j + 1) as f64;
        if u <= 0.0 {
            return j;
        }
    }
    n - 1
}

pub fn generate_toy_corpus(spec: &ToyGrammarSpec, n: usize, seed: u64) -> Result<ToyCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("toy corpus size must be at least 1".into()));
    }
    let mut rng = seed::rng(seed);
    let mut sentences = Vec::with_capacity(n);
    let mut topics = Vec::with_capacity(n);
    for _ in 0..n {
        let topic = rng.random_range(0..spec.topics);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut s = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random::<f64>() < spec.content_prob {
                let t = if rng.random::<f64>() < spec.on_topic_prob {
                    topic
                } else {
                    rng.random_range(0..spec.topics)
                };
                s.push(spec.topic_word(t, zipf_index(spec.words_per_topic, &mut rng)));
            } else {
                s.push(spec.function_word(zipf_index(spec.function_words, &mut rng)));
            }
        }
        sentences.push(s);
        topics.push(topic);
    }
    Ok(ToyCorpus { sentences, topics })
}
