//! Byte-level corpora, synthetic generators and the two-corpus batch sampler.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};

/// 256 byte values plus `BOS` and `PAD`.
pub const VOCAB_SIZE: usize = 258;
pub const BOS: usize = 256;
pub const PAD: usize = 257;

/// A collection of documents, each a byte string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub docs: Vec<Vec<u8>>,
}

/// Teacher-forced window: `targets[i]` follows `inputs[i]`; padded slots hold `PAD`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn encode(doc: &[u8]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(doc.iter().map(|&b| usize::from(b)))
        .collect()
}

fn pad_window(tokens: &[usize], seq_len: usize) -> Window {
    let mut w: Vec<usize> = tokens.to_vec();
    w.resize(seq_len + 1, PAD);
    Window {
        inputs: w[..seq_len].to_vec(),
        targets: w[1..].to_vec(),
    }
}

impl Corpus {
    pub fn new(name: impl Into<String>, docs: Vec<Vec<u8>>) -> Self {
        Corpus {
            name: name.into(),
            docs,
        }
    }

    /// Reads a text file; documents are separated by blank lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SilqError::io(path, e))?;
        let text = String::from_utf8_lossy(&bytes);
        let docs: Vec<Vec<u8>> = text
            .split("\n\n")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(|d| d.as_bytes().to_vec())
            .collect();
        if docs.is_empty() {
            return Err(SilqError::Input(format!("{}: corpus has no documents", path.display())));
        }
        Ok(Corpus::new(path.display().to_string(), docs))
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(|d| d.len() + 1).sum()
    }

    /// Non-overlapping windows covering every next-token prediction once.
    pub fn eval_windows(&self, seq_len: usize) -> Vec<Window> {
        let mut out = Vec::new();
        for doc in &self.docs {
            let tokens = encode(doc);
            let mut start = 0;
            while start + 1 < tokens.len() {
                let end = (start + seq_len + 1).min(tokens.len());
                out.push(pad_window(&tokens[start..end], seq_len));
                start += seq_len;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.docs
            .iter()
            .map(|d| String::from_utf8_lossy(d).into_owned())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Synthetic corpus families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Sparse first-order character chain; plays the pretraining role.
    MarkovChain,
    ArithmeticPatterns,
    /// Question/answer exchanges from templates; plays the instruction role.
    TemplateDialogue,
}

impl FromStr for Generator {
    type Err = SilqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov-chain" => Ok(Generator::MarkovChain),
            "arithmetic-patterns" => Ok(Generator::ArithmeticPatterns),
            "template-dialogue" => Ok(Generator::TemplateDialogue),
            other => Err(SilqError::Config(format!("unknown corpus generator `{other}`"))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::MarkovChain => "markov-chain",
            Generator::ArithmeticPatterns => "arithmetic-patterns",
            Generator::TemplateDialogue => "template-dialogue",
        })
    }
}

const MARKOV_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz .";
// The chain itself is fixed so corpora drawn with different seeds share one
// distribution.
const MARKOV_TABLE_SEED: u64 = 0x5eed_c4a1;

fn markov_table() -> Vec<Vec<(u8, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(MARKOV_TABLE_SEED);
    MARKOV_ALPHABET
        .iter()
        .map(|_| {
            let fanout = rng.random_range(2..=4);
            let mut next: Vec<(u8, f64)> = MARKOV_ALPHABET
                .choose_multiple(&mut rng, fanout)
                .map(|&c| (c, rng.random_range(0.2..1.0)))
                .collect();
            let z: f64 = next.iter().map(|n| n.1).sum();
            next.iter_mut().for_each(|n| n.1 /= z);
            next
        })
        .collect()
}

fn markov_doc(rng: &mut ChaCha8Rng, table: &[Vec<(u8, f64)>]) -> Vec<u8> {
    let len = rng.random_range(60..240);
    let mut state = rng.random_range(0..MARKOV_ALPHABET.len());
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(MARKOV_ALPHABET[state]);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = table[state].last().expect("non-empty fanout").0;
        for &(c, p) in &table[state] {
            acc += p;
            if u < acc {
                pick = c;
                break;
            }
        }
        state = MARKOV_ALPHABET
            .iter()
            .position(|&c| c == pick)
            .expect("alphabet member");
    }
    out
}

fn arithmetic_doc(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let lines = rng.random_range(3..9);
    let mut s = String::new();
    for _ in 0..lines {
        let (a, b) = (rng.random_range(0..50u32), rng.random_range(0..50u32));
        match rng.random_range(0..3) {
            0 => s.push_str(&format!("{a}+{b}={};", a + b)),
            1 => s.push_str(&format!("{}-{b}={a};", a + b)),
            _ => s.push_str(&format!("{a}*2={};", a * 2)),
        }
    }
    s.into_bytes()
}

const COUNTRIES: &[(&str, &str)] = &[
    ("france", "paris"),
    ("spain", "madrid"),
    ("italy", "rome"),
    ("japan", "tokyo"),
    ("egypt", "cairo"),
    ("peru", "lima"),
    ("kenya", "nairobi"),
    ("norway", "oslo"),
];
const OBJECTS: &[(&str, &str)] = &[
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("sun", "yellow"),
    ("rose", "red"),
];
const WORDS: &[&str] = &["apple", "river", "stone", "cloud", "light", "music", "paper"];

fn dialogue_doc(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let turns = rng.random_range(1..4);
    let mut s = String::new();
    for _ in 0..turns {
        let (q, a) = match rng.random_range(0..4) {
            0 => {
                let (c, cap) = COUNTRIES.choose(rng).expect("non-empty");
                (
                    format!("what is the capital of {c}?"),
                    format!("the capital of {c} is {cap}."),
                )
            }
            1 => {
                let (o, col) = OBJECTS.choose(rng).expect("non-empty");
                (format!("what color is the {o}?"), format!("the {o} is {col}."))
            }
            2 => {
                let (a, b) = (rng.random_range(0..20u32), rng.random_range(0..20u32));
                (format!("what is {a} plus {b}?"), format!("{a} plus {b} is {}.", a + b))
            }
            _ => {
                let w = WORDS.choose(rng).expect("non-empty");
                (format!("say {w} twice."), format!("{w} {w}."))
            }
        };
        s.push_str(&format!("user: {q}\nassistant: {a}\n"));
    }
    s.into_bytes()
}

/// Deterministic synthetic corpus of `docs` documents.
pub fn make_synthetic_corpus(generator: Generator, seed: u64, docs: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = (generator == Generator::MarkovChain).then(markov_table);
    let docs = (0..docs)
        .map(|_| match generator {
            Generator::MarkovChain => markov_doc(&mut rng, table.as_deref().expect("table built")),
            Generator::ArithmeticPatterns => arithmetic_doc(&mut rng),
            Generator::TemplateDialogue => dialogue_doc(&mut rng),
        })
        .collect();
    Corpus::new(format!("{generator}@{seed}"), docs)
}

/// Which side of the mixture a sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusRole {
    Pretrain,
    Sft,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub roles: Vec<CorpusRole>,
}

impl Batch {
    pub fn from_windows(windows: &[Window]) -> Self {
        Batch {
            inputs: windows.iter().map(|w| w.inputs.clone()).collect(),
            targets: windows.iter().map(|w| w.targets.clone()).collect(),
            roles: vec![CorpusRole::Sft; windows.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Draws fixed-length windows from a pretrain-role and an SFT-role corpus;
/// each sequence comes from the pretrain corpus with probability
/// `mixture_ratio`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pretrain: Corpus,
    sft: Corpus,
    mixture_ratio: f64,
    batch_size: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        pretrain: Corpus,
        sft: Corpus,
        mixture_ratio: f64,
        batch_size: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&mixture_ratio) {
            return Err(SilqError::Config(format!(
                "mixture ratio {mixture_ratio} outside [0, 1]"
            )));
        }
        if batch_size == 0 || seq_len == 0 {
            return Err(SilqError::Config(
                "batch size and sequence length must be positive".into(),
            ));
        }
        let needs_pretrain = mixture_ratio > 0.0;
        let needs_sft = mixture_ratio < 1.0;
        if (needs_pretrain && pretrain.docs.is_empty()) || (needs_sft && sft.docs.is_empty()) {
            return Err(SilqError::Input("sampling from an empty corpus".into()));
        }
        Ok(BatchSampler {
            pretrain,
            sft,
            mixture_ratio,
            batch_size,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn draw(&mut self) -> (Window, CorpusRole) {
        let role = if self.rng.random::<f64>() < self.mixture_ratio {
            CorpusRole::Pretrain
        } else {
            CorpusRole::Sft
        };
        let corpus = match role {
            CorpusRole::Pretrain => &self.pretrain,
            CorpusRole::Sft => &self.sft,
        };
        let doc = &corpus.docs[self.rng.random_range(0..corpus.docs.len())];
        let tokens = encode(doc);
        let span = self.seq_len + 1;
        let start = if tokens.len() > span {
            self.rng.random_range(0..=tokens.len() - span)
        } else {
            0
        };
        let end = (start + span).min(tokens.len());
        (pad_window(&tokens[start..end], self.seq_len), role)
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut batch = Batch {
            inputs: Vec::with_capacity(self.batch_size),
            targets: Vec::with_capacity(self.batch_size),
            roles: Vec::with_capacity(self.batch_size),
        };
        for _ in 0..self.batch_size {
            let (w, role) = self.draw();
            batch.inputs.push(w.inputs);
            batch.targets.push(w.targets);
            batch.roles.push(role);
        }
        batch
    }
}
