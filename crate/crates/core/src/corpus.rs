//! Corpus ingestion, tokenization, vocabulary construction, deterministic
//! splitting, and padded batching.
//!
//! The corpus file format is JSON lines, one `{"query": ..., "reply": ...}`
//! object per line. The vocab file format is plain text, one token per line,
//! where the line number is the token id and the four specials come first.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// First id available for regular tokens.
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// One query/reply exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub query: String,
    pub reply: String,
}

/// Bidirectional token <-> id map with fixed special ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Write one token per line; the line number is the id.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for token in &self.id_to_token {
            writeln!(w, "{token}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            id_to_token.push(line);
        }
        if id_to_token.len() < NUM_SPECIALS {
            return Err(Error::Corpus(format!(
                "vocab file {} has fewer than {NUM_SPECIALS} entries",
                path.display()
            )));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token[i] != *special {
                return Err(Error::Corpus(format!(
                    "vocab file {}: expected special {special:?} at id {i}, found {:?}",
                    path.display(),
                    id_to_token[i]
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// Padded id matrices for one batch of pairs, with non-pad masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src_ids: Vec<Vec<usize>>,
    pub tgt_ids: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_ids.is_empty()
    }

    /// The row's ids with padding stripped.
    pub fn src_row(&self, i: usize) -> Vec<usize> {
        strip_padding(&self.src_ids[i], &self.src_mask[i])
    }

    pub fn tgt_row(&self, i: usize) -> Vec<usize> {
        strip_padding(&self.tgt_ids[i], &self.tgt_mask[i])
    }
}

fn strip_padding(ids: &[usize], mask: &[bool]) -> Vec<usize> {
    ids.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&id, _)| id)
        .collect()
}

/// Lowercase, split punctuation into standalone tokens, split on whitespace.
///
/// Every non-alphanumeric, non-whitespace character becomes its own token;
/// runs of alphanumeric characters become word tokens. Empty text gives an
/// empty list.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Build a vocab from the corpus: the four specials plus every token with
/// frequency >= `min_freq`, ordered by descending frequency then ascending
/// lexicographic.
pub fn build_vocab(pairs: &[DialoguePair], min_freq: usize) -> Vocab {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for pair in pairs {
        for token in tokenize(&pair.query).into_iter().chain(tokenize(&pair.reply)) {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, n)| *n >= min_freq.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(entries.into_iter().map(|(t, _)| t));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Vocab {
        token_to_id,
        id_to_token,
    }
}

/// Map tokens to ids; unknown tokens become `UNK_ID`. With `add_bos_eos` the
/// sequence is wrapped as `<bos> ... <eos>`.
pub fn encode(tokens: &[String], vocab: &Vocab, add_bos_eos: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    if add_bos_eos {
        ids.push(BOS_ID);
    }
    for token in tokens {
        ids.push(vocab.id(token).unwrap_or(UNK_ID));
    }
    if add_bos_eos {
        ids.push(EOS_ID);
    }
    ids
}

/// Map ids back to tokens, stripping specials. Out-of-range ids are skipped.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id >= NUM_SPECIALS)
        .filter_map(|&id| vocab.token(id))
        .map(|t| t.to_string())
        .collect()
}

/// Deterministic shuffle-then-split. Train gets floor(n * train_fraction)
/// pairs, validation gets the rest.
pub fn split_dataset(
    pairs: &[DialoguePair],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<DialoguePair>, Vec<DialoguePair>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::Corpus(format!(
            "cannot split {} pair(s) into train and validation",
            pairs.len()
        )));
    }
    let mut shuffled: Vec<DialoguePair> = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = ((pairs.len() as f64) * train_fraction).floor() as usize;
    let n_train = n_train.clamp(1, pairs.len() - 1);
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

/// Encode and group pairs into padded batches. Token lists longer than
/// `max_len - 2` are truncated before the bos/eos wrap, so every row is at
/// most `max_len` ids long. Rows are padded to the per-batch maximum.
pub fn make_batches(
    pairs: &[DialoguePair],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let clip = max_len.saturating_sub(2);
    let encode_clipped = |text: &str| {
        let mut tokens = tokenize(text);
        tokens.truncate(clip);
        encode(&tokens, vocab, true)
    };

    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let src: Vec<Vec<usize>> = chunk.iter().map(|p| encode_clipped(&p.query)).collect();
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|p| encode_clipped(&p.reply)).collect();
            let (src_ids, src_mask) = pad_rows(src);
            let (tgt_ids, tgt_mask) = pad_rows(tgt);
            Batch {
                src_ids,
                tgt_ids,
                src_mask,
                tgt_mask,
            }
        })
        .collect()
}

fn pad_rows(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for mut row in rows {
        let mut mask = vec![true; row.len()];
        row.resize(width, PAD_ID);
        mask.resize(width, false);
        ids.push(row);
        masks.push(mask);
    }
    (ids, masks)
}

/// Read a JSONL corpus. Lines must parse and both sides must be non-empty
/// after tokenization.
pub fn read_jsonl(path: &Path) -> Result<Vec<DialoguePair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: DialoguePair = serde_json::from_str(&line).map_err(|e| {
            Error::Corpus(format!(
                "{}:{}: malformed pair: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if tokenize(&pair.query).is_empty() || tokenize(&pair.reply).is_empty() {
            return Err(Error::Corpus(format!(
                "{}:{}: query and reply must be non-empty after tokenization",
                path.display(),
                lineno + 1
            )));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_jsonl(path: &Path, pairs: &[DialoguePair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pair in pairs {
        let line = serde_json::to_string(pair)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
