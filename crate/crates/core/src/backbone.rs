//! Token embeddings: a whitespace/punctuation tokenizer, a trainable
//! embedding table, and the `SAMEMB1` container for vectors exported by an
//! external encoder.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved entries plus `tokens` in the given order, duplicates dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::from(vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]);
        for t in tokens {
            v.insert(t.into());
        }
        v
    }

    /// Every token of `texts`, in order of first appearance.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::from_tokens(texts.into_iter().flat_map(split_tokens))
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Lowercases and splits on whitespace; every punctuation character is a
/// token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// A sentence mapped to `max_len` ids, PAD-filled after `len` real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl Encoded {
    pub fn mask_flags(&self) -> Vec<u8> {
        (0..self.ids.len()).map(|i| u8::from(i < self.len)).collect()
    }
}

/// Tokenizes, truncates to `max_len`, and pads with PAD. Text with no tokens
/// becomes a single UNK so that every row keeps one valid position.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Encoded {
    let mut ids: Vec<usize> = split_tokens(text)
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t))
        .collect();
    if ids.is_empty() {
        ids.push(UNK);
    }
    let len = ids.len();
    ids.resize(max_len, PAD);
    Encoded { ids, len }
}

/// `V×D` trainable embeddings; row [`PAD`] is held at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    pub fn init<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut weights = crate::sam::glorot(vocab_size, dim, rng);
        weights.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
        Self { weights }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn rezero_pad(&mut self) {
        let dim = self.dim();
        self.weights.data_mut()[PAD * dim..(PAD + 1) * dim]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

/// Gathers `batch×len` ids from a table registered on the tape.
pub fn embed(tape: &mut Tape, table: Var, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
    tape.gather(table, ids, batch, len, Some(PAD))
}

const MAGIC: &[u8; 8] = b"SAMEMB1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    num_sequences: usize,
    dim: usize,
}

/// One exported sequence: `len×dim` row-major vectors and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedSequence {
    pub len: usize,
    pub data: Vec<f64>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedSet {
    pub dim: usize,
    pub sequences: Vec<PrecomputedSequence>,
}

impl PrecomputedSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sequences: Vec::new(),
        }
    }

    pub fn push(&mut self, data: Vec<f64>, label: u32) -> Result<()> {
        if self.dim == 0 || data.len() % self.dim != 0 {
            return Err(Error::Data(format!(
                "{} values do not form rows of width {}",
                data.len(),
                self.dim
            )));
        }
        self.sequences.push(PrecomputedSequence {
            len: data.len() / self.dim,
            data,
            label,
        });
        Ok(())
    }
}

/// Writes `set` in the `SAMEMB1` layout. Values are narrowed to `f32`.
pub fn write_samemb<W: Write>(mut w: W, set: &PrecomputedSet) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = Header {
        num_sequences: set.sequences.len(),
        dim: set.dim,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (i, seq) in set.sequences.iter().enumerate() {
        if seq.data.len() != seq.len * set.dim {
            return Err(Error::Data(format!(
                "sequence {i} holds {} values, expected {}x{}",
                seq.data.len(),
                seq.len,
                set.dim
            )));
        }
        let len = u32::try_from(seq.len).map_err(|_| Error::Data(format!("sequence {i} is too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&seq.label.to_le_bytes())?;
        for &v in &seq.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_samemb<R: Read>(mut r: R) -> Result<PrecomputedSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_samemb(&bytes)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn parse_samemb(bytes: &[u8]) -> Result<PrecomputedSet> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "missing SAMEMB1 magic"));
    }
    let mut at = MAGIC.len();
    let line_end = bytes[at..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(at, "header line is not terminated"))?;
    let header: Header = serde_json::from_slice(&bytes[at..at + line_end])
        .map_err(|e| format_err(at, format!("bad header: {e}")))?;
    at += line_end + 1;
    if header.dim == 0 && header.num_sequences > 0 {
        return Err(format_err(at, "dim must be positive"));
    }

    let take = |n: usize, at: &mut usize, what: &str| -> Result<&[u8]> {
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_err(*at, format!("truncated record: {what} needs {n} bytes")))?;
        let s = &bytes[*at..end];
        *at = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("four bytes"));

    let mut set = PrecomputedSet::new(header.dim);
    for _ in 0..header.num_sequences {
        let len = u32_at(take(4, &mut at, "length")?) as usize;
        let label = u32_at(take(4, &mut at, "label")?);
        let count = len
            .checked_mul(header.dim)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| format_err(at, "record size overflows"))?;
        let data = take(count, &mut at, "vectors")?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
            .collect();
        set.sequences.push(PrecomputedSequence { len, data, label });
    }
    if at != bytes.len() {
        return Err(format_err(
            at,
            format!("{} trailing bytes after {} records of dim {}", bytes.len() - at, header.num_sequences, header.dim),
        ));
    }
    Ok(set)
}

pub fn load_precomputed(path: impl AsRef<Path>) -> Result<PrecomputedSet> {
    parse_samemb(&std::fs::read(path)?)
}

pub fn store_precomputed(path: impl AsRef<Path>, set: &PrecomputedSet) -> Result<()> {
    let mut buf = Vec::new();
    write_samemb(&mut buf, set)?;
    std::fs::write(path, buf)?;
    Ok(())
}
