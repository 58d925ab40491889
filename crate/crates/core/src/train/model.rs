//! The full classifier (embeddings → SAM → pooling → softmax layer) and the
//! padded batches it consumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{self, tokenize, EmbeddingTable, PrecomputedSet, Vocab};
use crate::data::{positive_class_of, LabeledCorpus};
use crate::error::{Error, Result};
use crate::head::{self, HeadParams, Pooling};
use crate::sam::{sam_forward, FfnVars, SamConfig, SamParams, SamTrace, SamVars};
use crate::tensor::{Mask, Tape, Tensor, Var};

/// Source sentences, either as text for the embedding table or as
/// precomputed vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Text(LabeledCorpus),
    Vectors {
        set: PrecomputedSet,
        labels: Vec<usize>,
        label_values: Vec<i64>,
    },
}

impl Dataset {
    pub fn from_precomputed(set: PrecomputedSet) -> Result<Self> {
        if let Some(i) = set.sequences.iter().position(|s| s.len == 0) {
            return Err(Error::Data(format!("precomputed sequence {i} is empty")));
        }
        let dense = LabeledCorpus::from_raw(set.sequences.iter().map(|s| (String::new(), i64::from(s.label))));
        Ok(Dataset::Vectors {
            labels: dense.labels(),
            label_values: dense.label_values,
            set,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Text(c) => c.len(),
            Dataset::Vectors { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<usize> {
        match self {
            Dataset::Text(c) => c.labels(),
            Dataset::Vectors { labels, .. } => labels.clone(),
        }
    }

    pub fn label_values(&self) -> &[i64] {
        match self {
            Dataset::Text(c) => &c.label_values,
            Dataset::Vectors { label_values, .. } => label_values,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.label_values().len()
    }

    pub fn positive_class(&self) -> usize {
        positive_class_of(self.label_values())
    }

    /// Width of the precomputed vectors, if any.
    pub fn vector_dim(&self) -> Option<usize> {
        match self {
            Dataset::Text(_) => None,
            Dataset::Vectors { set, .. } => Some(set.dim),
        }
    }

    /// Encodes the records at `train` and `dev`. Text is tokenized against a
    /// vocabulary built from the training records only.
    pub fn encode(&self, train: &[usize], dev: &[usize], max_len: usize) -> Split {
        match self {
            Dataset::Text(c) => {
                let vocab = Vocab::build(train.iter().map(|&i| c.records[i].text.as_str()));
                let enc = |idx: &[usize]| {
                    idx.iter()
                        .map(|&i| Example::from_text(&c.records[i].text, c.records[i].label, &vocab, max_len))
                        .collect()
                };
                Split {
                    train: enc(train),
                    dev: enc(dev),
                    vocab: Some(vocab),
                }
            }
            Dataset::Vectors { set, labels, .. } => {
                let enc = |idx: &[usize]| {
                    idx.iter()
                        .map(|&i| {
                            let s = &set.sequences[i];
                            let len = s.len.min(max_len);
                            Example {
                                features: Features::Vectors(s.data[..len * set.dim].to_vec()),
                                len,
                                label: labels[i],
                            }
                        })
                        .collect()
                };
                Split {
                    train: enc(train),
                    dev: enc(dev),
                    vocab: None,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    /// `max_len` ids, PAD after the first `len`.
    Ids(Vec<usize>),
    /// `len×dim` vectors.
    Vectors(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Features,
    pub len: usize,
    pub label: usize,
}

impl Example {
    pub fn from_text(text: &str, label: usize, vocab: &Vocab, max_len: usize) -> Self {
        let e = tokenize(text, vocab, max_len);
        Self {
            features: Features::Ids(e.ids),
            len: e.len,
            label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub vocab: Option<Vocab>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    /// `B×L` ids, row-major.
    Ids(Vec<usize>),
    /// `B×L×D` vectors, zero at padding.
    Embeddings(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub mask: Mask,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Pads `examples` to `max_len`. `dim` is the vector width for
    /// precomputed inputs and is ignored for ids.
    pub fn from_examples(examples: &[&Example], max_len: usize, dim: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.len).collect();
        let mask = Mask::from_lengths(max_len, &lengths)?;
        let labels = examples.iter().map(|e| e.label).collect();
        let input = match &examples[0].features {
            Features::Ids(_) => {
                let mut ids = Vec::with_capacity(examples.len() * max_len);
                for e in examples {
                    match &e.features {
                        Features::Ids(v) if v.len() == max_len => ids.extend_from_slice(v),
                        _ => return Err(Error::Data("mixed or mis-padded id features in one batch".into())),
                    }
                }
                BatchInput::Ids(ids)
            }
            Features::Vectors(_) => {
                let mut data = vec![0.0; examples.len() * max_len * dim];
                for (b, e) in examples.iter().enumerate() {
                    match &e.features {
                        Features::Vectors(v) if v.len() == e.len * dim => {
                            data[b * max_len * dim..b * max_len * dim + v.len()].copy_from_slice(v);
                        }
                        _ => return Err(Error::Data(format!("example {b} does not hold {}x{dim} values", e.len))),
                    }
                }
                BatchInput::Embeddings(Tensor::new(vec![examples.len(), max_len, dim], data)?)
            }
        };
        Ok(Self { input, mask, labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sam: SamConfig,
    pub pooling: Pooling,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// Present when inputs are token ids.
    pub embedding: Option<EmbeddingTable>,
    pub sam: SamParams,
    pub head: HeadParams,
}

/// Handles into one forward pass.
pub struct Forward {
    pub logits: Var,
    pub trace: SamTrace,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
}

impl Model {
    /// `vocab_size` selects the embedding-table backbone; `None` expects
    /// precomputed vectors of width `d_model`.
    pub fn init<R: Rng>(config: ModelConfig, vocab_size: Option<usize>, rng: &mut R) -> Result<Self> {
        config.sam.validate()?;
        let d = config.sam.d_model;
        let embedding = vocab_size.map(|v| EmbeddingTable::init(v, d, rng));
        let sam = SamParams::init(&config.sam, rng);
        let head = HeadParams::init(d, config.num_classes, config.pooling, rng)?;
        Ok(Self {
            config,
            embedding,
            sam,
            head,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(11);
        if let Some(e) = &self.embedding {
            out.push(("embedding", &e.weights));
        }
        let [a, b, c, d] = self.sam.ffn_f.tensors();
        out.extend([("ffn_f.w1", a), ("ffn_f.b1", b), ("ffn_f.w2", c), ("ffn_f.b2", d)]);
        let [a, b, c, d] = self.sam.ffn_t.tensors();
        out.extend([("ffn_t.w1", a), ("ffn_t.b1", b), ("ffn_t.w2", c), ("ffn_t.b2", d)]);
        out.extend([("head.w", &self.head.w), ("head.b", &self.head.b)]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::with_capacity(11);
        if let Some(e) = self.embedding.as_mut() {
            out.push(("embedding", &mut e.weights));
        }
        let [a, b, c, d] = self.sam.ffn_f.tensors_mut();
        out.extend([("ffn_f.w1", a), ("ffn_f.b1", b), ("ffn_f.w2", c), ("ffn_f.b2", d)]);
        let [a, b, c, d] = self.sam.ffn_t.tensors_mut();
        out.extend([("ffn_t.w1", a), ("ffn_t.b1", b), ("ffn_t.w2", c), ("ffn_t.b2", d)]);
        out.extend([("head.w", &mut self.head.w), ("head.b", &mut self.head.b)]);
        out
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn rezero_pad(&mut self) {
        if let Some(e) = self.embedding.as_mut() {
            e.rezero_pad();
        }
    }

    /// Checks that parameter shapes agree with the configuration.
    pub fn check(&self) -> Result<()> {
        self.config.sam.validate()?;
        self.sam.check(&self.config.sam)?;
        let d = self.config.sam.d_model;
        if let Some(e) = &self.embedding {
            if e.dim() != d {
                return Err(Error::shape("embedding", e.weights.shape(), &[d]));
            }
        }
        if self.head.w.shape() != [d, self.config.num_classes] {
            return Err(Error::shape("head", self.head.w.shape(), &[d, self.config.num_classes]));
        }
        Ok(())
    }

    /// Puts every parameter on the tape, in [`Model::params`] order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Builds the graph for `batch`. With `dropout = Some((p, rng))` the pooled
    /// representation is dropped with probability `p` and rescaled by `1/(1-p)`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, trainable: bool, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Forward> {
        let params = self.register(tape, trainable);
        self.forward_with(tape, batch, params, dropout)
    }

    /// Like [`Model::forward`] but over caller-supplied parameter handles,
    /// e.g. with one of them swapped for a probe variable.
    pub fn forward_with(&self, tape: &mut Tape, batch: &Batch, params: Vec<Var>, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Forward> {
        let cfg = &self.config.sam;
        let (bsz, len) = (batch.mask.batch(), batch.mask.len());
        if len != cfg.max_len {
            return Err(Error::shape("batch", &[bsz, len], &[bsz, cfg.max_len]));
        }
        let expected = self.params().len();
        if params.len() != expected {
            return Err(Error::Precondition(format!("expected {expected} parameter handles, got {}", params.len())));
        }
        let (table, rest) = if self.embedding.is_some() {
            (Some(params[0]), &params[1..])
        } else {
            (None, &params[..])
        };
        let ffn = |p: &[Var]| FfnVars {
            w1: p[0],
            b1: p[1],
            w2: p[2],
            b2: p[3],
        };
        let sam_vars = SamVars {
            ffn_f: ffn(&rest[0..4]),
            ffn_t: ffn(&rest[4..8]),
        };
        let (w, b) = (rest[8], rest[9]);

        let x = match (&batch.input, table) {
            (BatchInput::Ids(ids), Some(table)) => backbone::embed(tape, table, ids, bsz, len)?,
            (BatchInput::Embeddings(t), None) => tape.constant(t.clone()),
            (BatchInput::Ids(_), None) => {
                return Err(Error::Config("token ids given to a model without an embedding table".into()))
            }
            (BatchInput::Embeddings(_), Some(_)) => {
                return Err(Error::Config("precomputed vectors given to a model with an embedding table".into()))
            }
        };
        let (out, trace) = sam_forward(tape, x, &batch.mask, cfg, &sam_vars)?;
        let mut pooled = head::pool_sequence(tape, out, &batch.mask, self.config.pooling)?;
        if let Some((p, rng)) = dropout {
            if p > 0.0 {
                let keep = 1.0 - p;
                let shape = tape.shape(pooled).to_vec();
                let n = shape.iter().product();
                let scale = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(Tensor::new(shape, scale)?);
                pooled = tape.mul(pooled, m)?;
            }
        }
        let logits = head::logits(tape, pooled, w, b)?;
        Ok(Forward { logits, trace, params })
    }

    /// Mean cross-entropy on `batch` and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, true, dropout)?;
        let loss = head::cross_entropy(&mut tape, fwd.logits, &batch.labels)?;
        tape.backward(loss)?;
        let grads = fwd
            .params
            .iter()
            .map(|&p| tape.grad(p).expect("parameters require grad").to_vec())
            .collect();
        Ok((tape.value(loss).item().expect("scalar loss"), grads))
    }

    /// Logits, argmax predictions (lowest index wins ties) and the trace.
    pub fn predict(&self, batch: &Batch) -> Result<(Tensor, Vec<usize>, SamTrace)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, false, None)?;
        let logits = tape.value(fwd.logits).clone();
        let k = self.config.num_classes;
        let preds = logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect();
        Ok((logits, preds, fwd.trace))
    }

    /// Width of the vectors this model consumes.
    pub fn input_dim(&self) -> usize {
        self.config.sam.d_model
    }

    pub fn uses_table(&self) -> bool {
        self.embedding.is_some()
    }
}

/// Deterministic seeded generator for fold `stream`.
pub fn fold_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
