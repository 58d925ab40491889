//! Labeled corpora: TSV ingestion, stratified folds, synthetic generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    /// Dense label in `[0, num_classes)`.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub records: Vec<Record>,
    /// `label_values[k]` is the raw label that dense label `k` stands for.
    pub label_values: Vec<i64>,
}

impl LabeledCorpus {
    pub fn num_classes(&self) -> usize {
        self.label_values.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Dense class treated as positive for binary F1: the one with the
    /// largest raw label (`1` of `{0, 1}`, `+1` of `{-1, +1}`).
    pub fn positive_class(&self) -> usize {
        positive_class_of(&self.label_values)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Builds a corpus from raw labels, densified in order of first appearance.
    pub fn from_raw<I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (String, i64)>,
    {
        let mut label_values: Vec<i64> = Vec::new();
        let records = rows
            .into_iter()
            .map(|(text, raw)| {
                let label = match label_values.iter().position(|&v| v == raw) {
                    Some(k) => k,
                    None => {
                        label_values.push(raw);
                        label_values.len() - 1
                    }
                };
                Record { text, label }
            })
            .collect();
        Self { records, label_values }
    }

    /// One `raw_label\ttext` line per record.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&self.label_values[r.label].to_string());
            out.push('\t');
            out.push_str(&r.text);
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn positive_class_of(label_values: &[i64]) -> usize {
    label_values
        .iter()
        .enumerate()
        .max_by_key(|(_, &v)| v)
        .map_or(0, |(k, _)| k)
}

pub fn parse_tsv_str(input: &str) -> Result<LabeledCorpus> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `label<TAB>text`".into(),
        })?;
        let label = label.trim().parse::<i64>().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("label `{label}` is not an integer"),
        })?;
        rows.push((text.to_string(), label));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no records".into(),
        });
    }
    Ok(LabeledCorpus::from_raw(rows))
}

pub fn parse_tsv(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    parse_tsv_str(&std::fs::read_to_string(path)?)
}

/// Fold index of every record, plus any stratification warnings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    /// `(train, dev)` record indices with `fold` held out.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold_of.len()).partition(|&i| self.fold_of[i] != fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified `k`-way split. Members of each class are shuffled and dealt
/// round-robin, continuing where the previous class stopped, so fold sizes
/// differ by at most one both per class and overall.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > labels.len() {
        return Err(Error::Config(format!(
            "k = {k} folds needs 2 <= k <= {} records",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; labels.len()];
    let mut warnings = Vec::new();
    let mut next = 0;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if !members.is_empty() && members.len() < k {
            warnings.push(format!(
                "class {class} has {} members for {k} folds; some folds get none",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of, warnings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerRule {
    /// Positive iff the token appears.
    Token(usize),
    /// Positive iff both tokens appear.
    CoOccurrence(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub vocab_size: usize,
    pub rule: TriggerRule,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn trigger(n: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            n,
            vocab_size,
            rule: TriggerRule::Token(7),
            seed,
            min_len: 4,
            max_len: 12,
        }
    }

    pub fn co_occurrence(n: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            rule: TriggerRule::CoOccurrence(7, 13),
            ..Self::trigger(n, vocab_size, seed)
        }
    }

    /// Parses `trigger` or `cooccur`, optionally followed by
    /// `:key=value,...` with keys `n`, `vocab`, `seed`, `min_len`, `max_len`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, opts) = spec.split_once(':').unwrap_or((spec, ""));
        let mut out = match name {
            "trigger" => Self::trigger(2000, 50, 0),
            "cooccur" => Self::co_occurrence(2000, 50, 0),
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic corpus `{other}` (expected trigger or cooccur)"
                )))
            }
        };
        for kv in opts.split(',').filter(|s| !s.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
            let value: u64 = value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` needs an unsigned integer, got `{value}`")))?;
            match key {
                "n" => out.n = value as usize,
                "vocab" => out.vocab_size = value as usize,
                "seed" => out.seed = value,
                "min_len" => out.min_len = value as usize,
                "max_len" => out.max_len = value as usize,
                other => return Err(Error::Config(format!("unknown synthetic option `{other}`"))),
            }
        }
        Ok(out)
    }

    fn triggers(&self) -> Vec<usize> {
        match self.rule {
            TriggerRule::Token(t) => vec![t],
            TriggerRule::CoOccurrence(a, b) => vec![a, b],
        }
    }
}

pub fn synthetic_word(id: usize) -> String {
    format!("w{id}")
}

/// Random token sequences over words `w0..w{vocab_size-1}`, exactly half of
/// them positive under `spec.rule`. Co-occurrence negatives cycle through
/// "first trigger only", "second trigger only" and "neither".
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledCorpus> {
    let triggers = spec.triggers();
    if spec.n < 10 {
        return Err(Error::Config(format!("synthetic corpus needs n >= 10, got {}", spec.n)));
    }
    if triggers.iter().any(|&t| t >= spec.vocab_size) || triggers.len() >= spec.vocab_size {
        return Err(Error::Config("trigger tokens must lie inside a larger vocabulary".into()));
    }
    if let TriggerRule::CoOccurrence(a, b) = spec.rule {
        if a == b {
            return Err(Error::Config("co-occurrence needs two distinct tokens".into()));
        }
    }
    if spec.min_len < triggers.len() || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "sequence lengths {}..={} cannot hold {} trigger tokens",
            spec.min_len,
            spec.max_len,
            triggers.len()
        )));
    }
    let filler: Vec<usize> = (0..spec.vocab_size).filter(|t| !triggers.contains(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut labels: Vec<usize> = (0..spec.n).map(|i| usize::from(i < spec.n / 2)).collect();
    labels.shuffle(&mut rng);
    // A negative first keeps dense label k equal to raw label k.
    if let Some(first_negative) = labels.iter().position(|&l| l == 0) {
        labels.swap(0, first_negative);
    }
    let mut negatives_seen = 0;
    let mut rows = Vec::with_capacity(spec.n);
    for &label in &labels {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut tokens: Vec<usize> = (0..len).map(|_| *filler.choose(&mut rng).expect("filler")).collect();
        let planted: Vec<usize> = match (label, spec.rule) {
            (1, _) => triggers.clone(),
            (_, TriggerRule::Token(_)) => Vec::new(),
            (_, TriggerRule::CoOccurrence(a, b)) => {
                negatives_seen += 1;
                match negatives_seen % 3 {
                    1 => vec![a],
                    2 => vec![b],
                    _ => Vec::new(),
                }
            }
        };
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut rng);
        for (&slot, &tok) in slots.iter().zip(&planted) {
            tokens[slot] = tok;
        }
        let text = tokens.iter().map(|&t| synthetic_word(t)).collect::<Vec<_>>().join(" ");
        rows.push((text, label as i64));
    }
    Ok(LabeledCorpus::from_raw(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_basic_and_crlf() {
        let c = parse_tsv_str("1\tgood movie\n0\tbad plot\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.num_classes(), 2);
        assert_eq!(c.records[0].text, "good movie");
        let crlf = parse_tsv_str("1\tgood movie\r\n0\tbad plot\r\n").unwrap();
        assert_eq!(crlf, c);
    }

    #[test]
    fn labels_densified_by_first_appearance() {
        let c = parse_tsv_str("5\ta\n2\tb\n5\tc\n").unwrap();
        assert_eq!(c.label_values, vec![5, 2]);
        assert_eq!(c.labels(), vec![0, 1, 0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_tsv_str("1\tok\nx\tbad\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_tsv_str("1\tok\nno tab here\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_tsv_str("").is_err());
    }

    #[test]
    fn kfold_balanced_binary() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let f = kfold_split(&labels, 5, 9).unwrap();
        for fold in 0..5 {
            let (_, dev) = f.split(fold);
            assert_eq!(dev.len(), 2);
            assert_eq!(dev.iter().map(|&i| labels[i]).sum::<usize>(), 1);
        }
        assert_eq!(kfold_split(&labels, 5, 9).unwrap(), f);
    }

    #[test]
    fn kfold_sizes_pigeonhole() {
        let labels: Vec<usize> = (0..103).map(|i| usize::from(i % 3 == 0)).collect();
        let f = kfold_split(&labels, 5, 1).unwrap();
        assert_eq!(f.fold_sizes(), vec![21, 21, 21, 20, 20]);
    }

    #[test]
    fn kfold_warns_on_small_class() {
        let labels = vec![0, 0, 0, 0, 0, 1];
        let f = kfold_split(&labels, 3, 0).unwrap();
        assert_eq!(f.warnings.len(), 1);
        assert!(kfold_split(&labels, 1, 0).is_err());
        assert!(kfold_split(&labels, 7, 0).is_err());
    }

    #[test]
    fn synthetic_trigger_construction() {
        let spec = SyntheticSpec::trigger(200, 50, 3);
        let c = make_synthetic(&spec).unwrap();
        assert_eq!(c.label_values, vec![0, 1]);
        assert_eq!(c.labels().iter().sum::<usize>(), 100);
        for r in &c.records {
            let has = r.text.split(' ').any(|w| w == "w7");
            assert_eq!(has, r.label == 1, "{}", r.text);
        }
        assert_eq!(make_synthetic(&spec).unwrap(), c);
    }

    #[test]
    fn co_occurrence_defeats_single_token_rules() {
        let c = make_synthetic(&SyntheticSpec::co_occurrence(600, 50, 5)).unwrap();
        let docs: Vec<Vec<&str>> = c.records.iter().map(|r| r.text.split(' ').collect()).collect();
        let mut best: f64 = 0.0;
        for t in 0..50 {
            let w = synthetic_word(t);
            for polarity in [true, false] {
                let correct = docs
                    .iter()
                    .zip(&c.records)
                    .filter(|(d, r)| (d.contains(&w.as_str()) == polarity) == (r.label == 1))
                    .count();
                best = best.max(correct as f64 / docs.len() as f64);
            }
        }
        assert!(best < 0.95, "single-token rule reached {best}");
        for (d, r) in docs.iter().zip(&c.records) {
            assert_eq!(d.contains(&"w7") && d.contains(&"w13"), r.label == 1);
        }
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s = SyntheticSpec::parse("cooccur:n=300,seed=4").unwrap();
        assert_eq!(s.n, 300);
        assert_eq!(s.seed, 4);
        assert_eq!(s.rule, TriggerRule::CoOccurrence(7, 13));
        assert!(SyntheticSpec::parse("nope").is_err());
        assert!(SyntheticSpec::parse("trigger:n=x").is_err());
    }
}
