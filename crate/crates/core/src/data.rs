//! Synthetic key-value reading-comprehension data.
//!
//! A passage is a run of `(key, value)` token pairs; the question is one of
//! the passage keys. The span task asks for the position of the paired
//! value, the choice task asks which of `m` candidate values is paired with
//! it. Keys are grouped into confusion classes (`k<class>.<member>`); a
//! distractor appends a pair whose key is a near miss from the question
//! key's class.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::perturb::{Role, RoleMask};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const RESERVED: usize = 3;

/// Token string / id bijection. Ids 0, 1, 2 are `[CLS]`, `[SEP]`, `[PAD]`;
/// the rest are keys `k<class>.<member>` followed by values `v<n>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    keys: Vec<usize>,
    values: Vec<usize>,
    class_of: Vec<Option<usize>>,
}

impl Vocab {
    /// The synthetic vocabulary of `vocab_size` tokens: half the
    /// non-reserved ids are keys (grouped `class_size` per confusion class),
    /// the rest values.
    pub fn synthetic(vocab_size: usize, class_size: usize) -> Result<Self> {
        if class_size == 0 {
            return Err(Error::Config("class_size must be at least 1".into()));
        }
        if vocab_size < RESERVED + 2 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} leaves no room for keys and values"
            )));
        }
        let n = vocab_size - RESERVED;
        let n_keys = n / 2;
        let mut tokens: Vec<String> = ["[CLS]", "[SEP]", "[PAD]"].map(String::from).to_vec();
        tokens.extend((0..n_keys).map(|i| format!("k{}.{}", i / class_size, i % class_size)));
        tokens.extend((0..n - n_keys).map(|i| format!("v{i}")));
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[..RESERVED] != ["[CLS]", "[SEP]", "[PAD]"] {
            return Err(Error::Data("vocabulary must start with [CLS] [SEP] [PAD]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut class_of = vec![None; tokens.len()];
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate token {tok:?}")));
            }
            if id < RESERVED {
                continue;
            }
            if let Some(rest) = tok.strip_prefix('k') {
                let class = rest
                    .split_once('.')
                    .and_then(|(c, _)| c.parse().ok())
                    .ok_or_else(|| Error::Data(format!("malformed key token {tok:?}")))?;
                class_of[id] = Some(class);
                keys.push(id);
            } else if tok.starts_with('v') {
                values.push(id);
            } else {
                return Err(Error::Data(format!("unknown token kind {tok:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            keys,
            values,
            class_of,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    /// Confusion class of a key token; `None` for values and reserved ids.
    pub fn confusion_class(&self, id: usize) -> Option<usize> {
        self.class_of.get(id).copied().flatten()
    }

    fn ids_of(&self, toks: &[String]) -> Result<Vec<usize>> {
        toks.iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Data(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    fn strings_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    /// Inclusive span in passage coordinates.
    Span { start: usize, end: usize },
    Choice { choice: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub passage: Vec<usize>,
    pub question: Vec<usize>,
    pub options: Option<Vec<Vec<usize>>>,
    pub answer: Answer,
    /// Seed the example was generated from.
    pub seed: u64,
    pub distractor: bool,
}

impl Example {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.passage.is_empty() || self.question.is_empty() {
            return Err(Error::Data("empty passage or question".into()));
        }
        let all = self
            .passage
            .iter()
            .chain(&self.question)
            .chain(self.options.iter().flatten().flatten());
        for &id in all {
            if id >= vocab_size {
                return Err(Error::Data(format!(
                    "token id {id} outside vocabulary of {vocab_size}"
                )));
            }
        }
        match (self.answer, &self.options) {
            (Answer::Span { start, end }, None) => {
                if start > end || end >= self.passage.len() {
                    return Err(Error::Data(format!(
                        "span ({start}, {end}) invalid for passage of length {}",
                        self.passage.len()
                    )));
                }
            }
            (Answer::Choice { choice }, Some(opts)) => {
                if opts.len() < 2 {
                    return Err(Error::Data(format!("{} options; need at least 2", opts.len())));
                }
                if opts.iter().any(Vec::is_empty) {
                    return Err(Error::Data("empty option".into()));
                }
                if choice >= opts.len() {
                    return Err(Error::Data(format!(
                        "gold option {choice} out of range for {} options",
                        opts.len()
                    )));
                }
            }
            (Answer::Span { .. }, Some(_)) => {
                return Err(Error::Data("span answer with options present".into()))
            }
            (Answer::Choice { .. }, None) => {
                return Err(Error::Data("choice answer without options".into()))
            }
        }
        Ok(())
    }

    pub fn is_choice(&self) -> bool {
        self.options.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Span,
    Choice,
}

/// Generation parameters; written next to every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub task: TaskKind,
    pub n_examples: usize,
    pub n_pairs: usize,
    /// Option count for the choice task.
    pub m: Option<usize>,
    pub vocab_size: usize,
    pub class_size: usize,
    pub seed: u64,
}

impl TaskParams {
    pub fn span(n_examples: usize, n_pairs: usize, vocab_size: usize, seed: u64) -> Self {
        TaskParams {
            task: TaskKind::Span,
            n_examples,
            n_pairs,
            m: None,
            vocab_size,
            class_size: 2,
            seed,
        }
    }

    pub fn choice(n_examples: usize, n_pairs: usize, m: usize, vocab_size: usize, seed: u64) -> Self {
        TaskParams {
            task: TaskKind::Choice,
            m: Some(m),
            ..TaskParams::span(n_examples, n_pairs, vocab_size, seed)
        }
    }

    pub fn with_class_size(mut self, class_size: usize) -> Self {
        self.class_size = class_size;
        self
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::synthetic(self.vocab_size, self.class_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: TaskParams,
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

/// Deterministic per-item seed derived from a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_feasible(p: &TaskParams, vocab: &Vocab) -> Result<()> {
    if p.n_pairs == 0 {
        return Err(Error::Config("n_pairs must be at least 1".into()));
    }
    if p.vocab_size <= 2 * p.n_pairs + RESERVED {
        return Err(Error::Config(format!(
            "vocab_size {} must exceed 2 * n_pairs + {RESERVED} = {}",
            p.vocab_size,
            2 * p.n_pairs + RESERVED
        )));
    }
    debug_assert!(vocab.keys().len() >= p.n_pairs && vocab.values().len() >= p.n_pairs);
    Ok(())
}

/// Keys and values for one passage: unique keys, unique values.
fn sample_pairs(rng: &mut ChaCha8Rng, vocab: &Vocab, n_pairs: usize) -> (Vec<usize>, Vec<usize>) {
    let keys: Vec<usize> = vocab.keys().choose_multiple(rng, n_pairs).copied().collect();
    let values: Vec<usize> = vocab.values().choose_multiple(rng, n_pairs).copied().collect();
    (keys, values)
}

fn interleave(keys: &[usize], values: &[usize]) -> Vec<usize> {
    keys.iter().zip(values).flat_map(|(k, v)| [*k, *v]).collect()
}

/// Span-extraction task: the answer is the position of the value paired
/// with the question key.
pub fn gen_kv_task(p: &TaskParams) -> Result<Dataset> {
    let vocab = p.vocab()?;
    check_feasible(p, &vocab)?;
    let examples = (0..p.n_examples)
        .map(|i| {
            let seed = derive_seed(p.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (keys, values) = sample_pairs(&mut rng, &vocab, p.n_pairs);
            let q = rng.gen_range(0..p.n_pairs);
            Example {
                passage: interleave(&keys, &values),
                question: vec![keys[q]],
                options: None,
                answer: Answer::Span {
                    start: 2 * q + 1,
                    end: 2 * q + 1,
                },
                seed,
                distractor: false,
            }
        })
        .collect();
    Ok(Dataset {
        params: TaskParams {
            task: TaskKind::Span,
            m: None,
            ..p.clone()
        },
        vocab,
        examples,
    })
}

/// Multiple-choice task: `m` single-token value options, exactly one paired
/// with the question key. Wrong options are drawn from the other passage
/// values first, then from the rest of the value vocabulary.
pub fn gen_choice_task(p: &TaskParams) -> Result<Dataset> {
    let m = p.m.ok_or_else(|| Error::Config("choice task needs m".into()))?;
    if m < 2 {
        return Err(Error::Config(format!("m = {m}; need at least 2 options")));
    }
    let vocab = p.vocab()?;
    check_feasible(p, &vocab)?;
    if vocab.values().len() < m {
        return Err(Error::Config(format!(
            "{} value tokens cannot fill {m} distinct options",
            vocab.values().len()
        )));
    }
    let examples = (0..p.n_examples)
        .map(|i| {
            let seed = derive_seed(p.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (keys, values) = sample_pairs(&mut rng, &vocab, p.n_pairs);
            let q = rng.gen_range(0..p.n_pairs);
            let gold_value = values[q];

            // wrong options come from values absent from the passage while
            // enough exist, then from the passage's other values
            let mut wrong: Vec<usize> = vocab
                .values()
                .iter()
                .copied()
                .filter(|v| !values.contains(v))
                .collect();
            wrong.shuffle(&mut rng);
            wrong.truncate(m - 1);
            if wrong.len() < m - 1 {
                let mut rest: Vec<usize> = values.iter().copied().filter(|&v| v != gold_value).collect();
                rest.shuffle(&mut rng);
                wrong.extend(rest.into_iter().take(m - 1 - wrong.len()));
            }
            let gold = rng.gen_range(0..m);
            let mut options: Vec<Vec<usize>> = wrong.into_iter().map(|v| vec![v]).collect();
            options.insert(gold, vec![gold_value]);

            Example {
                passage: interleave(&keys, &values),
                question: vec![keys[q]],
                options: Some(options),
                answer: Answer::Choice { choice: gold },
                seed,
                distractor: false,
            }
        })
        .collect();
    Ok(Dataset {
        params: TaskParams {
            task: TaskKind::Choice,
            ..p.clone()
        },
        vocab,
        examples,
    })
}

/// Appends one `(key', value')` pair to the passage. `key'` is a near miss
/// of the question key (same confusion class, absent from the passage) when
/// one exists, otherwise any unused key. For span examples `value'` is a
/// value not yet in the passage; for choice examples it is one of the wrong
/// options. Gold labels are untouched.
pub fn inject_distractor(ex: &Example, vocab: &Vocab, seed: u64) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ex.seed));
    let q_key = *ex
        .question
        .first()
        .ok_or_else(|| Error::Data("empty question".into()))?;
    let class = vocab.confusion_class(q_key);
    let unused = |k: &usize| *k != q_key && !ex.passage.contains(k);

    let near: Vec<usize> = vocab
        .keys()
        .iter()
        .copied()
        .filter(|k| unused(k) && vocab.confusion_class(*k) == class)
        .collect();
    let key = match near.choose(&mut rng) {
        Some(k) => *k,
        None => *vocab
            .keys()
            .iter()
            .copied()
            .filter(|k| unused(k))
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .ok_or_else(|| Error::Data("no unused key for a distractor".into()))?,
    };

    let value = match (&ex.answer, &ex.options) {
        (Answer::Span { start, end }, _) => {
            let gold = &ex.passage[*start..=*end];
            let pool: Vec<usize> = vocab
                .values()
                .iter()
                .copied()
                .filter(|v| !ex.passage.contains(v) && !gold.contains(v))
                .collect();
            *pool
                .choose(&mut rng)
                .ok_or_else(|| Error::Data("no unused value for a distractor".into()))?
        }
        (Answer::Choice { choice }, Some(opts)) => {
            let wrong: Vec<usize> = opts
                .iter()
                .enumerate()
                .filter(|(i, o)| *i != *choice && o.len() == 1 && o[0] != opts[*choice][0])
                .map(|(_, o)| o[0])
                .collect();
            *wrong
                .choose(&mut rng)
                .ok_or_else(|| Error::Data("no wrong option to plant".into()))?
        }
        (Answer::Choice { .. }, None) => {
            return Err(Error::Data("choice answer without options".into()))
        }
    };

    let mut out = ex.clone();
    out.passage.extend([key, value]);
    out.distractor = true;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    /// Inclusive span in sequence coordinates (after the `[CLS]` offset).
    Span { start: usize, end: usize },
    Choice(usize),
}

/// Padded token ids with role segmentation. Span batches hold one sequence
/// per example; choice batches hold `m` consecutive sequences per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub max_len: usize,
    /// `n_sequences * max_len` ids, row-major.
    pub ids: Vec<usize>,
    pub roles: Vec<RoleMask>,
    /// Unpadded length of each sequence.
    pub lengths: Vec<usize>,
    /// `true` for real tokens, `false` for padding; same layout as `ids`.
    pub pad_mask: Vec<bool>,
    pub labels: Vec<Label>,
    pub seqs_per_example: usize,
    /// Half-open passage position range of each sequence.
    pub passage_ranges: Vec<(usize, usize)>,
}

impl Batch {
    pub fn n_sequences(&self) -> usize {
        self.lengths.len()
    }

    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    /// Unpadded ids of sequence `s`.
    pub fn seq_ids(&self, s: usize) -> &[usize] {
        &self.ids[s * self.max_len..s * self.max_len + self.lengths[s]]
    }

    /// Unpadded roles of sequence `s`.
    pub fn seq_roles(&self, s: usize) -> &[Role] {
        &self.roles[s].roles()[..self.lengths[s]]
    }
}

/// Sequence length an example occupies in a batch.
pub fn sequence_len(ex: &Example) -> usize {
    let base = 1 + ex.passage.len() + 1 + ex.question.len() + 1;
    match &ex.options {
        Some(opts) => base + opts.iter().map(|o| o.len() + 1).max().unwrap_or(0),
        None => base,
    }
}

/// Lays out `[CLS] passage [SEP] question [SEP]` (plus `option [SEP]` per
/// choice sequence) and pads to `max_len`.
pub fn build_batch(examples: &[Example], max_len: usize) -> Result<Batch> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let seqs_per_example = first.options.as_ref().map_or(1, Vec::len);
    let mut batch = Batch {
        max_len,
        ids: Vec::new(),
        roles: Vec::new(),
        lengths: Vec::new(),
        pad_mask: Vec::new(),
        labels: Vec::with_capacity(examples.len()),
        seqs_per_example,
        passage_ranges: Vec::new(),
    };

    for (n, ex) in examples.iter().enumerate() {
        if ex.options.as_ref().map_or(1, Vec::len) != seqs_per_example {
            return Err(Error::Data(format!(
                "example {n} (seed {}) does not match the batch's task shape",
                ex.seed
            )));
        }
        if sequence_len(ex) > max_len {
            return Err(Error::Data(format!(
                "example {n} (seed {}) needs {} positions, max_len is {max_len}",
                ex.seed,
                sequence_len(ex)
            )));
        }
        let mut ids = vec![CLS];
        let mut roles = vec![Role::Special];
        ids.extend(&ex.passage);
        roles.extend(std::iter::repeat(Role::Passage).take(ex.passage.len()));
        ids.push(SEP);
        roles.push(Role::Special);
        ids.extend(&ex.question);
        roles.extend(std::iter::repeat(Role::Question).take(ex.question.len()));
        ids.push(SEP);
        roles.push(Role::Special);
        let passage_range = (1, 1 + ex.passage.len());

        let options: Vec<&[usize]> = match &ex.options {
            Some(opts) => opts.iter().map(Vec::as_slice).collect(),
            None => vec![&[]],
        };
        for opt in options {
            let mut ids = ids.clone();
            let mut roles = roles.clone();
            if !opt.is_empty() {
                ids.extend(opt);
                roles.extend(std::iter::repeat(Role::Option).take(opt.len()));
                ids.push(SEP);
                roles.push(Role::Special);
            }
            let len = ids.len();
            batch.lengths.push(len);
            batch.pad_mask.extend((0..max_len).map(|i| i < len));
            ids.resize(max_len, PAD);
            roles.resize(max_len, Role::Special);
            batch.ids.extend(ids);
            batch.roles.push(RoleMask::new(roles));
            batch.passage_ranges.push(passage_range);
        }

        batch.labels.push(match ex.answer {
            Answer::Span { start, end } => Label::Span {
                start: start + 1,
                end: end + 1,
            },
            Answer::Choice { choice } => Label::Choice(choice),
        });
    }
    Ok(batch)
}

/// Token strings of one example recovered from a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub passage: Vec<String>,
    pub question: Vec<String>,
    pub options: Option<Vec<Vec<String>>>,
}

/// Inverse of [`build_batch`] on the token level.
pub fn decode(batch: &Batch, vocab: &Vocab) -> Vec<Decoded> {
    let pick = |s: usize, role: Role| -> Vec<String> {
        batch
            .seq_ids(s)
            .iter()
            .zip(batch.seq_roles(s))
            .filter(|(_, r)| **r == role)
            .map(|(id, _)| vocab.token(*id).to_string())
            .collect()
    };
    (0..batch.n_examples())
        .map(|e| {
            let s0 = e * batch.seqs_per_example;
            let options = matches!(batch.labels[e], Label::Choice(_)).then(|| {
                (s0..s0 + batch.seqs_per_example)
                    .map(|s| pick(s, Role::Option))
                    .collect()
            });
            Decoded {
                passage: pick(s0, Role::Passage),
                question: pick(s0, Role::Question),
                options,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    passage: Vec<String>,
    question: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<Vec<String>>>,
    answer: Answer,
}

/// Companion metadata path: `data.jsonl` -> `data.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Serializes examples as JSON lines.
pub fn to_jsonl(ds: &Dataset) -> String {
    let mut out = String::new();
    for ex in &ds.examples {
        let rec = Record {
            passage: ds.vocab.strings_of(&ex.passage),
            question: ds.vocab.strings_of(&ex.question),
            options: ex
                .options
                .as_ref()
                .map(|o| o.iter().map(|o| ds.vocab.strings_of(o)).collect()),
            answer: ex.answer,
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Writes the dataset and its companion metadata file.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_jsonl(ds)).map_err(|e| Error::io(path, e))?;
    let meta = meta_path(path);
    let json = serde_json::to_string_pretty(&ds.params).map_err(|e| Error::json(&meta, e))?;
    fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))
}

/// Loads a dataset and validates every example against its metadata.
pub fn load(path: &Path) -> Result<Dataset> {
    let meta = meta_path(path);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let params: TaskParams = serde_json::from_str(&text).map_err(|e| Error::json(&meta, e))?;
    let vocab = params.vocab()?;

    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let bad = |e: Error| Error::Data(format!("{}:{}: {e}", path.display(), n + 1));
        let ex = Example {
            passage: vocab.ids_of(&rec.passage).map_err(bad)?,
            question: vocab.ids_of(&rec.question).map_err(bad)?,
            options: rec
                .options
                .map(|o| o.iter().map(|o| vocab.ids_of(o)).collect::<Result<Vec<_>>>())
                .transpose()
                .map_err(bad)?,
            answer: rec.answer,
            seed: derive_seed(params.seed, n as u64),
            distractor: false,
        };
        ex.validate(vocab.len()).map_err(bad)?;
        let kind_ok = match params.task {
            TaskKind::Span => !ex.is_choice(),
            TaskKind::Choice => ex.options.as_ref().map(Vec::len) == params.m,
        };
        if !kind_ok {
            return Err(bad(Error::Data(format!(
                "example does not match task {:?}",
                params.task
            ))));
        }
        examples.push(ex);
    }
    Ok(Dataset {
        params,
        vocab,
        examples,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(&mut s, "{b:02x}").expect("write to String");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span_ds(n: usize, pairs: usize, seed: u64) -> Dataset {
        gen_kv_task(&TaskParams::span(n, pairs, 40, seed)).unwrap()
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::synthetic(11, 2).unwrap();
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[SEP]"), Some(SEP));
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.keys().len(), 4);
        assert_eq!(v.values().len(), 4);
        assert_eq!(v.token(3), "k0.0");
        assert_eq!(v.confusion_class(6), Some(1));
        assert_eq!(v.confusion_class(7), None);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn single_pair_answer_is_position_one() {
        let ds = span_ds(50, 1, 3);
        for ex in &ds.examples {
            assert_eq!(ex.answer, Answer::Span { start: 1, end: 1 });
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(span_ds(30, 4, 9), span_ds(30, 4, 9));
        assert_ne!(span_ds(30, 4, 9).examples, span_ds(30, 4, 10).examples);
    }

    #[test]
    fn answer_token_is_the_paired_value() {
        // regenerate the pairs independently from each example's seed
        let ds = span_ds(200, 5, 21);
        for ex in &ds.examples {
            let mut rng = ChaCha8Rng::seed_from_u64(ex.seed);
            let (keys, values) = sample_pairs(&mut rng, &ds.vocab, 5);
            let q = keys.iter().position(|k| *k == ex.question[0]).unwrap();
            let Answer::Span { start, end } = ex.answer else { panic!() };
            assert_eq!(start, end);
            assert_eq!(ex.passage[start], values[q]);
            let mut uniq = keys.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), keys.len());
        }
    }

    #[test]
    fn infeasible_sizes_rejected() {
        let err = gen_kv_task(&TaskParams::span(5, 4, 11, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(gen_kv_task(&TaskParams::span(5, 4, 12, 0)).is_ok());
        let err = gen_choice_task(&TaskParams::choice(5, 2, 1, 30, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn choice_options_contain_exactly_one_gold() {
        let ds = gen_choice_task(&TaskParams::choice(300, 4, 4, 40, 5)).unwrap();
        for ex in &ds.examples {
            let opts = ex.options.as_ref().unwrap();
            assert_eq!(opts.len(), 4);
            let Answer::Choice { choice } = ex.answer else { panic!() };
            let q = ex.passage.iter().position(|t| *t == ex.question[0]).unwrap();
            let gold = ex.passage[q + 1];
            assert_eq!(opts[choice], vec![gold]);
            assert_eq!(opts.iter().filter(|o| o[0] == gold).count(), 1);
        }
    }

    #[test]
    fn choice_two_options_single_pair() {
        let ds = gen_choice_task(&TaskParams::choice(50, 1, 2, 20, 1)).unwrap();
        for ex in &ds.examples {
            let opts = ex.options.as_ref().unwrap();
            let Answer::Choice { choice } = ex.answer else { panic!() };
            let other = &opts[1 - choice];
            assert_ne!(other[0], ex.passage[1]);
            assert!(ds.vocab.values().contains(&other[0]));
        }
    }

    #[test]
    fn gold_index_is_uniform() {
        let n = 10_000;
        let ds = gen_choice_task(&TaskParams::choice(n, 4, 4, 40, 77)).unwrap();
        let mut counts = [0usize; 4];
        for ex in &ds.examples {
            let Answer::Choice { choice } = ex.answer else { panic!() };
            counts[choice] += 1;
        }
        let mean = n as f64 / 4.0;
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn distractor_is_append_only_and_misleading() {
        let ds = span_ds(300, 4, 8);
        for ex in &ds.examples {
            let d = inject_distractor(ex, &ds.vocab, 1).unwrap();
            assert_eq!(d.answer, ex.answer);
            assert_eq!(&d.passage[..ex.passage.len()], ex.passage.as_slice());
            assert_eq!(d.passage.len(), ex.passage.len() + 2);
            let Answer::Span { start, .. } = ex.answer else { panic!() };
            let (k, v) = (d.passage[ex.passage.len()], d.passage[ex.passage.len() + 1]);
            assert_ne!(v, ex.passage[start]);
            assert_ne!(k, ex.question[0]);
            assert!(d.distractor);
            assert_eq!(inject_distractor(ex, &ds.vocab, 1).unwrap(), d);
        }
    }

    #[test]
    fn distractor_key_is_a_near_miss_when_available() {
        let ds = gen_kv_task(&TaskParams::span(200, 3, 60, 4).with_class_size(4)).unwrap();
        for ex in &ds.examples {
            let d = inject_distractor(ex, &ds.vocab, 2).unwrap();
            let k = d.passage[ex.passage.len()];
            assert_eq!(
                ds.vocab.confusion_class(k),
                ds.vocab.confusion_class(ex.question[0])
            );
        }
    }

    #[test]
    fn choice_distractor_plants_a_wrong_option() {
        let ds = gen_choice_task(&TaskParams::choice(100, 4, 4, 40, 2)).unwrap();
        for ex in &ds.examples {
            let d = inject_distractor(ex, &ds.vocab, 3).unwrap();
            let Answer::Choice { choice } = ex.answer else { panic!() };
            let v = *d.passage.last().unwrap();
            let opts = ex.options.as_ref().unwrap();
            let planted = opts.iter().position(|o| o[0] == v).unwrap();
            assert_ne!(planted, choice);
        }
    }

    #[test]
    fn batch_layout() {
        let ex = Example {
            passage: vec![3, 7],
            question: vec![3],
            options: None,
            answer: Answer::Span { start: 1, end: 1 },
            seed: 0,
            distractor: false,
        };
        let b = build_batch(&[ex], 8).unwrap();
        assert_eq!(b.lengths, vec![6]);
        assert_eq!(&b.ids[..6], &[CLS, 3, 7, SEP, 3, SEP]);
        assert_eq!(&b.ids[6..], &[PAD, PAD]);
        assert_eq!(b.labels, vec![Label::Span { start: 2, end: 2 }]);
        assert_eq!(b.passage_ranges, vec![(1, 3)]);
        let roles = b.roles[0].roles();
        assert_eq!(roles.iter().filter(|r| **r == Role::Passage).count(), 2);
        assert_eq!(roles.iter().filter(|r| **r == Role::Question).count(), 1);
        assert_eq!(b.pad_mask, vec![true, true, true, true, true, true, false, false]);

        let err = build_batch(&[b_example_long()], 8).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("example 0")));
    }

    fn b_example_long() -> Example {
        Example {
            passage: vec![3; 10],
            question: vec![3],
            options: None,
            answer: Answer::Span { start: 1, end: 1 },
            seed: 0,
            distractor: false,
        }
    }

    #[test]
    fn choice_batch_has_one_sequence_per_option() {
        let ds = gen_choice_task(&TaskParams::choice(3, 3, 4, 30, 1)).unwrap();
        let b = build_batch(&ds.examples, 16).unwrap();
        assert_eq!(b.n_sequences(), 12);
        assert_eq!(b.seqs_per_example, 4);
        for s in 0..12 {
            let roles = b.seq_roles(s);
            assert_eq!(roles.iter().filter(|r| **r == Role::Option).count(), 1);
            assert_eq!(*roles.last().unwrap(), Role::Special);
        }
    }

    #[test]
    fn decode_inverts_build() {
        for ds in [
            span_ds(20, 4, 3),
            gen_choice_task(&TaskParams::choice(20, 3, 3, 30, 3)).unwrap(),
        ] {
            let b = build_batch(&ds.examples, 20).unwrap();
            for (ex, dec) in ds.examples.iter().zip(decode(&b, &ds.vocab)) {
                assert_eq!(dec.passage, ds.vocab.strings_of(&ex.passage));
                assert_eq!(dec.question, ds.vocab.strings_of(&ex.question));
                assert_eq!(
                    dec.options,
                    ex.options
                        .as_ref()
                        .map(|o| o.iter().map(|o| ds.vocab.strings_of(o)).collect())
                );
            }
        }
    }

    #[test]
    fn span_labels_point_at_passage_roles() {
        let ds = span_ds(50, 4, 12);
        let b = build_batch(&ds.examples, 16).unwrap();
        for (s, label) in b.labels.iter().enumerate() {
            let Label::Span { start, end } = *label else { panic!() };
            assert_eq!(b.seq_roles(s)[start], Role::Passage);
            assert_eq!(b.seq_roles(s)[end], Role::Passage);
        }
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("span.jsonl");
        let ds = span_ds(25, 3, 4);
        save(&ds, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.examples, ds.examples);
        assert_eq!(back.params, ds.params);

        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"passage\":["), "{first}");
        assert!(first.contains("\"answer\":{\"start\":"));

        fs::write(&path, "{\"passage\":[\"k0.0\"],\"question\":[\"k0.0\"],\"answer\":{\"start\":3,\"end\":3}}\n").unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains(":1:")), "{err}");
    }
}
