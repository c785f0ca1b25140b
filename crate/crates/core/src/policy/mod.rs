//! Tabular autoregressive softmax policy.
//!
//! The policy conditions on the query and the previous token only:
//! `π(y_t | x, y_<t) = softmax(logits[x, y_{t-1}, :])`, with a dedicated
//! BOS row for the first step. Token id 0 is end-of-sequence and is scored
//! like any other token, so it counts toward `|y|`.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};

/// End-of-sequence token id.
pub const EOS: usize = 0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("vocabulary size must be at least 2, got {0}")]
    InvalidVocabulary(usize),
    #[error("query count must be positive")]
    NoQueries,
    #[error("query {query} out of range (query count {count})")]
    QueryOutOfRange { query: usize, count: usize },
    #[error("token {token} out of range (vocabulary size {size})")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("logit table has {got} entries, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite logit at flat index {0}")]
    NonFinite(usize),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(PolicyError::InvalidVocabulary(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> usize {
        EOS
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct QueryId(pub usize);

/// Conditioning context for one step: the previous token, or the start marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prev {
    Bos,
    Token(usize),
}

/// A scored or sampled response `y` to query `x`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenSequence {
    query: QueryId,
    tokens: Vec<usize>,
}

impl TokenSequence {
    /// Validates length ≥ 1, ids in range and EOS only in final position.
    pub fn new(query: QueryId, tokens: Vec<usize>, vocab: Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(PolicyError::InvalidSequence("empty token list".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(PolicyError::TokenOutOfRange {
                token: bad,
                size: vocab.size(),
            });
        }
        if tokens[..tokens.len() - 1].contains(&EOS) {
            return Err(PolicyError::InvalidSequence(
                "eos may only appear as the final token".into(),
            ));
        }
        Ok(Self { query, tokens })
    }

    pub fn query(&self) -> QueryId {
        self.query
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(prev, next)` pairs for every scored step.
    pub fn steps(&self) -> impl Iterator<Item = (Prev, usize)> + '_ {
        self.tokens.iter().enumerate().map(|(t, &next)| {
            let prev = if t == 0 {
                Prev::Bos
            } else {
                Prev::Token(self.tokens[t - 1])
            };
            (prev, next)
        })
    }
}

/// Per-token and total log-probability of a sequence, in nats.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeqLogProb {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl SeqLogProb {
    pub fn from_per_token(per_token: Vec<f64>) -> Self {
        let total = per_token.iter().sum();
        Self { per_token, total }
    }

    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }
}

/// Logit table of shape `query_count × (vocab + 1) × vocab`.
///
/// Row `vocab` of each query block is the BOS row.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocabulary,
    query_count: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab: Vocabulary, query_count: usize) -> Result<Self> {
        if query_count == 0 {
            return Err(PolicyError::NoQueries);
        }
        let len = table_len(vocab, query_count);
        Ok(Self {
            vocab,
            query_count,
            logits: vec![0.0; len],
        })
    }

    pub fn from_logits(vocab: Vocabulary, query_count: usize, logits: Vec<f64>) -> Result<Self> {
        if query_count == 0 {
            return Err(PolicyError::NoQueries);
        }
        let expected = table_len(vocab, query_count);
        if logits.len() != expected {
            return Err(PolicyError::ShapeMismatch {
                expected,
                got: logits.len(),
            });
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self {
            vocab,
            query_count,
            logits,
        })
    }

    /// Logits drawn iid from `Normal(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocabulary,
        query_count: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(vocab, query_count)?;
        let normal = Normal::new(0.0, scale.abs()).expect("finite scale");
        for x in &mut params.logits {
            *x = normal.sample(rng);
        }
        Ok(params)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Number of rows in the table (each row has `vocab` entries).
    pub fn row_count(&self) -> usize {
        self.query_count * (self.vocab.size() + 1)
    }

    pub fn row_index(&self, query: QueryId, prev: Prev) -> Result<usize> {
        if query.0 >= self.query_count {
            return Err(PolicyError::QueryOutOfRange {
                query: query.0,
                count: self.query_count,
            });
        }
        let v = self.vocab.size();
        let prev_idx = match prev {
            Prev::Bos => v,
            Prev::Token(t) if t < v => t,
            Prev::Token(t) => return Err(PolicyError::TokenOutOfRange { token: t, size: v }),
        };
        Ok(query.0 * (v + 1) + prev_idx)
    }

    pub fn row(&self, query: QueryId, prev: Prev) -> Result<&[f64]> {
        let r = self.row_index(query, prev)?;
        Ok(self.row_at(r))
    }

    fn row_at(&self, row: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[row * v..(row + 1) * v]
    }

    /// Log-softmax of one conditional row.
    pub fn log_softmax(&self, query: QueryId, prev: Prev) -> Result<Vec<f64>> {
        Ok(log_softmax(self.row(query, prev)?))
    }

    pub fn token_log_prob(&self, query: QueryId, prev: Prev, next: usize) -> Result<f64> {
        self.check_token(next)?;
        let row = self.row(query, prev)?;
        Ok(row[next] - log_sum_exp(row))
    }

    pub fn sequence_log_prob(&self, seq: &TokenSequence) -> Result<SeqLogProb> {
        let per_token = seq
            .steps()
            .map(|(prev, next)| self.token_log_prob(seq.query(), prev, next))
            .collect::<Result<Vec<_>>>()?;
        Ok(SeqLogProb::from_per_token(per_token))
    }

    /// Ancestral sampling until EOS or `max_len` tokens.
    ///
    /// Draws use the Gumbel-max trick on the raw logits, so no probability
    /// vector is formed.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        query: QueryId,
        max_len: usize,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        if max_len == 0 {
            return Err(PolicyError::ZeroMaxLen);
        }
        let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
        let mut tokens = Vec::with_capacity(max_len);
        let mut prev = Prev::Bos;
        while tokens.len() < max_len {
            let row = self.row(query, prev)?;
            let next = row
                .iter()
                .enumerate()
                .map(|(j, &l)| (j, l + gumbel.sample(rng)))
                .fold((0, f64::NEG_INFINITY), |best, cand| {
                    if cand.1 > best.1 {
                        cand
                    } else {
                        best
                    }
                })
                .0;
            tokens.push(next);
            if next == EOS {
                break;
            }
            prev = Prev::Token(next);
        }
        TokenSequence::new(query, tokens, self.vocab)
    }

    /// `∇_θ log π_θ(y|x)`: for each step, `onehot(next) − softmax(row)` on
    /// that step's row.
    pub fn grad_sequence_log_prob(&self, seq: &TokenSequence) -> Result<GradTable> {
        let mut grad = GradTable::new(self.vocab.size());
        for (prev, next) in seq.steps() {
            self.accumulate_step_grad(&mut grad, seq.query(), prev, next, 1.0)?;
        }
        Ok(grad)
    }

    /// Adds `scale · ∇ log π(next | query, prev)` into `grad`.
    pub fn accumulate_step_grad(
        &self,
        grad: &mut GradTable,
        query: QueryId,
        prev: Prev,
        next: usize,
        scale: f64,
    ) -> Result<()> {
        self.check_token(next)?;
        let r = self.row_index(query, prev)?;
        let logp = log_softmax(self.row_at(r));
        let row = grad.row_mut(r);
        for (j, (g, lp)) in row.iter_mut().zip(&logp).enumerate() {
            let onehot = if j == next { 1.0 } else { 0.0 };
            *g += scale * (onehot - lp.exp());
        }
        Ok(())
    }

    /// `θ ← θ + step · grad`.
    pub fn apply_gradient(&mut self, grad: &GradTable, step: f64) {
        let v = self.vocab.size();
        debug_assert_eq!(grad.row_len(), v);
        for (&r, values) in grad.rows() {
            for (x, g) in self.logits[r * v..(r + 1) * v].iter_mut().zip(values) {
                *x += step * g;
            }
        }
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab.size() {
            return Err(PolicyError::TokenOutOfRange {
                token,
                size: self.vocab.size(),
            });
        }
        Ok(())
    }
}

fn table_len(vocab: Vocabulary, query_count: usize) -> usize {
    query_count * (vocab.size() + 1) * vocab.size()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Gradient over the logit table, stored as the rows actually touched.
///
/// Rows are keyed by flat row index (see [`PolicyParams::row_index`]) and
/// iterated in ascending order, so reductions are order-deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradTable {
    row_len: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradTable {
    pub fn new(row_len: usize) -> Self {
        Self {
            row_len,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn rows(&self) -> impl Iterator<Item = (&usize, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn row(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let len = self.row_len;
        self.rows.entry(row).or_insert_with(|| vec![0.0; len])
    }

    /// Entry at flat logit index, zero if the row was never touched.
    pub fn get(&self, flat: usize) -> f64 {
        self.rows
            .get(&(flat / self.row_len))
            .map_or(0.0, |r| r[flat % self.row_len])
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        debug_assert_eq!(self.row_len, other.row_len);
        for (&r, values) in &other.rows {
            for (g, o) in self.row_mut(r).iter_mut().zip(values) {
                *g += scale * o;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for values in self.rows.values_mut() {
            values.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (&r, values) in &self.rows {
            out[r * self.row_len..(r + 1) * self.row_len].copy_from_slice(values);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|&g| g == 0.0)
    }
}
