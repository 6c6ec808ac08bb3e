//! Dataset generation: Gaussian binary sequences for the theory experiments,
//! the anchor-function token task, and the frozen embedding that turns
//! token sequences into input matrices.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetMode {
    Binary,
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Values in {+1, -1}.
    Binary(Vec<f64>),
    /// Target token ids.
    Tokens(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Binary(v) => v.len(),
            Labels::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn binary(&self) -> Option<&[f64]> {
        match self {
            Labels::Binary(v) => Some(v),
            Labels::Tokens(_) => None,
        }
    }

    pub fn tokens(&self) -> Option<&[usize]> {
        match self {
            Labels::Tokens(v) => Some(v),
            Labels::Binary(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMeta {
    pub s: usize,
    pub d_m: usize,
    pub n: usize,
    pub mode: SetMode,
    pub seed: Option<u64>,
    /// Direction used to label binary sets, when generated.
    pub hidden_direction: Option<DVector<f64>>,
}

/// `n` input sequences, each an `s × d_m` matrix whose rows are tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequenceSet {
    pub sequences: Vec<DMatrix<f64>>,
    pub labels: Labels,
    pub meta: SetMeta,
}

impl LabeledSequenceSet {
    /// Builds a binary set, checking shapes, label values and class balance.
    pub fn binary(sequences: Vec<DMatrix<f64>>, labels: Vec<f64>) -> Result<Self> {
        let (s, d_m) = common_shape(&sequences)?;
        if labels.len() != sequences.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} sequences but {} labels",
                sequences.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Domain("binary labels must be +1 or -1".into()));
        }
        let n = sequences.len();
        Ok(LabeledSequenceSet {
            sequences,
            labels: Labels::Binary(labels),
            meta: SetMeta {
                s,
                d_m,
                n,
                mode: SetMode::Binary,
                seed: None,
                hidden_direction: None,
            },
        })
    }

    pub fn token(sequences: Vec<DMatrix<f64>>, targets: Vec<usize>) -> Result<Self> {
        let (s, d_m) = common_shape(&sequences)?;
        if targets.len() != sequences.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} sequences but {} targets",
                sequences.len(),
                targets.len()
            )));
        }
        let n = sequences.len();
        Ok(LabeledSequenceSet {
            sequences,
            labels: Labels::Tokens(targets),
            meta: SetMeta {
                s,
                d_m,
                n,
                mode: SetMode::Token,
                seed: None,
                hidden_direction: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn has_both_classes(&self) -> bool {
        match &self.labels {
            Labels::Binary(y) => y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0),
            Labels::Tokens(_) => false,
        }
    }

    /// Σ_i y_i Σ_j X_{i,j}, the label-weighted token sum (binary sets only).
    pub fn signed_token_sum(&self) -> Option<DVector<f64>> {
        let y = self.labels.binary()?;
        let mut acc = DVector::zeros(self.meta.d_m);
        for (x, &yi) in self.sequences.iter().zip(y) {
            for j in 0..x.nrows() {
                acc += yi * x.row(j).transpose();
            }
        }
        Some(acc)
    }
}

fn common_shape(sequences: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::Domain("dataset must be nonempty".into()))?;
    let shape = (first.nrows(), first.ncols());
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::DimensionMismatch("sequences must have s ≥ 1 and d_m ≥ 1".into()));
    }
    if let Some(bad) = sequences.iter().position(|x| (x.nrows(), x.ncols()) != shape) {
        return Err(Error::DimensionMismatch(format!(
            "sequence {bad} has shape {}x{}, expected {}x{}",
            sequences[bad].nrows(),
            sequences[bad].ncols(),
            shape.0,
            shape.1
        )));
    }
    Ok(shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinaryConfig {
    pub n: usize,
    pub s: usize,
    pub d_m: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for BinaryConfig {
    fn default() -> Self {
        BinaryConfig {
            n: 32,
            s: 4,
            d_m: 8,
            margin: 0.1,
            seed: 0,
        }
    }
}

/// Gaussian sequences labelled by the sign of a hidden direction `u` applied
/// to each sequence's token sum. Draws whose margin
/// `|⟨u, Σ_j X_{i,j}⟩| / √s` falls below `margin` are redrawn.
pub fn gen_binary(cfg: &BinaryConfig) -> Result<LabeledSequenceSet> {
    if cfg.n == 0 || cfg.s == 0 || cfg.d_m == 0 {
        return Err(Error::Config("binary dataset needs n, s, d_m ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = linalg::unit_vector(&mut rng, cfg.d_m);
    let budget = 1000 * cfg.n;
    let mut attempts = 0usize;
    let sqrt_s = (cfg.s as f64).sqrt();

    let mut draw = |rng: &mut ChaCha8Rng, want: Option<f64>| -> Result<(DMatrix<f64>, f64)> {
        loop {
            attempts += 1;
            if attempts > budget {
                return Err(Error::MarginUnsatisfiable {
                    margin: cfg.margin,
                    attempts: budget,
                });
            }
            let x = linalg::gaussian_matrix(rng, cfg.s, cfg.d_m, 1.0);
            let proj: f64 = x.row_sum().transpose().dot(&u);
            if proj.abs() / sqrt_s < cfg.margin || proj == 0.0 {
                continue;
            }
            let y = proj.signum();
            if want.is_some_and(|w| w != y) {
                continue;
            }
            return Ok((x, y));
        }
    };

    let mut sequences = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let (x, y) = draw(&mut rng, None)?;
        sequences.push(x);
        labels.push(y);
    }
    if cfg.n >= 2 && labels.iter().all(|&y| y == labels[0]) {
        let (x, y) = draw(&mut rng, Some(-labels[0]))?;
        sequences[cfg.n - 1] = x;
        labels[cfg.n - 1] = y;
    }
    let mut set = LabeledSequenceSet::binary(sequences, labels)?;
    set.meta.seed = Some(cfg.seed);
    set.meta.hidden_direction = Some(u);
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub anchors: Vec<usize>,
    /// Inclusive range of key tokens.
    pub key_min: usize,
    pub key_max: usize,
    pub s: usize,
    /// Use the `x_{i+1} + (a mod 2)` target rule instead of `x_{i+1} + a`.
    pub synonym: bool,
    pub n: usize,
    pub seed: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            anchors: vec![1, 2, 3, 4],
            key_min: 5,
            key_max: 100,
            s: 10,
            synonym: true,
            n: 2000,
            seed: 0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::Config("anchor set is empty".into()));
        }
        if self.key_min > self.key_max {
            return Err(Error::Config("key range is empty".into()));
        }
        if let Some(a) = self.anchors.iter().find(|&&a| (self.key_min..=self.key_max).contains(&a)) {
            return Err(Error::Config(format!("anchor {a} overlaps the key range")));
        }
        if self.s < 3 {
            return Err(Error::Config("anchor sequences need s ≥ 3".into()));
        }
        Ok(())
    }

    /// Target produced by anchor `a` followed by `next`.
    pub fn target(&self, anchor: usize, next: usize) -> usize {
        if self.synonym {
            next + anchor % 2
        } else {
            next + anchor
        }
    }

    /// Smallest vocabulary that holds every input and target token.
    pub fn min_vocab(&self) -> usize {
        let max_anchor = self.anchors.iter().copied().max().unwrap_or(0);
        let max_target = if self.synonym {
            self.key_max + 1
        } else {
            self.key_max + max_anchor
        };
        max_target.max(max_anchor).max(self.key_max) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    /// `n` sequences of `s` token ids.
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    /// 0-based position of the anchor in each sequence.
    pub anchor_positions: Vec<usize>,
}

/// Each sequence holds exactly one anchor among its first `s - 1` positions;
/// every other position is a key drawn uniformly from the key range.
pub fn gen_anchor(cfg: &AnchorConfig) -> Result<TokenDataset> {
    cfg.validate()?;
    let anchors: Vec<usize> = cfg.anchors.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs = Vec::with_capacity(cfg.n);
    let mut targets = Vec::with_capacity(cfg.n);
    let mut positions = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let mut seq: Vec<usize> = (0..cfg.s).map(|_| rng.random_range(cfg.key_min..=cfg.key_max)).collect();
        let pos = rng.random_range(0..cfg.s - 1);
        let a = anchors[rng.random_range(0..anchors.len())];
        seq[pos] = a;
        targets.push(cfg.target(a, seq[pos + 1]));
        positions.push(pos);
        inputs.push(seq);
    }
    Ok(TokenDataset {
        inputs,
        targets,
        anchor_positions: positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub vocab: usize,
    pub d_m: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            vocab: 201,
            d_m: 64,
            seed: 0,
        }
    }
}

/// Frozen token embedding (`vocab × d_m`, unit-norm Gaussian rows) and the
/// matching output projection (`d_m × vocab`, its transpose).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub embed: DMatrix<f64>,
    pub unembed: DMatrix<f64>,
}

impl Embedding {
    pub fn new(cfg: &EmbeddingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut embed = linalg::gaussian_matrix(&mut rng, cfg.vocab, cfg.d_m, 1.0);
        for mut r in embed.row_iter_mut() {
            let n = r.norm();
            if n > linalg::ZERO_NORM {
                r /= n;
            }
        }
        let unembed = embed.transpose();
        Embedding { embed, unembed }
    }

    pub fn vocab(&self) -> usize {
        self.embed.nrows()
    }

    pub fn d_m(&self) -> usize {
        self.embed.ncols()
    }

    pub fn embed_sequence(&self, tokens: &[usize]) -> Result<DMatrix<f64>> {
        let vocab = self.vocab();
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
        Ok(DMatrix::from_fn(tokens.len(), self.d_m(), |r, c| self.embed[(tokens[r], c)]))
    }
}

/// Embeds every sequence of `data` with a freshly built frozen embedding and
/// returns the token-mode set together with that embedding.
pub fn embed_tokens(data: &TokenDataset, cfg: &EmbeddingConfig) -> Result<(LabeledSequenceSet, Embedding)> {
    let emb = Embedding::new(cfg);
    if let Some(&t) = data.targets.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab });
    }
    let sequences = data
        .inputs
        .iter()
        .map(|seq| emb.embed_sequence(seq))
        .collect::<Result<Vec<_>>>()?;
    let mut set = LabeledSequenceSet::token(sequences, data.targets.clone())?;
    set.meta.seed = Some(cfg.seed);
    Ok((set, emb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_set_is_reproducible_and_balanced() {
        let cfg = BinaryConfig {
            n: 16,
            s: 3,
            d_m: 5,
            margin: 0.1,
            seed: 11,
        };
        let a = gen_binary(&cfg).unwrap();
        let b = gen_binary(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.has_both_classes());
        let u = a.meta.hidden_direction.clone().unwrap();
        for (x, &y) in a.sequences.iter().zip(a.labels.binary().unwrap()) {
            let proj = x.row_sum().transpose().dot(&u);
            assert_eq!(proj.signum(), y);
            assert!(proj.abs() / 3f64.sqrt() >= 0.1);
        }
    }

    #[test]
    fn binary_zero_margin_two_samples_has_both_labels() {
        let cfg = BinaryConfig {
            n: 2,
            s: 2,
            d_m: 3,
            margin: 0.0,
            seed: 4,
        };
        let set = gen_binary(&cfg).unwrap();
        assert!(set.has_both_classes());
        assert!(set.signed_token_sum().unwrap().norm() > 0.0);
    }

    #[test]
    fn binary_scalar_case() {
        let cfg = BinaryConfig {
            n: 4,
            s: 1,
            d_m: 1,
            margin: 0.1,
            seed: 2,
        };
        let set = gen_binary(&cfg).unwrap();
        assert_eq!(set.meta.s, 1);
        assert_eq!(set.meta.d_m, 1);
        assert!(set.has_both_classes());
    }

    #[test]
    fn impossible_margin_errors() {
        let cfg = BinaryConfig {
            n: 3,
            s: 2,
            d_m: 2,
            margin: 1e6,
            seed: 0,
        };
        assert!(matches!(gen_binary(&cfg), Err(Error::MarginUnsatisfiable { .. })));
    }

    #[test]
    fn anchor_targets_follow_the_rules() {
        let syn = AnchorConfig::default();
        assert_eq!(syn.target(3, 9), 10);
        assert_eq!(syn.target(2, 50), 50);
        let plain = AnchorConfig {
            synonym: false,
            ..AnchorConfig::default()
        };
        assert_eq!(plain.target(4, 20), 24);
    }

    #[test]
    fn anchor_dataset_has_exactly_one_anchor_before_last_position() {
        let cfg = AnchorConfig {
            n: 500,
            seed: 5,
            ..AnchorConfig::default()
        };
        let data = gen_anchor(&cfg).unwrap();
        for ((seq, &pos), &target) in data.inputs.iter().zip(&data.anchor_positions).zip(&data.targets) {
            let anchor_slots: Vec<usize> = (0..seq.len()).filter(|&k| cfg.anchors.contains(&seq[k])).collect();
            assert_eq!(anchor_slots, vec![pos]);
            assert!(pos < cfg.s - 1);
            assert_eq!(target, cfg.target(seq[pos], seq[pos + 1]));
            assert!(target < cfg.min_vocab());
        }
    }

    #[test]
    fn overlapping_anchor_and_keys_rejected() {
        let cfg = AnchorConfig {
            anchors: vec![1, 5],
            ..AnchorConfig::default()
        };
        assert!(matches!(gen_anchor(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_is_deterministic_and_rejects_bad_tokens() {
        let cfg = EmbeddingConfig {
            vocab: 20,
            d_m: 8,
            seed: 1,
        };
        assert_eq!(Embedding::new(&cfg), Embedding::new(&cfg));
        let emb = Embedding::new(&cfg);
        assert!(matches!(
            emb.embed_sequence(&[3, 20]),
            Err(Error::TokenOutOfRange { token: 20, vocab: 20 })
        ));
    }
}
