//! Planted-signal fixtures: a random vocabulary and embedding table plus
//! molecules labelled by whether they contain a designated active token.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{MolexError, Result};
use crate::gselfies::Molecule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab: usize,
    pub dim: usize,
    pub molecules: usize,
    /// Index of the active token in the generated vocabulary.
    pub active_token: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a label is flipped.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab: 12,
            dim: 16,
            molecules: 200,
            active_token: 0,
            min_len: 3,
            max_len: 8,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(MolexError::Argument(
                "synthetic vocabulary needs at least 2 tokens".into(),
            ));
        }
        if self.dim == 0 || self.molecules == 0 {
            return Err(MolexError::Argument(
                "dim and molecule count must be positive".into(),
            ));
        }
        if self.active_token >= self.vocab {
            return Err(MolexError::Argument(
                "active token index outside the vocabulary".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(MolexError::Argument("need 1 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(MolexError::Argument("noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn token(i: usize) -> String {
        format!("G{i}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub molecules: Vec<Molecule>,
    pub table: EmbeddingTable,
    /// Label each molecule would carry without noise.
    pub clean_labels: Vec<usize>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab: Vec<String> = (0..spec.vocab).map(SynthSpec::token).collect();
    let matrix: Vec<f64> = (0..spec.vocab * spec.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let table = EmbeddingTable::new(spec.dim, vocab.clone(), matrix)?;

    let others: Vec<usize> = (0..spec.vocab)
        .filter(|&i| i != spec.active_token)
        .collect();
    let mut planted: Vec<bool> = (0..spec.molecules)
        .map(|i| i < spec.molecules / 2)
        .collect();
    planted.shuffle(&mut rng);

    let mut molecules = Vec::with_capacity(spec.molecules);
    let mut clean_labels = Vec::with_capacity(spec.molecules);
    for (i, &has_active) in planted.iter().enumerate() {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut ids: Vec<usize> = (0..len)
            .map(|_| others[rng.random_range(0..others.len())])
            .collect();
        if has_active {
            let count = rng.random_range(1..=len.div_ceil(4));
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            for &p in positions.iter().take(count) {
                ids[p] = spec.active_token;
            }
        }
        let clean = usize::from(has_active);
        let flipped = rng.random_bool(spec.noise);
        molecules.push(Molecule {
            id: format!("m{i:05}"),
            tokens: ids.iter().map(|&t| vocab[t].clone()).collect(),
            label: if flipped { 1 - clean } else { clean },
            gt_mask: Some(
                ids.iter()
                    .map(|&t| u8::from(t == spec.active_token))
                    .collect(),
            ),
        });
        clean_labels.push(clean);
    }
    Ok(SynthData {
        molecules,
        table,
        clean_labels,
    })
}
