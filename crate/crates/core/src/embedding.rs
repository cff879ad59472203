//! Token embedding tables and mean aggregation into n-gram and molecule
//! vectors.
//!
//! Tables load from the `MOLXEMB1` little-endian binary format or from CSV
//! (`token,v1,...,vd` with a header row), chosen by file extension.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{MolexError, Result};
use crate::gselfies::{extract_ngrams, Molecule, NGram};

pub const MAGIC: &[u8; 8] = b"MOLXEMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    #[default]
    Strict,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: Vec<String>,
    /// Row-major `vocab.len() x dim`.
    matrix: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vocab: Vec<String>, matrix: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(MolexError::Format("dimension must be positive".into()));
        }
        if matrix.len() != vocab.len() * dim {
            return Err(MolexError::Format(format!(
                "matrix holds {} values, expected {}",
                matrix.len(),
                vocab.len() * dim
            )));
        }
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(MolexError::Format(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(MolexError::Format(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(EmbeddingTable {
            dim,
            vocab,
            matrix,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.row(i))
    }

    /// Vector for `token` under `policy`; OOV tokens map to zero under
    /// [`OovPolicy::Zero`].
    pub fn lookup(&self, token: &str, policy: OovPolicy) -> Result<Vec<f64>> {
        match (self.get(token), policy) {
            (Some(v), _) => Ok(v.to_vec()),
            (None, OovPolicy::Zero) => Ok(vec![0.0; self.dim]),
            (None, OovPolicy::Strict) => Err(MolexError::Vocab(token.to_string())),
        }
    }

    /// SHA-256 over dimension, vocabulary and the stored values, so a CSV
    /// and a binary file with the same content share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.vocab.len() as u64).to_le_bytes());
        for t in &self.vocab {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        for v in &self.matrix {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(MolexError::Format("bad magic".into()));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut vocab = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let raw = cur.take(len)?;
            let s = std::str::from_utf8(raw).map_err(|_| {
                MolexError::Format(format!("vocab entry {} is not UTF-8", vocab.len()))
            })?;
            vocab.push(s.to_string());
        }
        let mut matrix = Vec::with_capacity(count * dim);
        for r in 0..count {
            for _ in 0..dim {
                let v = f32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(MolexError::Format(format!("non-finite value in row {r}")));
                }
                matrix.push(v as f64);
            }
        }
        if cur.pos != bytes.len() {
            return Err(MolexError::Format("trailing bytes after matrix".into()));
        }
        EmbeddingTable::new(dim, vocab, matrix)
    }

    /// Binary32 serialization; values are rounded to `f32`.
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.matrix.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for t in &self.vocab {
            let len = u16::try_from(t.len())
                .map_err(|_| MolexError::Format(format!("token too long: {} bytes", t.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        for v in &self.matrix {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| MolexError::Format(format!("csv header: {e}")))?
            .clone();
        if header.len() < 2 || &header[0] != "token" {
            return Err(MolexError::Format(
                "csv header must be token,v1,...,vd".into(),
            ));
        }
        let dim = header.len() - 1;
        let mut vocab = Vec::new();
        let mut matrix = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| MolexError::Format(format!("csv row {r}: {e}")))?;
            if rec.len() != dim + 1 {
                return Err(MolexError::Format(format!(
                    "csv row {r}: expected {} fields",
                    dim + 1
                )));
            }
            vocab.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    MolexError::Format(format!("csv row {r}: bad number {field:?}"))
                })?;
                if !v.is_finite() {
                    return Err(MolexError::Format(format!("non-finite value in row {r}")));
                }
                matrix.push(v);
            }
        }
        EmbeddingTable::new(dim, vocab, matrix)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("token");
        for j in 1..=self.dim {
            out.push_str(&format!(",v{j}"));
        }
        out.push('\n');
        for (i, t) in self.vocab.iter().enumerate() {
            out.push_str(t);
            for v in self.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MolexError::Format("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    if is_csv(path) {
        EmbeddingTable::from_csv(&std::fs::read_to_string(path)?)
    } else {
        EmbeddingTable::from_binary(&std::fs::read(path)?)
    }
}

pub fn save_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        std::fs::write(path, table.to_csv())?;
    } else {
        std::fs::write(path, table.to_binary()?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramEmbedding {
    pub vector: Vec<f64>,
    pub span: (usize, usize),
}

/// Ascending-index mean of equal-length rows.
pub(crate) fn mean_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        count += 1;
    }
    if count > 0 {
        let inv = count as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
    }
    acc
}

pub fn embed_ngram(
    table: &EmbeddingTable,
    ngram: &NGram<'_>,
    policy: OovPolicy,
) -> Result<NGramEmbedding> {
    let vectors = ngram
        .tokens
        .iter()
        .map(|t| table.lookup(t, policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(NGramEmbedding {
        vector: mean_rows(vectors.iter().map(Vec::as_slice), table.dim()),
        span: ngram.span,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeEmbedding {
    pub vector: Vec<f64>,
    pub per_ngram: Vec<NGramEmbedding>,
}

pub fn embed_molecule(
    table: &EmbeddingTable,
    molecule: &Molecule,
    n: usize,
    policy: OovPolicy,
) -> Result<MoleculeEmbedding> {
    if molecule.tokens.is_empty() {
        return Err(MolexError::Data(format!(
            "molecule {} has no tokens",
            molecule.id
        )));
    }
    let per_ngram = extract_ngrams(&molecule.tokens, n)?
        .iter()
        .map(|g| embed_ngram(table, g, policy))
        .collect::<Result<Vec<_>>>()?;
    let vector = mean_rows(per_ngram.iter().map(|e| e.vector.as_slice()), table.dim());
    Ok(MoleculeEmbedding { vector, per_ngram })
}
