//! Flat Group-SELFIES token streams: bracket tokenizer, canonical writer,
//! n-gram windows, and the JSON Lines dataset format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{MolexError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Molecule {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<Vec<u8>>,
}

impl Molecule {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(MolexError::Data(format!(
                "molecule {} has no tokens",
                self.id
            )));
        }
        if let Some(mask) = &self.gt_mask {
            if mask.len() != self.tokens.len() {
                return Err(MolexError::Data(format!(
                    "molecule {}: gt_mask has {} entries for {} tokens",
                    self.id,
                    mask.len(),
                    self.tokens.len()
                )));
            }
            if mask.iter().any(|&m| m > 1) {
                return Err(MolexError::Data(format!(
                    "molecule {}: gt_mask entries must be 0 or 1",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A contiguous window of a molecule's tokens. `span` is the half-open
/// index range `[start, end)` into the parent token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGram<'a> {
    pub tokens: &'a [String],
    pub span: (usize, usize),
}

pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut open: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        match (ch, open) {
            ('[', None) => open = Some(i),
            ('[', Some(_)) => return Err(MolexError::parse(i, "nested bracket")),
            (']', None) => return Err(MolexError::parse(i, "unmatched closing bracket")),
            (']', Some(start)) => {
                if i == start + 1 {
                    return Err(MolexError::parse(start, "empty token"));
                }
                tokens.push(text[start + 1..i].to_string());
                open = None;
            }
            (c, None) if c.is_whitespace() => {}
            (_, None) => return Err(MolexError::parse(i, "character outside brackets")),
            (_, Some(_)) => {}
        }
    }
    if let Some(start) = open {
        return Err(MolexError::parse(start, "unbalanced bracket"));
    }
    Ok(tokens)
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> Result<String> {
    let mut out = String::new();
    let mut offset = 0;
    for t in tokens {
        let t = t.as_ref();
        if let Some(pos) = t.find(['[', ']']) {
            return Err(MolexError::parse(offset + 1 + pos, "bracket inside token"));
        }
        if t.is_empty() {
            return Err(MolexError::parse(offset, "empty token"));
        }
        out.push('[');
        out.push_str(t);
        out.push(']');
        offset = out.len();
    }
    Ok(out)
}

/// Sliding windows of length `n`; a sequence shorter than `n` yields one
/// window covering all of it.
pub fn extract_ngrams(tokens: &[String], n: usize) -> Result<Vec<NGram<'_>>> {
    if n == 0 {
        return Err(MolexError::Argument(
            "n-gram size must be at least 1".into(),
        ));
    }
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    if tokens.len() < n {
        return Ok(vec![NGram {
            tokens,
            span: (0, tokens.len()),
        }]);
    }
    Ok((0..=tokens.len() - n)
        .map(|s| NGram {
            tokens: &tokens[s..s + n],
            span: (s, s + n),
        })
        .collect())
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: Molecule = serde_json::from_str(&line)
            .map_err(|e| MolexError::Format(format!("dataset line {}: {e}", lineno + 1)))?;
        m.validate()?;
        out.push(m);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut writer: W, molecules: &[Molecule]) -> Result<()> {
    for m in molecules {
        serde_json::to_writer(&mut writer, m)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("[benzene][nitro]").unwrap(),
            toks(&["benzene", "nitro"])
        );
        assert!(tokenize("").unwrap().is_empty());
        assert_eq!(tokenize("  [A]\n [b] ").unwrap(), toks(&["A", "b"]));
        match tokenize("[benzene") {
            Err(MolexError::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tokenize_rejects_malformed() {
        let offset = |s: &str| match tokenize(s) {
            Err(MolexError::Parse { offset, .. }) => offset,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(offset("[a][]"), 3);
        assert_eq!(offset("[a[b]]"), 2);
        assert_eq!(offset("[a]]"), 3);
        assert_eq!(offset("[a]x"), 3);
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(
            detokenize(&toks(&["benzene", "nitro"])).unwrap(),
            "[benzene][nitro]"
        );
        assert_eq!(detokenize::<String>(&[]).unwrap(), "");
        assert!(matches!(
            detokenize(&toks(&["a]b"])),
            Err(MolexError::Parse { .. })
        ));
    }

    #[test]
    fn ngram_examples() {
        let t = toks(&["A", "B", "C"]);
        let g2: Vec<_> = extract_ngrams(&t, 2)
            .unwrap()
            .iter()
            .map(|g| g.tokens.to_vec())
            .collect();
        assert_eq!(g2, vec![toks(&["A", "B"]), toks(&["B", "C"])]);
        let g3 = extract_ngrams(&t, 3).unwrap();
        assert_eq!(g3.len(), 1);
        assert_eq!(g3[0].tokens, &t[..]);
        let one = toks(&["A"]);
        let g = extract_ngrams(&one, 3).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].span, (0, 1));
        assert!(extract_ngrams(&t, 0).is_err());
        assert!(extract_ngrams(&[], 2).unwrap().is_empty());
    }

    #[test]
    fn dataset_rejects_mask_length_mismatch() {
        let line = r#"{"id":"m","tokens":["a","b"],"label":1,"gt_mask":[1]}"#;
        assert!(matches!(
            read_dataset(line.as_bytes()),
            Err(MolexError::Data(_))
        ));
        let unknown = r#"{"id":"m","tokens":["a"],"label":1,"extra":0}"#;
        assert!(matches!(
            read_dataset(unknown.as_bytes()),
            Err(MolexError::Format(_))
        ));
    }

    #[test]
    fn dataset_roundtrip() {
        let ms = vec![
            Molecule {
                id: "a".into(),
                tokens: toks(&["x", "y"]),
                label: 1,
                gt_mask: Some(vec![1, 0]),
            },
            Molecule {
                id: "b".into(),
                tokens: toks(&["z"]),
                label: 0,
                gt_mask: None,
            },
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ms).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), ms);
    }

    fn token_strategy() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9=#()+-]{1,6}"
    }

    proptest! {
        #[test]
        fn tokenize_inverts_detokenize(ts in proptest::collection::vec(token_strategy(), 0..12)) {
            let text = detokenize(&ts).unwrap();
            prop_assert_eq!(tokenize(&text).unwrap(), ts);
        }

        #[test]
        fn windows_tile_the_sequence(ts in proptest::collection::vec(token_strategy(), 1..15), n in 1usize..6) {
            let grams = extract_ngrams(&ts, n).unwrap();
            for g in &grams {
                prop_assert_eq!(g.tokens, &ts[g.span.0..g.span.1]);
                prop_assert!(!g.tokens.is_empty() && g.tokens.len() <= n);
            }
            if ts.len() >= n {
                prop_assert_eq!(grams.len(), ts.len() - n + 1);
                let mut rebuilt: Vec<String> = grams.iter().map(|g| g.tokens[0].clone()).collect();
                rebuilt.extend_from_slice(&grams.last().unwrap().tokens[1..]);
                prop_assert_eq!(rebuilt, ts);
            } else {
                prop_assert_eq!(grams.len(), 1);
            }
        }
    }
}
