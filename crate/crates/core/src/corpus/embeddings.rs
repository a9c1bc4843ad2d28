use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{LineError, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::{uniform, EMBEDDING_INIT_BOUND, PAD_ROW};
use crate::tensor::Tensor;

/// Width of the pretrained word vectors.
pub const EMBEDDING_DIM: usize = 50;

/// Word vectors read from a text file, keyed by case-folded token.
#[derive(Clone, Debug, Default)]
pub struct PretrainedEmbeddings {
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub errors: Vec<LineError>,
}

fn parse_line(line: &str) -> std::result::Result<(String, Vec<f64>), String> {
    let mut parts = line.split_whitespace();
    let word = parts.next().ok_or("empty line")?;
    let values: Vec<f64> = parts
        .map(|p| {
            p.parse::<f64>()
                .map_err(|e| format!("bad float `{p}`: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != EMBEDDING_DIM {
        return Err(format!(
            "expected {EMBEDDING_DIM} floats, found {}",
            values.len()
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    Ok((word.to_lowercase(), values))
}

impl PretrainedEmbeddings {
    pub fn parse(text: &str) -> Self {
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(line) {
                Ok((word, values)) => {
                    out.vectors.entry(word).or_insert(values);
                }
                Err(message) => out.errors.push(LineError {
                    line: i + 1,
                    message,
                }),
            }
        }
        out
    }

    /// Builds `[vocab.len(), 50]` table weights. Words found in the file copy
    /// their vectors; every other row (including unknown) is drawn uniformly
    /// at random; the padding row is zero. Returns the weights and the number
    /// of vocabulary words found.
    pub fn table_weights(&self, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> (Tensor, usize) {
        let mut weights = uniform(&[vocab.len(), EMBEDDING_DIM], EMBEDDING_INIT_BOUND, rng);
        let mut found = 0;
        for (row, token) in vocab.tokens().iter().enumerate() {
            let slot = &mut weights.values_mut()[row * EMBEDDING_DIM..(row + 1) * EMBEDDING_DIM];
            if row == PAD_ROW {
                slot.fill(0.0);
            } else if let Some(v) = self.vectors.get(token) {
                slot.copy_from_slice(v);
                found += 1;
            }
        }
        if found == 0 {
            log::warn!("no vocabulary word has a pretrained vector");
        }
        (weights, found)
    }
}

pub fn load_embedding_file(path: &Path) -> Result<PretrainedEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(PretrainedEmbeddings::parse(&text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;
    use crate::layers::UNK_ROW;
    use rand::SeedableRng;

    fn line(word: &str, n: usize, base: f64) -> String {
        let vals: Vec<String> = (0..n)
            .map(|i| format!("{}", base + i as f64 * 0.01))
            .collect();
        format!("{word} {}", vals.join(" "))
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&[Sentence {
            id: "e".into(),
            tokens: vec!["Earth".into(), "moon".into()],
            entities: vec![],
            triples: vec![],
        }])
    }

    #[test]
    fn present_word_copies_file_values() {
        let emb = PretrainedEmbeddings::parse(&line("earth", 50, 0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, found) = emb.table_weights(&vocab(), &mut rng);
        assert_eq!(found, 1);
        let row = vocab().index("earth");
        assert_eq!(
            &w.values()[row * 50..(row + 1) * 50],
            emb.vectors["earth"].as_slice()
        );
        assert!(w.values()[..50].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_word_gets_random_init_like_unknown() {
        let emb = PretrainedEmbeddings::parse(&line("earth", 50, 0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, _) = emb.table_weights(&vocab(), &mut rng);
        for row in [UNK_ROW, vocab().index("moon")] {
            let r = &w.values()[row * 50..(row + 1) * 50];
            assert!(r.iter().all(|v| v.abs() <= EMBEDDING_INIT_BOUND));
            assert!(r.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn short_line_is_rejected_with_line_number() {
        let text = format!("{}\n{}", line("a", 50, 0.0), line("b", 49, 0.0));
        let emb = PretrainedEmbeddings::parse(&text);
        assert_eq!(emb.vectors.len(), 1);
        assert_eq!(emb.errors.len(), 1);
        assert_eq!(emb.errors[0].line, 2);
    }
}
