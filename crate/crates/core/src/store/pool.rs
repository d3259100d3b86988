use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subword span of one word inside a stimulus's token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordSpan {
    pub first_subword: u32,
    pub subword_count: u32,
}

impl WordSpan {
    pub fn new(first_subword: u32, subword_count: u32) -> Self {
        Self {
            first_subword,
            subword_count,
        }
    }

    pub fn end(&self) -> u32 {
        self.first_subword + self.subword_count
    }
}

/// Checks that spans are nonempty, ordered, disjoint and inside `n_tokens`.
pub fn validate_spans(words: &[WordSpan], n_tokens: usize) -> Result<()> {
    let mut prev_end = 0u32;
    for (w, span) in words.iter().enumerate() {
        if span.subword_count == 0 {
            return Err(Error::Alignment(format!("word {w} has an empty subword span")));
        }
        if span.first_subword < prev_end {
            return Err(Error::Alignment(format!(
                "word {w} span starts at {} but previous word ends at {prev_end}",
                span.first_subword
            )));
        }
        if span.end() as usize > n_tokens {
            return Err(Error::Alignment(format!(
                "word {w} span {}..{} exceeds {n_tokens} tokens",
                span.first_subword,
                span.end()
            )));
        }
        prev_end = span.end();
    }
    Ok(())
}

/// Mean-pools row-major `[tokens × d]` subword vectors into word vectors.
pub fn pool_words(token_rows: &[f32], d: usize, words: &[WordSpan]) -> Result<Vec<Vec<f64>>> {
    if d == 0 || !token_rows.len().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{} values do not form rows of width {d}",
            token_rows.len()
        )));
    }
    validate_spans(words, token_rows.len() / d)?;
    Ok(words.iter().map(|span| pool_span(token_rows, d, *span)).collect())
}

pub(crate) fn pool_span(token_rows: &[f32], d: usize, span: WordSpan) -> Vec<f64> {
    let mut acc = vec![0.0f64; d];
    let first = span.first_subword as usize;
    for row in token_rows[first * d..(first + span.subword_count as usize) * d].chunks_exact(d) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x);
        }
    }
    let n = f64::from(span.subword_count);
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
