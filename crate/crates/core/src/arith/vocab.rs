//! Token set of the addition task.

use crate::error::{Error, Result};

/// Digits `0..=9` are their own ids; the rest follow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ArithVocab;

impl ArithVocab {
    pub const PLUS: usize = 10;
    pub const EQUALS: usize = 11;
    pub const BOS: usize = 12;
    pub const EOS: usize = 13;
    pub const PAD: usize = 14;
    pub const SIZE: usize = 15;

    /// Printable form of each id. Special tokens use `^`, `$` and `_`.
    const CHARS: [char; 15] = ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '=', '^', '$', '_'];

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn id(&self, c: char) -> Result<usize> {
        Self::CHARS.iter().position(|&x| x == c).ok_or(Error::Encode(c))
    }

    pub fn char(&self, id: usize) -> Result<char> {
        Self::CHARS.get(id).copied().ok_or(Error::Vocabulary {
            id,
            vocab: Self::SIZE,
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter().map(|&id| self.char(id)).collect()
    }

    /// `BOS text EOS`.
    pub fn encode_sample(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(Self::BOS);
        ids.extend(self.encode(text)?);
        ids.push(Self::EOS);
        Ok(ids)
    }

    pub fn is_digit(id: usize) -> bool {
        id < 10
    }
}
