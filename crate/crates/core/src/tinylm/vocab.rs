use std::collections::HashMap;

use super::ModelError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [char; 4] = ['_', '^', '$', '|'];

/// Closed character vocabulary: four specials, then `a-z`, then `0-9`.
///
/// Specials have printable stand-ins (`_` PAD, `^` BOS, `$` EOS, `|` SEP) so
/// that any id sequence decodes to a string and encodes back unchanged.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let symbols: Vec<char> = SPECIALS
            .iter()
            .copied()
            .chain('a'..='z')
            .chain('0'..='9')
            .collect();
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        text.chars()
            .map(|c| self.id(c).ok_or(ModelError::UnknownSymbol(c)))
            .collect()
    }

    /// Encodes text that must not contain special stand-in characters.
    pub fn encode_plain(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        let ids = self.encode(text)?;
        match ids.iter().position(|&i| i <= SEP) {
            Some(p) => Err(ModelError::UnknownSymbol(self.symbols[ids[p]])),
            None => Ok(ids),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, ModelError> {
        ids.iter()
            .map(|&i| self.symbol(i).ok_or(ModelError::InvalidToken(i)))
            .collect()
    }
}
