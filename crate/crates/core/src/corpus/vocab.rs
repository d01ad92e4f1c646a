use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const PAD: usize = 3;
pub const CTX: usize = 4;
pub const QRY: usize = 5;
pub const ANS: usize = 6;

pub const RESERVED: [&str; 7] = ["BOS", "EOS", "SEP", "PAD", "CTX", "QRY", "ANS"];
pub const LETTERS: [&str; 5] = ["a", "b", "c", "d", "e"];

/// Closed symbolic vocabulary; a token id is the symbol's index.
///
/// Layout: reserved symbols at ids 0-6, answer letters `a`-`e` at 7-11,
/// then entities `e0..`, then values `v0..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    n_entities: usize,
    n_values: usize,
}

impl Vocabulary {
    pub fn new(n_entities: usize, n_values: usize) -> Self {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(LETTERS.iter().map(|s| s.to_string()));
        symbols.extend((0..n_entities).map(|i| format!("e{i}")));
        symbols.extend((0..n_values).map(|i| format!("v{i}")));
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            symbols,
            index,
            n_entities,
            n_values,
        }
    }

    /// Builds a vocabulary from an explicit symbol list, checking the layout.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().chain(LETTERS.iter()).enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*r) {
                return invalid(format!("symbol {i} must be `{r}`"));
            }
        }
        let rest = &symbols[RESERVED.len() + LETTERS.len()..];
        let n_entities = rest.iter().take_while(|s| s.starts_with('e')).count();
        let n_values = rest.len() - n_entities;
        let expected = Self::new(n_entities, n_values);
        if expected.symbols != symbols {
            return invalid("vocabulary does not follow the entity/value layout");
        }
        Ok(expected)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_values(&self) -> usize {
        self.n_values
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn letter(&self, k: usize) -> usize {
        assert!(k < LETTERS.len());
        RESERVED.len() + k
    }

    pub fn entity(&self, i: usize) -> usize {
        assert!(i < self.n_entities);
        RESERVED.len() + LETTERS.len() + i
    }

    pub fn value(&self, j: usize) -> usize {
        assert!(j < self.n_values);
        RESERVED.len() + LETTERS.len() + self.n_entities + j
    }

    pub fn is_value(&self, id: usize) -> bool {
        let start = RESERVED.len() + LETTERS.len() + self.n_entities;
        (start..start + self.n_values).contains(&id)
    }

    pub fn is_letter(&self, id: usize) -> bool {
        (RESERVED.len()..RESERVED.len() + LETTERS.len()).contains(&id)
    }

    pub fn tokenize<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.id(s.as_ref())
                    .ok_or_else(|| Error::UnknownSymbol(s.as_ref().to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<Vec<String>> {
        tokens
            .iter()
            .map(|&t| {
                self.symbol(t)
                    .map(str::to_string)
                    .ok_or_else(|| Error::UnknownSymbol(format!("<id {t}>")))
            })
            .collect()
    }

    /// Space-joined rendering, for reports.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One symbol per line; line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_symbols(text.lines().map(str::to_string).collect())
    }
}
