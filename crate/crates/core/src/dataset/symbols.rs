use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::microlm::Token;

/// Reserved symbol closing the essence prompt `[subject…, IS-A]`.
pub const ISA_SYMBOL: &str = "<is-a>";

/// Bidirectional map between token ids and human-readable symbols.
/// Token `i` is `names[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SymbolTable {
    names: Vec<String>,
    index: HashMap<String, Token>,
}

impl SymbolTable {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("symbol {i} ({n:?}) is empty or contains whitespace")));
            }
            if index.insert(n.clone(), i as Token).is_some() {
                return Err(Error::Input(format!("duplicate symbol {n:?}")));
            }
        }
        Ok(SymbolTable { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn token(&self, symbol: &str) -> Option<Token> {
        self.index.get(symbol).copied()
    }

    pub fn name(&self, token: Token) -> Option<&str> {
        self.names.get(token as usize).map(String::as_str)
    }

    pub fn isa_token(&self) -> Result<Token> {
        self.token(ISA_SYMBOL)
            .ok_or_else(|| Error::Input(format!("symbol table lacks the reserved {ISA_SYMBOL} symbol")))
    }

    /// Space-separated symbols.
    pub fn render(&self, tokens: &[Token]) -> Result<String> {
        let parts: Vec<&str> = tokens
            .iter()
            .map(|&t| self.name(t).ok_or_else(|| Error::Input(format!("token {t} has no symbol"))))
            .collect::<Result<_>>()?;
        Ok(parts.join(" "))
    }

    pub fn parse(&self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace()
            .map(|s| self.token(s).ok_or_else(|| Error::Input(format!("unknown symbol {s:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SymbolTable {
        SymbolTable::from_names(vec![ISA_SYMBOL.into(), "a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn render_parse_round_trip() {
        let t = table();
        let s = t.render(&[1, 0, 2]).unwrap();
        assert_eq!(s, "a <is-a> b");
        assert_eq!(t.parse(&s).unwrap(), vec![1, 0, 2]);
        assert_eq!(t.isa_token().unwrap(), 0);
    }

    #[test]
    fn rejects_duplicates_and_unknowns() {
        assert!(SymbolTable::from_names(vec!["a".into(), "a".into()]).is_err());
        assert!(SymbolTable::from_names(vec!["a b".into()]).is_err());
        assert!(table().parse("a zzz").is_err());
        assert!(table().render(&[7]).is_err());
    }
}
