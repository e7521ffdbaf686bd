//! Word-level tokenizer: lowercase, split on whitespace, every ASCII
//! punctuation character is its own token. Ids `0..3` are `<pad>`, `<unk>`,
//! `<eos>`; the rest of the vocabulary follows in file order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_text, write_atomic};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// Lowercased word and punctuation pieces of `text`.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch.is_ascii_punctuation() {
                out.push(ch.to_string());
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn glued_left(piece: &str) -> bool {
    matches!(piece, "." | "," | "?" | "!" | ":" | ";")
}

/// Join pieces with single spaces, without a space before `. , ? ! : ;`.
pub fn join_pieces<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for (i, p) in pieces.iter().enumerate() {
        let p = p.as_ref();
        if i > 0 && !glued_left(p) {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// Canonical form of `text` under the tokenizer's splitting rules.
pub fn normalize(text: &str) -> String {
    join_pieces(&pieces(text))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Special tokens followed by `tokens` in the given order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut vocab = vec![PAD.to_string(), UNK.to_string(), EOS.to_string()];
        vocab.extend(tokens.into_iter().filter(|t| ![PAD, UNK, EOS].contains(&t.as_str())));
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary entry {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { vocab, ids })
    }

    /// Vocabulary of every piece in `texts`, sorted.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let set: BTreeSet<String> = texts.iter().flat_map(|t| pieces(t.as_ref())).collect();
        Self::new(set.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        pieces(text).iter().map(|p| self.id(p)).collect()
    }

    /// Text of `ids`, stopping at the first `<eos>` and skipping `<pad>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i))
            .collect();
        join_pieces(&toks)
    }

    pub fn to_text(&self) -> String {
        self.vocab.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        if lines.len() < 3 || lines[..3] != [PAD, UNK, EOS] {
            return Err(Error::format("vocabulary must start with <pad>, <unk>, <eos>"));
        }
        Self::new(lines[3..].to_vec()).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_corpus(&["yes no", "What range is the qt interval?", "lead I, lead II"]).unwrap()
    }

    #[test]
    fn splitting_rules() {
        assert_eq!(pieces("QT interval?"), ["qt", "interval", "?"]);
        assert_eq!(pieces("  lead II,lead V1. "), ["lead", "ii", ",", "lead", "v1", "."]);
        assert_eq!(normalize("Lead II ,  lead I ."), "lead ii, lead i.");
    }

    #[test]
    fn encode_decode() {
        let t = tok();
        assert_eq!(t.encode("yes"), vec![t.id("yes")]);
        assert_eq!(t.encode("qt interval?"), vec![t.id("qt"), t.id("interval"), t.id("?")]);
        assert_eq!(t.encode("banana"), vec![UNK_ID]);
        let s = "what range is the qt interval?";
        assert_eq!(t.decode(&t.encode(s)), s);
        let mut ids = t.encode("yes");
        ids.extend([EOS_ID, t.id("no")]);
        assert_eq!(t.decode(&ids), "yes");
    }

    #[test]
    fn vocab_file_roundtrip() {
        let t = tok();
        assert_eq!(t.token(PAD_ID), PAD);
        assert_eq!(Tokenizer::from_text(&t.to_text()).unwrap(), t);
        assert!(Tokenizer::from_text("a\nb\n").is_err());
        assert!(Tokenizer::new(vec!["x".into(), "x".into()]).is_err());
    }
}
