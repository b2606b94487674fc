use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::{DecoderError, RESERVED_IDS, UNK_ID};
use crate::text::normalize;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary: one token per line, line number is the id, and the
/// first four lines are the reserved PAD/BOS/EOS/UNK entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self, DecoderError> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.strip_suffix('\r').unwrap_or(line);
            let err = |message: &str| DecoderError::Vocab { line: i + 1, message: message.into() };
            if tok.is_empty() {
                return Err(err("empty token"));
            }
            if tok.chars().any(char::is_whitespace) {
                return Err(err("token contains whitespace"));
            }
            if index.insert(tok.to_string(), i as u32).is_some() {
                return Err(err("duplicate token"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED_IDS as usize {
            return Err(DecoderError::Vocab { line: tokens.len(), message: "missing reserved PAD/BOS/EOS/UNK lines".into() });
        }
        Ok(Self { tokens, index })
    }

    pub fn from_file(path: &Path) -> Result<Self, DecoderError> {
        let text = std::fs::read_to_string(path).map_err(|source| DecoderError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Reserved entries followed by every distinct normalized token of
    /// `texts` in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        let lines: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        let index = lines.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens: lines, index }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        std::fs::write(path, self.to_text()).map_err(|source| DecoderError::Io { path: path.to_path_buf(), source })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Content ids only; BOS/EOS are added by the caller.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&id) if id >= RESERVED_IDS => id,
                _ => UNK_ID,
            })
            .collect()
    }

    /// Space-joined tokens; PAD, BOS and EOS are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, DecoderError> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < RESERVED_IDS && id != UNK_ID {
                continue;
            }
            let tok = self.token(id).ok_or(DecoderError::TokenOutOfRange { id, vocab: self.len() })?;
            words.push(tok);
        }
        Ok(words.join(" "))
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::build(std::iter::empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalized_string;

    #[test]
    fn punctuation_splits() {
        let v = Vocab::build(["lung, biopsy"]);
        assert_eq!(v.tokenize("lung, biopsy"), vec![v.id("lung").unwrap(), v.id(",").unwrap(), v.id("biopsy").unwrap()]);
        assert_eq!(v.tokenize("Liver"), vec![UNK_ID]);
    }

    #[test]
    fn round_trip_in_vocab() {
        let t = "Invasive carcinoma; Grade 2. Margins clear.";
        let v = Vocab::build([t]);
        assert_eq!(v.detokenize(&v.tokenize(t)).unwrap(), normalized_string(t));
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(Vocab::parse("<pad>\n<bos>\n<eos>\n"), Err(DecoderError::Vocab { .. })));
        assert!(matches!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\na\na\n"), Err(DecoderError::Vocab { line: 6, .. })));
        assert!(matches!(Vocab::parse("<pad>\n<bos>\n\n<unk>\n"), Err(DecoderError::Vocab { line: 3, .. })));
    }

    #[test]
    fn detokenize_skips_control_ids() {
        let v = Vocab::build(["a b"]);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(v.detokenize(&[1, a, 0, UNK_ID, b, 2]).unwrap(), "a <unk> b");
        assert!(v.detokenize(&[99]).is_err());
    }
}
