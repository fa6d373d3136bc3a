use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Splits a SMILES string into tokens, wrapped in [`BOS`] / [`EOS`].
///
/// Bracket atoms, `Cl`, `Br` and `%nn` ring labels are single tokens; every other
/// character is its own token.
pub fn tokenize_smiles(text: &str) -> Result<Vec<String>> {
    let malformed = |position: usize, reason: &str| Error::MalformedSmiles {
        smiles: text.to_string(),
        position,
        reason: reason.to_string(),
    };
    let mut tokens = vec![BOS.to_string()];
    let mut rest = text;
    let mut offset = 0;
    while let Some(ch) = rest.chars().next() {
        let len = match ch {
            '[' => match rest.find(']') {
                Some(end) => end + 1,
                None => return Err(malformed(offset, "unclosed bracket atom")),
            },
            'C' if rest[1..].starts_with('l') => 2,
            'B' if rest[1..].starts_with('r') => 2,
            '%' => {
                let digits = rest.get(1..3);
                if !digits.is_some_and(|d| d.bytes().all(|b| b.is_ascii_digit())) {
                    return Err(malformed(offset, "'%' needs two digits"));
                }
                3
            }
            _ => ch.len_utf8(),
        };
        tokens.push(rest[..len].to_string());
        rest = &rest[len..];
        offset += len;
    }
    tokens.push(EOS.to_string());
    Ok(tokens)
}

/// Concatenates token strings, dropping reserved markers.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !RESERVED.contains(t))
        .collect()
}

/// Token ids of one SMILES string, starting with BOS and ending with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dense token-id map. Ids `0..4` are PAD, BOS, EOS, UNK; the rest follow in
/// sorted token order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub max_len: usize,
}

impl Vocabulary {
    pub const DEFAULT_MAX_LEN: usize = 256;

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let body: BTreeSet<String> = tokens
            .into_iter()
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(body)
            .collect();
        let mut v = Self {
            tokens,
            index: HashMap::new(),
            max_len: Self::DEFAULT_MAX_LEN,
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn unk_id(&self) -> usize {
        3
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids; unknown tokens become UNK. Sequences longer than
    /// `max_len` are cut and re-terminated with EOS.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSequence {
        let mut ids: Vec<usize> = tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(self.unk_id()))
            .collect();
        if ids.len() > self.max_len {
            ids.truncate(self.max_len);
            *ids.last_mut().unwrap() = self.eos_id();
        }
        TokenSequence { ids }
    }

    pub fn encode_smiles(&self, smiles: &str) -> Result<TokenSequence> {
        Ok(self.encode(&tokenize_smiles(smiles)?))
    }

    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuilt(mut self) -> Self {
        self.reindex();
        self
    }
}

/// Vocabulary over every token in the corpus.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Invalid("vocabulary corpus is empty".into()));
    }
    let mut all = Vec::new();
    for s in corpus {
        all.extend(tokenize_smiles(s.as_ref())?);
    }
    Ok(Vocabulary::from_tokens(all))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(s: &str) -> Vec<String> {
        tokenize_smiles(s).unwrap()
    }

    #[test]
    fn longest_match_tokens() {
        assert_eq!(
            body("CC(Cl)Br"),
            [BOS, "C", "C", "(", "Cl", ")", "Br", EOS]
        );
        assert_eq!(body("C"), [BOS, "C", EOS]);
        assert_eq!(body("[NH4+]"), [BOS, "[NH4+]", EOS]);
        assert_eq!(body("C%12CC%12"), [BOS, "C", "%12", "C", "C", "%12", EOS]);
        assert_eq!(body("c1cc[nH]c1")[5], "[nH]");
    }

    #[test]
    fn unclosed_bracket_is_malformed() {
        assert!(matches!(
            tokenize_smiles("C[NH4"),
            Err(Error::MalformedSmiles { .. })
        ));
    }

    #[test]
    fn vocabulary_counts_and_order() {
        let v = build_vocabulary(&["CC", "CO"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.tokens()[4..], ["C".to_string(), "O".to_string()]);
        assert!(build_vocabulary::<&str>(&[]).is_err());
        let v = build_vocabulary(&["CCl"]).unwrap();
        assert!(v.id("Cl").is_some());
        assert!(v.id("l").is_none());
    }

    #[test]
    fn encode_roundtrip_and_unknowns() {
        let v = build_vocabulary(&["CCO"]).unwrap();
        let seq = v.encode_smiles("CCO").unwrap();
        assert_eq!(seq.ids.first(), Some(&v.bos_id()));
        assert_eq!(seq.ids.last(), Some(&v.eos_id()));
        assert_eq!(detokenize(&v.decode(&seq)), "CCO");
        let seq = v.encode_smiles("CN").unwrap();
        assert_eq!(seq.ids[2], v.unk_id());
    }

    #[test]
    fn long_sequences_are_truncated_with_eos() {
        let mut v = build_vocabulary(&["CCCCCC"]).unwrap();
        v.max_len = 4;
        let seq = v.encode_smiles("CCCCCC").unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.ids[3], v.eos_id());
    }
}
