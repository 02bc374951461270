use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Coarse token class, standing in for part-of-speech tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenCategory {
    Function,
    Content,
    Punctuation,
    Sentinel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub text: String,
    pub category: TokenCategory,
    /// `</s>` or the sentence-final punctuation mark.
    pub finalizing: bool,
    /// Non-initial piece of a split word.
    #[serde(default)]
    pub subword_continuation: bool,
    /// Target token emitted from target context alone, never aligned.
    #[serde(default)]
    pub prefix_only: bool,
}

impl TokenInfo {
    pub fn new(text: impl Into<String>, category: TokenCategory) -> Self {
        TokenInfo { text: text.into(), category, finalizing: false, subword_continuation: false, prefix_only: false }
    }
}

pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const FINAL_PUNCT_ID: usize = 2;
pub const EOS_TEXT: &str = "</s>";
pub const UNK_TEXT: &str = "<unk>";
pub const FINAL_PUNCT_TEXT: &str = ".";

/// Dense token ↔ id map. Ids 0, 1, 2 are always `</s>`, `<unk>` and `.`;
/// exactly `</s>` and `.` are finalizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenInfo>", into = "Vec<TokenInfo>")]
pub struct Vocab {
    tokens: Vec<TokenInfo>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: BTreeMap::new() };
        let mut eos = TokenInfo::new(EOS_TEXT, TokenCategory::Sentinel);
        eos.finalizing = true;
        v.push(eos);
        v.push(TokenInfo::new(UNK_TEXT, TokenCategory::Content));
        let mut punct = TokenInfo::new(FINAL_PUNCT_TEXT, TokenCategory::Punctuation);
        punct.finalizing = true;
        v.push(punct);
        v
    }

    /// Adds a token, returning the existing id if the text is known.
    pub fn push(&mut self, info: TokenInfo) -> usize {
        if let Some(&id) = self.index.get(&info.text) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(info.text.clone(), id);
        self.tokens.push(info);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn id_or_unk(&self, text: &str) -> usize {
        self.id(text).unwrap_or(UNK_ID)
    }

    pub fn info(&self, id: usize) -> &TokenInfo {
        &self.tokens[id]
    }

    pub fn text(&self, id: usize) -> &str {
        &self.tokens[id].text
    }

    pub fn tokens(&self) -> &[TokenInfo] {
        &self.tokens
    }

    pub fn eos(&self) -> usize {
        EOS_ID
    }

    pub fn unk(&self) -> usize {
        UNK_ID
    }

    pub fn final_punct(&self) -> usize {
        FINAL_PUNCT_ID
    }

    pub fn is_finalizing(&self, id: usize) -> bool {
        self.tokens.get(id).is_some_and(|t| t.finalizing)
    }
}

impl From<Vocab> for Vec<TokenInfo> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<TokenInfo>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<TokenInfo>) -> Result<Self, String> {
        let specials = [EOS_TEXT, UNK_TEXT, FINAL_PUNCT_TEXT];
        for (i, s) in specials.iter().enumerate() {
            if tokens.get(i).map(|t| t.text.as_str()) != Some(*s) {
                return Err(alloc::format!("vocabulary entry {i} must be {s:?}"));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.text.clone(), i).is_some() {
                return Err(alloc::format!("duplicate vocabulary entry {:?}", t.text));
            }
            if t.finalizing != (i == EOS_ID || i == FINAL_PUNCT_ID) {
                return Err(alloc::format!("only </s> and . may be finalizing (entry {:?})", t.text));
            }
        }
        Ok(Vocab { tokens, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_finalizing_set() {
        let mut v = Vocab::new();
        let a = v.push(TokenInfo::new("a", TokenCategory::Content));
        assert_eq!(v.push(TokenInfo::new("a", TokenCategory::Content)), a);
        assert_eq!(a, 3);
        let finalizing: Vec<usize> = (0..v.len()).filter(|&i| v.is_finalizing(i)).collect();
        assert_eq!(finalizing, [v.eos(), v.final_punct()]);
        assert_eq!(v.id_or_unk("zzz"), v.unk());
    }

    #[test]
    fn rejects_tampered_token_lists() {
        let v = Vocab::new();
        let mut tokens: Vec<TokenInfo> = v.clone().into();
        tokens[1].finalizing = true;
        assert!(Vocab::try_from(tokens).is_err());
        let tokens: Vec<TokenInfo> = v.into();
        assert!(Vocab::try_from(tokens[1..].to_vec()).is_err());
    }
}
