//! Tokenization with negation scoping, vocabulary construction and id
//! encoding for the text encoder.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::caption::CaptionRecord;
use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";
const NEGATION_CUES: [&str; 2] = ["no", "without"];
pub const NEG_PREFIX: &str = "neg_";

/// Lowercases, splits on non-alphanumeric runs and marks every token after
/// a negation cue with `neg_` until the next period. Cue tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut negated = false;
    let flush = |current: &mut String, negated: &mut bool, out: &mut Vec<String>| {
        if current.is_empty() {
            return;
        }
        let tok = std::mem::take(current);
        if NEGATION_CUES.contains(&tok.as_str()) {
            *negated = true;
        } else if *negated {
            out.push(format!("{NEG_PREFIX}{tok}"));
        } else {
            out.push(tok);
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            flush(&mut current, &mut negated, &mut out);
            if ch == '.' {
                negated = false;
            }
        }
    }
    flush(&mut current, &mut negated, &mut out);
    out
}

/// Token/id mapping. Id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from known tokens (ids assigned from 1 in order).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: vec![UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok != tok.to_lowercase() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format {
                    line: v.tokens.len(),
                    message: format!("invalid vocabulary token '{tok}'"),
                });
            }
            if v.index.contains_key(&tok) {
                return Err(Error::Format {
                    line: v.tokens.len(),
                    message: format!("duplicate vocabulary token '{tok}'"),
                });
            }
            v.index.insert(tok.clone(), v.tokens.len());
            v.tokens.push(tok);
        }
        Ok(v)
    }

    /// Total size including the unknown token.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Known tokens in id order (the unknown token excluded).
    pub fn known_tokens(&self) -> &[String] {
        &self.tokens[1..]
    }

    /// One token per line; line `k` (0-based) holds id `k + 1`.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for tok in self.known_tokens() {
            writeln!(buf, "{tok}").expect("write to vec");
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines())
    }
}

/// Frequency-ordered vocabulary (count desc, then token asc).
pub fn build_vocab(corpus: &[CaptionRecord], min_count: usize) -> Result<Vocabulary> {
    build_vocab_from_texts(corpus.iter().map(|r| r.text.as_str()), min_count)
}

pub fn build_vocab_from_texts<'a, I>(texts: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n = 0;
    for text in texts {
        n += 1;
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let min_count = min_count.max(1);
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t))
}

/// Nonempty sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySeq);
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode_ids<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> Result<TokenSeq> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    Ok(TokenSeq(
        tokens.iter().map(|t| vocab.id(t.as_ref())).collect(),
    ))
}

/// Tokenizes and encodes in one step.
pub fn encode_text(vocab: &Vocabulary, text: &str) -> Result<TokenSeq> {
    encode_ids(vocab, &tokenize(text))
}
