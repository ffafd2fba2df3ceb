//! Word-level tokenizer and prompt layout for per-track captions.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const NULL: &str = "<null>";

/// Closed word vocabulary. Unknown words map to `<unk>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabWire", into = "VocabWire")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    pub max_caption_tokens: usize,
    pub max_prompt_tokens: usize,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabWire {
    words: Vec<String>,
    max_caption_tokens: usize,
    max_prompt_tokens: usize,
}

impl From<VocabWire> for Vocabulary {
    fn from(w: VocabWire) -> Self {
        let mut v = Self {
            words: w.words,
            index: HashMap::new(),
            max_caption_tokens: w.max_caption_tokens,
            max_prompt_tokens: w.max_prompt_tokens,
        };
        v.reindex();
        v
    }
}

impl From<Vocabulary> for VocabWire {
    fn from(v: Vocabulary) -> Self {
        Self {
            words: v.words,
            max_caption_tokens: v.max_caption_tokens,
            max_prompt_tokens: v.max_prompt_tokens,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary over the given words; special tokens come first.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = vec![UNK.into(), SEP.into(), NULL.into()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let mut v = Self {
            words: all,
            index: HashMap::new(),
            max_caption_tokens: 24,
            max_prompt_tokens: 96,
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn sep(&self) -> u32 {
        self.id(SEP)
    }

    pub fn null(&self) -> u32 {
        self.id(NULL)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }
}

/// Token range of one track's caption inside the concatenated prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSpan {
    pub track_id: String,
    pub tokens: Range<usize>,
}

/// Concatenates captions, in the given order, separated by `<sep>`.
/// Separator tokens belong to no span.
pub fn caption_spans(captions: &[(&str, &str)], vocab: &Vocabulary) -> Result<(Vec<u32>, Vec<CaptionSpan>)> {
    let mut tokens = Vec::new();
    let mut spans = Vec::with_capacity(captions.len());
    for (i, (track_id, text)) in captions.iter().enumerate() {
        let ids = vocab.tokenize(text);
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!("caption of track {track_id:?} has no tokens")));
        }
        if ids.len() > vocab.max_caption_tokens {
            return Err(Error::TokenBudget(format!(
                "caption of track {track_id:?} has {} tokens, budget {}",
                ids.len(),
                vocab.max_caption_tokens
            )));
        }
        if i > 0 {
            tokens.push(vocab.sep());
        }
        let lo = tokens.len();
        tokens.extend(ids);
        spans.push(CaptionSpan {
            track_id: (*track_id).to_owned(),
            tokens: lo..tokens.len(),
        });
    }
    if tokens.len() > vocab.max_prompt_tokens {
        return Err(Error::TokenBudget(format!("prompt has {} tokens, budget {}", tokens.len(), vocab.max_prompt_tokens)));
    }
    Ok((tokens, spans))
}
