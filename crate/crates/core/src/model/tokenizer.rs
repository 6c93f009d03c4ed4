//! Word-level tokenizer with a closed vocabulary.
//!
//! The vocabulary is built once from the prompt template(s) and the class
//! names; ids 0 and 1 are reserved for padding and unknown. Tokenization is
//! deterministic lowercase word splitting with trailing punctuation split
//! into its own token, padded to the model's max sequence length.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PLACEHOLDER: &str = "<CLS>";

/// Prompt templates the benchmark can evaluate; models carry a vocabulary
/// covering all of them so the template is swappable after pretraining.
pub const DEFAULT_TEMPLATES: [&str; 4] = [
    "a photo of a <CLS>.",
    "a bad photo of a <CLS>.",
    "a blurry photo of a <CLS>.",
    "a noisy photo of a <CLS>.",
];

/// Vocabulary spanning the default templates plus the given class names.
pub fn vocab_with_templates(class_names: &[String]) -> Vocab {
    let mut texts: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
    texts.extend(class_names.iter().cloned());
    Vocab::build(&texts)
}

/// A prompt template with exactly one `<CLS>` placeholder and the ordered
/// class names it is instantiated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template: String,
    pub class_names: Vec<String>,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, class_names: Vec<String>) -> Result<Self> {
        let template = template.into();
        let occurrences = template.matches(PLACEHOLDER).count();
        if occurrences != 1 {
            return Err(Error::Parameter(format!(
                "template must contain exactly one {PLACEHOLDER} placeholder, found {occurrences}"
            )));
        }
        if class_names.len() < 2 {
            return Err(Error::Parameter(format!(
                "at least 2 class names required, got {}",
                class_names.len()
            )));
        }
        Ok(PromptTemplate { template, class_names })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// The fully substituted prompt text for one class.
    pub fn instantiate(&self, class_index: usize) -> Result<String> {
        let name = self.class_names.get(class_index).ok_or_else(|| {
            Error::Parameter(format!(
                "class index {class_index} out of range ({} classes)",
                self.class_names.len()
            ))
        })?;
        Ok(self.template.replace(PLACEHOLDER, name))
    }
}

/// Lowercase word split; trailing sentence punctuation becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = lower.as_str();
        let mut puncts = Vec::new();
        while let Some(last) = word.chars().last() {
            if matches!(last, '.' | ',' | '!' | '?') {
                puncts.push(last.to_string());
                word = &word[..word.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(puncts.into_iter().rev());
    }
    out
}

/// Closed vocabulary: `[<pad>, <unk>, sorted distinct words...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Build from template texts (placeholders ignored) and class names.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Vocab {
        let mut distinct = BTreeSet::new();
        for t in texts {
            let cleaned = t.as_ref().replace(PLACEHOLDER, " ");
            for w in split_words(&cleaned) {
                distinct.insert(w);
            }
        }
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(distinct);
        Vocab { words }
    }

    pub fn from_words(words: Vec<String>) -> Vocab {
        Vocab { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        // Vocabulary stays tiny; linear scan beats a map here.
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }
}

/// Token-id sequence for one class prompt, padded/truncated to `max_len`.
pub fn tokenize(
    vocab: &Vocab,
    prompt: &PromptTemplate,
    class_index: usize,
    max_len: usize,
) -> Result<Vec<u32>> {
    let text = prompt.instantiate(class_index)?;
    let mut ids = Vec::with_capacity(max_len);
    for word in split_words(&text) {
        let id = vocab
            .id_of(&word)
            .ok_or_else(|| Error::Tokenizer(format!("word \"{word}\" absent from vocabulary")))?;
        ids.push(id);
    }
    ids.truncate(max_len);
    while ids.len() < max_len {
        ids.push(PAD_ID);
    }
    Ok(ids)
}
