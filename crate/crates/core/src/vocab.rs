//! Word-level vocabulary shared by every backbone.

use std::collections::HashMap;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Marks the end of the prompt; the answer starts right after it.
pub const ANS: &str = "<ans>";
pub const END: &str = "<end>";

pub const CLASS_NAMES: [&str; 10] = ["cat", "dog", "car", "tree", "boat", "house", "bird", "fish", "lamp", "cup"];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];
pub const DOMAIN_NAMES: [&str; 2] = ["object", "specimen"];

const GRAMMAR: [&str; 28] = [
    "what", "color", "is", "the", "which", "this", "options", ",", "?", ":", ".", "an", "image", "of", "a",
    "specifically", "shows", "q", "photo", "with", "on", "background", "not", "yes", "no", "in", "it", "and",
];

/// Fixed-size vocabulary; unused slots are reserved placeholders.
pub const VOCAB_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words: Vec<String> = [PAD, UNK, ANS, END].iter().map(|s| s.to_string()).collect();
        for w in GRAMMAR.iter().chain(&DOMAIN_NAMES).chain(&CLASS_NAMES).chain(&COLOR_NAMES) {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        let mut r = 0;
        while words.len() < VOCAB_SIZE {
            words.push(format!("<r{r}>"));
            r += 1;
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.index[UNK])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn end_id(&self) -> usize {
        self.index[END]
    }

    pub fn ans_id(&self) -> usize {
        self.index[ANS]
    }

    /// Lowercase, split punctuation into its own tokens, split on whitespace.
    pub fn split_words(text: &str) -> Vec<String> {
        let mut spaced = String::with_capacity(text.len() + 8);
        for ch in text.chars() {
            if matches!(ch, ',' | '?' | ':' | '.') {
                spaced.push(' ');
                spaced.push(ch);
                spaced.push(' ');
            } else {
                spaced.extend(ch.to_lowercase());
            }
        }
        spaced.split_whitespace().map(str::to_string).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Prompt ids followed by the answer marker.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<usize> {
        let mut ids = self.encode(prompt);
        ids.push(self.ans_id());
        ids
    }

    /// Target ids followed by the end marker.
    pub fn encode_target(&self, target: &str) -> Vec<usize> {
        let mut ids = self.encode(target);
        ids.push(self.end_id());
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}
