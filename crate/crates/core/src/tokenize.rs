//! Token counting.
//!
//! The default rule counts each contiguous run of non-CJK word characters as
//! one token and each CJK codepoint as one token. Punctuation and whitespace
//! are separators and never count. Anything implementing [`Tokenizer`] can be
//! substituted, e.g. a wrapper around a model tokenizer.

/// Counts tokens in a piece of text.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-and-punctuation delimited words plus one token per CJK codepoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WordCjkTokenizer;

impl Tokenizer for WordCjkTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut tokens = 0;
        let mut in_word = false;
        for c in text.chars() {
            if is_cjk(c) {
                tokens += 1;
                in_word = false;
            } else if is_word_char(c) {
                if !in_word {
                    tokens += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
            }
        }
        tokens
    }
}

/// Counts tokens with the default [`WordCjkTokenizer`].
pub fn count_tokens(text: &str) -> usize {
    WordCjkTokenizer.count(text)
}

pub(crate) fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// CJK ideographs, kana and hangul syllables.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x309F       // hiragana
        | 0x30A0..=0x30FF     // katakana
        | 0x3400..=0x4DBF     // ext A
        | 0x4E00..=0x9FFF     // unified ideographs
        | 0xAC00..=0xD7AF     // hangul syllables
        | 0xF900..=0xFAFF     // compatibility ideographs
        | 0x20000..=0x2A6DF   // ext B
        | 0x2A700..=0x2EBEF   // ext C-F
        | 0x30000..=0x3134F) // ext G
}

/// Byte ranges of each token under the default rule, in order.
///
/// Used where text has to be cut at token boundaries.
pub(crate) fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_cjk(c) {
            if let Some(s) = word_start.take() {
                spans.push((s, i));
            }
            spans.push((i, i + c.len_utf8()));
        } else if is_word_char(c) {
            if word_start.is_none() {
                word_start = Some(i);
            }
        } else if let Some(s) = word_start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = word_start {
        spans.push((s, text.len()));
    }
    spans
}
