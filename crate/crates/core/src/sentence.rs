//! Rule-based sentence splitter.
//!
//! A sentence ends at `.`, `?` or `!` when followed by end of text or by
//! whitespace and an uppercase letter, unless the word carrying the
//! terminator is a known abbreviation or a run of initials like `F.W.`.

use std::ops::Range;

const ABBREVIATIONS: &[&str] = &[
    "Dr.", "Mr.", "Mrs.", "Ms.", "Prof.", "St.", "Jr.", "Sr.", "Mt.", "Gen.", "Col.", "Lt.", "vs.",
    "etc.", "e.g.", "i.e.", "No.", "Inc.", "Ltd.", "Co.",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    /// Byte range in the source text, leading whitespace excluded.
    pub range: Range<usize>,
    /// False for a trailing fragment without a terminator.
    pub complete: bool,
}

fn is_initials(word: &str) -> bool {
    let chars: Vec<char> = word.chars().collect();
    chars.len() >= 4
        && chars.len().is_multiple_of(2)
        && chars.chunks(2).all(|c| c[0].is_uppercase() && c[1] == '.')
}

fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(['(', '"', '\'']);
    ABBREVIATIONS.contains(&word) || is_initials(word)
}

/// Byte offsets just past each sentence terminator.
pub fn boundaries(text: &str) -> Vec<usize> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !matches!(bytes[i], b'.' | b'?' | b'!') {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < bytes.len() && matches!(bytes[end], b'.' | b'?' | b'!') {
            end += 1;
        }
        let rest = &text[end..];
        let after_ws = rest.trim_start();
        let followed_ok = after_ws.is_empty()
            || (after_ws.len() < rest.len() && after_ws.chars().next().is_some_and(char::is_uppercase));
        let word_start = text[..end].rfind(char::is_whitespace).map_or(0, |p| p + 1);
        if followed_ok && !is_abbreviation(&text[word_start..end]) {
            out.push(end);
        }
        i = end;
    }
    out
}

pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    let mut start = 0;
    let skip_ws = |from: usize| from + (text[from..].len() - text[from..].trim_start().len());
    for end in boundaries(text) {
        let s = skip_ws(start);
        if s < end {
            out.push(Sentence { range: s..end, complete: true });
        }
        start = end;
    }
    let s = skip_ws(start);
    if s < text.len() {
        out.push(Sentence { range: s..text.trim_end().len().max(s), complete: false });
    }
    out
}
