//! Text normalization and tokenization shared across modules.

use unicode_normalization::UnicodeNormalization;

/// NFC-normalizes `text`.
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Whitespace tokens after NFC normalization.
pub fn words(text: &str) -> Vec<String> {
    nfc(text).split_whitespace().map(str::to_owned).collect()
}

/// Number of whitespace-delimited words after NFC normalization.
pub fn word_count(text: &str) -> usize {
    nfc(text).split_whitespace().count()
}

/// Lowercased alphanumeric runs; everything else is a separator.
pub fn alnum_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Lowercase, single-spaced form used for lexicon surface forms.
pub fn normalize_phrase(text: &str) -> String {
    alnum_tokens(text).join(" ")
}
