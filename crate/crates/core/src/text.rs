//! Text cleaning at two levels.
//!
//! Level 1 strips formatting artifacts and collapses whitespace but keeps every
//! word and its casing; pattern matching runs on it. Level 2 additionally drops
//! stopwords and stems the remaining tokens; the stage-two encoder reads it.

use serde::{Deserialize, Serialize};

/// Formatting artifacts removed by default. The last entry is a literal
/// backslash followed by `n`, as left behind by some report exports.
pub const DEFAULT_STRIP_LIST: &[&str] = &["_0x00D_", "***", "\r", "\\n"];

/// Minimum number of characters a stem must keep after suffix stripping.
pub const MIN_STEM_LEN: usize = 3;

/// English stopwords. Contraction fragments are listed separately because the
/// tokenizer splits on apostrophes.
pub const STOPWORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "your", "yours",
    "yourself", "yourselves", "he", "him", "his", "himself", "she", "her", "hers", "herself",
    "it", "its", "itself", "they", "them", "their", "theirs", "themselves", "what", "which",
    "who", "whom", "this", "that", "these", "those", "am", "is", "are", "was", "were", "be",
    "been", "being", "have", "has", "had", "having", "do", "does", "did", "doing", "a", "an",
    "the", "and", "but", "if", "or", "because", "as", "until", "while", "of", "at", "by",
    "for", "with", "about", "against", "between", "into", "through", "during", "before",
    "after", "above", "below", "to", "from", "up", "down", "in", "out", "on", "off", "over",
    "under", "again", "further", "then", "once", "here", "there", "when", "where", "why",
    "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no",
    "nor", "not", "only", "own", "same", "so", "than", "too", "very", "can", "will", "just",
    "should", "now", "would", "could", "shall", "may", "might", "must", "also", "upon",
    "within", "without", "s", "t", "d", "ll", "m", "o", "re", "ve", "y", "don", "ain", "aren",
    "couldn", "didn", "doesn", "hadn", "hasn", "haven", "isn", "ma", "mightn", "mustn",
    "needn", "shan", "shouldn", "wasn", "weren", "won", "wouldn",
];

/// Suffix rules applied in order; the first match wins. The replacement keeps
/// the case of the stripped suffix's first character.
const SUFFIX_RULES: &[(&str, &str)] = &[("ies", "y"), ("es", ""), ("s", ""), ("ed", ""), ("ing", "")];

/// A token as a byte range into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Split text into maximal runs of alphanumeric characters. Whitespace and
/// punctuation both separate tokens, so `de-energized` yields `de`, `energized`.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                tokens.push(Token { text: &text[s..i], start: s, end: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token { text: &text[s..], start: s, end: text.len() });
    }
    tokens
}

/// Level-1 cleaner with a configurable strip list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cleaner {
    strip_list: Vec<String>,
}

impl Default for Cleaner {
    fn default() -> Self {
        Self::new(DEFAULT_STRIP_LIST.iter().map(|s| s.to_string()))
    }
}

impl Cleaner {
    pub fn new<I, S>(strip_list: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let strip_list = strip_list
            .into_iter()
            .map(Into::into)
            .filter(|s: &String| !s.is_empty() && s != " ")
            .collect();
        Self { strip_list }
    }

    pub fn strip_list(&self) -> &[String] {
        &self.strip_list
    }

    /// Replace every strip-list item with a space, turn newlines into spaces,
    /// collapse whitespace runs and trim. Iterates to a fixed point so removing
    /// one artifact can never leave another behind.
    pub fn clean(&self, raw: &str) -> String {
        let mut current = raw.to_string();
        loop {
            let mut next = current.clone();
            for item in &self.strip_list {
                if next.contains(item.as_str()) {
                    next = next.replace(item.as_str(), " ");
                }
            }
            let next = collapse_whitespace(&next);
            if next == current {
                return next;
            }
            current = next;
        }
    }
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Level-1 cleaning with the default strip list.
pub fn clean_format(raw: &str) -> String {
    Cleaner::default().clean(raw)
}

pub fn is_stopword(token: &str) -> bool {
    let lower = token.to_lowercase();
    STOPWORDS.contains(&lower.as_str())
}

/// Rule-based suffix stemmer, iterated until no rule applies so that
/// `stem(stem(w)) == stem(w)`.
pub fn stem(word: &str) -> String {
    let mut current = word.to_string();
    while let Some(next) = stem_once(&current) {
        current = next;
    }
    current
}

fn stem_once(word: &str) -> Option<String> {
    // ASCII lowercasing keeps byte offsets aligned with `word`.
    let lower = word.to_ascii_lowercase();
    for (suffix, replacement) in SUFFIX_RULES {
        if !lower.ends_with(suffix) {
            continue;
        }
        if *suffix == "s" && lower.ends_with("ss") {
            return None;
        }
        let base = &word[..word.len() - suffix.len()];
        if base.chars().count() < MIN_STEM_LEN {
            return None;
        }
        let upper = word[base.len()..].starts_with(|c: char| c.is_ascii_uppercase());
        let replacement = if upper {
            replacement.to_ascii_uppercase()
        } else {
            replacement.to_string()
        };
        return Some(format!("{base}{replacement}"));
    }
    None
}

/// Level-2 normalization: tokenize, drop stopwords, stem, and drop stems that
/// collapse onto a stopword. Idempotent.
pub fn normalize(level1: &str) -> String {
    let mut out = String::with_capacity(level1.len());
    for token in tokenize(level1) {
        if is_stopword(token.text) {
            continue;
        }
        let stemmed = stem(token.text);
        if is_stopword(&stemmed) {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&stemmed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_examples() {
        assert_eq!(clean_format(""), "");
        assert_eq!(clean_format("Loss _0x00D_ of *** SDC\n\n"), "Loss of SDC");
        assert_eq!(clean_format("a  b\tc"), "a b c");
        assert_eq!(clean_format("line one\\nline two\r\n"), "line one line two");
        assert_eq!(clean_format("  Casing Kept  "), "Casing Kept");
    }

    #[test]
    fn nested_artifacts_are_removed() {
        // removing the inner marker must not leave a fresh "***" behind
        assert_eq!(clean_format("**_0x00D_*"), "** *");
        assert_eq!(clean_format("*_0x00D_**"), "* **");
    }

    #[test]
    fn custom_strip_list() {
        let cleaner = Cleaner::new(["<br>"]);
        assert_eq!(cleaner.clean("a<br>b *** c"), "a b *** c");
    }

    #[test]
    fn tokenizer_splits_on_punctuation() {
        let toks: Vec<_> = tokenize("de-energized 4.16kv bus; SDC.").iter().map(|t| t.text).collect();
        assert_eq!(toks, ["de", "energized", "4", "16kv", "bus", "SDC"]);
        let t = tokenize("  ab c");
        assert_eq!((t[0].start, t[0].end), (2, 4));
        assert!(tokenize("").is_empty());
        assert!(tokenize(" ;; ").is_empty());
    }

    #[test]
    fn stemmer_rules() {
        assert_eq!(stem("pumps"), "pump");
        assert_eq!(stem("running"), "runn");
        assert_eq!(stem("bodies"), "body");
        assert_eq!(stem("isolated"), "isolat");
        assert_eq!(stem("closes"), "clo");
        assert_eq!(stem("class"), "class");
        assert_eq!(stem("PUMPS"), "PUMP");
        assert_eq!(stem("BATTERIES"), "BATTERY");
        // too short to strip
        assert_eq!(stem("was"), "was");
        assert_eq!(stem("bus"), "bus");
        assert_eq!(stem("lies"), "lies");
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("the pumps were running"), "pump runn");
        assert_eq!(normalize("Loss of SDC occurred during Mode 5"), "Loss SDC occurr Mode 5");
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in "[a-zA-Z_0-9*\\\\ \t\r\n]{0,60}") {
            let once = clean_format(&s);
            prop_assert_eq!(clean_format(&once), once.clone());
            prop_assert!(!once.contains("  "));
            prop_assert!(!once.contains('\n') && !once.contains('\r') && !once.contains('\t'));
            for item in DEFAULT_STRIP_LIST {
                prop_assert!(!once.contains(item));
            }
        }

        #[test]
        fn normalize_is_idempotent(words in proptest::collection::vec("[A-Za-z]{1,10}", 0..20)) {
            let text = clean_format(&words.join(" "));
            let once = normalize(&text);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn stem_is_idempotent(w in "[A-Za-z]{1,14}") {
            let s = stem(&w);
            prop_assert_eq!(stem(&s), s);
        }
    }
}
