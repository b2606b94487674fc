//! Shared text normalizer: lowercase, whitespace split, punctuation split
//! into single-character tokens.

/// Splits `text` into normalized tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Normalized form of a text: its tokens joined by single spaces.
pub fn normalized_string(text: &str) -> String {
    normalize(text).join(" ")
}
