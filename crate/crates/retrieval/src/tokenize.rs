//! Math-aware tokenizer.
//!
//! LaTeX control words (`\frac`, `\angle`) and super/subscript groups
//! (`^{2}`, `_{n}`, `^2`) are kept as single atomic tokens, verbatim.
//! Everything else is split into maximal alphanumeric runs and case-folded.

/// Tokenize `text` for lexical retrieval.
pub fn math_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\\' => {
                let start = i;
                let mut j = i + 1;
                while j < chars.len() && chars[j].is_ascii_alphabetic() {
                    j += 1;
                }
                if j > start + 1 {
                    tokens.push(chars[start..j].iter().collect());
                    i = j;
                } else {
                    // escaped symbol such as `\{` or `\\`
                    i += 1;
                }
            }
            '^' | '_' => match script_group_end(&chars, i) {
                Some(end) => {
                    tokens.push(chars[i..end].iter().collect());
                    i = end;
                }
                None => i += 1,
            },
            c if c.is_alphanumeric() => {
                let start = i;
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                tokens.push(word.to_lowercase());
            }
            _ => i += 1,
        }
    }
    tokens
}

/// End (exclusive) of a `^{...}` / `_x` group starting at `start`, if any.
fn script_group_end(chars: &[char], start: usize) -> Option<usize> {
    let next = *chars.get(start + 1)?;
    if next == '{' {
        let mut depth = 0usize;
        for (offset, &c) in chars[start + 1..].iter().enumerate() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        let end = start + 1 + offset + 1;
                        // `^{}` carries nothing worth indexing
                        return (end - start > 3).then_some(end);
                    }
                }
                _ => {}
            }
        }
        None
    } else if next.is_alphanumeric() {
        Some(start + 2)
    } else {
        None
    }
}
