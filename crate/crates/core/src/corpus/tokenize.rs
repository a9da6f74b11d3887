//! Tweet tokenizer.
//!
//! Splits on whitespace, then segments each chunk by character class:
//! word characters (alphanumerics plus apostrophes and underscores)
//! stick together and are lowercased, runs of ASCII punctuation stay
//! together as one token, and every other symbol (emoji, non-ASCII
//! punctuation) becomes a standalone token. Multi-scalar emoji such as
//! ZWJ sequences therefore split into one token per scalar; the rule is
//! uniform and retokenizing a joined token list is a fixed point.

/// Tokenizes raw tweet text.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in raw.split_whitespace() {
        split_chunk(chunk, &mut out);
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Word,
    Punct,
    Symbol,
}

fn classify(c: char) -> Class {
    if c.is_alphanumeric() || c == '\'' || c == '\u{2019}' || c == '_' {
        Class::Word
    } else if c.is_ascii() {
        Class::Punct
    } else {
        Class::Symbol
    }
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let mut cur = String::new();
    let mut cur_class = None;
    for c in chunk.chars() {
        let class = classify(c);
        let breaks = match (cur_class, class) {
            (None, _) => false,
            // Symbols never merge, with anything.
            (Some(Class::Symbol), _) | (_, Class::Symbol) => true,
            (Some(prev), next) => prev != next,
        };
        if breaks {
            flush(&mut cur, cur_class, out);
        }
        cur.push(c);
        cur_class = Some(class);
    }
    flush(&mut cur, cur_class, out);
}

fn flush(cur: &mut String, class: Option<Class>, out: &mut Vec<String>) {
    if cur.is_empty() {
        return;
    }
    let token = if class == Some(Class::Word) {
        cur.to_lowercase()
    } else {
        cur.clone()
    };
    out.push(token);
    cur.clear();
}
