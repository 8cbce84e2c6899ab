use serde::{Deserialize, Serialize};

/// Tokenization flavour. `Bow` additionally lowercases every token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    FastQa,
    Bow,
}

/// A token with its `[start, end)` character span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace (dropped) and on every non-alphanumeric character
/// (kept as a token of its own). Offsets count Unicode scalar values.
pub fn tokenize(text: &str, mode: TokenMode) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 0;
    let flush = |cur: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        if !cur.is_empty() {
            out.push(Token {
                text: std::mem::take(cur),
                start,
                end,
            });
        }
    };
    let mut pos = 0;
    for (i, ch) in text.chars().enumerate() {
        pos = i + 1;
        if ch.is_whitespace() {
            flush(&mut cur, cur_start, i, &mut out);
        } else if ch.is_alphanumeric() {
            if cur.is_empty() {
                cur_start = i;
            }
            cur.push(ch);
        } else {
            flush(&mut cur, cur_start, i, &mut out);
            out.push(Token {
                text: ch.to_string(),
                start: i,
                end: i + 1,
            });
        }
    }
    flush(&mut cur, cur_start, pos, &mut out);
    if mode == TokenMode::Bow {
        for t in &mut out {
            t.text = t.text.to_lowercase();
        }
    }
    out
}

pub fn token_strings(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.text.clone()).collect()
}

/// Substring by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn words(text: &str) -> Vec<String> {
        token_strings(&tokenize(text, TokenMode::FastQa))
    }

    #[test]
    fn splits_punctuation_inclusively() {
        assert_eq!(
            words("St. Kazimierz Church (1688-1692)"),
            ["St", ".", "Kazimierz", "Church", "(", "1688", "-", "1692", ")"]
        );
    }

    #[test]
    fn single_token_span() {
        let t = tokenize("abc", TokenMode::FastQa);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].start, t[0].end), (0, 3));
    }

    #[test]
    fn whitespace_is_exclusive() {
        assert_eq!(words("a  b"), ["a", "b"]);
        assert!(words("").is_empty());
        assert!(words(" \t\n").is_empty());
    }

    #[test]
    fn bow_mode_lowercases() {
        let t = tokenize("The Cat", TokenMode::Bow);
        assert_eq!(token_strings(&t), ["the", "cat"]);
    }

    #[test]
    fn answer_stays_contiguous() {
        let text = "St. Kazimierz Church (1688-1692)";
        let toks = tokenize(text, TokenMode::FastQa);
        let s = toks.iter().position(|t| t.text == "1688").unwrap();
        let e = toks.iter().position(|t| t.text == "1692").unwrap();
        assert_eq!(char_slice(text, toks[s].start, toks[e].end), "1688-1692");
    }

    proptest! {
        #[test]
        fn spans_reproduce_non_whitespace(text in "[ a-zA-Z0-9.,()\\-é]{0,40}") {
            let toks = tokenize(&text, TokenMode::FastQa);
            let mut last_end = 0;
            for t in &toks {
                prop_assert!(t.start >= last_end && t.end > t.start);
                prop_assert_eq!(char_slice(&text, t.start, t.end), t.text.clone());
                last_end = t.end;
            }
            let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
            let squeezed: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(joined, squeezed);
        }

        #[test]
        fn retokenizing_a_token_is_identity(text in "[ a-zA-Z0-9.,()\\-]{0,40}") {
            for t in tokenize(&text, TokenMode::FastQa) {
                prop_assert_eq!(words(&t.text), vec![t.text.clone()]);
            }
        }
    }
}
