use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Row {
    story_id: String,
    story_text: String,
    question: String,
    answer_token_ranges: String,
}

/// Character `[start, end)` spans of whitespace-separated words.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, n));
    }
    spans
}

/// Converts a NewsQA CSV (columns `story_id, story_text, question,
/// answer_token_ranges`) into SQuAD JSON. Ranges are `a:b` pairs over
/// whitespace-separated story words, `b` exclusive, comma separated.
pub fn newsqa_csv_to_squad(path: &Path) -> Result<serde_json::Value> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut paragraphs = Vec::new();
    for (row_no, row) in reader.deserialize::<Row>().enumerate() {
        let row = row?;
        let words = word_spans(&row.story_text);
        let chars: Vec<char> = row.story_text.chars().collect();
        let mut answers = Vec::new();
        for range in row.answer_token_ranges.split(',').filter(|r| !r.trim().is_empty()) {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: row_no + 2,
                msg: format!("bad answer range {range:?}"),
            };
            let (a, b) = range.trim().split_once(':').ok_or_else(bad)?;
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            if a >= b || b > words.len() {
                return Err(bad());
            }
            let (s, e) = (words[a].0, words[b - 1].1);
            answers.push(serde_json::json!({
                "text": chars[s..e].iter().collect::<String>(),
                "answer_start": s,
            }));
        }
        paragraphs.push(serde_json::json!({
            "context": row.story_text,
            "qas": [{
                "id": format!("{}_{row_no}", row.story_id),
                "question": row.question,
                "answers": answers,
            }],
        }));
    }
    Ok(serde_json::json!({"version": "newsqa", "data": [{"title": "newsqa", "paragraphs": paragraphs}]}))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::text::squad::parse_squad;
    use crate::text::tokenize::TokenMode;

    #[test]
    fn converts_and_ingests() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "story_id,story_text,question,answer_token_ranges").unwrap();
        writeln!(f, "s1,\"The storm hit  Miami on Monday.\",Where did it hit?,\"3:4\"").unwrap();
        writeln!(f, "s1,\"The storm hit  Miami on Monday.\",When?,\"4:6,5:6\"").unwrap();
        let json = newsqa_csv_to_squad(f.path()).unwrap();
        let (exs, stats) = parse_squad(&json.to_string(), TokenMode::FastQa).unwrap();
        assert_eq!(exs.len(), 2);
        assert_eq!(exs[0].raw_answers, ["Miami"]);
        assert_eq!(exs[1].raw_answers, ["on Monday.", "Monday."]);
        assert_eq!(stats.unalignable_answers, 0);
    }

    #[test]
    fn bad_range_is_reported() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "story_id,story_text,question,answer_token_ranges").unwrap();
        writeln!(f, "s1,a b,q,9:10").unwrap();
        assert!(matches!(newsqa_csv_to_squad(f.path()), Err(Error::Parse { line: 2, .. })));
    }
}
