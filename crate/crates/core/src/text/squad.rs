use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normalize_answer;
use crate::text::tokenize::{char_slice, tokenize, TokenMode};
use crate::text::vocab::CharVocab;

/// Characters kept per token for the character embedding.
pub const MAX_CHARS: usize = 25;

/// One question with its tokenized context and aligned answer spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub id: String,
    pub question: String,
    pub question_tokens: Vec<String>,
    pub context_tokens: Vec<String>,
    /// `[start, end)` character offsets of each context token.
    pub context_token_char_spans: Vec<(usize, usize)>,
    pub question_chars: Vec<Vec<usize>>,
    pub context_chars: Vec<Vec<usize>>,
    /// Inclusive token spans.
    pub gold_spans: Vec<(usize, usize)>,
    pub raw_context: String,
    pub raw_answers: Vec<String>,
}

impl TokenizedExample {
    /// Text of a token span, taken from the raw context.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        let s = self.context_token_char_spans[start].0;
        let e = self.context_token_char_spans[end].1;
        char_slice(&self.raw_context, s, e)
    }

    /// Fills the character id fields from `chars`.
    pub fn encode_chars(&mut self, chars: &CharVocab) {
        self.question_chars = self.question_tokens.iter().map(|t| chars.encode(t, MAX_CHARS)).collect();
        self.context_chars = self.context_tokens.iter().map(|t| chars.encode(t, MAX_CHARS)).collect();
    }
}

/// Builds a tokenized example, aligning each `(answer_start, text)` pair.
/// Returns the example and the number of answers that could not be aligned.
pub fn build_example(
    id: &str,
    question: &str,
    context: &str,
    answers: &[(usize, String)],
    mode: TokenMode,
) -> (TokenizedExample, usize) {
    let ctx = tokenize(context, mode);
    let mut ex = TokenizedExample {
        id: id.to_string(),
        question: question.to_string(),
        question_tokens: tokenize(question, mode).into_iter().map(|t| t.text).collect(),
        context_token_char_spans: ctx.iter().map(|t| (t.start, t.end)).collect(),
        context_tokens: ctx.into_iter().map(|t| t.text).collect(),
        question_chars: Vec::new(),
        context_chars: Vec::new(),
        gold_spans: Vec::new(),
        raw_context: context.to_string(),
        raw_answers: answers.iter().map(|(_, t)| t.clone()).collect(),
    };
    let mut unaligned = 0;
    for (start, text) in answers {
        match align_answer(&ex, *start, text) {
            Some(span) => {
                if !ex.gold_spans.contains(&span) {
                    ex.gold_spans.push(span);
                }
            }
            None => unaligned += 1,
        }
    }
    (ex, unaligned)
}

/// Token span whose char spans contain the first and last answer character.
/// Surrounding whitespace in `text` is skipped; the span is rejected unless
/// its normalized text equals the normalized answer.
pub fn align_answer(ex: &TokenizedExample, answer_start: usize, text: &str) -> Option<(usize, usize)> {
    let lead = text.chars().take_while(|c| c.is_whitespace()).count();
    let trimmed_len = text.trim().chars().count();
    if trimmed_len == 0 {
        return None;
    }
    let first = answer_start + lead;
    let last = first + trimmed_len - 1;
    let spans = &ex.context_token_char_spans;
    let find = |c: usize| spans.iter().position(|&(s, e)| s <= c && c < e);
    let (s, e) = (find(first)?, find(last)?);
    (normalize_answer(&ex.span_text(s, e)) == normalize_answer(text)).then_some((s, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub examples: usize,
    pub answers: usize,
    pub unalignable_answers: usize,
    /// Examples left without any gold span; kept for evaluation only.
    pub unanswerable_examples: usize,
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Parses SQuAD v1.1 JSON. Examples come back sorted by id; character ids
/// are left empty until [`TokenizedExample::encode_chars`] is called.
pub fn parse_squad(json: &str, mode: TokenMode) -> Result<(Vec<TokenizedExample>, IngestStats)> {
    let file: SquadFile = serde_json::from_str(json)?;
    let mut stats = IngestStats::default();
    let mut out = Vec::new();
    for para in file.data.iter().flat_map(|a| &a.paragraphs) {
        for qa in &para.qas {
            let answers: Vec<(usize, String)> = qa.answers.iter().map(|a| (a.answer_start, a.text.clone())).collect();
            let (ex, unaligned) = build_example(&qa.id, &qa.question, &para.context, &answers, mode);
            stats.answers += answers.len();
            stats.unalignable_answers += unaligned;
            if ex.gold_spans.is_empty() {
                stats.unanswerable_examples += 1;
            }
            out.push(ex);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    stats.examples = out.len();
    if stats.unalignable_answers > 0 {
        log::info!(
            "{} of {} answers could not be aligned to tokens",
            stats.unalignable_answers,
            stats.answers
        );
    }
    Ok((out, stats))
}

pub fn ingest_squad(path: &Path, mode: TokenMode) -> Result<(Vec<TokenizedExample>, IngestStats)> {
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_squad(&json, mode)
}

/// Loads examples from SQuAD JSON, a NewsQA CSV (`.csv`) or a cache written
/// by `preprocess`. A cache must have been built for `mode`.
pub fn load_examples(path: &Path, mode: TokenMode) -> Result<(Vec<TokenizedExample>, IngestStats)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let json = crate::text::newsqa_csv_to_squad(path)?;
        return parse_squad(&json.to_string(), mode);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("examples").is_some() {
        let cache = Cache::load(path)?;
        if cache.mode != mode {
            return Err(Error::Dataset(format!(
                "{}: cache was tokenized for {:?}, model needs {:?}",
                path.display(),
                cache.mode,
                mode
            )));
        }
        return Ok((cache.examples, cache.stats));
    }
    parse_squad(&text, mode)
}

pub const CACHE_VERSION: u32 = 1;

/// Preprocessed dataset as written by `preprocess`: a JSON object
/// `{version, mode, stats, examples}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cache {
    pub version: u32,
    pub mode: TokenMode,
    pub stats: IngestStats,
    pub examples: Vec<TokenizedExample>,
}

impl Cache {
    pub fn load(path: &Path) -> Result<Cache> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: Cache = serde_json::from_str(&text)?;
        if cache.version != CACHE_VERSION {
            return Err(Error::Dataset(format!(
                "{}: cache version {} (expected {CACHE_VERSION})",
                path.display(),
                cache.version
            )));
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONTEXT: &str = "St. Kazimierz Church (1688-1692)";

    fn squad(context: &str, qas: &[(&str, &[(usize, &str)])]) -> String {
        let qas: Vec<serde_json::Value> = qas
            .iter()
            .map(|(id, answers)| {
                serde_json::json!({
                    "id": id,
                    "question": "when was it built?",
                    "answers": answers.iter().map(|(s, t)| serde_json::json!({"text": t, "answer_start": s})).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({"data": [{"paragraphs": [{"context": context, "qas": qas}]}]}).to_string()
    }

    #[test]
    fn aligns_hyphenated_years() {
        let start = CONTEXT.find("1688").unwrap();
        let (exs, stats) = parse_squad(&squad(CONTEXT, &[("q", &[(start, "1688-1692")])]), TokenMode::FastQa).unwrap();
        let ex = &exs[0];
        let (s, e) = ex.gold_spans[0];
        assert_eq!(&ex.context_tokens[s..=e], ["1688", "-", "1692"]);
        assert_eq!(ex.span_text(s, e), "1688-1692");
        assert_eq!(stats.unalignable_answers, 0);
    }

    #[test]
    fn answer_at_token_zero() {
        let (exs, _) = parse_squad(&squad(CONTEXT, &[("q", &[(0, "St. Kazimierz")])]), TokenMode::FastQa).unwrap();
        assert_eq!(exs[0].gold_spans, vec![(0, 2)]);
    }

    #[test]
    fn out_of_range_is_unalignable_but_kept() {
        let (exs, stats) = parse_squad(&squad(CONTEXT, &[("q", &[(999, "x")])]), TokenMode::FastQa).unwrap();
        assert_eq!(exs.len(), 1);
        assert!(exs[0].gold_spans.is_empty());
        assert_eq!(exs[0].raw_answers, ["x"]);
        assert_eq!((stats.unalignable_answers, stats.unanswerable_examples), (1, 1));
    }

    #[test]
    fn partial_token_answer_is_rejected() {
        // "Kazim" ends inside a token, so the extracted span would not match
        let start = CONTEXT.find("Kazim").unwrap();
        let (exs, stats) = parse_squad(&squad(CONTEXT, &[("q", &[(start, "Kazim")])]), TokenMode::FastQa).unwrap();
        assert!(exs[0].gold_spans.is_empty());
        assert_eq!(stats.unalignable_answers, 1);
    }

    #[test]
    fn sorted_by_id_and_deduplicated() {
        let json = squad(CONTEXT, &[("b", &[(0, "St."), (0, "St.")]), ("a", &[(4, "Kazimierz")])]);
        let (exs, _) = parse_squad(&json, TokenMode::FastQa).unwrap();
        assert_eq!(exs.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(exs[1].gold_spans.len(), 1);
        assert_eq!(exs[1].raw_answers.len(), 2);
    }

    #[test]
    fn malformed_json_errors() {
        assert!(parse_squad("{\"data\": [", TokenMode::FastQa).is_err());
    }

    #[test]
    fn unicode_offsets_are_characters() {
        let ctx = "Café in Zürich opened 1901.";
        let start = ctx.chars().position(|c| c == 'Z').unwrap();
        let (exs, _) = parse_squad(&squad(ctx, &[("q", &[(start, "Zürich")])]), TokenMode::FastQa).unwrap();
        let (s, e) = exs[0].gold_spans[0];
        assert_eq!(exs[0].span_text(s, e), "Zürich");
    }

    #[test]
    fn chars_are_encoded_and_truncated() {
        let (mut exs, _) = parse_squad(&squad("a supercalifragilisticexpialidocious word", &[("q", &[(0, "a")])]), TokenMode::FastQa).unwrap();
        exs[0].encode_chars(&CharVocab::ascii());
        assert_eq!(exs[0].context_chars[1].len(), MAX_CHARS);
        assert_eq!(exs[0].context_chars.len(), exs[0].context_tokens.len());
    }
}
