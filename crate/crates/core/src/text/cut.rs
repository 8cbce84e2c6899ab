use crate::text::squad::TokenizedExample;

/// Start of the `max_len` window containing the most gold spans, earliest
/// on ties, together with that count. A span `(s, e)` lies inside the window
/// starting at `w` iff `e + 1 - max_len <= w <= s`, so the counts for all
/// windows come from one difference-array sweep.
pub fn best_window(len: usize, spans: &[(usize, usize)], max_len: usize) -> (usize, usize) {
    if len <= max_len {
        return (0, spans.iter().filter(|&&(_, e)| e < len).count());
    }
    let last = len - max_len;
    let mut diff = vec![0i64; last + 2];
    for &(s, e) in spans {
        if e >= len || e - s + 1 > max_len {
            continue;
        }
        let lo = (e + 1).saturating_sub(max_len);
        let hi = s.min(last);
        if lo <= hi {
            diff[lo] += 1;
            diff[hi + 1] -= 1;
        }
    }
    let (mut best, mut best_count, mut running) = (0, 0i64, 0i64);
    for (w, d) in diff.iter().take(last + 1).enumerate() {
        running += d;
        if running > best_count {
            best = w;
            best_count = running;
        }
    }
    (best, best_count as usize)
}

/// Restricts a long context to its best `max_len` window, re-indexing the
/// contained spans and dropping the rest. Returns `None` when no window
/// holds any gold span.
pub fn cut_context(ex: &TokenizedExample, max_len: usize) -> Option<TokenizedExample> {
    let len = ex.context_tokens.len();
    if len <= max_len {
        return Some(ex.clone());
    }
    let (w, count) = best_window(len, &ex.gold_spans, max_len);
    if count == 0 {
        return None;
    }
    let end = w + max_len;
    let mut out = ex.clone();
    out.context_tokens = ex.context_tokens[w..end].to_vec();
    out.context_token_char_spans = ex.context_token_char_spans[w..end].to_vec();
    if !ex.context_chars.is_empty() {
        out.context_chars = ex.context_chars[w..end].to_vec();
    }
    out.gold_spans = ex
        .gold_spans
        .iter()
        .filter(|&&(s, e)| s >= w && e < end)
        .map(|&(s, e)| (s - w, e - w))
        .collect();
    Some(out)
}

/// Applies [`cut_context`] to a training set; returns the kept examples and
/// the number excluded.
pub fn cut_all(examples: &[TokenizedExample], max_len: usize) -> (Vec<TokenizedExample>, usize) {
    let mut dropped = 0;
    let kept = examples
        .iter()
        .filter_map(|ex| {
            let cut = cut_context(ex, max_len);
            dropped += usize::from(cut.is_none());
            cut
        })
        .collect();
    (kept, dropped)
}
