/// Levenshtein distance (substitutions + insertions + deletions).
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edits divided by reference length; `None` for an empty reference.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Option<f64> {
    if reference.is_empty() {
        return None;
    }
    Some(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference tokens.
pub fn corpus_wer(edits: usize, ref_tokens: usize) -> f64 {
    if ref_tokens == 0 {
        if edits == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        edits as f64 / ref_tokens as f64
    }
}
