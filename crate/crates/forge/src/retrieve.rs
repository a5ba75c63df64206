//! Lexical retrieval over the seed corpus.

use std::collections::HashMap;

use crate::seed::{SeedCorpus, SeedEntry};

pub const DEFAULT_K: usize = 4;

/// Similarity between a query and a document; higher is closer.
pub trait Scorer: Send + Sync {
    fn score(&self, query: &str, document: &str) -> f64;
}

/// Cosine similarity of raw term-frequency vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosine;

/// Lowercased runs of letters, digits and underscores.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn term_frequencies(text: &str) -> HashMap<String, f64> {
    let mut tf = HashMap::new();
    for t in tokenize(text) {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf
}

impl Scorer for TfCosine {
    fn score(&self, query: &str, document: &str) -> f64 {
        let q = term_frequencies(query);
        let d = term_frequencies(document);
        let dot: f64 = q.iter().filter_map(|(t, a)| d.get(t).map(|b| a * b)).sum();
        if dot == 0.0 {
            return 0.0;
        }
        let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        dot / (norm(&q) * norm(&d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<'a> {
    pub entry: &'a SeedEntry,
    pub score: f64,
}

/// Top `k` entries by [`TfCosine`] over instruction plus input.
pub fn retrieve<'a>(corpus: &'a SeedCorpus, query: &str, k: usize) -> Vec<Hit<'a>> {
    retrieve_with(corpus, query, k, &TfCosine)
}

/// Top `k` entries under `scorer`, ties broken by the lower entry id.
/// Every entry is a candidate, so `k` at or above the corpus size returns all of them.
pub fn retrieve_with<'a>(corpus: &'a SeedCorpus, query: &str, k: usize, scorer: &dyn Scorer) -> Vec<Hit<'a>> {
    let mut hits: Vec<Hit<'a>> =
        corpus.entries.iter().map(|entry| Hit { entry, score: scorer.score(query, &entry.retrieval_text()) }).collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry.id.cmp(&b.entry.id)));
    hits.truncate(k);
    hits
}

/// Renders hits as prompt context, keeping at most `max_output_lines` of each program.
pub fn render_snippets(hits: &[Hit<'_>], max_output_lines: usize) -> String {
    if hits.is_empty() {
        return "(no reference problems available)".into();
    }
    let mut out = String::new();
    for (i, h) in hits.iter().enumerate() {
        let e = h.entry;
        out.push_str(&format!(
            "--- reference {} ({}) ---\nInstruction: {}\n",
            i + 1,
            e.physics_tag,
            e.instruction.trim()
        ));
        if !e.input.trim().is_empty() {
            out.push_str(&format!("Input: {}\n", e.input.trim()));
        }
        let lines: Vec<&str> = e.output.lines().collect();
        out.push_str("Code:\n");
        for l in lines.iter().take(max_output_lines) {
            out.push_str(l);
            out.push('\n');
        }
        if lines.len() > max_output_lines {
            out.push_str("# ...\n");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_on_punctuation() {
        assert_eq!(tokenize("Solve -Δu = f, on [0,1]^2; u_D"), ["solve", "δu", "f", "on", "0", "1", "2", "u_d"]);
    }

    #[test]
    fn cosine_bounds() {
        let s = TfCosine;
        assert!((s.score("heat flow", "heat flow") - 1.0).abs() < 1e-12);
        assert_eq!(s.score("heat", "stokes"), 0.0);
        assert_eq!(s.score("", "stokes"), 0.0);
    }
}
