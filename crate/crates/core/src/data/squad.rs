//! SQuAD v1.1 ingestion into sentence-level question/answer pairs.

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::corpus::CorpusRecord;
use super::text::{normalize, span_text, split_sentences, tokenize, SplitterConfig};

#[derive(Debug, Deserialize)]
struct SquadFile {
    data: Vec<Article>,
}

#[derive(Debug, Deserialize)]
struct Article {
    #[serde(default)]
    title: String,
    paragraphs: Vec<Paragraph>,
}

#[derive(Debug, Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Debug, Deserialize)]
struct Qa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
}

#[derive(Debug, Deserialize)]
struct Answer {
    answer_start: usize,
}

#[derive(Debug, Default)]
pub struct IngestOutput {
    pub records: Vec<CorpusRecord>,
    /// Questions whose answer start lies outside the context.
    pub span_outside_context: usize,
    /// Questions without answers or with empty question text.
    pub skipped_other: usize,
}

/// Stable identifier of an answer sentence within an article.
pub fn answer_id(title: &str, sentence: &str) -> String {
    let mut h = Sha256::new();
    h.update(title.as_bytes());
    h.update([0x1f]);
    h.update(normalize(sentence).as_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a SQuAD document and emits one record per answerable question, in
/// document order. The answer sentence is the context sentence containing the
/// first answer's start offset.
pub fn ingest_squad(raw: &str, splitter: &SplitterConfig) -> Result<IngestOutput> {
    let file: SquadFile = serde_json::from_str(raw).map_err(|e| Error::json("SQuAD input", e))?;
    let mut out = IngestOutput::default();
    for article in &file.data {
        for para in &article.paragraphs {
            let spans = split_sentences(&para.context, splitter);
            let n_chars = para.context.chars().count();
            for qa in &para.qas {
                let Some(ans) = qa.answers.first() else {
                    out.skipped_other += 1;
                    continue;
                };
                if tokenize(&qa.question).is_empty() {
                    out.skipped_other += 1;
                    continue;
                }
                let start = ans.answer_start;
                let Some(span) = spans.iter().find(|s| s.start <= start && start < s.end) else {
                    let err = Error::SpanOutsideContext { start, len: n_chars };
                    log::warn!("skipping question {}: {err}", qa.id);
                    out.span_outside_context += 1;
                    continue;
                };
                let sentence = span_text(&para.context, *span);
                out.records.push(CorpusRecord {
                    pair_id: qa.id.clone(),
                    question: qa.question.trim().to_string(),
                    answer_id: answer_id(&article.title, &sentence),
                    answer: sentence,
                });
            }
        }
    }
    Ok(out)
}
