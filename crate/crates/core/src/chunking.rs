//! Document splitting with recurrent forward summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::prompts::names;
use crate::gateway::{registry, GatewayError, LlmGateway};
use crate::model::{Chunk, DocumentNode, IdGen};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    /// Upper bound on segment length, in characters.
    pub max_chunk_chars: usize,
    /// A separator boundary is only taken if the segment it ends has at least
    /// this many characters.
    pub min_chunk_chars: usize,
    /// Boundary candidates, highest priority first.
    pub split_separators: Vec<String>,
    pub summarize: bool,
    /// Extra attempts per summary call before the document fails.
    pub summary_retries: u32,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_chunk_chars: 2000,
            min_chunk_chars: 200,
            split_separators: ["\n\n", "\n", ". ", " "].map(String::from).to_vec(),
            summarize: true,
            summary_retries: 2,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), ChunkingError> {
        let bad = |m: &str| Err(ChunkingError::InvalidConfig(m.to_string()));
        if self.max_chunk_chars == 0 || self.min_chunk_chars == 0 {
            return bad("chunk sizes must be positive");
        }
        if self.min_chunk_chars >= self.max_chunk_chars {
            return bad("min_chunk_chars must be below max_chunk_chars");
        }
        if self.split_separators.is_empty() {
            return bad("split_separators is empty");
        }
        if self.split_separators.iter().any(String::is_empty) {
            return bad("split_separators contains an empty separator");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ChunkingError {
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
    #[error("document text is empty")]
    EmptyText,
    #[error("summary for chunk {ordinal} failed after {attempts} attempt(s): {source}")]
    Summary {
        ordinal: usize,
        attempts: u32,
        #[source]
        source: GatewayError,
    },
}

/// Splits `text` into segments whose concatenation is exactly `text`.
///
/// While more than `max_chunk_chars` characters remain, the next boundary is
/// the last occurrence (within the budget) of the highest-priority separator
/// that yields a segment of at least `min_chunk_chars`; separators stay with
/// the segment they end. Without such an occurrence the text is cut hard at
/// `max_chunk_chars`.
pub fn split_text<'a>(text: &'a str, cfg: &ChunkingConfig) -> Vec<&'a str> {
    let max = cfg.max_chunk_chars.max(1);
    // Byte offset of every char boundary, including the end.
    let offsets: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let n_chars = offsets.len() - 1;

    let mut out = Vec::new();
    let mut pos = 0;
    while n_chars - pos > max {
        let start = offsets[pos];
        let window = &text[start..offsets[pos + max]];
        let mut cut_chars = None;
        for sep in &cfg.split_separators {
            if let Some(i) = window.rfind(sep.as_str()) {
                let seg = &window[..i + sep.len()];
                let chars = seg.chars().count();
                if chars >= cfg.min_chunk_chars {
                    cut_chars = Some(chars);
                    break;
                }
            }
        }
        let take = cut_chars.unwrap_or(max);
        out.push(&text[start..offsets[pos + take]]);
        pos += take;
    }
    if pos < n_chars {
        out.push(&text[offsets[pos]..]);
    }
    out
}

/// Forward summaries for consecutive segments: `""` for the first, then the
/// summary of (previous summary, previous segment) for each following one.
pub fn forward_summaries(
    segments: &[&str],
    cfg: &ChunkingConfig,
    gateway: &dyn LlmGateway,
) -> Result<Vec<String>, ChunkingError> {
    let mut out = Vec::with_capacity(segments.len());
    if segments.is_empty() {
        return Ok(out);
    }
    out.push(String::new());
    if !cfg.summarize {
        out.resize(segments.len(), String::new());
        return Ok(out);
    }
    for (i, prev) in segments[..segments.len() - 1].iter().enumerate() {
        let previous = out[i].as_str();
        let previous = if previous.is_empty() { "None" } else { previous };
        let req = registry()
            .request(
                names::SUMMARIZE,
                &[("forward_summary", previous), ("chunk", prev)],
                0.0,
            )
            .expect("summarize bindings are complete");
        let attempts = cfg.summary_retries + 1;
        let mut last_err = None;
        for attempt in 1..=attempts {
            match gateway.complete(&req) {
                Ok(s) => {
                    last_err = None;
                    out.push(s.trim().to_string());
                    break;
                }
                Err(e) => {
                    tracing::warn!(ordinal = i + 1, attempt, "summary call failed: {e}");
                    last_err = Some(e);
                }
            }
        }
        if let Some(source) = last_err {
            return Err(ChunkingError::Summary {
                ordinal: i + 1,
                attempts,
                source,
            });
        }
    }
    Ok(out)
}

/// Splits and summarizes one document. Chunks come back without embeddings.
pub fn chunk_document(
    doc: &DocumentNode,
    text: &str,
    cfg: &ChunkingConfig,
    gateway: &dyn LlmGateway,
    ids: &IdGen,
) -> Result<Vec<Chunk>, ChunkingError> {
    cfg.validate()?;
    if text.is_empty() {
        return Err(ChunkingError::EmptyText);
    }
    let segments = split_text(text, cfg);
    let summaries = forward_summaries(&segments, cfg, gateway)?;
    Ok(segments
        .into_iter()
        .zip(summaries)
        .enumerate()
        .map(|(i, (seg, summary))| Chunk {
            id: ids.chunk(),
            document_id: doc.id,
            ordinal: i as u32,
            text: seg.to_string(),
            forward_summary: summary,
            embedding: Vec::new(),
            tags: Vec::new(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Matcher, MockGateway, MockScript};
    use crate::model::DocumentId;

    fn cfg(max: usize, min: usize) -> ChunkingConfig {
        ChunkingConfig {
            max_chunk_chars: max,
            min_chunk_chars: min,
            ..ChunkingConfig::default()
        }
    }

    fn doc() -> DocumentNode {
        DocumentNode {
            id: DocumentId(0),
            source_uri: "mem://d".into(),
            title: "d".into(),
            metadata: Default::default(),
        }
    }

    #[test]
    fn short_text_is_one_segment() {
        let text = "x".repeat(100);
        assert_eq!(split_text(&text, &ChunkingConfig::default()), vec![text.as_str()]);
    }

    #[test]
    fn blank_lines_win() {
        assert_eq!(
            split_text("A.\n\nB.\n\nC.", &cfg(4, 1)),
            vec!["A.\n\n", "B.\n\n", "C."]
        );
    }

    #[test]
    fn hard_cut_without_separators() {
        let text = "a".repeat(5000);
        let lens: Vec<usize> = split_text(&text, &cfg(2000, 200))
            .iter()
            .map(|s| s.len())
            .collect();
        assert_eq!(lens, vec![2000, 2000, 1000]);
    }

    #[test]
    fn min_length_skips_short_boundaries() {
        // The blank line would leave a 3-char segment; the space keeps >= 5.
        assert_eq!(
            split_text("ab\n\ncd ef gh", &cfg(8, 5)),
            vec!["ab\n\ncd ", "ef gh"]
        );
    }

    #[test]
    fn multibyte_text_is_counted_in_chars() {
        let text = "é".repeat(5);
        assert_eq!(split_text(&text, &cfg(2, 1)), vec!["éé", "éé", "é"]);
    }

    #[test]
    fn single_segment_makes_no_calls() {
        let gw = MockGateway::new(MockScript::strict());
        let chunks = chunk_document(&doc(), "short", &cfg(100, 1), &gw, &IdGen::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].forward_summary, "");
        assert_eq!(gw.call_count(), 0);
    }

    #[test]
    fn summaries_chain_through_the_script() {
        let script = MockScript::strict()
            .once(Matcher::Tag("summarize".into()), "S1")
            .once(Matcher::Tag("summarize".into()), "S2");
        let gw = MockGateway::new(script);
        let chunks =
            chunk_document(&doc(), "A.\n\nB.\n\nC.", &cfg(4, 1), &gw, &IdGen::default()).unwrap();
        let fs: Vec<&str> = chunks.iter().map(|c| c.forward_summary.as_str()).collect();
        assert_eq!(fs, ["", "S1", "S2"]);
        let calls = gw.calls();
        assert!(calls[1].request.messages[0].content.contains("S1"));
        assert!(calls[1].request.messages[0].content.contains("B.\n\n"));
    }

    #[test]
    fn summarize_off_leaves_summaries_empty() {
        let gw = MockGateway::new(MockScript::strict());
        let c = ChunkingConfig {
            summarize: false,
            ..cfg(4, 1)
        };
        let chunks = chunk_document(&doc(), "A.\n\nB.\n\nC.", &c, &gw, &IdGen::default()).unwrap();
        assert!(chunks.iter().all(|c| c.forward_summary.is_empty()));
        assert_eq!(chunks.len(), 3);
    }

    #[test]
    fn exhausted_retries_fail_the_document() {
        let gw = MockGateway::new(MockScript::strict());
        let err =
            chunk_document(&doc(), "A.\n\nB.", &cfg(4, 1), &gw, &IdGen::default()).unwrap_err();
        assert!(matches!(err, ChunkingError::Summary { attempts: 3, .. }));
        assert_eq!(gw.call_count(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 10).validate().is_err());
        let mut c = ChunkingConfig::default();
        c.split_separators.clear();
        assert!(c.validate().is_err());
        assert!(ChunkingConfig::default().validate().is_ok());
    }
}
