//! Document intake: read text sources, cut them into overlapping token
//! windows, and load the windows into a collection.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::rag::VectorIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFormat {
    PlainText,
    Markdown,
}

impl DocumentFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "txt" => Ok(Self::PlainText),
            "md" | "markdown" => Ok(Self::Markdown),
            "" => Err(Error::UnsupportedFormat(format!("{} (no extension)", path.display()))),
            other => Err(Error::UnsupportedFormat(format!(".{other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub path: PathBuf,
    pub format: DocumentFormat,
    pub text: String,
}

/// Markdown is kept verbatim so headings stay searchable.
pub fn read_document(path: impl AsRef<Path>) -> Result<SourceDocument> {
    let path = path.as_ref();
    let format = DocumentFormat::from_path(path)?;
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Encoding(format!("{}: {}", path.display(), e.utf8_error())))?;
    Ok(SourceDocument { path: path.to_path_buf(), format, text })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub size_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { size_tokens: 512, overlap_tokens: 64 }
    }
}

impl ChunkingConfig {
    pub fn new(size_tokens: usize, overlap_tokens: usize) -> Result<Self> {
        if size_tokens == 0 {
            return Err(Error::validation("chunk size must be positive"));
        }
        if overlap_tokens >= size_tokens {
            return Err(Error::validation("overlap must be smaller than chunk size"));
        }
        Ok(Self { size_tokens, overlap_tokens })
    }

    pub fn stride(&self) -> usize {
        self.size_tokens - self.overlap_tokens
    }
}

/// Byte spans of whitespace-delimited tokens.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
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
        spans.push((s, text.len()));
    }
    spans
}

/// Sliding windows over whitespace tokens. Window `i` covers tokens
/// `[i·stride, i·stride + size)`; each chunk is the original substring from
/// its first to its last token.
pub fn chunk(text: &str, config: &ChunkingConfig) -> Vec<String> {
    let spans = token_spans(text);
    let stride = config.stride().max(1);
    (0..spans.len())
        .step_by(stride)
        .map(|start| {
            let end = (start + config.size_tokens).min(spans.len());
            text[spans[start].0..spans[end - 1].1].to_string()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub documents: usize,
    pub chunks: usize,
    pub skipped: usize,
}

/// Chunks every readable document into `collection_id`, creating the
/// collection if needed. Chunks are keyed by (source path, ordinal), so
/// re-ingesting the same files replaces rather than duplicates. Unreadable
/// files are counted as skipped; it is an error only if nothing was readable.
pub fn ingest<P: AsRef<Path>>(
    index: &dyn VectorIndex,
    paths: &[P],
    collection_id: &str,
    config: &ChunkingConfig,
) -> Result<IngestStats> {
    if index.collection(collection_id).is_err() {
        index.create_collection(collection_id, collection_id)?;
    }
    let mut stats = IngestStats::default();
    for path in paths {
        let path = path.as_ref();
        let doc = match read_document(path) {
            Ok(doc) => doc,
            Err(e) => {
                warn!(path = %path.display(), error = %e, "skipping document");
                stats.skipped += 1;
                continue;
            }
        };
        let source = doc.path.to_string_lossy().into_owned();
        let chunks = chunk(&doc.text, config);
        for (seq, text) in chunks.iter().enumerate() {
            let seq = u32::try_from(seq).map_err(|_| Error::validation("document has too many chunks"))?;
            index.upsert(collection_id, text, &source, seq)?;
        }
        index.truncate_source(collection_id, &source, chunks.len() as u32)?;
        stats.documents += 1;
        stats.chunks += chunks.len();
    }
    if stats.documents == 0 {
        return Err(Error::validation(format!(
            "no readable documents ({} skipped)",
            stats.skipped
        )));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metering::count_tokens;
    use crate::persistence::Store;
    use crate::rag::ExactIndex;
    use proptest::prelude::*;

    fn lens(chunks: &[String]) -> Vec<u64> {
        chunks.iter().map(|c| count_tokens(c)).collect()
    }

    #[test]
    fn window_arithmetic() {
        let five = "a b c d e";
        assert_eq!(lens(&chunk(five, &ChunkingConfig::new(2, 0).unwrap())), vec![2, 2, 1]);
        let ten = "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9";
        let chunks = chunk(ten, &ChunkingConfig::new(4, 1).unwrap());
        assert_eq!(chunks, vec!["t0 t1 t2 t3", "t3 t4 t5 t6", "t6 t7 t8 t9", "t9"]);
    }

    #[test]
    fn short_text_is_one_trimmed_chunk() {
        let chunks = chunk("  hello \n world  ", &ChunkingConfig::default());
        assert_eq!(chunks, vec!["hello \n world"]);
        assert!(chunk("", &ChunkingConfig::default()).is_empty());
        assert!(chunk(" \t\n", &ChunkingConfig::default()).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(ChunkingConfig::new(0, 0).is_err());
        assert!(ChunkingConfig::new(4, 4).is_err());
        assert_eq!(ChunkingConfig::default(), ChunkingConfig::new(512, 64).unwrap());
    }

    #[test]
    fn read_document_formats() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("notes.txt");
        fs::write(&txt, "hello").unwrap();
        let doc = read_document(&txt).unwrap();
        assert_eq!((doc.format, doc.text.as_str()), (DocumentFormat::PlainText, "hello"));

        let md = dir.path().join("syllabus.md");
        fs::write(&md, "# Week 1\n\nIntro").unwrap();
        assert_eq!(read_document(&md).unwrap().text, "# Week 1\n\nIntro");

        let pdf = dir.path().join("syllabus.pdf");
        fs::write(&pdf, b"%PDF-1.4").unwrap();
        match read_document(&pdf) {
            Err(Error::UnsupportedFormat(msg)) => assert!(msg.contains(".pdf")),
            other => panic!("unexpected {other:?}"),
        }

        let bad = dir.path().join("bad.txt");
        fs::write(&bad, [0x66, 0xff, 0xfe]).unwrap();
        assert!(matches!(read_document(&bad), Err(Error::Encoding(_))));
        assert!(matches!(read_document(dir.path().join("missing.txt")), Err(Error::Io(_))));
    }

    #[test]
    fn ingest_counts_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.md");
        let pdf = dir.path().join("c.pdf");
        fs::write(&a, "the sky is blue").unwrap();
        fs::write(&b, "# grass\nis green").unwrap();
        fs::write(&pdf, "binary").unwrap();
        let index = ExactIndex::new(Store::in_memory()).unwrap();
        let config = ChunkingConfig::default();

        let stats = ingest(&index, &[&a, &b], "course", &config).unwrap();
        assert_eq!(stats, IngestStats { documents: 2, chunks: 2, skipped: 0 });
        let before = index.chunks("course").unwrap();
        let again = ingest(&index, &[&a, &b], "course", &config).unwrap();
        assert_eq!(again, stats);
        assert_eq!(index.chunks("course").unwrap(), before);

        let mixed = ingest(&index, &[&a, &pdf], "mixed", &config).unwrap();
        assert_eq!((mixed.documents, mixed.skipped), (1, 1));
        assert!(mixed.chunks >= 1);

        assert!(ingest(&index, &[&pdf], "none", &config).is_err());
    }

    #[test]
    fn reingesting_a_shorter_document_drops_stale_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let config = ChunkingConfig::new(2, 0).unwrap();
        let index = ExactIndex::new(Store::in_memory()).unwrap();
        fs::write(&a, "one two three four five").unwrap();
        assert_eq!(ingest(&index, &[&a], "c", &config).unwrap().chunks, 3);
        fs::write(&a, "one two").unwrap();
        ingest(&index, &[&a], "c", &config).unwrap();
        assert_eq!(index.collection("c").unwrap().chunk_count, 1);
    }

    fn config_strategy() -> impl Strategy<Value = ChunkingConfig> {
        (1usize..20).prop_flat_map(|size| (Just(size), 0..size))
            .prop_map(|(size, overlap)| ChunkingConfig::new(size, overlap).unwrap())
    }

    proptest! {
        #[test]
        fn chunks_reassemble_token_sequence(
            text in "[a-z \\t\\n\u{3000}é]{0,200}",
            config in config_strategy(),
        ) {
            let chunks = chunk(&text, &config);
            let expected: Vec<&str> = text.split_whitespace().collect();
            let mut rebuilt: Vec<&str> = Vec::new();
            for (i, c) in chunks.iter().enumerate() {
                let tokens: Vec<&str> = c.split_whitespace().collect();
                prop_assert!(tokens.len() <= config.size_tokens);
                let skip = if i == 0 { 0 } else { config.overlap_tokens.min(tokens.len()) };
                rebuilt.extend_from_slice(&tokens[skip..]);
            }
            prop_assert_eq!(rebuilt, expected);
        }
    }
}
