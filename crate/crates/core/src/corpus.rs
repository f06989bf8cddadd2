//! Literature corpus ingestion: per-page text and rendered page images from
//! PDFs, then overlapping character chunks for embedding.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use hayro::hayro_interpret::InterpreterSettings;
use hayro::hayro_syntax::{LoadPdfError, Pdf};
use hayro::vello_cpu::color::palette::css::WHITE;
use hayro::{PixmapSettings, RenderCache, RenderSettings};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::FieldHasher;

pub const DEFAULT_CHUNK_SIZE: usize = 1000;
pub const DEFAULT_CHUNK_OVERLAP: usize = 200;
pub const DEFAULT_RENDER_DPI: u32 = 144;
/// How far back a chunk boundary may move to land on whitespace.
pub const WHITESPACE_SNAP_WINDOW: usize = 64;
/// Pages are joined with this separator when building the document text.
pub const PAGE_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a readable PDF: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("{0} is encrypted")]
    Encrypted(PathBuf),
    #[error("{0} has no pages")]
    NoPages(PathBuf),
    #[error("invalid doc_id `{0}`: use letters, digits, `_`, `-` or `.`")]
    InvalidDocId(String),
    #[error("doc_id `{0}` appears more than once in the corpus manifest")]
    DuplicateDocId(String),
    #[error("chunk overlap {overlap} must be smaller than chunk size {chunk_size}")]
    InvalidOverlap { chunk_size: usize, overlap: usize },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("failed to encode page {page_no} of {doc_id}: {reason}")]
    Render {
        doc_id: String,
        page_no: u32,
        reason: String,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub doc_id: String,
    /// 1-based.
    pub page_no: u32,
    pub text: String,
    /// Relative to the corpus directory: `<doc_id>/page_<n>.png`.
    pub page_image_ref: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub doc_id: String,
    pub source_path: PathBuf,
    pub pages: Vec<PageRecord>,
}

impl CorpusDocument {
    /// Concatenated page text and the character range each page occupies.
    pub fn full_text(&self) -> DocumentText {
        let mut text = String::new();
        let mut page_ranges = Vec::with_capacity(self.pages.len());
        let mut offset = 0usize;
        for (i, page) in self.pages.iter().enumerate() {
            let start = offset;
            text.push_str(&page.text);
            offset += page.text.chars().count();
            if i + 1 < self.pages.len() {
                text.push_str(PAGE_SEPARATOR);
                offset += PAGE_SEPARATOR.chars().count();
            }
            page_ranges.push((page.page_no, start, offset));
        }
        DocumentText { text, page_ranges }
    }
}

/// Document text with the `[start, end)` char range owned by each page.
/// Separators belong to the page before them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentText {
    pub text: String,
    pub page_ranges: Vec<(u32, usize, usize)>,
}

impl DocumentText {
    pub fn page_at(&self, char_index: usize) -> Option<u32> {
        self.page_ranges
            .iter()
            .find(|(_, s, e)| (*s..*e).contains(&char_index))
            .map(|(p, _, _)| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub page_span: (u32, u32),
    /// `[start, end)` in characters of [`CorpusDocument::full_text`].
    pub char_span: (usize, usize),
    pub text: String,
}

pub fn chunk_id(doc_id: &str, char_span: (usize, usize)) -> String {
    let mut h = FieldHasher::new();
    h.field(doc_id)
        .field(char_span.0.to_le_bytes())
        .field(char_span.1.to_le_bytes());
    h.finish_hex()[..16].to_string()
}

/// Splits the document text into chunks of at most `chunk_size` chars, each
/// overlapping the previous one by exactly `overlap` chars.
///
/// A chunk that does not reach the end of the document ends just after the
/// last whitespace char within [`WHITESPACE_SNAP_WINDOW`] of its hard limit,
/// provided the chunk stays longer than `overlap`.
pub fn chunk_text(doc: &CorpusDocument, chunk_size: usize, overlap: usize) -> Result<Vec<TextChunk>> {
    if overlap >= chunk_size {
        return Err(CorpusError::InvalidOverlap {
            chunk_size,
            overlap,
        });
    }
    let doc_text = doc.full_text();
    let chars: Vec<char> = doc_text.text.chars().collect();
    let n = chars.len();
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < n {
        let hard_end = (start + chunk_size).min(n);
        let mut end = hard_end;
        if hard_end < n {
            let floor = hard_end.saturating_sub(WHITESPACE_SNAP_WINDOW).max(start + overlap + 1);
            if let Some(ws) = (floor - 1..hard_end).rev().find(|&i| chars[i].is_whitespace()) {
                end = ws + 1;
            }
        }
        let char_span = (start, end);
        let first_page = doc_text.page_at(start).unwrap_or(1);
        let last_page = doc_text.page_at(end - 1).unwrap_or(first_page);
        chunks.push(TextChunk {
            chunk_id: chunk_id(&doc.doc_id, char_span),
            doc_id: doc.doc_id.clone(),
            page_span: (first_page, last_page),
            char_span,
            text: chars[start..end].iter().collect(),
        });
        if end == n {
            break;
        }
        start = end - overlap;
    }
    Ok(chunks)
}

/// One entry of the corpus manifest: `{"doc_id": str, "path": str}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub path: PathBuf,
}

/// Reads the manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_slice(&bytes).map_err(|source| CorpusError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut seen = HashSet::new();
    entries
        .into_iter()
        .map(|e| {
            validate_doc_id(&e.doc_id)?;
            if !seen.insert(e.doc_id.clone()) {
                return Err(CorpusError::DuplicateDocId(e.doc_id));
            }
            Ok(ManifestEntry {
                path: base.join(&e.path),
                doc_id: e.doc_id,
            })
        })
        .collect()
}

fn validate_doc_id(doc_id: &str) -> Result<()> {
    let ok = !doc_id.is_empty()
        && doc_id != "."
        && doc_id != ".."
        && doc_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CorpusError::InvalidDocId(doc_id.to_string()))
    }
}

/// Writes page images and chunk files under `corpus_dir/<doc_id>/`.
#[derive(Debug, Clone)]
pub struct Ingestor {
    corpus_dir: PathBuf,
    dpi: u32,
    chunk_size: usize,
    overlap: usize,
}

impl Ingestor {
    pub fn new(corpus_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_dir: corpus_dir.into(),
            dpi: DEFAULT_RENDER_DPI,
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }

    pub fn with_dpi(mut self, dpi: u32) -> Self {
        self.dpi = dpi.max(72);
        self
    }

    pub fn with_chunking(mut self, chunk_size: usize, overlap: usize) -> Self {
        self.chunk_size = chunk_size;
        self.overlap = overlap;
        self
    }

    pub fn corpus_dir(&self) -> &Path {
        &self.corpus_dir
    }

    pub fn doc_dir(&self, doc_id: &str) -> PathBuf {
        self.corpus_dir.join(doc_id)
    }

    /// Absolute location of a page image.
    pub fn page_image_path(&self, page: &PageRecord) -> PathBuf {
        self.corpus_dir.join(&page.page_image_ref)
    }

    /// Extracts text and renders every page of one PDF.
    ///
    /// A page whose text cannot be extracted keeps an empty string but is
    /// still rendered.
    pub fn ingest_document(&self, path: impl AsRef<Path>, doc_id: &str) -> Result<CorpusDocument> {
        let path = path.as_ref();
        validate_doc_id(doc_id)?;
        let bytes = std::fs::read(path).map_err(io_err(path))?;

        let lo = lopdf::Document::load_mem(&bytes).map_err(|e| CorpusError::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if lo.is_encrypted() {
            return Err(CorpusError::Encrypted(path.to_path_buf()));
        }
        let pdf = Pdf::new(bytes).map_err(|e| match e {
            LoadPdfError::Decryption(_) => CorpusError::Encrypted(path.to_path_buf()),
            LoadPdfError::Invalid => CorpusError::Unreadable {
                path: path.to_path_buf(),
                reason: "invalid document structure".to_string(),
            },
        })?;
        let page_numbers: Vec<u32> = lo.get_pages().keys().copied().collect();
        let rendered = pdf.pages();
        if page_numbers.is_empty() || rendered.is_empty() {
            return Err(CorpusError::NoPages(path.to_path_buf()));
        }

        let doc_dir = self.doc_dir(doc_id);
        std::fs::create_dir_all(&doc_dir).map_err(io_err(&doc_dir))?;

        let scale = self.dpi as f32 / 72.0;
        let settings = InterpreterSettings::default();
        let cache = RenderCache::new();
        let mut pages = Vec::with_capacity(rendered.len());
        for (i, page) in rendered.iter().enumerate() {
            let page_no = i as u32 + 1;
            let text = page_numbers
                .get(i)
                .and_then(|&n| match lo.extract_text(&[n]) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        log::warn!("{doc_id} page {page_no}: text extraction failed: {e}");
                        None
                    }
                })
                .map(|t| normalize_page_text(&t))
                .unwrap_or_default();

            let pixmap = hayro::render(
                page,
                &cache,
                &settings,
                &RenderSettings::default(),
                &PixmapSettings {
                    x_scale: scale,
                    y_scale: scale,
                    bg_color: WHITE,
                },
            );
            let png = pixmap.into_png().map_err(|e| CorpusError::Render {
                doc_id: doc_id.to_string(),
                page_no,
                reason: format!("{e:?}"),
            })?;
            let image_ref = PathBuf::from(doc_id).join(format!("page_{page_no}.png"));
            let image_path = self.corpus_dir.join(&image_ref);
            std::fs::write(&image_path, png).map_err(io_err(&image_path))?;
            pages.push(PageRecord {
                doc_id: doc_id.to_string(),
                page_no,
                text,
                page_image_ref: image_ref,
            });
        }

        Ok(CorpusDocument {
            doc_id: doc_id.to_string(),
            source_path: path.to_path_buf(),
            pages,
        })
    }

    /// Ingests, chunks and persists one document.
    pub fn ingest_and_store(&self, entry: &ManifestEntry) -> Result<(CorpusDocument, Vec<TextChunk>)> {
        let doc = self.ingest_document(&entry.path, &entry.doc_id)?;
        let chunks = chunk_text(&doc, self.chunk_size, self.overlap)?;
        let dir = self.doc_dir(&doc.doc_id);
        write_json(&dir.join("pages.json"), &doc.pages)?;
        write_json(&dir.join("chunks.json"), &chunks)?;
        Ok((doc, chunks))
    }

    /// Documents are ingested in parallel; results keep manifest order.
    pub fn ingest_corpus(&self, entries: &[ManifestEntry]) -> Result<Vec<(CorpusDocument, Vec<TextChunk>)>> {
        entries.par_iter().map(|e| self.ingest_and_store(e)).collect()
    }

    /// Reads back what [`Ingestor::ingest_and_store`] wrote.
    pub fn load_stored(&self, doc_id: &str) -> Result<(Vec<PageRecord>, Vec<TextChunk>)> {
        let dir = self.doc_dir(doc_id);
        Ok((
            read_json(&dir.join("pages.json"))?,
            read_json(&dir.join("chunks.json"))?,
        ))
    }
}

fn normalize_page_text(raw: &str) -> String {
    raw.lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("corpus records serialize");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CorpusError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc_from_pages(pages: &[&str]) -> CorpusDocument {
        CorpusDocument {
            doc_id: "d".into(),
            source_path: "d.pdf".into(),
            pages: pages
                .iter()
                .enumerate()
                .map(|(i, t)| PageRecord {
                    doc_id: "d".into(),
                    page_no: i as u32 + 1,
                    text: t.to_string(),
                    page_image_ref: format!("page_{}.png", i + 1).into(),
                })
                .collect(),
        }
    }

    fn spans(chunks: &[TextChunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| c.char_span).collect()
    }

    #[test]
    fn stride_arithmetic_without_whitespace() {
        // start_{n+1} = start_n + (1000 - 200): 0, 800, 1600; last chunk clipped at 2500
        let text = "x".repeat(2500);
        let doc = doc_from_pages(&[&text]);
        let chunks = chunk_text(&doc, 1000, 200).unwrap();
        assert_eq!(spans(&chunks), vec![(0, 1000), (800, 1800), (1600, 2500)]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(chunk_text(&doc_from_pages(&[""]), 1000, 200).unwrap().is_empty());
        let short = "y".repeat(500);
        assert_eq!(spans(&chunk_text(&doc_from_pages(&[&short]), 1000, 200).unwrap()), vec![(0, 500)]);
        assert!(matches!(
            chunk_text(&doc_from_pages(&["abc"]), 100, 100),
            Err(CorpusError::InvalidOverlap { .. })
        ));
    }

    #[test]
    fn boundary_snaps_back_to_whitespace() {
        // a space at index 979 lies inside the 64-char window before 1000
        let mut text = "a".repeat(2000);
        text.replace_range(979..980, " ");
        let chunks = chunk_text(&doc_from_pages(&[&text]), 1000, 200).unwrap();
        assert_eq!(chunks[0].char_span, (0, 980));
        assert_eq!(chunks[1].char_span.0, 780);

        // outside the window: no snap
        let mut text = "a".repeat(2000);
        text.replace_range(900..901, " ");
        let chunks = chunk_text(&doc_from_pages(&[&text]), 1000, 200).unwrap();
        assert_eq!(chunks[0].char_span, (0, 1000));
    }

    #[test]
    fn page_spans_follow_offsets() {
        let p1 = "a".repeat(600);
        let p2 = "b".repeat(600);
        let doc = doc_from_pages(&[&p1, &p2]);
        let chunks = chunk_text(&doc, 500, 100).unwrap();
        // page 1 owns [0, 602) including the separator
        assert_eq!(chunks[0].page_span, (1, 1));
        assert_eq!(chunks[1].page_span, (1, 2));
        assert_eq!(chunks.last().unwrap().page_span.1, 2);
    }

    #[test]
    fn chunk_ids_are_stable() {
        let doc = doc_from_pages(&["hello world ".repeat(200).as_str()]);
        let a = chunk_text(&doc, 300, 50).unwrap();
        let b = chunk_text(&doc, 300, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].chunk_id, chunk_id("d", a[0].char_span));
        let ids: HashSet<_> = a.iter().map(|c| &c.chunk_id).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn doc_ids_are_validated() {
        assert!(validate_doc_id("scime_2020").is_ok());
        assert!(validate_doc_id("../etc").is_err());
        assert!(validate_doc_id("").is_err());
    }

    proptest! {
        #[test]
        fn chunking_is_lossless(
            words in proptest::collection::vec("[a-z]{1,12}", 0..400),
            chunk_size in 20usize..400,
            overlap_frac in 0.0f64..0.9,
        ) {
            let overlap = ((chunk_size as f64) * overlap_frac) as usize;
            let text = words.join(" ");
            let doc = doc_from_pages(&[&text]);
            let chunks = chunk_text(&doc, chunk_size, overlap).unwrap();
            let chars: Vec<char> = text.chars().collect();

            // reconstruct with overlaps removed
            let mut rebuilt = String::new();
            for (i, c) in chunks.iter().enumerate() {
                prop_assert!(!c.text.is_empty() && c.text.chars().count() <= chunk_size);
                let skip = if i == 0 { 0 } else { overlap };
                rebuilt.extend(c.text.chars().skip(skip));
                if i > 0 {
                    prop_assert_eq!(chunks[i - 1].char_span.1 - c.char_span.0, overlap);
                }
                let expected: String = chars[c.char_span.0..c.char_span.1].iter().collect();
                prop_assert_eq!(&c.text, &expected);
            }
            prop_assert_eq!(rebuilt, text);
        }
    }
}
