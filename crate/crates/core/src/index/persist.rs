//! Binary index file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "PBFIDX1"            7 bytes
//! dim     u32
//! count   u64
//! entry*  u32 length, then:
//!           entry_id   u32 len + utf-8
//!           kind       u8 (0 = text_chunk, 1 = page_image_proxy)
//!           payload    text_chunk: u32 len + chunk_id
//!                      page:       u32 len + doc_id, u32 page_no
//!           vector     dim x f64
//! ```

use std::io::Write;
use std::path::Path;

use super::{EmbeddingVector, EntryKind, IndexEntry, IndexError, PayloadRef, Result, VectorIndex};

pub const MAGIC: &[u8; 7] = b"PBFIDX1";
const MAGIC_PREFIX: &[u8; 6] = b"PBFIDX";

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(index: &VectorIndex) -> Vec<u8> {
    let dim = index.dim().unwrap_or(0);
    let mut out = Vec::with_capacity(19 + index.len() * (dim * 8 + 64));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    let mut body = Vec::new();
    for entry in index.entries() {
        body.clear();
        put_str(&mut body, &entry.entry_id);
        match &entry.payload_ref {
            PayloadRef::Chunk { chunk_id } => {
                body.push(0);
                put_str(&mut body, chunk_id);
            }
            PayloadRef::Page { doc_id, page_no } => {
                body.push(1);
                put_str(&mut body, doc_id);
                body.extend_from_slice(&page_no.to_le_bytes());
            }
        }
        for v in entry.vector.values() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(IndexError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IndexError::Corrupt("invalid utf-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<VectorIndex> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            IndexError::Truncated
        } else {
            IndexError::BadMagic
        });
    }
    let (magic, rest) = bytes.split_at(MAGIC.len());
    if magic != MAGIC {
        if magic.starts_with(MAGIC_PREFIX) {
            return Err(IndexError::VersionMismatch(
                String::from_utf8_lossy(&magic[MAGIC_PREFIX.len()..]).into_owned(),
            ));
        }
        return Err(IndexError::BadMagic);
    }
    let mut r = Reader { buf: rest };
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if count > 0 && dim == 0 {
        return Err(IndexError::Corrupt("entries with zero dimension".into()));
    }
    let mut index = if count == 0 && dim == 0 {
        VectorIndex::new()
    } else {
        VectorIndex::with_dim(dim)
    };
    for _ in 0..count {
        let len = r.u32()? as usize;
        let mut er = Reader { buf: r.take(len)? };
        let entry_id = er.string()?;
        let payload_ref = match er.u8()? {
            0 => PayloadRef::Chunk {
                chunk_id: er.string()?,
            },
            1 => PayloadRef::Page {
                doc_id: er.string()?,
                page_no: er.u32()?,
            },
            other => return Err(IndexError::Corrupt(format!("unknown entry kind {other}"))),
        };
        let values = (0..dim).map(|_| er.f64()).collect::<Result<Vec<_>>>()?;
        if !er.buf.is_empty() {
            return Err(IndexError::Corrupt(format!("trailing bytes in entry `{entry_id}`")));
        }
        let kind: EntryKind = payload_ref.kind();
        index.upsert(IndexEntry {
            entry_id,
            vector: EmbeddingVector::new(values)
                .map_err(|e| IndexError::Corrupt(e.to_string()))?,
            kind,
            payload_ref,
        })?;
    }
    if !r.buf.is_empty() {
        return Err(IndexError::Corrupt("trailing bytes after last entry".into()));
    }
    if index.len() as u64 != count {
        return Err(IndexError::Corrupt("duplicate entry ids".into()));
    }
    Ok(index)
}

/// Writes through a sibling temp file and renames it into place.
pub fn save_index(index: &VectorIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(index))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<VectorIndex> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_index(n: usize) -> VectorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut idx = VectorIndex::new();
        for i in 0..n {
            let values: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let vec = EmbeddingVector::new(values).unwrap();
            let e = if i % 2 == 0 {
                IndexEntry::text_chunk(&format!("chunk{i}"), vec)
            } else {
                IndexEntry::page(&format!("doc{}", i % 5), i as u32, vec)
            };
            idx.upsert(e).unwrap();
        }
        idx
    }

    #[test]
    fn round_trip_answers_queries_identically() {
        let idx = sample_index(50);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        save_index(&idx, &path).unwrap();
        let loaded = load_index(&path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let q: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = EmbeddingVector::new(q).unwrap();
            let before = idx.query_top_k(&q, 50, None).unwrap();
            let after = loaded.query_top_k(&q, 50, None).unwrap();
            assert_eq!(before.len(), after.len());
            for (a, b) in before.iter().zip(&after) {
                assert_eq!(a.entry_id, b.entry_id);
                assert_eq!(a.score.to_bits(), b.score.to_bits());
                assert_eq!(a.payload_ref, b.payload_ref);
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_index(3));
        assert_eq!(&bytes[..7], b"PBFIDX1");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 12);
        assert_eq!(u64::from_le_bytes(bytes[11..19].try_into().unwrap()), 3);
    }

    #[test]
    fn empty_index_round_trips() {
        let idx = VectorIndex::new();
        let back = decode(&encode(&idx)).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), None);
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(decode(b""), Err(IndexError::Truncated)));
        assert!(matches!(decode(b"GARBAGE-FILE"), Err(IndexError::BadMagic)));
        let mut v2 = encode(&sample_index(2));
        v2[6] = b'2';
        assert!(matches!(decode(&v2), Err(IndexError::VersionMismatch(v)) if v == "2"));
        let full = encode(&sample_index(4));
        for cut in [10, 19, 40, full.len() - 1] {
            assert!(
                matches!(decode(&full[..cut]), Err(IndexError::Truncated)),
                "cut at {cut}"
            );
        }
        let mut extra = full.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(IndexError::Corrupt(_))));
    }

    #[test]
    fn load_empty_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(load_index(&p), Err(IndexError::Truncated)));
    }

    #[cfg(unix)]
    #[test]
    fn save_to_read_only_location_is_io_error() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        std::fs::create_dir(&ro).unwrap();
        std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o555)).unwrap();
        let res = save_index(&sample_index(2), ro.join("index.bin"));
        std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o755)).unwrap();
        // root ignores directory permissions; fall back to a path under a regular file
        match res {
            Err(IndexError::Io(_)) => {}
            Ok(()) => {
                let file = dir.path().join("plain");
                std::fs::write(&file, b"x").unwrap();
                assert!(matches!(
                    save_index(&sample_index(2), file.join("index.bin")),
                    Err(IndexError::Io(_))
                ));
            }
            Err(other) => panic!("unexpected {other:?}"),
        }
    }
}
