//! On-disk feature archive.
//!
//! Two files side by side:
//!
//! - `features.bin` — concatenated records, each laid out as
//!   `[u32 id_len][id utf-8][u8 kind][u32 frames][u32 dims]`
//!   followed by `frames * dims` row-major little-endian `f32` values.
//!   All integers are little-endian.
//! - `features.idx` — TSV index: `id<TAB>byte_offset<TAB>frames<TAB>dims<TAB>kind`.
//!
//! The frame hop is fixed at 10 ms across the toolkit and is not stored.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{FeatureError, FeatureKind, FeatureMatrix};

pub const DATA_FILE: &str = "features.bin";
pub const INDEX_FILE: &str = "features.idx";
const HOP_MS: f64 = 10.0;

pub struct FeatureArchiveWriter {
    data: BufWriter<fs::File>,
    index: Vec<(String, u64, usize, usize, FeatureKind)>,
    offset: u64,
    dir: PathBuf,
}

impl FeatureArchiveWriter {
    pub fn create(dir: &Path) -> Result<Self, FeatureError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let data_path = dir.join(DATA_FILE);
        let data = BufWriter::new(fs::File::create(&data_path).map_err(|e| io_err(&data_path, e))?);
        Ok(FeatureArchiveWriter {
            data,
            index: Vec::new(),
            offset: 0,
            dir: dir.to_path_buf(),
        })
    }

    pub fn add(&mut self, id: &str, features: &FeatureMatrix) -> Result<(), FeatureError> {
        if (features.frame_hop_ms - HOP_MS).abs() > 1e-9 {
            return Err(FeatureError::Archive(format!(
                "archive stores 10 ms hop features, got {} ms",
                features.frame_hop_ms
            )));
        }
        if self.index.iter().any(|(i, ..)| i == id) {
            return Err(FeatureError::Archive(format!("duplicate id {id:?}")));
        }
        let mut buf: Vec<u8> = Vec::with_capacity(13 + id.len() + features.data.len() * 4);
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.push(features.kind.tag());
        buf.extend_from_slice(&(features.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(features.dims as u32).to_le_bytes());
        for &v in &features.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.data
            .write_all(&buf)
            .map_err(|e| io_err(&self.dir.join(DATA_FILE), e))?;
        self.index.push((
            id.to_string(),
            self.offset,
            features.frames,
            features.dims,
            features.kind,
        ));
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn finalize(mut self) -> Result<(), FeatureError> {
        self.data
            .flush()
            .map_err(|e| io_err(&self.dir.join(DATA_FILE), e))?;
        let mut out = String::new();
        for (id, off, frames, dims, kind) in &self.index {
            out.push_str(&format!(
                "{id}\t{off}\t{frames}\t{dims}\t{}\n",
                kind.as_str()
            ));
        }
        let idx_path = self.dir.join(INDEX_FILE);
        fs::write(&idx_path, out).map_err(|e| io_err(&idx_path, e))
    }
}

pub struct FeatureArchiveReader {
    data_path: PathBuf,
    entries: BTreeMap<String, u64>,
    order: Vec<String>,
}

impl FeatureArchiveReader {
    pub fn open(dir: &Path) -> Result<Self, FeatureError> {
        let idx_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&idx_path).map_err(|e| io_err(&idx_path, e))?;
        let mut entries = BTreeMap::new();
        let mut order = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(FeatureError::Archive(format!(
                    "index row {}: expected 5 columns",
                    lineno + 1
                )));
            }
            let off: u64 = cols[1]
                .parse()
                .map_err(|_| FeatureError::Archive(format!("index row {}: bad offset", lineno + 1)))?;
            entries.insert(cols[0].to_string(), off);
            order.push(cols[0].to_string());
        }
        Ok(FeatureArchiveReader {
            data_path: dir.join(DATA_FILE),
            entries,
            order,
        })
    }

    /// Ids in index (write) order.
    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<FeatureMatrix, FeatureError> {
        let &off = self
            .entries
            .get(id)
            .ok_or_else(|| FeatureError::Archive(format!("id {id:?} not in archive")))?;
        let mut file = fs::File::open(&self.data_path).map_err(|e| io_err(&self.data_path, e))?;
        file.seek(SeekFrom::Start(off))
            .map_err(|e| io_err(&self.data_path, e))?;
        let mut head = [0u8; 4];
        file.read_exact(&mut head).map_err(|e| io_err(&self.data_path, e))?;
        let id_len = u32::from_le_bytes(head) as usize;
        let mut id_buf = vec![0u8; id_len];
        file.read_exact(&mut id_buf).map_err(|e| io_err(&self.data_path, e))?;
        let stored_id = String::from_utf8(id_buf)
            .map_err(|_| FeatureError::Archive("record id is not utf-8".into()))?;
        if stored_id != id {
            return Err(FeatureError::Archive(format!(
                "index out of sync: wanted {id:?}, found {stored_id:?}"
            )));
        }
        let mut meta = [0u8; 9];
        file.read_exact(&mut meta).map_err(|e| io_err(&self.data_path, e))?;
        let kind = FeatureKind::from_tag(meta[0])
            .ok_or_else(|| FeatureError::Archive(format!("unknown kind tag {}", meta[0])))?;
        let frames = u32::from_le_bytes([meta[1], meta[2], meta[3], meta[4]]) as usize;
        let dims = u32::from_le_bytes([meta[5], meta[6], meta[7], meta[8]]) as usize;
        let mut payload = vec![0u8; frames * dims * 4];
        file.read_exact(&mut payload).map_err(|e| io_err(&self.data_path, e))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        FeatureMatrix::new(kind, HOP_MS, frames, dims, data)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(frames: usize, kind: FeatureKind, scale: f64) -> FeatureMatrix {
        let dims = kind.dims();
        let data: Vec<f64> = (0..frames * dims)
            .map(|i| ((i % 97) as f64 - 48.0) * scale)
            .collect();
        FeatureMatrix::new(kind, 10.0, frames, dims, data).unwrap()
    }

    #[test]
    fn roundtrip_preserves_f32_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = FeatureArchiveWriter::create(dir.path()).unwrap();
        let a = matrix(31, FeatureKind::Mfcc40, 0.125);
        let b = matrix(7, FeatureKind::Plp20, 0.5);
        w.add("utt-a", &a).unwrap();
        w.add("utt-b", &b).unwrap();
        w.finalize().unwrap();

        let r = FeatureArchiveReader::open(dir.path()).unwrap();
        assert_eq!(r.ids(), &["utt-a".to_string(), "utt-b".to_string()]);
        let a2 = r.get("utt-a").unwrap();
        assert_eq!(a2.kind, FeatureKind::Mfcc40);
        assert_eq!(a2.frames, 31);
        // values chosen exactly representable in f32
        assert_eq!(a2.data, a.data);
        let b2 = r.get("utt-b").unwrap();
        assert_eq!(b2.data, b.data);
    }

    #[test]
    fn missing_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let w = FeatureArchiveWriter::create(dir.path()).unwrap();
        w.finalize().unwrap();
        let r = FeatureArchiveReader::open(dir.path()).unwrap();
        assert!(r.get("nope").is_err());
    }

    #[test]
    fn duplicate_id_rejected_at_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = FeatureArchiveWriter::create(dir.path()).unwrap();
        let a = matrix(3, FeatureKind::Plp20, 1.0);
        w.add("x", &a).unwrap();
        assert!(w.add("x", &a).is_err());
    }
}
