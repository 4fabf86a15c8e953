//! On-disk index directory. All integers and floats are little-endian.
//!
//! | file            | contents                                                        |
//! |-----------------|-----------------------------------------------------------------|
//! | `meta.bin`      | magic, version, dim, `|C|`, id bits, seed, codec cuts and reps  |
//! | `centroids.bin` | `|C| · dim` f32, row-major                                      |
//! | `codes.bin`     | magic, id bits, dim, record bits, record count, packed records  |
//! | `ivf.bin`       | list count, then per list a varint length and delta-varint ids  |
//! | `passages.bin`  | passage count, then `(id u32, embedding count u32)` per passage |

use std::fs;
use std::path::Path;

use super::bitpack::PackedCodes;
use super::codec::{ResidualCodec, BUCKETS, CUTS};
use super::kmeans::CentroidTable;
use super::{CompressedIndex, PassageId};
use crate::error::{Error, Result};
use crate::io::{write_varint, ByteReader};

pub const INDEX_VERSION: u32 = 1;
pub const INDEX_FILES: [&str; 5] = [
    "meta.bin",
    "centroids.bin",
    "codes.bin",
    "ivf.bin",
    "passages.bin",
];

const META_MAGIC: &[u8; 8] = b"CXMIDX\0\0";
const CODES_MAGIC: &[u8; 8] = b"CXMCODE\0";
/// Bytes in `codes.bin` ahead of the packed records.
pub const CODES_HEADER_BYTES: usize = 8 + 4 + 4 + 4 + 8;

fn magic(r: &mut ByteReader, want: &[u8; 8], what: &str) -> Result<()> {
    if r.take(8)? != want {
        return Err(Error::Format(format!("{what}: bad magic")));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn codes_to_bytes(codes: &PackedCodes) -> Vec<u8> {
    let mut out = Vec::with_capacity(CODES_HEADER_BYTES + codes.bytes().len());
    out.extend_from_slice(CODES_MAGIC);
    out.extend_from_slice(&codes.id_bits().to_le_bytes());
    out.extend_from_slice(&(codes.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(codes.record_bits() as u32).to_le_bytes());
    out.extend_from_slice(&(codes.len() as u64).to_le_bytes());
    out.extend_from_slice(codes.bytes());
    out
}

pub(crate) fn codes_from_bytes(bytes: &[u8]) -> Result<PackedCodes> {
    let mut r = ByteReader::new(bytes, "codes.bin");
    magic(&mut r, CODES_MAGIC, "codes.bin")?;
    let id_bits = r.u32()?;
    let dim = r.u32()? as usize;
    let record_bits = r.u32()? as usize;
    let len = r.u64()? as usize;
    if id_bits > 32 {
        return Err(Error::Format(format!("codes.bin: id width {id_bits} too large")));
    }
    let packed = r.take(r.remaining())?.to_vec();
    let codes = PackedCodes::from_raw(id_bits, dim, len, packed)?;
    if codes.record_bits() != record_bits {
        return Err(Error::Format(format!(
            "codes.bin: header says {record_bits} bits per record, layout gives {}",
            codes.record_bits()
        )));
    }
    Ok(codes)
}

/// Writes packed codes as a standalone `codes.bin`; returns the file size.
pub fn write_codes_file(path: &Path, codes: &PackedCodes) -> Result<u64> {
    let bytes = codes_to_bytes(codes);
    write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_codes_file(path: &Path) -> Result<PackedCodes> {
    codes_from_bytes(&read(path)?)
}

impl CompressedIndex {
    /// Writes every file of [`INDEX_FILES`] into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dim = self.dim();

        let mut meta = Vec::new();
        meta.extend_from_slice(META_MAGIC);
        meta.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        meta.extend_from_slice(&(dim as u32).to_le_bytes());
        meta.extend_from_slice(&(self.centroids().count() as u32).to_le_bytes());
        meta.extend_from_slice(&self.centroids().id_bits().to_le_bytes());
        meta.extend_from_slice(&self.seed().to_le_bytes());
        for c in self.codec().cuts() {
            for v in c {
                meta.extend_from_slice(&v.to_le_bytes());
            }
        }
        for r in self.codec().representatives() {
            for v in r {
                meta.extend_from_slice(&v.to_le_bytes());
            }
        }
        write(&dir.join("meta.bin"), &meta)?;

        let centroids: Vec<u8> = self
            .centroids()
            .values()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write(&dir.join("centroids.bin"), &centroids)?;

        write(&dir.join("codes.bin"), &codes_to_bytes(self.codes()))?;

        let mut ivf = Vec::new();
        ivf.extend_from_slice(&(self.inverted_lists().len() as u32).to_le_bytes());
        for list in self.inverted_lists() {
            write_varint(&mut ivf, list.len() as u64);
            let mut prev = 0u32;
            for &e in list {
                write_varint(&mut ivf, (e - prev) as u64);
                prev = e;
            }
        }
        write(&dir.join("ivf.bin"), &ivf)?;

        let mut passages = Vec::new();
        passages.extend_from_slice(&(self.num_passages() as u64).to_le_bytes());
        for (slot, pid) in self.passage_ids().iter().enumerate() {
            let count = self.passage_offsets[slot + 1] - self.passage_offsets[slot];
            passages.extend_from_slice(&pid.0.to_le_bytes());
            passages.extend_from_slice(&(count as u32).to_le_bytes());
        }
        write(&dir.join("passages.bin"), &passages)
    }

    /// Loads an index written by [`CompressedIndex::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta = read(&dir.join("meta.bin"))?;
        let mut r = ByteReader::new(&meta, "meta.bin");
        magic(&mut r, META_MAGIC, "meta.bin")?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "meta.bin: unsupported version {version}"
            )));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let id_bits = r.u32()?;
        let seed = r.u64()?;
        let mut cuts = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut c = [0f32; CUTS];
            for v in &mut c {
                *v = r.f32()?;
            }
            cuts.push(c);
        }
        let mut reps = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut b = [0f32; BUCKETS];
            for v in &mut b {
                *v = r.f32()?;
            }
            reps.push(b);
        }
        r.finish()?;
        let codec = ResidualCodec::new(cuts, reps)?;

        let raw = read(&dir.join("centroids.bin"))?;
        if raw.len() != count * dim * 4 {
            return Err(Error::Format(format!(
                "centroids.bin: {} bytes, expected {}",
                raw.len(),
                count * dim * 4
            )));
        }
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect();
        let centroids = CentroidTable::new(dim, values)?;
        if centroids.id_bits() != id_bits {
            return Err(Error::Format("meta.bin: id width disagrees with |C|".into()));
        }

        let codes = read_codes_file(&dir.join("codes.bin"))?;

        let ivf = read(&dir.join("ivf.bin"))?;
        let mut r = ByteReader::new(&ivf, "ivf.bin");
        let lists = r.u32()? as usize;
        if lists != count {
            return Err(Error::Format(format!(
                "ivf.bin: {lists} lists for {count} centroids"
            )));
        }
        let mut inverted_lists = Vec::with_capacity(lists);
        for _ in 0..lists {
            let len = r.varint()? as usize;
            if len > codes.len() {
                return Err(Error::Format("ivf.bin: list longer than the index".into()));
            }
            let mut list = Vec::with_capacity(len);
            let mut prev = 0u64;
            for _ in 0..len {
                prev += r.varint()?;
                let id = u32::try_from(prev)
                    .map_err(|_| Error::Format("ivf.bin: embedding id overflow".into()))?;
                list.push(id);
            }
            inverted_lists.push(list);
        }
        r.finish()?;

        let raw = read(&dir.join("passages.bin"))?;
        let mut r = ByteReader::new(&raw, "passages.bin");
        let n = r.u64()? as usize;
        if n.saturating_mul(8) != r.remaining() {
            return Err(Error::Format("passages.bin: length mismatch".into()));
        }
        let mut passages = Vec::with_capacity(n);
        for _ in 0..n {
            passages.push((PassageId(r.u32()?), r.u32()? as usize));
        }
        r.finish()?;

        CompressedIndex::from_parts(centroids, codec, codes, inverted_lists, passages, seed)
    }
}
