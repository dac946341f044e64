//! Feature archive: a binary file of records `(u32 id length, id bytes,
//! u32 frames, u32 dim, frames·dim f32)`, all little endian, plus a JSONL
//! index with the byte offset of each record.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use u2kws_nn::Tensor;

use crate::error::{KwsError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: String,
    pub offset: u64,
    pub frames: usize,
    pub dim: usize,
}

pub struct ArchiveWriter {
    data: BufWriter<File>,
    index: BufWriter<File>,
    offset: u64,
}

impl ArchiveWriter {
    pub fn create(data: &Path, index: &Path) -> Result<Self> {
        Ok(ArchiveWriter {
            data: BufWriter::new(File::create(data)?),
            index: BufWriter::new(File::create(index)?),
            offset: 0,
        })
    }

    pub fn write(&mut self, id: &str, frames: &Tensor<f32>) -> Result<ArchiveEntry> {
        let entry = ArchiveEntry {
            id: id.to_string(),
            offset: self.offset,
            frames: frames.rows(),
            dim: frames.cols(),
        };
        let mut buf = Vec::with_capacity(12 + id.len() + 4 * frames.len());
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
        for v in frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.data.write_all(&buf)?;
        self.offset += buf.len() as u64;
        serde_json::to_writer(&mut self.index, &entry)?;
        self.index.write_all(b"\n")?;
        Ok(entry)
    }

    pub fn finish(mut self) -> Result<()> {
        self.data.flush()?;
        self.index.flush()?;
        Ok(())
    }
}

pub fn read_index(index: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(index)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn read_record(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let mut id = vec![0u8; u32::from_le_bytes(u) as usize];
    r.read_exact(&mut id)?;
    let id = String::from_utf8(id).map_err(|e| KwsError::Manifest(e.to_string()))?;
    r.read_exact(&mut u)?;
    let rows = u32::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let cols = u32::from_le_bytes(u) as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((id, Tensor::from_vec(rows, cols, data)?))
}

/// Random access by id.
pub struct ArchiveReader {
    file: BufReader<File>,
    entries: HashMap<String, ArchiveEntry>,
}

impl ArchiveReader {
    pub fn open(data: &Path, index: &Path) -> Result<Self> {
        let entries = read_index(index)?
            .into_iter()
            .map(|e| (e.id.clone(), e))
            .collect();
        Ok(ArchiveReader {
            file: BufReader::new(File::open(data)?),
            entries,
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&mut self, id: &str) -> Result<Tensor<f32>> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| KwsError::Manifest(format!("utterance `{id}` not in archive")))?;
        let (frames, dim, offset) = (e.frames, e.dim, e.offset);
        self.file.seek(SeekFrom::Start(offset))?;
        let (got, t) = read_record(&mut self.file)?;
        if got != id || t.shape() != [frames, dim] {
            return Err(KwsError::Manifest(format!(
                "archive record for `{id}` is corrupt"
            )));
        }
        Ok(t)
    }
}
