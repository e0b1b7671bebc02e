//! Binary shard format (little-endian):
//!
//! ```text
//! header : "CTPT" | u32 version | u64 count
//! record : 96 x u32 ids | 96 x u8 mask | 96 x u8 segment | u8 n_predictions
//!          | 14 x u16 positions | 14 x u32 labels | 14 x f32 weights | u8 nsp
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use thiserror::Error;

use super::{NspLabel, PretrainExample};
use crate::{MAX_PREDICTIONS, SEQ_LEN};

pub const MAGIC: &[u8; 4] = b"CTPT";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;
pub const RECORD_BYTES: usize =
    SEQ_LEN * 4 + SEQ_LEN + SEQ_LEN + 1 + MAX_PREDICTIONS * (2 + 4 + 4) + 1;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("bad magic {found:?} at byte 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported shard version {found} at byte 4 (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated header: {len} bytes")]
    TruncatedHeader { len: u64 },
    #[error("truncated at record {record} (byte offset {offset})")]
    Truncated { record: u64, offset: u64 },
    #[error("corrupt record {record} at byte offset {offset}: {msg}")]
    Corrupt {
        record: u64,
        offset: u64,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn encode_record(ex: &PretrainExample, buf: &mut Vec<u8>) {
    buf.clear();
    for id in ex.input_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    buf.extend(ex.input_mask.iter().map(|&m| u8::from(m)));
    buf.extend_from_slice(&ex.segment_ids);
    buf.push(ex.num_predictions);
    for p in ex.masked_positions {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    for l in ex.masked_label_ids {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for w in ex.masked_weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.push(ex.nsp_label as u8);
    debug_assert_eq!(buf.len(), RECORD_BYTES);
}

fn decode_record(b: &[u8], record: u64, offset: u64) -> Result<PretrainExample, ShardError> {
    let corrupt = |msg: String| ShardError::Corrupt {
        record,
        offset,
        msg,
    };
    let mut at = 0;
    let mut take = |n: usize| {
        let s = &b[at..at + n];
        at += n;
        s
    };
    let mut input_ids = [0u32; SEQ_LEN];
    for (i, c) in take(SEQ_LEN * 4).chunks_exact(4).enumerate() {
        input_ids[i] = u32::from_le_bytes(c.try_into().unwrap());
    }
    let mut input_mask = [false; SEQ_LEN];
    for (i, &m) in take(SEQ_LEN).iter().enumerate() {
        input_mask[i] = match m {
            0 => false,
            1 => true,
            v => return Err(corrupt(format!("mask byte {v} at position {i}"))),
        };
    }
    let mut segment_ids = [0u8; SEQ_LEN];
    segment_ids.copy_from_slice(take(SEQ_LEN));
    if let Some(i) = segment_ids.iter().position(|&s| s > 1) {
        return Err(corrupt(format!(
            "segment id {} at position {i}",
            segment_ids[i]
        )));
    }
    let num_predictions = take(1)[0];
    if num_predictions as usize > MAX_PREDICTIONS {
        return Err(corrupt(format!("{num_predictions} predictions")));
    }
    let mut masked_positions = [0u16; MAX_PREDICTIONS];
    for (i, c) in take(MAX_PREDICTIONS * 2).chunks_exact(2).enumerate() {
        masked_positions[i] = u16::from_le_bytes(c.try_into().unwrap());
    }
    let mut masked_label_ids = [0u32; MAX_PREDICTIONS];
    for (i, c) in take(MAX_PREDICTIONS * 4).chunks_exact(4).enumerate() {
        masked_label_ids[i] = u32::from_le_bytes(c.try_into().unwrap());
    }
    let mut masked_weights = [0f32; MAX_PREDICTIONS];
    for (i, c) in take(MAX_PREDICTIONS * 4).chunks_exact(4).enumerate() {
        masked_weights[i] = f32::from_le_bytes(c.try_into().unwrap());
    }
    let nsp = take(1)[0];
    let nsp_label = NspLabel::from_u8(nsp).ok_or_else(|| corrupt(format!("nsp label {nsp}")))?;
    if let Some(&p) = masked_positions[..num_predictions as usize]
        .iter()
        .find(|&&p| p as usize >= SEQ_LEN)
    {
        return Err(corrupt(format!("masked position {p}")));
    }
    Ok(PretrainExample {
        input_ids,
        input_mask,
        segment_ids,
        num_predictions,
        masked_positions,
        masked_label_ids,
        masked_weights,
        nsp_label,
    })
}

/// Streams records into a shard; the header count is patched on `finish`.
pub struct ShardWriter {
    out: BufWriter<File>,
    count: u64,
    buf: Vec<u8>,
}

impl ShardWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(ShardWriter {
            out,
            count: 0,
            buf: Vec::with_capacity(RECORD_BYTES),
        })
    }

    pub fn write(&mut self, ex: &PretrainExample) -> io::Result<()> {
        encode_record(ex, &mut self.buf);
        self.out.write_all(&self.buf)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<u64> {
        self.out.seek(SeekFrom::Start(8))?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.count)
    }
}

pub fn write_shard(path: &Path, examples: &[PretrainExample]) -> io::Result<u64> {
    let mut w = ShardWriter::create(path)?;
    for ex in examples {
        w.write(ex)?;
    }
    w.finish()
}

/// Iterator over a shard's records.
pub struct ShardReader {
    input: BufReader<File>,
    count: u64,
    next: u64,
    buf: Vec<u8>,
    failed: bool,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self, ShardError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut header = [0u8; HEADER_BYTES];
        let len = input.get_ref().metadata()?.len();
        if len < HEADER_BYTES as u64 {
            return Err(ShardError::TruncatedHeader { len });
        }
        input.read_exact(&mut header)?;
        let magic: [u8; 4] = header[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(ShardError::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ShardError::Version { found: version });
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
        Ok(ShardReader {
            input,
            count,
            next: 0,
            buf: vec![0; RECORD_BYTES],
            failed: false,
        })
    }

    /// Record count from the header.
    pub fn header_count(&self) -> u64 {
        self.count
    }
}

impl Iterator for ShardReader {
    type Item = Result<PretrainExample, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.count {
            return None;
        }
        let record = self.next;
        let offset = HEADER_BYTES as u64 + record * RECORD_BYTES as u64;
        self.next += 1;
        let res = match self.input.read_exact(&mut self.buf) {
            Ok(()) => decode_record(&self.buf, record, offset),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(ShardError::Truncated { record, offset })
            }
            Err(e) => Err(e.into()),
        };
        self.failed = res.is_err();
        Some(res)
    }
}

/// Reads a whole shard into memory.
pub fn read_shard(path: &Path) -> Result<Vec<PretrainExample>, ShardError> {
    ShardReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(i: u32) -> PretrainExample {
        let mut ex = PretrainExample {
            input_ids: [0; SEQ_LEN],
            input_mask: [false; SEQ_LEN],
            segment_ids: [0; SEQ_LEN],
            num_predictions: 2,
            masked_positions: [0; MAX_PREDICTIONS],
            masked_label_ids: [0; MAX_PREDICTIONS],
            masked_weights: [0.0; MAX_PREDICTIONS],
            nsp_label: if i % 2 == 0 {
                NspLabel::IsNext
            } else {
                NspLabel::Random
            },
        };
        for p in 0..10 {
            ex.input_ids[p] = 5 + i + p as u32;
            ex.input_mask[p] = true;
            ex.segment_ids[p] = u8::from(p > 4);
        }
        ex.masked_positions[..2].copy_from_slice(&[1, 3]);
        ex.masked_label_ids[..2].copy_from_slice(&[7, 9 + i]);
        ex.masked_weights[..2].copy_from_slice(&[1.0, 1.0]);
        ex
    }

    #[test]
    fn record_size() {
        assert_eq!(RECORD_BYTES, 718);
    }

    #[test]
    fn round_trip_100() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.shard");
        let exs: Vec<_> = (0..100).map(example).collect();
        assert_eq!(write_shard(&path, &exs).unwrap(), 100);
        assert_eq!(read_shard(&path).unwrap(), exs);
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, (HEADER_BYTES + 100 * RECORD_BYTES) as u64);
    }

    #[test]
    fn empty_shard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.shard");
        write_shard(&path, &[]).unwrap();
        assert!(read_shard(&path).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.shard");
        let exs: Vec<_> = (0..10).map(example).collect();
        write_shard(&path, &exs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..HEADER_BYTES + 7 * RECORD_BYTES + 100]).unwrap();
        let results: Vec<_> = ShardReader::open(&path).unwrap().collect();
        assert_eq!(results.len(), 8);
        assert!(results[..7].iter().all(Result::is_ok));
        match &results[7] {
            Err(ShardError::Truncated { record, offset }) => {
                assert_eq!(*record, 7);
                assert_eq!(*offset, (HEADER_BYTES + 7 * RECORD_BYTES) as u64);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.shard");
        write_shard(&path, &[example(0)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ShardReader::open(&path),
            Err(ShardError::BadMagic { .. })
        ));
        bytes[0] = b'C';
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ShardReader::open(&path),
            Err(ShardError::Version { found: 2 })
        ));
        std::fs::write(&path, b"CTPT").unwrap();
        assert!(matches!(
            ShardReader::open(&path),
            Err(ShardError::TruncatedHeader { len: 4 })
        ));
    }

    #[test]
    fn corrupt_field_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.shard");
        write_shard(&path, &[example(0), example(1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let nsp_byte = HEADER_BYTES + 2 * RECORD_BYTES - 1;
        bytes[nsp_byte] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_shard(&path).unwrap_err();
        assert!(matches!(err, ShardError::Corrupt { record: 1, .. }));
    }
}
