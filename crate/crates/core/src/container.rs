//! Binary record container shared by dataset shards and checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header (48 bytes)
//!   0  magic        "MPTD"
//!   4  version      u32 = 1
//!   8  kind         u32   1 = dataset shard, 2 = checkpoint
//!  12  joints       u32   K
//!  16  coarse       u32   M_coarse
//!  20  full         u32   M_full
//!  24  records      u64
//!  32  global_seed  u64
//!  40  rig_crc      u32   CRC32 of the rig record payload (0 if none)
//!  44  header_crc   u32   CRC32 of bytes 0..44
//! record
//!   tag     [u8; 4]  ASCII
//!   length  u32      payload bytes
//!   payload
//!   crc     u32      CRC32 of tag, length and payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MPTD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;

/// Record tags.
pub mod tag {
    /// One heatmap-mesh pair.
    pub const PAIR: [u8; 4] = *b"PAIR";
    /// Camera rig.
    pub const RIG: [u8; 4] = *b"RIG_";
    /// Named tensor.
    pub const TENSOR: [u8; 4] = *b"TENS";
    /// `key = value` configuration text.
    pub const CONFIG: [u8; 4] = *b"CONF";
    /// Training progress counters.
    pub const STEP: [u8; 4] = *b"STEP";
    /// Free-form `key = value` metadata.
    pub const META: [u8; 4] = *b"META";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Shard = 1,
    Checkpoint = 2,
}

impl FileKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(FileKind::Shard),
            2 => Some(FileKind::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: FileKind,
    pub joints: u32,
    pub coarse_vertices: u32,
    pub full_vertices: u32,
    pub record_count: u64,
    pub global_seed: u64,
    pub rig_crc: u32,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&(self.kind as u32).to_le_bytes());
        b[12..16].copy_from_slice(&self.joints.to_le_bytes());
        b[16..20].copy_from_slice(&self.coarse_vertices.to_le_bytes());
        b[20..24].copy_from_slice(&self.full_vertices.to_le_bytes());
        b[24..32].copy_from_slice(&self.record_count.to_le_bytes());
        b[32..40].copy_from_slice(&self.global_seed.to_le_bytes());
        b[40..44].copy_from_slice(&self.rig_crc.to_le_bytes());
        let crc = crc32fast::hash(&b[0..44]);
        b[44..48].copy_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8], path: &Path) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::format(path, format!("header needs {HEADER_LEN} bytes, file has {}", b.len())));
        }
        if b[0..4] != MAGIC {
            return Err(Error::format(path, format!("bad magic {:?}", &b[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let crc = crc32fast::hash(&b[0..44]);
        if crc != u32_at(44) {
            return Err(Error::format(path, "header checksum mismatch"));
        }
        let kind = FileKind::from_u32(u32_at(8)).ok_or_else(|| Error::format(path, format!("unknown file kind {}", u32_at(8))))?;
        Ok(Self {
            kind,
            joints: u32_at(12),
            coarse_vertices: u32_at(16),
            full_vertices: u32_at(20),
            record_count: u64_at(24),
            global_seed: u64_at(32),
            rig_crc: u32_at(40),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

impl Record {
    pub fn new(tag: [u8; 4], payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }

    fn crc(tag: &[u8; 4], len: u32, payload: &[u8]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(tag);
        h.update(&len.to_le_bytes());
        h.update(payload);
        h.finalize()
    }

    /// Byte offset of record `index`'s first byte is tracked by the reader;
    /// this is the encoded size.
    pub fn encoded_len(&self) -> usize {
        12 + self.payload.len()
    }
}

/// Streams records to a file and patches the header count on
/// [`finish`](Self::finish).
pub struct ContainerWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: Header,
    count: u64,
}

impl ContainerWriter {
    pub fn create(path: impl AsRef<Path>, header: Header) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out,
            header,
            count: 0,
        })
    }

    pub fn push(&mut self, record: &Record) -> Result<()> {
        let len = u32::try_from(record.payload.len())
            .map_err(|_| Error::format(&self.path, format!("record payload of {} bytes is too large", record.payload.len())))?;
        let crc = Record::crc(&record.tag, len, &record.payload);
        let io = |e| Error::io(&self.path, e);
        self.out.write_all(&record.tag).map_err(io)?;
        self.out.write_all(&len.to_le_bytes()).map_err(io)?;
        self.out.write_all(&record.payload).map_err(io)?;
        self.out.write_all(&crc.to_le_bytes()).map_err(io)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<Header> {
        self.header.record_count = self.count;
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        self.out.flush().map_err(io)?;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(0)).map_err(io)?;
        file.write_all(&self.header.encode()).map_err(io)?;
        file.sync_all().map_err(io)?;
        Ok(self.header)
    }
}

/// Write a whole container at once.
pub fn write_container(path: impl AsRef<Path>, header: Header, records: &[Record]) -> Result<Header> {
    let mut w = ContainerWriter::create(path, header)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Sequential reader. Each item is one record or the reason it could not be
/// decoded; a checksum failure does not stop iteration, a truncated file does.
pub struct ContainerReader {
    path: PathBuf,
    input: BufReader<File>,
    header: Header,
    index: u64,
    offset: u64,
    done: bool,
}

impl ContainerReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let mut b = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            let n = input.read(&mut b[got..]).map_err(|e| Error::io(&path, e))?;
            if n == 0 {
                break;
            }
            got += n;
        }
        let header = Header::decode(&b[..got], &path)?;
        Ok(Self {
            path,
            input,
            header,
            index: 0,
            offset: HEADER_LEN as u64,
            done: false,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.input.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(&self.path, format!("record {} truncated in {what} at byte {}", self.index, self.offset))
            } else {
                Error::io(&self.path, e)
            }
        })
    }

    fn next_record(&mut self) -> Result<Record> {
        let mut head = [0u8; 8];
        self.read_exact(&mut head, "header")?;
        let tag: [u8; 4] = head[0..4].try_into().expect("4 bytes");
        let len = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        let mut payload = vec![0u8; len as usize];
        self.read_exact(&mut payload, "payload")?;
        let mut crc = [0u8; 4];
        self.read_exact(&mut crc, "checksum")?;
        let start = self.offset;
        self.offset += 12 + len as u64;
        if u32::from_le_bytes(crc) != Record::crc(&tag, len, &payload) {
            return Err(Error::format(
                &self.path,
                format!("record {} at byte {start}: checksum mismatch", self.index),
            ));
        }
        Ok(Record { tag, payload })
    }
}

impl Iterator for ContainerReader {
    type Item = (u64, Result<Record>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.index >= self.header.record_count {
            return None;
        }
        let i = self.index;
        let r = self.next_record();
        if let Err(Error::Format { message, .. }) = &r {
            if !message.contains("checksum") {
                self.done = true;
            }
        } else if r.is_err() {
            self.done = true;
        }
        self.index += 1;
        Some((i, r))
    }
}

/// Where one record lives in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordLocation {
    pub tag: [u8; 4],
    /// Offset of the record's tag.
    pub offset: u64,
    pub payload_len: u32,
}

/// Read the header and the location of every record without reading
/// payloads or checking record checksums.
pub fn scan(path: impl AsRef<Path>) -> Result<(Header, Vec<RecordLocation>)> {
    let path = path.as_ref();
    let mut r = ContainerReader::open(path)?;
    let total = r.input.get_ref().metadata().map_err(|e| Error::io(path, e))?.len();
    let mut locations = Vec::with_capacity(r.header.record_count.min(1 << 20) as usize);
    let mut offset = HEADER_LEN as u64;
    for i in 0..r.header.record_count {
        let mut head = [0u8; 8];
        r.input.read_exact(&mut head).map_err(|_| {
            Error::format(path, format!("header promises {} records, file ends before record {i} at byte {offset}", r.header.record_count))
        })?;
        let tag: [u8; 4] = head[0..4].try_into().expect("4 bytes");
        let payload_len = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        let end = offset + 12 + payload_len as u64;
        if end > total {
            return Err(Error::format(path, format!("record {i} at byte {offset} runs past the end of the file ({end} > {total})")));
        }
        r.input.seek_relative(payload_len as i64 + 4).map_err(|e| Error::io(path, e))?;
        locations.push(RecordLocation { tag, offset, payload_len });
        offset = end;
    }
    if offset != total {
        return Err(Error::format(path, format!("{} trailing bytes after record {}", total - offset, r.header.record_count)));
    }
    Ok((r.header, locations))
}

/// Read and checksum one record at a known location.
pub fn read_at<F: Read + Seek>(file: &mut F, location: &RecordLocation, path: &Path) -> Result<Record> {
    let len = location.payload_len as usize;
    let mut buf = vec![0u8; 12 + len];
    file.seek(SeekFrom::Start(location.offset)).map_err(|e| Error::io(path, e))?;
    file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let tag: [u8; 4] = buf[0..4].try_into().expect("4 bytes");
    let stored_len = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    let crc = u32::from_le_bytes(buf[8 + len..].try_into().expect("4 bytes"));
    if tag != location.tag || stored_len != location.payload_len || crc != Record::crc(&tag, stored_len, &buf[8..8 + len]) {
        return Err(Error::format(path, format!("record at byte {}: checksum mismatch", location.offset)));
    }
    buf.truncate(8 + len);
    buf.drain(0..8);
    Ok(Record { tag, payload: buf })
}

/// Little-endian payload builder.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        for x in v {
            self.f32(*x);
        }
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// `u32` length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32).bytes(s.as_bytes())
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Little-endian payload cursor; errors carry the byte offset.
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                "<payload>",
                format!("need {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::format("<payload>", "length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format("<payload>", "invalid UTF-8 string"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format("<payload>", format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
