//! `EVT1` little-endian event container.
//!
//! Header (16 bytes): magic `EVT1`, height `u16`, width `u16`, count `u64`.
//! Each record (16 bytes): `t: u64`, `x: u16`, `y: u16`, `polarity: i8`,
//! three zero bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVT1";
pub const HEADER_BYTES: u64 = 16;
pub const RECORD_BYTES: u64 = 16;

pub fn write_events<W: Write>(stream: &EventStream, mut out: W) -> std::io::Result<u64> {
    let mut header = [0u8; HEADER_BYTES as usize];
    header[0..4].copy_from_slice(MAGIC);
    header[4..6].copy_from_slice(&(stream.height() as u16).to_le_bytes());
    header[6..8].copy_from_slice(&(stream.width() as u16).to_le_bytes());
    header[8..16].copy_from_slice(&(stream.len() as u64).to_le_bytes());
    out.write_all(&header)?;
    let mut rec = [0u8; RECORD_BYTES as usize];
    for e in stream.events() {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.polarity.sign() as u8;
        out.write_all(&rec)?;
    }
    out.flush()?;
    Ok(HEADER_BYTES + RECORD_BYTES * stream.len() as u64)
}

pub fn read_events<R: Read>(mut input: R) -> Result<EventStream> {
    let mut header = [0u8; HEADER_BYTES as usize];
    read_exact_at(&mut input, &mut header, 0)?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", &header[0..4]),
        });
    }
    let height = u16::from_le_bytes([header[4], header[5]]) as usize;
    let width = u16::from_le_bytes([header[6], header[7]]) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());

    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD_BYTES as usize];
    let mut prev: Option<Event> = None;
    for i in 0..count {
        let offset = HEADER_BYTES + i * RECORD_BYTES;
        read_exact_at(&mut input, &mut rec, offset)?;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        if x as usize >= width || y as usize >= height {
            return Err(Error::Format {
                offset: offset + 8,
                message: format!("event ({x}, {y}) outside {height}x{width} sensor"),
            });
        }
        let polarity = Polarity::from_sign(rec[12] as i8).ok_or_else(|| Error::Format {
            offset: offset + 12,
            message: format!("invalid polarity byte {}", rec[12] as i8),
        })?;
        let e = Event::new(t, x, y, polarity);
        if let Some(p) = prev {
            if p.canonical_cmp(&e).is_gt() {
                return Err(Error::Format {
                    offset,
                    message: "events not in canonical order".into(),
                });
            }
        }
        prev = Some(e);
        events.push(e);
    }
    Ok(EventStream::from_sorted_unchecked(height, width, events))
}

fn read_exact_at<R: Read>(input: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format {
            offset,
            message: format!("truncated: expected {} more bytes", buf.len()),
        },
        _ => Error::Format {
            offset,
            message: e.to_string(),
        },
    })
}

pub fn write_events_file(stream: &EventStream, path: &Path) -> Result<u64> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_events(stream, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_events_file(path: &Path) -> Result<EventStream> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(BufReader::new(f))
}
