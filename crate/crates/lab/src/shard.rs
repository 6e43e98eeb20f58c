//! CBLS shard files: a 5-byte magic, length-prefixed records, and a footer
//! holding the record count.
//!
//! Record body (little endian): `u64 pair_id`, `u32 width`, `u32 height`,
//! `u32 caption_len`, caption bytes, `u8 has_score`, optional `f64 score`,
//! then `width * height * 3` RGB bytes. The footer is the sentinel length
//! `0xFFFF_FFFF` followed by `u64 record_count`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use clip_lab_core::data::image::RgbImage;
use clip_lab_core::data::ImageTextPair;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 5] = b"CBLS\x01";
const FOOTER: u32 = u32::MAX;

/// A record that framed correctly but could not be decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub shard: String,
    pub record: u64,
    pub pair_id: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShardContents {
    pub pairs: Vec<ImageTextPair>,
    pub skipped: Vec<SkipRecord>,
}

pub fn encode_record(pair: &ImageTextPair) -> Vec<u8> {
    let caption = pair.caption.as_bytes();
    let mut body = Vec::with_capacity(29 + caption.len() + pair.image.data.len());
    body.extend_from_slice(&pair.pair_id.to_le_bytes());
    body.extend_from_slice(&(pair.image.width as u32).to_le_bytes());
    body.extend_from_slice(&(pair.image.height as u32).to_le_bytes());
    body.extend_from_slice(&(caption.len() as u32).to_le_bytes());
    body.extend_from_slice(caption);
    match pair.quality_score {
        Some(s) => {
            body.push(1);
            body.extend_from_slice(&s.to_le_bytes());
        }
        None => body.push(0),
    }
    body.extend_from_slice(&pair.image.data);
    body
}

/// Writes `pairs` in order and returns the record count.
pub fn write_shard<'a>(path: &Path, pairs: impl IntoIterator<Item = &'a ImageTextPair>) -> Result<u64> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::error::create_dir(dir)?;
    }
    let io = |e| LabError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    let mut count = 0u64;
    for pair in pairs {
        let body = encode_record(pair);
        w.write_all(&(body.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&body).map_err(io)?;
        count += 1;
    }
    w.write_all(&FOOTER.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(count)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.buf.get(self.at..self.at + n)?;
        self.at += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Decodes one record body. `Err` carries the pair id (when readable) and why the record is unusable.
pub fn decode_record(body: &[u8]) -> std::result::Result<ImageTextPair, (u64, String)> {
    let mut c = Cursor { buf: body, at: 0 };
    let id = c.u64().ok_or((0, "record too short for a pair id".to_string()))?;
    let bad = |why: &str| (id, why.to_string());
    let width = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let height = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let cap_len = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let caption = c.take(cap_len).ok_or_else(|| bad("truncated caption"))?;
    let caption = std::str::from_utf8(caption).map_err(|_| bad("caption is not UTF-8"))?.to_string();
    let quality_score = match c.take(1).ok_or_else(|| bad("missing score flag"))?[0] {
        0 => None,
        1 => Some(f64::from_le_bytes(c.take(8).ok_or_else(|| bad("truncated score"))?.try_into().unwrap())),
        f => return Err(bad(&format!("unknown score flag {f}"))),
    };
    let pixels = &body[c.at..];
    let image = RgbImage::new(width, height, pixels.to_vec()).map_err(|e| bad(&e.to_string()))?;
    if width == 0 || height == 0 {
        return Err(bad("image has no pixels"));
    }
    Ok(ImageTextPair { pair_id: id, image, caption, quality_score })
}

/// Reads every record; undecodable records are skipped and reported, broken framing is a format error.
pub fn read_shard(path: &Path) -> Result<ShardContents> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| LabError::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| LabError::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LabError::format(path, "missing CBLS v1 header"));
    }
    let mut c = Cursor { buf: &bytes, at: MAGIC.len() };
    let mut out = ShardContents::default();
    let name = path.display().to_string();
    let mut index = 0u64;
    loop {
        let len = c.u32().ok_or_else(|| LabError::format(path, "truncated before footer"))?;
        if len == FOOTER {
            let count = c.u64().ok_or_else(|| LabError::format(path, "truncated footer"))?;
            if count != index {
                return Err(LabError::format(path, format!("footer counts {count} records but {index} were read")));
            }
            if c.at != bytes.len() {
                return Err(LabError::format(path, "trailing bytes after footer"));
            }
            return Ok(out);
        }
        let body = c.take(len as usize).ok_or_else(|| LabError::format(path, format!("record {index} is truncated")))?;
        match decode_record(body) {
            Ok(pair) => out.pairs.push(pair),
            Err((pair_id, reason)) => out.skipped.push(SkipRecord { shard: name.clone(), record: index, pair_id, reason }),
        }
        index += 1;
    }
}
