//! `len u32 LE | crc32 u32 LE | payload` framing shared by logs and queues.

use super::StorageError;

pub const HEADER: usize = 8;
pub const EPOCH_MARKER: u8 = 0xFF;

pub fn encode(payload: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn epoch_marker(epoch: u64) -> Vec<u8> {
    let mut payload = vec![EPOCH_MARKER];
    payload.extend_from_slice(&epoch.to_le_bytes());
    let mut out = Vec::new();
    encode(&payload, &mut out);
    out
}

#[derive(Debug, Default)]
pub struct Decoded<'a> {
    /// (byte offset of the frame, payload)
    pub frames: Vec<(u64, &'a [u8])>,
    /// Bytes covered by intact frames; anything after is a torn tail.
    pub valid_len: u64,
}

/// Splits `data` into frames. A short or checksum-failing final frame is
/// treated as a torn write and dropped; a bad frame followed by more data is
/// corruption.
pub fn decode<'a>(blob: &str, data: &'a [u8]) -> Result<Decoded<'a>, StorageError> {
    let mut out = Decoded::default();
    let mut off = 0usize;
    while data.len() - off >= HEADER {
        let len = u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap());
        let end = off + HEADER + len;
        if end > data.len() {
            break;
        }
        let payload = &data[off + HEADER..end];
        if crc32fast::hash(payload) != crc {
            if end == data.len() {
                break;
            }
            return Err(StorageError::CorruptLog { blob: blob.to_string(), offset: off as u64 });
        }
        out.frames.push((off as u64, payload));
        off = end;
    }
    out.valid_len = off as u64;
    Ok(out)
}
