use std::io::{self, Read, Write};

use spikesplit_core::spike::{packed_len, SpikeTensor};
use spikesplit_core::{Shape5, Tensor};

use crate::{Result, WireError};

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;
pub const CHECKSUM_LEN: usize = 4;
/// Largest payload a reader accepts.
pub const MAX_PAYLOAD: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Spikes,
    Logits,
    Error,
}

impl FrameKind {
    pub const fn magic(self) -> [u8; 4] {
        match self {
            Self::Spikes => *b"SPKF",
            Self::Logits => *b"SPKL",
            Self::Error => *b"SPKE",
        }
    }

    fn from_magic(m: [u8; 4]) -> Option<Self> {
        [Self::Spikes, Self::Logits, Self::Error]
            .into_iter()
            .find(|k| k.magic() == m)
    }
}

/// First payload byte of an error frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    BadMagic = 1,
    VersionMismatch = 2,
    LengthMismatch = 3,
    ChecksumMismatch = 4,
    /// Frame well formed but unusable: wrong dims, unexpected kind.
    Protocol = 5,
    UnknownArch = 6,
    SplitOutOfRange = 7,
    Internal = 8,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => Self::BadMagic,
            2 => Self::VersionMismatch,
            3 => Self::LengthMismatch,
            4 => Self::ChecksumMismatch,
            6 => Self::UnknownArch,
            7 => Self::SplitOutOfRange,
            8 => Self::Internal,
            _ => Self::Protocol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub arch_id: u16,
    pub split_point: u8,
    pub timesteps: u8,
    /// `(c, w, h)` in header order.
    pub dims: (u16, u16, u16),
    pub payload: Vec<u8>,
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| WireError::LengthMismatch(format!("{what} {v} does not fit the header")))
}

impl Frame {
    /// Batch-1 spike frame.
    pub fn spikes(arch_id: u16, split_point: usize, spikes: &SpikeTensor) -> Result<Self> {
        let s = spikes.shape();
        if s.b != 1 {
            return Err(WireError::Unexpected(format!("frames carry batch 1, got {}", s.b)));
        }
        Ok(Self {
            kind: FrameKind::Spikes,
            arch_id,
            split_point: narrow(split_point, "split point")?,
            timesteps: narrow(s.t, "timesteps")?,
            dims: (narrow(s.c, "channels")?, narrow(s.w, "width")?, narrow(s.h, "height")?),
            payload: spikes.as_bytes().to_vec(),
        })
    }

    pub fn logits(arch_id: u16, split_point: u8, timesteps: u8, logits: &[f32]) -> Result<Self> {
        Ok(Self {
            kind: FrameKind::Logits,
            arch_id,
            split_point,
            timesteps,
            dims: (narrow(logits.len(), "classes")?, 1, 1),
            payload: logits.iter().flat_map(|v| v.to_le_bytes()).collect(),
        })
    }

    pub fn error(code: ErrorCode, message: &str) -> Self {
        let mut payload = vec![code as u8];
        payload.extend_from_slice(message.as_bytes());
        Self {
            kind: FrameKind::Error,
            arch_id: 0,
            split_point: 0,
            timesteps: 0,
            dims: (0, 0, 0),
            payload,
        }
    }

    pub fn spike_shape(&self) -> Shape5 {
        let (c, w, h) = self.dims;
        Shape5::new(self.timesteps as usize, 1, c as usize, h as usize, w as usize)
    }

    /// Payload length implied by the kind and dims.
    pub fn expected_payload_len(&self) -> Option<usize> {
        let (c, w, h) = self.dims;
        match self.kind {
            FrameKind::Spikes => Some(packed_len(
                c as usize * w as usize * h as usize * self.timesteps as usize,
            )),
            FrameKind::Logits => Some(4 * c as usize * w as usize * h as usize),
            FrameKind::Error => None,
        }
    }

    fn check_payload_len(&self) -> Result<()> {
        match self.expected_payload_len() {
            Some(n) if n != self.payload.len() => Err(WireError::LengthMismatch(format!(
                "payload is {} bytes, dims {:?} x T={} imply {n}",
                self.payload.len(),
                self.dims,
                self.timesteps
            ))),
            None if self.payload.is_empty() => Err(WireError::LengthMismatch("empty error frame".into())),
            _ => Ok(()),
        }
    }

    pub fn to_spike_tensor(&self) -> Result<SpikeTensor> {
        if self.kind != FrameKind::Spikes {
            return Err(WireError::Unexpected(format!("{:?} frame where spikes were expected", self.kind)));
        }
        Ok(SpikeTensor::from_packed(self.spike_shape(), self.payload.clone())?)
    }

    pub fn spike_values(&self) -> Result<Tensor<f32>> {
        Ok(self.to_spike_tensor()?.unpack())
    }

    pub fn to_logits(&self) -> Result<Vec<f32>> {
        match self.kind {
            FrameKind::Logits => Ok(self
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()),
            FrameKind::Error => Err(self.to_remote_error()),
            FrameKind::Spikes => Err(WireError::Unexpected("spike frame where logits were expected".into())),
        }
    }

    fn to_remote_error(&self) -> WireError {
        let code = self.payload.first().map_or(ErrorCode::Protocol, |&c| ErrorCode::from_u8(c));
        let message = String::from_utf8_lossy(self.payload.get(1..).unwrap_or_default()).into_owned();
        WireError::Remote { code, message }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CHECKSUM_LEN
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        self.check_payload_len()?;
        let payload_len: u32 = narrow(self.payload.len(), "payload length")?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.kind.magic());
        out.push(VERSION);
        out.extend_from_slice(&self.arch_id.to_le_bytes());
        out.push(self.split_point);
        out.push(self.timesteps);
        for d in [self.dims.0, self.dims.1, self.dims.2] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&payload_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses exactly one frame occupying all of `bytes`.
    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(WireError::LengthMismatch(format!(
                "{} bytes is shorter than an empty frame",
                bytes.len()
            )));
        }
        let header = parse_header(bytes[..HEADER_LEN].try_into().expect("sliced to size"))?;
        let total = HEADER_LEN + header.payload_len as usize + CHECKSUM_LEN;
        if bytes.len() != total {
            return Err(WireError::LengthMismatch(format!(
                "header declares a {total}-byte frame, got {}",
                bytes.len()
            )));
        }
        finish(header, &bytes[..total - CHECKSUM_LEN], bytes[total - CHECKSUM_LEN..].try_into().expect("4 bytes"))
    }
}

struct Header {
    kind: FrameKind,
    arch_id: u16,
    split_point: u8,
    timesteps: u8,
    dims: (u16, u16, u16),
    payload_len: u32,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    let magic = [h[0], h[1], h[2], h[3]];
    let kind = FrameKind::from_magic(magic).ok_or(WireError::BadMagic(magic))?;
    if h[4] != VERSION {
        return Err(WireError::VersionMismatch {
            got: h[4],
            expected: VERSION,
        });
    }
    let u16_at = |i: usize| u16::from_le_bytes([h[i], h[i + 1]]);
    Ok(Header {
        kind,
        arch_id: u16_at(5),
        split_point: h[7],
        timesteps: h[8],
        dims: (u16_at(9), u16_at(11), u16_at(13)),
        payload_len: u32::from_le_bytes([h[15], h[16], h[17], h[18]]),
    })
}

/// `body` is header plus payload.
fn finish(header: Header, body: &[u8], crc: [u8; 4]) -> Result<Frame> {
    let stored = u32::from_le_bytes(crc);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed });
    }
    let frame = Frame {
        kind: header.kind,
        arch_id: header.arch_id,
        split_point: header.split_point,
        timesteps: header.timesteps,
        dims: header.dims,
        payload: body[HEADER_LEN..].to_vec(),
    };
    frame.check_payload_len()?;
    Ok(frame)
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(WireError::ConnectionLost)
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
///
/// The frame body is always consumed in full before validation, so a
/// malformed frame leaves the stream positioned at the next frame. Only an
/// oversized length field forces the caller to drop the stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::ConnectionLost(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "stream ended inside a frame header",
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::ConnectionLost(e)),
        }
    }
    let payload_len = u32::from_le_bytes([header[15], header[16], header[17], header[18]]);
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::Oversized(payload_len));
    }
    let mut body = header.to_vec();
    body.resize(HEADER_LEN + payload_len as usize, 0);
    read_full(r, &mut body[HEADER_LEN..])?;
    let mut crc = [0u8; CHECKSUM_LEN];
    read_full(r, &mut crc)?;
    let parsed = parse_header(&header)?;
    finish(parsed, &body, crc).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<usize> {
    let bytes = frame.serialize()?;
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(WireError::ConnectionLost)?;
    Ok(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Frame {
        let bits: Vec<bool> = (0..8 * 4 * 4 * 2).map(|i| i % 3 == 0).collect();
        let t = SpikeTensor::from_bits(Shape5::new(2, 1, 8, 4, 4), &bits).unwrap();
        Frame::spikes(1, 16, &t).unwrap()
    }

    #[test]
    fn header_layout() {
        let f = sample();
        let b = f.serialize().unwrap();
        assert_eq!(&b[..4], b"SPKF");
        assert_eq!(b[4], VERSION);
        assert_eq!(&b[5..7], &[1, 0]);
        assert_eq!(b[7], 16);
        assert_eq!(b[8], 2);
        assert_eq!(&b[9..15], &[8, 0, 4, 0, 4, 0]);
        assert_eq!(&b[15..19], &[32, 0, 0, 0]);
        assert_eq!(b.len(), HEADER_LEN + 32 + CHECKSUM_LEN);
    }

    #[test]
    fn distinct_errors() {
        let good = sample().serialize().unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(Frame::deserialize(&b), Err(WireError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(Frame::deserialize(&b), Err(WireError::VersionMismatch { got: 9, .. })));
        assert!(matches!(
            Frame::deserialize(&good[..good.len() - 1]),
            Err(WireError::LengthMismatch(_))
        ));
        let mut b = good.clone();
        b[HEADER_LEN + 3] ^= 0x10;
        assert!(matches!(Frame::deserialize(&b), Err(WireError::ChecksumMismatch { .. })));
    }

    #[test]
    fn declared_dims_must_match_payload() {
        let mut f = sample();
        f.dims.0 = 9;
        assert!(matches!(f.serialize(), Err(WireError::LengthMismatch(_))));
    }

    #[test]
    fn logits_and_errors() {
        let f = Frame::logits(2, 3, 2, &[1.5, -0.25]).unwrap();
        let back = Frame::deserialize(&f.serialize().unwrap()).unwrap();
        assert_eq!(back.to_logits().unwrap(), vec![1.5, -0.25]);
        let e = Frame::error(ErrorCode::SplitOutOfRange, "split 99");
        let back = Frame::deserialize(&e.serialize().unwrap()).unwrap();
        match back.to_logits() {
            Err(WireError::Remote { code, message }) => {
                assert_eq!(code, ErrorCode::SplitOutOfRange);
                assert_eq!(message, "split 99");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stream_reads_concatenated_frames() {
        let a = sample();
        let b = Frame::logits(1, 16, 2, &[0.5; 10]).unwrap();
        let mut bytes = a.serialize().unwrap();
        bytes.extend(b.serialize().unwrap());
        let mut cur = io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), a);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), b);
        assert!(read_frame(&mut cur).unwrap().is_none());
    }
}
