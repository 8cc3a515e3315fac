//! Frame layout shared by the session link and the model bridge.
//!
//! ```text
//! offset  size  field
//! 0       2     magic
//! 2       1     kind
//! 3       2     round (u16 LE)
//! 5       4     payload_len (u32 LE)
//! 9       1     pad_bits
//! 10      n     payload
//! ```

use std::io::{self, Read, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::latent::{partition, BlockIndex, BlockMask, TensorDims};

pub const HEADER_LEN: usize = 10;
pub const SESSION_MAGIC: [u8; 2] = *b"SQ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic {found:02x?}, expected {expected:02x?}")]
    BadMagic { expected: [u8; 2], found: [u8; 2] },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes does not fit the length field")]
    TooLarge(usize),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("stream: {0}")]
    Io(String),
}

impl From<io::Error> for WireError {
    fn from(e: io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}

/// Header fields plus payload, with the kind left uninterpreted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub kind: u8,
    pub round: u16,
    pub pad_bits: u8,
    pub payload: Vec<u8>,
}

impl RawFrame {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self, magic: [u8; 2]) -> Result<Vec<u8>, WireError> {
        let len = u32::try_from(self.payload.len())
            .map_err(|_| WireError::TooLarge(self.payload.len()))?;
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&magic);
        out.push(self.kind);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.pad_bits);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    fn parse_header(header: &[u8], magic: [u8; 2]) -> Result<(u8, u16, usize, u8), WireError> {
        let found = [header[0], header[1]];
        if found != magic {
            return Err(WireError::BadMagic {
                expected: magic,
                found,
            });
        }
        let round = u16::from_le_bytes([header[3], header[4]]);
        let len = u32::from_le_bytes([header[5], header[6], header[7], header[8]]) as usize;
        Ok((header[2], round, len, header[9]))
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8], magic: [u8; 2]) -> Result<(Self, usize), WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let (kind, round, len, pad_bits) = Self::parse_header(&bytes[..HEADER_LEN], magic)?;
        let total = HEADER_LEN + len;
        if bytes.len() < total {
            return Err(WireError::Truncated {
                needed: total,
                available: bytes.len(),
            });
        }
        let frame = Self {
            kind,
            round,
            pad_bits,
            payload: bytes[HEADER_LEN..total].to_vec(),
        };
        Ok((frame, total))
    }

    pub fn decode(bytes: &[u8], magic: [u8; 2]) -> Result<Self, WireError> {
        let (frame, used) = Self::decode_prefix(bytes, magic)?;
        if used != bytes.len() {
            return Err(WireError::Trailing(bytes.len() - used));
        }
        Ok(frame)
    }

    pub fn read_from<R: Read + ?Sized>(reader: &mut R, magic: [u8; 2]) -> Result<Self, WireError> {
        let mut header = [0u8; HEADER_LEN];
        reader.read_exact(&mut header)?;
        let (kind, round, len, pad_bits) = Self::parse_header(&header, magic)?;
        let mut payload = vec![0u8; len];
        reader.read_exact(&mut payload)?;
        Ok(Self {
            kind,
            round,
            pad_bits,
            payload,
        })
    }

    pub fn write_to<W: Write + ?Sized>(
        &self,
        writer: &mut W,
        magic: [u8; 2],
    ) -> Result<(), WireError> {
        writer.write_all(&self.encode(magic)?)?;
        writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Meta = 1,
    Text = 2,
    Latent = 3,
    Request = 4,
    Fin = 5,
}

impl FrameKind {
    pub fn from_u8(value: u8) -> Result<Self, WireError> {
        Ok(match value {
            1 => FrameKind::Meta,
            2 => FrameKind::Text,
            3 => FrameKind::Latent,
            4 => FrameKind::Request,
            5 => FrameKind::Fin,
            other => return Err(WireError::UnknownKind(other)),
        })
    }

    /// Request and finish frames travel receiver to transmitter.
    pub fn is_uplink(&self) -> bool {
        matches!(self, FrameKind::Request | FrameKind::Fin)
    }

    /// Text and latent frames go through the noisy channel.
    pub fn is_noisy(&self) -> bool {
        matches!(self, FrameKind::Text | FrameKind::Latent)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FrameKind::Meta => "META",
            FrameKind::Text => "TEXT",
            FrameKind::Latent => "LATENT",
            FrameKind::Request => "REQ",
            FrameKind::Fin => "FIN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub round: u16,
    pub pad_bits: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, round: u16, payload: Vec<u8>) -> Self {
        Self {
            kind,
            round,
            pad_bits: 0,
            payload,
        }
    }

    pub fn fin(round: u16) -> Self {
        Self::new(FrameKind::Fin, round, Vec::new())
    }

    fn raw(&self) -> RawFrame {
        RawFrame {
            kind: self.kind as u8,
            round: self.round,
            pad_bits: self.pad_bits,
            payload: self.payload.clone(),
        }
    }

    fn from_raw(raw: RawFrame) -> Result<Self, WireError> {
        Ok(Self {
            kind: FrameKind::from_u8(raw.kind)?,
            round: raw.round,
            pad_bits: raw.pad_bits,
            payload: raw.payload,
        })
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.raw().encode(SESSION_MAGIC)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        Self::from_raw(RawFrame::decode(bytes, SESSION_MAGIC)?)
    }

    pub fn read_from<R: Read + ?Sized>(reader: &mut R) -> Result<Self, WireError> {
        Self::from_raw(RawFrame::read_from(reader, SESSION_MAGIC)?)
    }

    pub fn write_to<W: Write + ?Sized>(&self, writer: &mut W) -> Result<(), WireError> {
        self.raw().write_to(writer, SESSION_MAGIC)
    }
}

/// Little-endian cursor over a payload.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.bytes.len() - self.at < n {
            return Err(WireError::Payload(format!(
                "need {n} more bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    pub(crate) fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::Payload(format!("{n} unread trailing bytes"))),
        }
    }
}

fn u32_field(value: usize, what: &str) -> Result<u32, WireError> {
    u32::try_from(value).map_err(|_| WireError::Payload(format!("{what} {value} exceeds u32")))
}

/// Control metadata sent once before any data frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPayload {
    pub dims: TensorDims,
    pub block_side: usize,
    pub q0: f64,
    pub seed: u64,
    /// A TEXT frame follows.
    pub caption_follows: bool,
    pub mask: BlockMask,
}

const FLAG_CAPTION: u8 = 0x01;

impl MetaPayload {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let d = &self.dims;
        let mut out = Vec::new();
        for v in [
            d.channels,
            d.height,
            d.width,
            d.latent_channels,
            d.latent_height,
            d.latent_width,
            self.block_side,
        ] {
            out.extend_from_slice(&u32_field(v, "dimension")?.to_le_bytes());
        }
        out.extend_from_slice(&self.q0.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(if self.caption_follows {
            FLAG_CAPTION
        } else {
            0
        });
        let bits: Vec<u8> = self.mask.bits().iter().map(|&b| b as u8).collect();
        out.extend(crate::phy::pack_bits(&bits));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(bytes);
        let mut field = || -> Result<usize, WireError> { Ok(c.u32()? as usize) };
        let image = [field()?, field()?, field()?];
        let latent = [field()?, field()?, field()?];
        let block_side = field()?;
        let dims = TensorDims::new(image, latent).map_err(|e| WireError::Payload(e.to_string()))?;
        let grid = partition(dims.latent_height, dims.latent_width, block_side)
            .map_err(|e| WireError::Payload(e.to_string()))?;
        let q0 = c.f64()?;
        let seed = c.u64()?;
        let flags = c.u8()?;
        if flags & !FLAG_CAPTION != 0 {
            return Err(WireError::Payload(format!("unknown flags {flags:#04x}")));
        }
        let n = grid.count();
        let packed = c.take(n.div_ceil(8))?;
        c.finish()?;
        let bits = crate::phy::unpack_bits(packed, n);
        if packed.len() * 8 > n
            && crate::phy::unpack_bits(packed, packed.len() * 8)[n..]
                .iter()
                .any(|&b| b != 0)
        {
            return Err(WireError::Payload("non-zero bitmap padding".into()));
        }
        let mask = BlockMask::new(grid, bits.iter().map(|&b| b == 1).collect())
            .map_err(|e| WireError::Payload(e.to_string()))?;
        Ok(Self {
            dims,
            block_side,
            q0,
            seed,
            caption_follows: flags & FLAG_CAPTION != 0,
            mask,
        })
    }
}

pub fn encode_request(indices: &[BlockIndex]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(4 + 4 * indices.len());
    out.extend_from_slice(&u32_field(indices.len(), "request count")?.to_le_bytes());
    for b in indices {
        for v in [b.row, b.col] {
            let v = u16::try_from(v)
                .map_err(|_| WireError::Payload(format!("block coordinate {v} exceeds u16")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_request(bytes: &[u8]) -> Result<Vec<BlockIndex>, WireError> {
    let mut c = Cursor::new(bytes);
    let count = c.u32()? as usize;
    if c.remaining() != 4 * count {
        return Err(WireError::Payload(format!(
            "request lists {count} blocks but carries {} bytes",
            c.remaining()
        )));
    }
    (0..count)
        .map(|_| Ok(BlockIndex::new(c.u16()? as usize, c.u16()? as usize)))
        .collect()
}

/// Baseband symbols as `(re, im)` binary64 pairs.
pub fn encode_symbols(symbols: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * symbols.len());
    for s in symbols {
        out.extend_from_slice(&s.re.to_le_bytes());
        out.extend_from_slice(&s.im.to_le_bytes());
    }
    out
}

pub fn decode_symbols(bytes: &[u8]) -> Result<Vec<Complex64>, WireError> {
    if bytes.len() % 16 != 0 {
        return Err(WireError::Payload(format!(
            "{} bytes is not a whole number of symbols",
            bytes.len()
        )));
    }
    let mut c = Cursor::new(bytes);
    (0..bytes.len() / 16)
        .map(|_| Ok(Complex64::new(c.f64()?, c.f64()?)))
        .collect()
}
