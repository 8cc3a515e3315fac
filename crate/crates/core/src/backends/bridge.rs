//! Client for an out-of-process model server, plus an in-process mock
//! responder built on the toy suite.
//!
//! Frames reuse the session header with magic `SB`. The `round` field carries
//! a request id that the response echoes. A response has kind `op | 0x80`,
//! or `0xFF` with payload `code:u8, message:text` on failure.
//!
//! Payload encodings (little-endian):
//!
//! | item     | layout                                              |
//! |----------|-----------------------------------------------------|
//! | tensor   | `c:u32 h:u32 w:u32` then `c*h*w` binary64 values    |
//! | text     | `len:u32` then UTF-8 bytes                          |
//! | mask     | `h:u32 w:u32` then `h*w` bits, MSB first, byte-padded |
//!
//! | op          | request                                                        | response |
//! |-------------|----------------------------------------------------------------|----------|
//! | `ENCODE`    | image tensor                                                   | latent tensor |
//! | `DECODE`    | latent tensor                                                  | image tensor |
//! | `DENOISE`   | `z_n` tensor, `step:u32`, `alpha_bar:f64`, `guidance:f64`, `has_caption:u8` [text], known tensor, mask | noise tensor |
//! | `CAPTION`   | image tensor                                                   | text |
//! | `SCORE`     | `metric:u8` then lpips: 2 tensors; clip_it: tensor, text; fid: `n:u32` tensors, `m:u32` tensors | `f64` |
//! | `PROBE`     | empty                                                          | 6 × `u32` dims, `caps:u8` |

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};

use crate::latent::{LatentShape, LatentTensor, PixelMask, TensorDims};
use crate::phy::{pack_bits, unpack_bits};
use crate::session::{RawFrame, WireError};

use super::{
    check_latent, BackendError, BackendSuite, Captioner, DenoiseInput, Denoiser, Image,
    ImageDecoder, LatentEncoder, QualityScorer,
};

pub const BRIDGE_MAGIC: [u8; 2] = *b"SB";

pub const OP_ENCODE: u8 = 0x10;
pub const OP_DECODE: u8 = 0x11;
pub const OP_DENOISE: u8 = 0x12;
pub const OP_CAPTION: u8 = 0x13;
pub const OP_SCORE: u8 = 0x14;
pub const OP_PROBE: u8 = 0x15;
pub const RESPONSE_BIT: u8 = 0x80;
pub const KIND_ERROR: u8 = 0xFF;

pub const ERR_UNAVAILABLE: u8 = 1;
pub const ERR_SHAPE: u8 = 2;
pub const ERR_FAILED: u8 = 3;
pub const ERR_BAD_REQUEST: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Metric {
    Lpips = 0,
    ClipIt = 1,
    Fid = 2,
}

/// Capability bits reported by `PROBE`.
pub mod caps {
    pub const ENCODE: u8 = 1 << 0;
    pub const DECODE: u8 = 1 << 1;
    pub const DENOISE: u8 = 1 << 2;
    pub const CAPTION: u8 = 1 << 3;
    pub const LPIPS: u8 = 1 << 4;
    pub const CLIP_IT: u8 = 1 << 5;
    pub const FID: u8 = 1 << 6;
    pub const ALL: u8 = 0x7f;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeReport {
    pub dims: TensorDims,
    pub capabilities: u8,
}

impl ProbeReport {
    pub fn has(&self, cap: u8) -> bool {
        self.capabilities & cap == cap
    }
}

fn wire(e: WireError) -> BackendError {
    match e {
        WireError::Io(msg) => BackendError::Io(msg),
        other => BackendError::Protocol(other.to_string()),
    }
}

/// Payload builder.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn tensor(&mut self, dims: [usize; 3], values: &[f64]) -> &mut Self {
        for d in dims {
            self.u32(d as u32);
        }
        for &v in values {
            self.f64(v);
        }
        self
    }

    pub fn image(&mut self, image: &Image) -> &mut Self {
        self.tensor(image.dims(), image.values())
    }

    pub fn latent(&mut self, z: &LatentTensor) -> &mut Self {
        let s = z.shape();
        self.tensor([s.channels, s.height, s.width], z.values())
    }

    pub fn mask(&mut self, mask: &PixelMask) -> &mut Self {
        self.u32(mask.height() as u32).u32(mask.width() as u32);
        let bits: Vec<u8> = mask.cells().iter().map(|&b| b as u8).collect();
        self.buf.extend(pack_bits(&bits));
        self
    }
}

/// Payload parser.
#[derive(Debug)]
pub struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], BackendError> {
        if self.bytes.len() - self.at < n {
            return Err(BackendError::Protocol(format!(
                "payload ends at {} bytes, needed {n} more at offset {}",
                self.bytes.len(),
                self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, BackendError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64, BackendError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn text(&mut self) -> Result<String, BackendError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|e| BackendError::Protocol(format!("text is not UTF-8: {e}")))
    }

    pub fn tensor(&mut self) -> Result<([usize; 3], Vec<f64>), BackendError> {
        let dims = [
            self.u32()? as usize,
            self.u32()? as usize,
            self.u32()? as usize,
        ];
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| {
                n.checked_mul(8)
                    .is_some_and(|b| b <= self.bytes.len() - self.at)
            })
            .ok_or_else(|| {
                BackendError::Protocol(format!("tensor {dims:?} exceeds the payload"))
            })?;
        let raw = self.take(8 * n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((dims, values))
    }

    pub fn image(&mut self) -> Result<Image, BackendError> {
        let ([c, h, w], values) = self.tensor()?;
        Image::new(c, h, w, values)
    }

    pub fn latent(&mut self) -> Result<LatentTensor, BackendError> {
        let ([c, h, w], values) = self.tensor()?;
        let shape = LatentShape {
            channels: c,
            height: h,
            width: w,
        };
        LatentTensor::from_vec(shape, values).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn mask(&mut self) -> Result<PixelMask, BackendError> {
        let (h, w) = (self.u32()? as usize, self.u32()? as usize);
        let n = h
            .checked_mul(w)
            .filter(|n| n.div_ceil(8) <= self.bytes.len() - self.at)
            .ok_or_else(|| BackendError::Protocol(format!("mask {h}x{w} exceeds the payload")))?;
        let packed = self.take(n.div_ceil(8))?;
        let cells = unpack_bits(packed, n).into_iter().map(|b| b == 1).collect();
        PixelMask::new(h, w, cells).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn finish(&self) -> Result<(), BackendError> {
        if self.at != self.bytes.len() {
            return Err(BackendError::Protocol(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

pub fn denoise_request(input: &DenoiseInput<'_>) -> Vec<u8> {
    let mut w = Writer::new();
    w.latent(input.latent)
        .u32(input.step as u32)
        .f64(input.alpha_bar)
        .f64(input.guidance);
    match input.caption {
        Some(c) => w.u8(1).text(c),
        None => w.u8(0),
    };
    w.latent(input.known).mask(input.mask);
    w.into_bytes()
}

pub fn error_payload(code: u8, message: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(code).text(message);
    w.into_bytes()
}

fn decode_error(payload: &[u8]) -> BackendError {
    let mut r = Reader::new(payload);
    let parsed = r.u8().and_then(|code| Ok((code, r.text()?)));
    match parsed {
        Ok((ERR_UNAVAILABLE, msg)) => BackendError::Unavailable(msg),
        Ok((ERR_SHAPE, msg)) => BackendError::Dims {
            what: "bridge",
            expected: "matching shapes".into(),
            found: msg,
        },
        Ok((_, msg)) => BackendError::Failed(msg),
        Err(e) => e,
    }
}

struct Link {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u16,
}

/// A connection to a model server. Calls are serialized: one request in
/// flight at a time.
pub struct BridgeClient {
    link: Mutex<Link>,
    child: Mutex<Option<Child>>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").finish_non_exhaustive()
    }
}

impl BridgeClient {
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Self {
        Self {
            link: Mutex::new(Link {
                reader: Box::new(BufReader::new(reader)),
                writer: Box::new(BufWriter::new(writer)),
                next_id: 0,
            }),
            child: Mutex::new(None),
        }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, BackendError> {
        let stream = TcpStream::connect(addr).map_err(|e| BackendError::Io(e.to_string()))?;
        stream
            .set_nodelay(true)
            .map_err(|e| BackendError::Io(e.to_string()))?;
        let reader = stream
            .try_clone()
            .map_err(|e| BackendError::Io(e.to_string()))?;
        Ok(Self::from_streams(reader, stream))
    }

    /// Starts `program` and talks to it over its stdin and stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Unavailable(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::from_streams(stdout, stdin);
        *client.child.lock().expect("fresh mutex") = Some(child);
        Ok(client)
    }

    /// Sends one request and waits for its response payload.
    pub fn call(&self, op: u8, payload: Vec<u8>) -> Result<Vec<u8>, BackendError> {
        let mut link = self
            .link
            .lock()
            .map_err(|_| BackendError::Io("bridge connection poisoned".into()))?;
        let id = link.next_id;
        link.next_id = link.next_id.wrapping_add(1);
        let request = RawFrame {
            kind: op,
            round: id,
            pad_bits: 0,
            payload,
        };
        request
            .write_to(&mut link.writer, BRIDGE_MAGIC)
            .map_err(wire)?;
        let response = RawFrame::read_from(&mut link.reader, BRIDGE_MAGIC).map_err(wire)?;
        if response.round != id {
            return Err(BackendError::Protocol(format!(
                "response id {} does not match request {id}",
                response.round
            )));
        }
        match response.kind {
            KIND_ERROR => Err(decode_error(&response.payload)),
            k if k == op | RESPONSE_BIT => Ok(response.payload),
            k => Err(BackendError::Protocol(format!(
                "response kind {k:#04x} to op {op:#04x}"
            ))),
        }
    }

    pub fn probe(&self) -> Result<ProbeReport, BackendError> {
        let payload = self.call(OP_PROBE, Vec::new())?;
        let mut r = Reader::new(&payload);
        let mut d = [0usize; 6];
        for slot in d.iter_mut() {
            *slot = r.u32()? as usize;
        }
        let capabilities = r.u8()?;
        r.finish()?;
        let dims = TensorDims::new([d[0], d[1], d[2]], [d[3], d[4], d[5]])
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(ProbeReport { dims, capabilities })
    }

    pub fn score(&self, metric: Metric, body: Writer) -> Result<f64, BackendError> {
        let mut payload = vec![metric as u8];
        payload.extend(body.into_bytes());
        let out = self.call(OP_SCORE, payload)?;
        let mut r = Reader::new(&out);
        let v = r.f64()?;
        r.finish()?;
        Ok(v)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            if let Some(mut c) = child.take() {
                // closing stdin lets a well-behaved server exit on its own
                if let Ok(mut link) = self.link.lock() {
                    link.writer = Box::new(std::io::sink());
                }
                let _ = c.wait();
            }
        }
    }
}

/// A client together with the dims it reported, so shape checks happen
/// before any bytes are sent.
#[derive(Debug, Clone)]
pub struct BridgeBackend {
    client: Arc<BridgeClient>,
    report: ProbeReport,
}

impl BridgeBackend {
    pub fn new(client: Arc<BridgeClient>) -> Result<Self, BackendError> {
        let report = client.probe()?;
        Ok(Self { client, report })
    }

    pub fn report(&self) -> ProbeReport {
        self.report
    }

    pub fn client(&self) -> &Arc<BridgeClient> {
        &self.client
    }

    /// Backend suite routed entirely through the bridge. Access is
    /// serialized, so the suite is marked non-concurrent.
    pub fn suite(&self) -> BackendSuite {
        let me = Arc::new(self.clone());
        BackendSuite {
            dims: self.report.dims,
            encoder: me.clone(),
            decoder: me.clone(),
            denoiser: me.clone(),
            captioner: me,
            concurrent: false,
        }
    }
}

fn parse<T>(
    bytes: Vec<u8>,
    f: impl FnOnce(&mut Reader<'_>) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut r = Reader::new(&bytes);
    let v = f(&mut r)?;
    r.finish()?;
    Ok(v)
}

impl LatentEncoder for BridgeBackend {
    fn encode(&self, image: &Image) -> Result<LatentTensor, BackendError> {
        let mut w = Writer::new();
        w.image(image);
        let z = parse(self.client.call(OP_ENCODE, w.into_bytes())?, |r| r.latent())?;
        check_latent(self.report.dims.latent_shape(), &z)?;
        Ok(z)
    }
}

impl ImageDecoder for BridgeBackend {
    fn decode(&self, latent: &LatentTensor) -> Result<Image, BackendError> {
        check_latent(self.report.dims.latent_shape(), latent)?;
        let mut w = Writer::new();
        w.latent(latent);
        parse(self.client.call(OP_DECODE, w.into_bytes())?, |r| r.image())
    }
}

impl Denoiser for BridgeBackend {
    fn denoise(&self, input: &DenoiseInput<'_>) -> Result<LatentTensor, BackendError> {
        check_latent(self.report.dims.latent_shape(), input.latent)?;
        let eps = parse(self.client.call(OP_DENOISE, denoise_request(input))?, |r| {
            r.latent()
        })?;
        check_latent(self.report.dims.latent_shape(), &eps)?;
        Ok(eps)
    }
}

impl Captioner for BridgeBackend {
    fn caption(&self, image: &Image) -> Result<String, BackendError> {
        let mut w = Writer::new();
        w.image(image);
        parse(self.client.call(OP_CAPTION, w.into_bytes())?, |r| r.text())
    }
}

impl QualityScorer for BridgeBackend {
    fn lpips(&self, a: &Image, b: &Image) -> Result<f64, BackendError> {
        let mut w = Writer::new();
        w.image(a).image(b);
        self.client.score(Metric::Lpips, w)
    }

    fn clip_it(&self, image: &Image, caption: &str) -> Result<f64, BackendError> {
        let mut w = Writer::new();
        w.image(image).text(caption);
        self.client.score(Metric::ClipIt, w)
    }

    fn fid(&self, generated: &[Image], reference: &[Image]) -> Result<f64, BackendError> {
        let mut w = Writer::new();
        w.u32(generated.len() as u32);
        for im in generated {
            w.image(im);
        }
        w.u32(reference.len() as u32);
        for im in reference {
            w.image(im);
        }
        self.client.score(Metric::Fid, w)
    }
}

pub mod mock {
    //! Protocol-conformant responder backed by an arbitrary backend suite.
    //! Metric values are simple stand-ins with the right floors.

    use super::*;
    use crate::control::rouge_l;

    /// Closed-form stand-ins for the perceptual metrics.
    pub fn mean_abs_diff(a: &Image, b: &Image) -> Result<f64, BackendError> {
        if a.dims() != b.dims() {
            return Err(BackendError::Dims {
                what: "lpips pair",
                expected: format!("{:?}", a.dims()),
                found: format!("{:?}", b.dims()),
            });
        }
        let n = a.values().len().max(1) as f64;
        Ok(a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n)
    }

    fn channel_stats(set: &[Image]) -> Vec<(f64, f64)> {
        let c = set.first().map_or(0, Image::channels);
        (0..c)
            .map(|ch| {
                let means: Vec<f64> = set
                    .iter()
                    .map(|im| im.plane(ch).iter().sum::<f64>() / im.plane(ch).len() as f64)
                    .collect();
                let mu = means.iter().sum::<f64>() / means.len() as f64;
                let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64;
                (mu, var.sqrt())
            })
            .collect()
    }

    /// Fréchet distance between diagonal Gaussians fitted to per-image channel means.
    pub fn diagonal_frechet(a: &[Image], b: &[Image]) -> Result<f64, BackendError> {
        if a.is_empty() || b.is_empty() {
            return Err(BackendError::Failed("fid needs two non-empty sets".into()));
        }
        let (sa, sb) = (channel_stats(a), channel_stats(b));
        if sa.len() != sb.len() {
            return Err(BackendError::Failed(
                "fid sets differ in channel count".into(),
            ));
        }
        Ok(sa
            .iter()
            .zip(&sb)
            .map(|((m1, s1), (m2, s2))| (m1 - m2).powi(2) + (s1 - s2).powi(2))
            .sum())
    }

    pub struct MockServer {
        pub suite: BackendSuite,
        pub capabilities: u8,
        /// Opcodes in arrival order.
        pub calls: Mutex<Vec<u8>>,
    }

    impl MockServer {
        pub fn new(suite: BackendSuite) -> Self {
            Self {
                suite,
                capabilities: caps::ALL,
                calls: Mutex::new(Vec::new()),
            }
        }

        pub fn without(mut self, cap: u8) -> Self {
            self.capabilities &= !cap;
            self
        }

        pub fn calls(&self) -> Vec<u8> {
            self.calls.lock().map(|c| c.clone()).unwrap_or_default()
        }

        fn need(&self, cap: u8, what: &str) -> Result<(), BackendError> {
            if self.capabilities & cap == cap {
                Ok(())
            } else {
                Err(BackendError::Unavailable(format!("{what} is not loaded")))
            }
        }

        /// Answers one request frame.
        pub fn respond(&self, request: &RawFrame) -> RawFrame {
            if let Ok(mut calls) = self.calls.lock() {
                calls.push(request.kind);
            }
            let (kind, payload) = match self.dispatch(request.kind, &request.payload) {
                Ok(payload) => (request.kind | RESPONSE_BIT, payload),
                Err(e) => {
                    let code = match &e {
                        BackendError::Unavailable(_) => ERR_UNAVAILABLE,
                        BackendError::Dims { .. } => ERR_SHAPE,
                        BackendError::Protocol(_) => ERR_BAD_REQUEST,
                        _ => ERR_FAILED,
                    };
                    (KIND_ERROR, error_payload(code, &e.to_string()))
                }
            };
            RawFrame {
                kind,
                round: request.round,
                pad_bits: 0,
                payload,
            }
        }

        fn dispatch(&self, op: u8, payload: &[u8]) -> Result<Vec<u8>, BackendError> {
            let mut r = Reader::new(payload);
            let mut w = Writer::new();
            match op {
                OP_PROBE => {
                    r.finish()?;
                    let d = self.suite.dims;
                    for v in [
                        d.channels,
                        d.height,
                        d.width,
                        d.latent_channels,
                        d.latent_height,
                        d.latent_width,
                    ] {
                        w.u32(v as u32);
                    }
                    w.u8(self.capabilities);
                }
                OP_ENCODE => {
                    self.need(caps::ENCODE, "encoder")?;
                    let image = r.image()?;
                    r.finish()?;
                    self.suite.check_image(&image)?;
                    w.latent(&self.suite.encoder.encode(&image)?);
                }
                OP_DECODE => {
                    self.need(caps::DECODE, "decoder")?;
                    let z = r.latent()?;
                    r.finish()?;
                    check_latent(self.suite.latent_shape(), &z)?;
                    w.image(&self.suite.decoder.decode(&z)?);
                }
                OP_DENOISE => {
                    self.need(caps::DENOISE, "denoiser")?;
                    let latent = r.latent()?;
                    let step = r.u32()? as usize;
                    let alpha_bar = r.f64()?;
                    let guidance = r.f64()?;
                    let caption = match r.u8()? {
                        0 => None,
                        1 => Some(r.text()?),
                        other => {
                            return Err(BackendError::Protocol(format!("caption flag {other}")))
                        }
                    };
                    let known = r.latent()?;
                    let mask = r.mask()?;
                    r.finish()?;
                    check_latent(self.suite.latent_shape(), &latent)?;
                    check_latent(self.suite.latent_shape(), &known)?;
                    let input = DenoiseInput {
                        latent: &latent,
                        step,
                        alpha_bar,
                        caption: caption.as_deref(),
                        guidance,
                        known: &known,
                        mask: &mask,
                    };
                    w.latent(&self.suite.denoiser.denoise(&input)?);
                }
                OP_CAPTION => {
                    self.need(caps::CAPTION, "captioner")?;
                    let image = r.image()?;
                    r.finish()?;
                    w.text(&self.suite.captioner.caption(&image)?);
                }
                OP_SCORE => {
                    let metric = r.u8()?;
                    let value = match metric {
                        0 => {
                            self.need(caps::LPIPS, "lpips")?;
                            let (a, b) = (r.image()?, r.image()?);
                            r.finish()?;
                            mean_abs_diff(&a, &b)?
                        }
                        1 => {
                            self.need(caps::CLIP_IT, "clip_it")?;
                            let image = r.image()?;
                            let text = r.text()?;
                            r.finish()?;
                            rouge_l(&self.suite.captioner.caption(&image)?, &text)
                        }
                        2 => {
                            self.need(caps::FID, "fid")?;
                            let n = r.u32()? as usize;
                            let a = (0..n).map(|_| r.image()).collect::<Result<Vec<_>, _>>()?;
                            let m = r.u32()? as usize;
                            let b = (0..m).map(|_| r.image()).collect::<Result<Vec<_>, _>>()?;
                            r.finish()?;
                            diagonal_frechet(&a, &b)?
                        }
                        other => {
                            return Err(BackendError::Protocol(format!("unknown metric {other}")))
                        }
                    };
                    w.f64(value);
                }
                other => return Err(BackendError::Protocol(format!("unknown op {other:#04x}"))),
            }
            Ok(w.into_bytes())
        }

        /// Serves frames from `reader` until end of stream.
        pub fn serve(&self, reader: impl Read, writer: impl Write) -> Result<(), BackendError> {
            let mut reader = BufReader::new(reader);
            let mut writer = BufWriter::new(writer);
            loop {
                let request = match RawFrame::read_from(&mut reader, BRIDGE_MAGIC) {
                    Ok(f) => f,
                    Err(WireError::Io(_)) => return Ok(()),
                    Err(e) => return Err(wire(e)),
                };
                self.respond(&request)
                    .write_to(&mut writer, BRIDGE_MAGIC)
                    .map_err(wire)?;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::MockServer;
    use super::*;
    use crate::backends::toy;
    use std::net::TcpListener;

    fn small_dims() -> TensorDims {
        TensorDims::new([3, 16, 16], [4, 4, 4]).unwrap()
    }

    fn connected(server: Arc<MockServer>) -> (BridgeBackend, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = stream.try_clone().unwrap();
            server.serve(reader, stream).unwrap();
        });
        let client = Arc::new(BridgeClient::connect(addr).unwrap());
        (BridgeBackend::new(client).unwrap(), handle)
    }

    #[test]
    fn suite_through_bridge_matches_toy() {
        let toy_suite = toy::suite(small_dims()).unwrap();
        let server = Arc::new(MockServer::new(toy_suite.clone()));
        let (backend, handle) = connected(server.clone());
        let suite = backend.suite();
        assert!(!suite.concurrent);
        assert_eq!(suite.dims, small_dims());
        let image = Image::from_fn(3, 16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        let z = suite.encoder.encode(&image).unwrap();
        assert_eq!(z, toy_suite.encoder.encode(&image).unwrap());
        assert_eq!(
            suite.decoder.decode(&z).unwrap(),
            toy_suite.decoder.decode(&z).unwrap()
        );
        assert_eq!(
            suite.captioner.caption(&image).unwrap(),
            toy_suite.captioner.caption(&image).unwrap()
        );
        let mask = PixelMask::new(4, 4, (0..16).map(|k| k % 3 == 0).collect()).unwrap();
        let input = DenoiseInput {
            latent: &z,
            step: 3,
            alpha_bar: 0.5,
            caption: Some("a caption"),
            guidance: 9.0,
            known: &z,
            mask: &mask,
        };
        assert_eq!(
            suite.denoiser.denoise(&input).unwrap(),
            toy_suite.denoiser.denoise(&input).unwrap()
        );
        assert_eq!(backend.lpips(&image, &image).unwrap(), 0.0);
        assert_eq!(
            backend
                .fid(std::slice::from_ref(&image), std::slice::from_ref(&image))
                .unwrap(),
            0.0
        );
        let own = toy_suite.captioner.caption(&image).unwrap();
        assert_eq!(backend.clip_it(&image, &own).unwrap(), 1.0);
        drop(suite);
        drop(backend);
        handle.join().unwrap();
        assert_eq!(
            server.calls(),
            vec![
                OP_PROBE, OP_ENCODE, OP_DECODE, OP_CAPTION, OP_DENOISE, OP_SCORE, OP_SCORE,
                OP_SCORE
            ]
        );
    }

    #[test]
    fn degraded_server_reports_unavailable() {
        let server =
            Arc::new(MockServer::new(toy::suite(small_dims()).unwrap()).without(caps::DENOISE));
        let (backend, _handle) = connected(server);
        assert!(!backend.report().has(caps::DENOISE));
        assert!(backend.report().has(caps::CAPTION));
        let z = LatentTensor::zeros(small_dims().latent_shape());
        let mask = PixelMask::all(4, 4, true);
        let input = DenoiseInput {
            latent: &z,
            step: 1,
            alpha_bar: 0.5,
            caption: None,
            guidance: 0.0,
            known: &z,
            mask: &mask,
        };
        assert!(matches!(
            backend.denoise(&input),
            Err(BackendError::Unavailable(_))
        ));
        // the connection survives an error response
        assert!(backend.caption(&Image::filled(3, 16, 16, 0.0)).is_ok());
    }

    #[test]
    fn shape_errors_are_caught_client_side() {
        let server = Arc::new(MockServer::new(toy::suite(small_dims()).unwrap()));
        let (backend, _handle) = connected(server.clone());
        let wrong = LatentTensor::zeros(LatentShape {
            channels: 4,
            height: 8,
            width: 8,
        });
        assert!(matches!(
            backend.decode(&wrong),
            Err(BackendError::Dims { .. })
        ));
        let bad_image = Image::filled(3, 8, 8, 0.5);
        assert!(matches!(
            backend.encode(&bad_image),
            Err(BackendError::Dims { .. })
        ));
    }

    #[test]
    fn mock_rejects_malformed_requests() {
        let server = MockServer::new(toy::suite(small_dims()).unwrap());
        let reply = server.respond(&RawFrame {
            kind: OP_ENCODE,
            round: 9,
            pad_bits: 0,
            payload: vec![1, 2, 3],
        });
        assert_eq!(reply.kind, KIND_ERROR);
        assert_eq!(reply.round, 9);
        assert_eq!(reply.payload[0], ERR_BAD_REQUEST);
        let reply = server.respond(&RawFrame {
            kind: 0x42,
            round: 1,
            pad_bits: 0,
            payload: vec![],
        });
        assert_eq!(reply.kind, KIND_ERROR);
    }

    #[test]
    fn reader_rejects_oversized_tensor() {
        let mut w = Writer::new();
        w.u32(1_000_000).u32(1_000_000).u32(1_000_000);
        assert!(Reader::new(&w.into_bytes()).tensor().is_err());
    }

    #[test]
    fn writer_reader_round_trip() {
        let mask = PixelMask::new(3, 5, (0..15).map(|k| k % 2 == 0).collect()).unwrap();
        let mut w = Writer::new();
        w.u8(7).text("héllo").f64(-2.5).mask(&mask);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.text().unwrap(), "héllo");
        assert_eq!(r.f64().unwrap(), -2.5);
        assert_eq!(r.mask().unwrap(), mask);
        r.finish().unwrap();
    }
}
