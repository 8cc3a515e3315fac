//! Transmitter and receiver endpoints joined by a frame transport.
//!
//! Frame order on the link:
//!
//! ```text
//! down  META   round 0
//! down  TEXT   round 0        (unless no-guidance)
//! down  LATENT round 0        (first-pass blocks, row-major; absent for full-mask)
//! up    REQ    round t+1      (Δ_t)
//! down  LATENT round t+1      (Δ_t blocks in request order; absent if Δ_t is empty)
//! ...
//! up    FIN    round t
//! ```

mod transmitter;
mod transport;
mod wire;

use std::thread;

pub use transmitter::{noise_stream, InitialFrames, Transmitter};
pub use transport::{
    memory_pair, tcp_pair, Direction, FrameTransport, MemoryTransport, Recording, TcpTransport,
    Transcript,
};
pub use wire::{
    decode_request, decode_symbols as decode_symbol_payload, encode_request, encode_symbols, Frame,
    FrameKind, MetaPayload, RawFrame, WireError, HEADER_LEN, SESSION_MAGIC,
};

use crate::backends::{BackendSuite, Image};
use crate::control::{
    Decision, Receiver, RequestPolicy, SessionAbort, SessionConfig, SessionError, SessionResult,
};
use crate::latent::BlockIndex;
use crate::phy::{
    ascii_decode, decode_symbols, deserialize_latent, Demod, LinkModel, PayloadBits,
    BITS_PER_COEFFICIENT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InMemory,
    Tcp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub result: SessionResult,
    /// Frames as seen by the receiver.
    pub transcript: Transcript,
}

fn expect(frame: Frame, kind: FrameKind, round: u16) -> Result<Frame, SessionError> {
    if frame.kind != kind || frame.round != round {
        return Err(SessionError::Protocol(format!(
            "expected {} round {round}, got {} round {}",
            kind.name(),
            frame.kind.name(),
            frame.round
        )));
    }
    Ok(frame)
}

fn round_u16(t: usize) -> Result<u16, SessionError> {
    u16::try_from(t)
        .map_err(|_| SessionError::Protocol(format!("round {t} exceeds the frame field")))
}

fn demod(cfg: &SessionConfig) -> Demod {
    Demod::Soft {
        noise_var: 10f64.powf(-cfg.snr_db / 10.0),
    }
}

fn decode_info(frame: &Frame, cfg: &SessionConfig) -> Result<(Vec<u8>, PayloadBits), SessionError> {
    let symbols = wire::decode_symbols(&frame.payload)?;
    let bits = decode_symbols(&symbols, frame.pad_bits as usize, demod(cfg))?;
    let accounting = PayloadBits::for_info(bits.len());
    Ok((bits, accounting))
}

/// Decodes a LATENT frame into coefficients for `indices`.
fn decode_latent(
    frame: &Frame,
    cfg: &SessionConfig,
    indices: &[BlockIndex],
    per_block: usize,
) -> Result<(Vec<f64>, PayloadBits), SessionError> {
    let (bits, accounting) = decode_info(frame, cfg)?;
    let expected = indices.len() * per_block;
    if bits.len() != expected * BITS_PER_COEFFICIENT {
        return Err(SessionError::Protocol(format!(
            "latent frame carries {} info bits, {} blocks need {}",
            bits.len(),
            indices.len(),
            expected * BITS_PER_COEFFICIENT
        )));
    }
    Ok((deserialize_latent(&bits, expected)?, accounting))
}

/// Receiver endpoint: consumes the initial frames, then loops over
/// decode/score/request until the policy stops.
pub fn run_receiver(
    transport: &mut dyn FrameTransport,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    policy: RequestPolicy,
) -> Result<SessionResult, SessionAbort> {
    let meta_frame = transport
        .recv()
        .and_then(|f| expect(f, FrameKind::Meta, 0))
        .map_err(|e| SessionAbort::new(e, Vec::new()))?;
    let mut receiver = match start_receiver(transport, meta_frame, cfg, suite, policy) {
        Ok(r) => r,
        Err(e) => {
            let _ = transport.send(&Frame::fin(0));
            return Err(SessionAbort::new(e, Vec::new()));
        }
    };
    match drive(transport, &mut receiver, cfg, suite) {
        Ok(by) => receiver
            .finish(by)
            .map_err(|e| SessionAbort::new(e, Vec::new())),
        Err(e) => {
            let _ = transport.send(&Frame::fin(round_u16(receiver.round()).unwrap_or(u16::MAX)));
            Err(SessionAbort::new(e, receiver.into_rounds()))
        }
    }
}

fn start_receiver(
    transport: &mut dyn FrameTransport,
    meta_frame: Frame,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    policy: RequestPolicy,
) -> Result<Receiver, SessionError> {
    let meta = MetaPayload::decode(&meta_frame.payload)?;
    if meta.dims != suite.dims || meta.block_side != cfg.block_side {
        return Err(SessionError::Protocol(format!(
            "META describes {:?} with l={}, receiver is configured for {:?} with l={}",
            meta.dims, meta.block_side, suite.dims, cfg.block_side
        )));
    }
    let mut text_bits = None;
    let caption = if meta.caption_follows {
        let frame = expect(transport.recv()?, FrameKind::Text, 0)?;
        let (bits, accounting) = decode_info(&frame, cfg)?;
        text_bits = Some(accounting);
        // a damaged caption is still used as the reference
        Some(ascii_decode(&bits).unwrap_or_default())
    } else {
        None
    };
    let mut receiver = Receiver::new(cfg.clone(), suite.clone(), meta.mask, caption, policy)?;
    receiver.note_control(meta_frame.payload.len() * 8, text_bits);

    let first = receiver.outstanding();
    if !first.is_empty() {
        let frame = expect(transport.recv()?, FrameKind::Latent, 0)?;
        let per_block = suite.dims.latent_channels * cfg.block_side * cfg.block_side;
        let (coefficients, bits) = decode_latent(&frame, cfg, &first, per_block)?;
        receiver.accept_blocks(&first, &coefficients, bits)?;
    }
    Ok(receiver)
}

fn drive(
    transport: &mut dyn FrameTransport,
    receiver: &mut Receiver,
    cfg: &SessionConfig,
    suite: &BackendSuite,
) -> Result<crate::control::TerminatedBy, SessionError> {
    let per_block = suite.dims.latent_channels * cfg.block_side * cfg.block_side;
    loop {
        let t = receiver.round();
        match receiver.step()? {
            Decision::Stop(by) => {
                transport.send(&Frame::fin(round_u16(t)?))?;
                return Ok(by);
            }
            Decision::Request(delta) => {
                let next = round_u16(t + 1)?;
                transport.send(&Frame::new(
                    FrameKind::Request,
                    next,
                    encode_request(&delta)?,
                ))?;
                if !delta.is_empty() {
                    let frame = expect(transport.recv()?, FrameKind::Latent, next)?;
                    let (coefficients, bits) = decode_latent(&frame, cfg, &delta, per_block)?;
                    receiver.accept_blocks(&delta, &coefficients, bits)?;
                }
            }
        }
    }
}

/// Transmitter endpoint: sends the initial frames and answers requests until
/// FIN.
pub fn run_transmitter(
    transport: &mut dyn FrameTransport,
    image: &Image,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    link: LinkModel,
) -> Result<(), SessionError> {
    let (mut tx, initial) = Transmitter::start(image, cfg, suite, link)?;
    for frame in &initial.frames {
        transport.send(frame)?;
    }
    loop {
        let frame = transport.recv()?;
        match frame.kind {
            FrameKind::Fin => return Ok(()),
            FrameKind::Request => {
                let delta = decode_request(&frame.payload)?;
                if let Some((reply, _)) = tx.serve_request(frame.round, &delta)? {
                    transport.send(&reply)?;
                }
            }
            other => {
                return Err(SessionError::Protocol(format!(
                    "transmitter received downlink frame {}",
                    other.name()
                )))
            }
        }
    }
}

fn is_hang_up(e: &SessionError) -> bool {
    matches!(
        e,
        SessionError::Transport(_) | SessionError::Wire(WireError::Io(_))
    )
}

/// Runs both endpoints, each on its own thread, joined by `kind`.
pub fn run_end_to_end(
    image: &Image,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    link: LinkModel,
    policy: RequestPolicy,
    kind: TransportKind,
) -> Result<SessionOutcome, SessionAbort> {
    match kind {
        TransportKind::InMemory => {
            let (a, b) = memory_pair();
            run_pair(a, b, image, cfg, suite, link, policy)
        }
        TransportKind::Tcp => {
            let (a, b) = tcp_pair().map_err(|e| SessionAbort::new(e, Vec::new()))?;
            run_pair(a, b, image, cfg, suite, link, policy)
        }
    }
}

fn run_pair<T: FrameTransport>(
    mut tx_side: T,
    rx_side: T,
    image: &Image,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    link: LinkModel,
    policy: RequestPolicy,
) -> Result<SessionOutcome, SessionAbort> {
    thread::scope(|scope| {
        let tx_handle = scope.spawn(move || {
            let out = run_transmitter(&mut tx_side, image, cfg, suite, link);
            drop(tx_side);
            out
        });
        let mut recording = Recording::new(rx_side);
        let received = run_receiver(&mut recording, cfg, suite, policy);
        let transcript = recording.into_transcript();
        let sent = tx_handle.join().unwrap_or_else(|_| {
            Err(SessionError::Transport(
                "transmitter thread panicked".into(),
            ))
        });
        match (received, sent) {
            (Ok(result), Ok(())) => Ok(SessionOutcome { result, transcript }),
            // the transmitter's error explains a receiver-side hang-up
            (Err(abort), Err(tx_err)) if is_hang_up(&abort.error) => {
                Err(SessionAbort::new(tx_err, abort.rounds))
            }
            (Err(abort), _) => Err(abort),
            (Ok(result), Err(tx_err)) => Err(SessionAbort::new(tx_err, result.rounds)),
        }
    })
}
