use std::collections::BTreeSet;

use crate::backends::{BackendSuite, Image};
use crate::control::{draw_initial_mask, Scheme, SessionConfig, SessionError};
use crate::latent::{extract_blocks, split_sets, BlockIndex, BlockMask, CodecError, LatentTensor};
use crate::phy::{
    ascii_encode, encode_bits, serialize_latent, AwgnChannel, LinkModel, PayloadBits,
};

use super::wire::{encode_symbols, Frame, FrameKind, MetaPayload};

/// Noise stream of a data frame, so every (kind, round) pair sees its own
/// realisation regardless of which other frames were sent.
pub fn noise_stream(kind: FrameKind, round: u16) -> u64 {
    ((kind as u64) << 16) | round as u64
}

/// Sender endpoint. Holds the full latent for the whole session so it can
/// answer any later request.
#[derive(Debug)]
pub struct Transmitter {
    link: LinkModel,
    side: usize,
    latent: LatentTensor,
    mask: BlockMask,
    withheld: BTreeSet<BlockIndex>,
    caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialFrames {
    pub frames: Vec<Frame>,
    pub text_bits: Option<PayloadBits>,
    pub latent_bits: Option<PayloadBits>,
}

impl Transmitter {
    /// Encodes and captions the image, draws the first-pass mask and builds
    /// META, then TEXT and LATENT when the scheme sends them.
    pub fn start(
        image: &Image,
        cfg: &SessionConfig,
        suite: &BackendSuite,
        link: LinkModel,
    ) -> Result<(Self, InitialFrames), SessionError> {
        let plan = cfg.validate(&suite.dims)?;
        suite.check_image(image)?;
        let latent = suite.encoder.encode(image)?;
        crate::backends::check_latent(suite.latent_shape(), &latent)?;
        let mask = match cfg.scheme {
            Scheme::FullMask => BlockMask::all(plan.grid, true),
            _ => draw_initial_mask(plan.grid, cfg.q0, cfg.seed)?,
        };
        let caption = if cfg.scheme.sends_caption() {
            Some(suite.captioner.caption(image)?)
        } else {
            None
        };
        let sets = split_sets(&mask);
        let tx = Self {
            link,
            side: cfg.block_side,
            latent,
            withheld: sets.withheld,
            mask: mask.clone(),
            caption,
        };

        let meta = MetaPayload {
            dims: suite.dims,
            block_side: cfg.block_side,
            q0: if cfg.scheme == Scheme::FullMask {
                0.0
            } else {
                cfg.q0
            },
            seed: cfg.seed,
            caption_follows: tx.caption.is_some(),
            mask,
        };
        let mut frames = vec![Frame::new(FrameKind::Meta, 0, meta.encode()?)];
        let mut text_bits = None;
        if let Some(caption) = &tx.caption {
            let (frame, bits) = tx.data_frame(FrameKind::Text, 0, &ascii_encode(caption))?;
            frames.push(frame);
            text_bits = Some(bits);
        }
        let first: Vec<BlockIndex> = sets.transmitted.iter().copied().collect();
        let mut latent_bits = None;
        if !first.is_empty() {
            let (frame, bits) = tx.latent_frame(0, &first)?;
            frames.push(frame);
            latent_bits = Some(bits);
        }
        Ok((
            tx,
            InitialFrames {
                frames,
                text_bits,
                latent_bits,
            },
        ))
    }

    pub fn caption(&self) -> Option<&str> {
        self.caption.as_deref()
    }

    pub fn latent(&self) -> &LatentTensor {
        &self.latent
    }

    pub fn initial_mask(&self) -> &BlockMask {
        &self.mask
    }

    pub fn withheld(&self) -> &BTreeSet<BlockIndex> {
        &self.withheld
    }

    fn data_frame(
        &self,
        kind: FrameKind,
        round: u16,
        info: &[u8],
    ) -> Result<(Frame, PayloadBits), SessionError> {
        let mut coded = encode_bits(info);
        if let LinkModel::Awgn(config) = self.link {
            AwgnChannel::with_stream(config, noise_stream(kind, round))?
                .add_noise(&mut coded.symbols);
        }
        let frame = Frame {
            kind,
            round,
            pad_bits: coded.pad_bits as u8,
            payload: encode_symbols(&coded.symbols),
        };
        Ok((frame, coded.bits))
    }

    fn latent_frame(
        &self,
        round: u16,
        indices: &[BlockIndex],
    ) -> Result<(Frame, PayloadBits), SessionError> {
        let coefficients = extract_blocks(&self.latent, indices, self.side)?;
        self.data_frame(FrameKind::Latent, round, &serialize_latent(&coefficients)?)
    }

    /// Sends exactly the requested blocks, in request order. An empty request
    /// produces no frame.
    pub fn serve_request(
        &mut self,
        round: u16,
        delta: &[BlockIndex],
    ) -> Result<Option<(Frame, PayloadBits)>, SessionError> {
        if delta.is_empty() {
            return Ok(None);
        }
        let mut seen = BTreeSet::new();
        for &index in delta {
            if !seen.insert(index) {
                return Err(CodecError::DuplicateBlock(index).into());
            }
            if !self.withheld.contains(&index) {
                return Err(CodecError::NotWithheld(index).into());
            }
        }
        let out = self.latent_frame(round, delta)?;
        for index in delta {
            self.withheld.remove(index);
        }
        Ok(Some(out))
    }
}
