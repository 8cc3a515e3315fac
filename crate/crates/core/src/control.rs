//! Semantic scoring and the receiver side of the retransmission loop.
//!
//! Each round the receiver rebuilds the mask from the blocks it holds,
//! inpaints the missing latent, captions the reconstruction and compares it
//! with the caption that arrived over the channel. It either acknowledges or
//! asks for `ρN` more withheld blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite, Image};
use crate::diffusion::{
    run_inpainting, step_count, strength, DiffusionSchedule, ForwardNoise, InpaintError,
    InpaintParams,
};
use crate::latent::{
    blocks_for_ratio, embed, lift_mask, partition, select_request, split_sets, update_sets,
    BlockGrid, BlockIndex, BlockMask, CodecError, IndexSets, RateReport, TensorDims,
};
use crate::phy::{LinkModel, PayloadBits, PhyError};
use crate::session::WireError;

/// Received coefficients beyond this magnitude are treated as corrupted.
pub const MAX_PLAUSIBLE_COEFFICIENT: f64 = 1e6;

const MASK_STREAM: u64 = 0;
const REQUEST_STREAM: u64 = 1;

fn normalize_token(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Lowercased whitespace tokens with ASCII punctuation removed; tokens that
/// end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Length of the longest common subsequence of two token lists.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with `β = 1`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    let lcs = lcs_len(&cand, &refs);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refs.len() as f64;
    2.0 * p * r / (p + r)
}

/// Transmission scheme under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Caption plus latent blocks, semantic requests, dual-branch guidance.
    Main,
    /// Latent blocks only; follows a request schedule fixed elsewhere.
    NoGuidance,
    /// Caption only; every block withheld, no requests.
    FullMask,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Main, Scheme::NoGuidance, Scheme::FullMask];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Main => "main",
            Scheme::NoGuidance => "no_guidance",
            Scheme::FullMask => "full_mask",
        }
    }

    pub fn sends_caption(&self) -> bool {
        !matches!(self, Scheme::NoGuidance)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "main" => Ok(Scheme::Main),
            "no_guidance" => Ok(Scheme::NoGuidance),
            "full_mask" => Ok(Scheme::FullMask),
            other => Err(format!(
                "unknown scheme `{other}` (main, no_guidance, full_mask)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub tau: f64,
    pub rho: f64,
    pub t_max: usize,
    /// Guidance scale `w`.
    pub guidance: f64,
    /// Maximum DDIM steps `T`.
    pub steps: usize,
    pub snr_db: f64,
    pub q0: f64,
    pub block_side: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Decode with both `γ = w` and `γ = 0` each round.
    pub dual_branch: bool,
    pub forward_noise: ForwardNoise,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            rho: 0.0625,
            t_max: 6,
            guidance: 9.0,
            steps: 50,
            snr_db: 10.0,
            q0: 0.125,
            block_side: 4,
            seed: 0,
            scheme: Scheme::Main,
            dual_branch: true,
            forward_noise: ForwardNoise::Deterministic,
        }
    }
}

/// Block counts implied by a config on a concrete latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionPlan {
    pub grid: BlockGrid,
    pub blocks: usize,
    pub first_pass: usize,
    pub per_round: usize,
    pub t_max: usize,
}

impl SessionConfig {
    pub fn validate(&self, dims: &TensorDims) -> Result<SessionPlan, SessionError> {
        let bad = |msg: String| Err(SessionError::Config(msg));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if !(0.0..=1.0).contains(&self.q0) {
            return bad(format!("q0 {} outside [0, 1]", self.q0));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return bad(format!(
                "guidance {} must be finite and non-negative",
                self.guidance
            ));
        }
        if !self.snr_db.is_finite() {
            return bad(format!("snr {} is not finite", self.snr_db));
        }
        if self.steps == 0 {
            return bad("T must be at least 1".into());
        }
        let grid = partition(dims.latent_height, dims.latent_width, self.block_side)?;
        let blocks = grid.count();
        let per_round = blocks_for_ratio("rho", self.rho, blocks)?;
        let (first_pass, t_max) = match self.scheme {
            Scheme::FullMask => (0, 0),
            _ => (blocks_for_ratio("q0", self.q0, blocks)?, self.t_max),
        };
        Ok(SessionPlan {
            grid,
            blocks,
            first_pass,
            per_round,
            t_max,
        })
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a mask with exactly `(1 − q₀)N` withheld blocks, uniformly at random.
pub fn draw_initial_mask(grid: BlockGrid, q0: f64, seed: u64) -> Result<BlockMask, CodecError> {
    let n = grid.count();
    let sent = blocks_for_ratio("q0", q0, n)?;
    let mut rng = stream_rng(seed, MASK_STREAM);
    let mut bits = vec![false; n];
    for k in rand::seq::index::sample(&mut rng, n, n - sent) {
        bits[k] = true;
    }
    BlockMask::new(grid, bits)
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Inpaint(#[from] InpaintError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("transport: {0}")]
    Transport(String),
}

/// A session that stopped early, with whatever rounds completed.
#[derive(Debug, Error)]
#[error("session aborted after {} round(s): {error}", rounds.len())]
pub struct SessionAbort {
    #[source]
    pub error: SessionError,
    pub rounds: Vec<RoundRecord>,
}

impl SessionAbort {
    pub fn new(error: impl Into<SessionError>, rounds: Vec<RoundRecord>) -> Self {
        Self {
            error: error.into(),
            rounds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    /// `r_t ≥ τ`.
    Threshold,
    /// `t = t_max` with `r_t < τ`.
    Exhausted,
    /// A replayed request schedule ran out.
    Scheduled,
}

/// One decode/score/decide cycle of the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub d: f64,
    pub s: f64,
    /// Starting DDIM step; zero when nothing is withheld.
    pub steps: usize,
    pub r_w: Option<f64>,
    pub r_0: Option<f64>,
    /// Score of the selected branch.
    pub r: Option<f64>,
    pub selected_guidance: f64,
    pub candidate_caption: Option<String>,
    /// Blocks that arrived before this round's decode.
    pub received_blocks: usize,
    /// Info and coded bits of the latent frame that carried them.
    pub latent_bits: PayloadBits,
    /// Blocks requested at the end of the round (`Δ_t`).
    pub requested: Vec<BlockIndex>,
}

/// Bit totals of one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Accounting {
    pub meta_bits: usize,
    pub text: PayloadBits,
    pub latent: PayloadBits,
    pub latent_blocks: usize,
}

impl Accounting {
    pub fn info_bits(&self) -> usize {
        self.meta_bits + self.text.info + self.latent.info
    }

    /// Coded payload bits over the noisy link, tails excluded.
    pub fn coded_payload_bits(&self) -> usize {
        self.text.coded_payload + self.latent.coded_payload
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub image: Image,
    pub rounds: Vec<RoundRecord>,
    pub terminated_by: TerminatedBy,
    pub rate: RateReport,
    pub received_caption: Option<String>,
    pub accounting: Accounting,
}

impl SessionResult {
    /// Index of the final round.
    pub fn final_round(&self) -> usize {
        self.rounds.last().map_or(0, |r| r.t)
    }

    pub fn final_score(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.r)
    }
}

/// How the receiver chooses `Δ_t`.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestPolicy {
    /// Score against the received caption; request uniformly at random.
    Semantic,
    /// Request exactly these sets in order, then stop.
    Replay(Vec<Vec<BlockIndex>>),
}

impl RequestPolicy {
    pub fn replay_of(result: &SessionResult) -> Self {
        let mut schedule: Vec<Vec<BlockIndex>> =
            result.rounds.iter().map(|r| r.requested.clone()).collect();
        // the last round never requests
        schedule.pop();
        RequestPolicy::Replay(schedule)
    }
}

/// What the receiver wants after a round.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Stop(TerminatedBy),
    Request(Vec<BlockIndex>),
}

struct Branch {
    guidance: f64,
    image: Image,
    caption: Option<String>,
    score: Option<f64>,
}

/// Receiver state machine, independent of how frames travel.
pub struct Receiver {
    cfg: SessionConfig,
    plan: SessionPlan,
    suite: BackendSuite,
    schedule: DiffusionSchedule,
    sets: IndexSets,
    received: BTreeMap<BlockIndex, Vec<f64>>,
    caption: Option<String>,
    policy: RequestPolicy,
    rng: ChaCha8Rng,
    rounds: Vec<RoundRecord>,
    pending_blocks: usize,
    pending_bits: PayloadBits,
    accounting: Accounting,
    image: Option<Image>,
}

impl fmt::Debug for Receiver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Receiver")
            .field("round", &self.rounds.len())
            .field("withheld", &self.sets.withheld.len())
            .field("received", &self.received.len())
            .finish_non_exhaustive()
    }
}

fn sanitize(value: f64) -> f64 {
    if value.is_finite() && value.abs() <= MAX_PLAUSIBLE_COEFFICIENT {
        value
    } else {
        0.0
    }
}

impl Receiver {
    pub fn new(
        cfg: SessionConfig,
        suite: BackendSuite,
        mask: BlockMask,
        caption: Option<String>,
        policy: RequestPolicy,
    ) -> Result<Self, SessionError> {
        let plan = cfg.validate(&suite.dims)?;
        if mask.grid() != plan.grid {
            return Err(SessionError::Protocol(format!(
                "mask grid {:?} does not match configured {:?}",
                mask.grid(),
                plan.grid
            )));
        }
        let schedule = DiffusionSchedule::linear(cfg.steps)?;
        let rng = stream_rng(cfg.seed, REQUEST_STREAM);
        Ok(Self {
            sets: split_sets(&mask),
            cfg,
            plan,
            suite,
            schedule,
            received: BTreeMap::new(),
            caption,
            policy,
            rng,
            rounds: Vec::new(),
            pending_blocks: 0,
            pending_bits: PayloadBits::default(),
            accounting: Accounting::default(),
            image: None,
        })
    }

    pub fn round(&self) -> usize {
        self.rounds.len()
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn into_rounds(self) -> Vec<RoundRecord> {
        self.rounds
    }

    pub fn sets(&self) -> &IndexSets {
        &self.sets
    }

    pub fn caption(&self) -> Option<&str> {
        self.caption.as_deref()
    }

    /// Records the caption bits and the meta bits for the totals.
    pub fn note_control(&mut self, meta_bits: usize, text: Option<PayloadBits>) {
        self.accounting.meta_bits += meta_bits;
        if let Some(bits) = text {
            self.accounting.text += bits;
        }
    }

    /// Blocks the receiver expects but does not hold yet.
    pub fn outstanding(&self) -> Vec<BlockIndex> {
        self.sets
            .transmitted
            .iter()
            .filter(|b| !self.received.contains_key(b))
            .copied()
            .collect()
    }

    /// Stores decoded coefficients of `indices` (list order, one block after
    /// another).
    pub fn accept_blocks(
        &mut self,
        indices: &[BlockIndex],
        coefficients: &[f64],
        bits: PayloadBits,
    ) -> Result<(), SessionError> {
        let per_block = self.suite.dims.latent_channels * self.cfg.block_side * self.cfg.block_side;
        if coefficients.len() != indices.len() * per_block {
            return Err(CodecError::PayloadLength {
                expected: indices.len() * per_block,
                found: coefficients.len(),
            }
            .into());
        }
        for (k, &index) in indices.iter().enumerate() {
            if !self.sets.transmitted.contains(&index) {
                return Err(SessionError::Protocol(format!(
                    "block {index} was not expected"
                )));
            }
            if self.received.contains_key(&index) {
                return Err(CodecError::DuplicateBlock(index).into());
            }
            let block = coefficients[k * per_block..(k + 1) * per_block]
                .iter()
                .map(|&v| sanitize(v))
                .collect();
            self.received.insert(index, block);
        }
        self.pending_blocks += indices.len();
        self.pending_bits += bits;
        self.accounting.latent += bits;
        self.accounting.latent_blocks += indices.len();
        Ok(())
    }

    fn branch_guidances(&self) -> Vec<f64> {
        match self.cfg.scheme {
            Scheme::NoGuidance => vec![0.0],
            Scheme::FullMask => vec![self.cfg.guidance],
            Scheme::Main if self.cfg.dual_branch => vec![self.cfg.guidance, 0.0],
            Scheme::Main => vec![self.cfg.guidance],
        }
    }

    /// Runs round `t`: decode every branch, score, select, decide.
    pub fn step(&mut self) -> Result<Decision, SessionError> {
        let outstanding = self.outstanding();
        if !outstanding.is_empty() {
            return Err(SessionError::Protocol(format!(
                "{} transmitted block(s) never arrived, first {}",
                outstanding.len(),
                outstanding[0]
            )));
        }
        let t = self.rounds.len();
        let shape = self.suite.latent_shape();
        let side = self.cfg.block_side;
        let mask = self.sets.mask(self.plan.grid)?;
        let pixel_mask = lift_mask(&mask);
        let order: Vec<BlockIndex> = self.sets.transmitted.iter().copied().collect();
        let payload: Vec<f64> = order
            .iter()
            .flat_map(|b| self.received[b].iter().copied())
            .collect();
        let known = embed(&payload, &order, &pixel_mask, shape, side)?;

        let d = self.sets.withheld.len() as f64 / self.plan.blocks as f64;
        let s = strength(self.cfg.snr_db, d);
        let steps = if self.sets.withheld.is_empty() {
            0
        } else {
            step_count(s, self.schedule.steps())
        };

        let mut branches = Vec::new();
        for guidance in self.branch_guidances() {
            let z = if steps == 0 {
                known.clone()
            } else {
                let params = InpaintParams {
                    guidance,
                    strength: s,
                    steps,
                    forward_noise: self.cfg.forward_noise,
                };
                run_inpainting(
                    &known,
                    &pixel_mask,
                    self.caption.as_deref(),
                    &params,
                    &self.schedule,
                    self.suite.denoiser.as_ref(),
                )?
            };
            let image = self.suite.decoder.decode(&z)?;
            let (caption, score) = match &self.caption {
                Some(reference) => {
                    let candidate = self.suite.captioner.caption(&image)?;
                    let score = rouge_l(&candidate, reference);
                    (Some(candidate), Some(score))
                }
                None => (None, None),
            };
            branches.push(Branch {
                guidance,
                image,
                caption,
                score,
            });
        }

        // first maximum wins, so ties keep the guided branch
        let mut best = 0;
        for (k, b) in branches.iter().enumerate().skip(1) {
            if b.score.unwrap_or(f64::NEG_INFINITY)
                > branches[best].score.unwrap_or(f64::NEG_INFINITY)
            {
                best = k;
            }
        }
        let (r_w, r_0) = match self.cfg.scheme {
            Scheme::NoGuidance => (None, branches[0].score),
            _ => (branches[0].score, branches.get(1).and_then(|b| b.score)),
        };
        let chosen = branches.swap_remove(best);

        let decision = match &self.policy {
            RequestPolicy::Replay(schedule) => match schedule.get(t) {
                Some(delta) => Decision::Request(delta.clone()),
                None => Decision::Stop(TerminatedBy::Scheduled),
            },
            RequestPolicy::Semantic => {
                let r = chosen.score.unwrap_or(0.0);
                if r >= self.cfg.tau {
                    Decision::Stop(TerminatedBy::Threshold)
                } else if t >= self.plan.t_max {
                    Decision::Stop(TerminatedBy::Exhausted)
                } else {
                    Decision::Request(select_request(
                        &self.sets.withheld,
                        self.plan.per_round,
                        &mut self.rng,
                    ))
                }
            }
        };

        let requested = match &decision {
            Decision::Request(delta) => {
                self.sets = update_sets(&self.sets, delta)?;
                delta.clone()
            }
            Decision::Stop(_) => Vec::new(),
        };

        self.rounds.push(RoundRecord {
            t,
            d,
            s,
            steps,
            r_w,
            r_0,
            r: chosen.score,
            selected_guidance: chosen.guidance,
            candidate_caption: chosen.caption,
            received_blocks: std::mem::take(&mut self.pending_blocks),
            latent_bits: std::mem::take(&mut self.pending_bits),
            requested,
        });
        self.image = Some(chosen.image);
        Ok(decision)
    }

    pub fn finish(self, terminated_by: TerminatedBy) -> Result<SessionResult, SessionError> {
        let image = self
            .image
            .ok_or_else(|| SessionError::Protocol("session finished before any round".into()))?;
        Ok(SessionResult {
            image,
            rounds: self.rounds,
            terminated_by,
            rate: RateReport::from_counts(
                self.sets.withheld.len(),
                self.plan.blocks,
                &self.suite.dims,
            ),
            received_caption: self.caption,
            accounting: self.accounting,
        })
    }
}

/// Runs one session end to end over the in-memory transport.
pub fn run_session(
    image: &Image,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    link: LinkModel,
) -> Result<SessionResult, SessionAbort> {
    run_session_with(image, cfg, suite, link, RequestPolicy::Semantic)
}

pub fn run_session_with(
    image: &Image,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    link: LinkModel,
    policy: RequestPolicy,
) -> Result<SessionResult, SessionAbort> {
    crate::session::run_end_to_end(
        image,
        cfg,
        suite,
        link,
        policy,
        crate::session::TransportKind::InMemory,
    )
    .map(|outcome| outcome.result)
}

/// Runs `cfg.scheme`. A no-guidance session first runs the main scheme on the
/// same seeds and replays its request schedule.
pub fn run_scheme(
    image: &Image,
    cfg: &SessionConfig,
    suite: &BackendSuite,
    link: LinkModel,
) -> Result<SessionResult, SessionAbort> {
    match cfg.scheme {
        Scheme::NoGuidance => {
            let main_cfg = SessionConfig {
                scheme: Scheme::Main,
                ..cfg.clone()
            };
            let main = run_session(image, &main_cfg, suite, link)?;
            run_session_with(image, cfg, suite, link, RequestPolicy::replay_of(&main))
        }
        _ => run_session(image, cfg, suite, link),
    }
}

/// Distinct blocks across a list of requests.
pub fn distinct_blocks(rounds: &[RoundRecord]) -> BTreeSet<BlockIndex> {
    rounds
        .iter()
        .flat_map(|r| r.requested.iter().copied())
        .collect()
}
