//! Experiment grids over SNR, threshold and block size, with row emitters.
//!
//! Cells that share `(snr, l, image, seed)` form one paired unit: they share
//! the mask seed and channel seed, so schemes and thresholds differ only in
//! the algorithm. The no-guidance scheme replays the main scheme's request
//! schedule at the same threshold.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendSuite, Image, QualityScorer};
use crate::control::{
    rouge_l, run_session, run_session_with, RequestPolicy, Scheme, SessionConfig, SessionResult,
    TerminatedBy,
};
use crate::latent::TensorDims;
use crate::metrics::{psnr, ssim};
use crate::phy::{ChannelConfig, LinkModel};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid axis `{0}` is empty")]
    EmptyAxis(&'static str),
    #[error("no images")]
    NoImages,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub snr_db: Vec<f64>,
    pub tau: Vec<f64>,
    pub block_side: Vec<usize>,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<(), SweepError> {
        let axes = [
            ("snr", self.snr_db.is_empty()),
            ("tau", self.tau.is_empty()),
            ("l", self.block_side.is_empty()),
            ("scheme", self.schemes.is_empty()),
            ("seed", self.seeds.is_empty()),
        ];
        match axes.iter().find(|(_, empty)| *empty) {
            Some((name, _)) => Err(SweepError::EmptyAxis(name)),
            None => Ok(()),
        }
    }

    pub fn cells(&self, images: usize) -> usize {
        self.snr_db.len()
            * self.tau.len()
            * self.block_side.len()
            * self.schemes.len()
            * self.seeds.len()
            * images
    }
}

/// One session's outcome. `runtime_ms` is not part of the emitted schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub tau: f64,
    pub l: usize,
    pub image: String,
    pub seed: u64,
    /// Final round index.
    pub t: usize,
    pub terminated_by: TerminatedBy,
    pub q: f64,
    pub d: f64,
    pub kappa: f64,
    /// ROUGE-L of the final reconstruction's caption against the clean
    /// source caption.
    pub rouge_l: f64,
    /// Control-loop score against the received caption.
    pub r_ctrl: Option<f64>,
    pub ssim: f64,
    pub psnr: f64,
    pub info_bits: usize,
    pub coded_bits: usize,
    pub latent_blocks: usize,
    pub lpips: Option<f64>,
    pub clip_it: Option<f64>,
    #[serde(skip)]
    pub runtime_ms: f64,
}

pub const CSV_COLUMNS: [&str; 20] = [
    "scheme",
    "snr_db",
    "tau",
    "l",
    "image",
    "seed",
    "t",
    "terminated_by",
    "q",
    "d",
    "kappa",
    "rouge_l",
    "r_ctrl",
    "ssim",
    "psnr",
    "info_bits",
    "coded_bits",
    "latent_blocks",
    "lpips",
    "clip_it",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub tau: f64,
    pub l: usize,
    pub image: String,
    pub seed: u64,
    pub error: String,
}

/// Aggregates per `(scheme, τ)`, unweighted over SNR, `l`, images and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub scheme: Scheme,
    pub tau: f64,
    pub sessions: usize,
    pub mean_t: f64,
    pub mean_kappa: f64,
    pub mean_rouge_l: f64,
    pub mean_ssim: f64,
    /// `histogram[k]` counts sessions that ended at round `k`.
    pub histogram: Vec<usize>,
    pub fid: Option<f64>,
}

impl GroupSummary {
    /// Fraction of sessions that ended at round `t` or earlier.
    pub fn mass_up_to(&self, t: usize) -> f64 {
        if self.sessions == 0 {
            return 0.0;
        }
        self.histogram.iter().take(t + 1).sum::<usize>() as f64 / self.sessions as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub groups: Vec<GroupSummary>,
    pub failures: Vec<CellFailure>,
    pub rows: usize,
}

impl SweepSummary {
    pub fn group(&self, scheme: Scheme, tau: f64) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.scheme == scheme && g.tau == tau)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of a paired unit; thresholds and schemes do not enter.
pub fn unit_seed(master: u64, snr_db: f64, l: usize, image: usize, seed: u64, stream: u64) -> u64 {
    [snr_db.to_bits(), l as u64, image as u64, seed, stream]
        .into_iter()
        .fold(splitmix(master), |acc, v| splitmix(acc ^ v))
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    snr_db: f64,
    l: usize,
    image: usize,
    seed: u64,
}

/// Everything a sweep needs besides the grid.
pub struct SweepContext<'a> {
    pub base: SessionConfig,
    pub suite: &'a BackendSuite,
    pub images: &'a [(String, Image)],
    pub master_seed: u64,
    pub scorer: Option<&'a dyn QualityScorer>,
}

fn row_for(
    ctx: &SweepContext<'_>,
    unit: Unit,
    scheme: Scheme,
    tau: f64,
    source_caption: &str,
    result: &SessionResult,
    runtime_ms: f64,
) -> Result<ResultRow, String> {
    let source = &ctx.images[unit.image].1;
    let candidate = ctx
        .suite
        .captioner
        .caption(&result.image)
        .map_err(|e| e.to_string())?;
    let (lpips, clip_it) = match ctx.scorer {
        Some(s) => (
            Some(s.lpips(source, &result.image).map_err(|e| e.to_string())?),
            Some(
                s.clip_it(&result.image, source_caption)
                    .map_err(|e| e.to_string())?,
            ),
        ),
        None => (None, None),
    };
    Ok(ResultRow {
        scheme,
        snr_db: unit.snr_db,
        tau,
        l: unit.l,
        image: ctx.images[unit.image].0.clone(),
        seed: unit.seed,
        t: result.final_round(),
        terminated_by: result.terminated_by,
        q: result.rate.q,
        d: result.rate.d,
        kappa: result.rate.kappa,
        rouge_l: rouge_l(&candidate, source_caption),
        r_ctrl: result.final_score(),
        ssim: ssim(source, &result.image).map_err(|e| e.to_string())?,
        psnr: psnr(source, &result.image).map_err(|e| e.to_string())?,
        info_bits: result.accounting.info_bits(),
        coded_bits: result.accounting.coded_payload_bits(),
        latent_blocks: result.accounting.latent_blocks,
        lpips,
        clip_it,
        runtime_ms,
    })
}

type CellOutcome = Result<(ResultRow, Image), CellFailure>;

/// Runs every scheme and threshold of one paired unit, in grid order.
fn run_unit(ctx: &SweepContext<'_>, grid: &ExperimentGrid, unit: Unit) -> Vec<CellOutcome> {
    let image = &ctx.images[unit.image].1;
    let fail = |scheme: Scheme, tau: f64, error: String| CellFailure {
        scheme,
        snr_db: unit.snr_db,
        tau,
        l: unit.l,
        image: ctx.images[unit.image].0.clone(),
        seed: unit.seed,
        error,
    };
    let source_caption = match ctx.suite.captioner.caption(image) {
        Ok(c) => c,
        Err(e) => {
            return grid
                .schemes
                .iter()
                .flat_map(|&s| grid.tau.iter().map(move |&t| (s, t)))
                .map(|(s, t)| Err(fail(s, t, format!("source caption: {e}"))))
                .collect();
        }
    };
    let session_seed = unit_seed(
        ctx.master_seed,
        unit.snr_db,
        unit.l,
        unit.image,
        unit.seed,
        0,
    );
    let channel_seed = unit_seed(
        ctx.master_seed,
        unit.snr_db,
        unit.l,
        unit.image,
        unit.seed,
        1,
    );
    let link = match ChannelConfig::new(unit.snr_db, channel_seed) {
        Ok(c) => LinkModel::Awgn(c),
        Err(e) => {
            return grid
                .schemes
                .iter()
                .flat_map(|&s| grid.tau.iter().map(move |&t| (s, t)))
                .map(|(s, t)| Err(fail(s, t, e.to_string())))
                .collect();
        }
    };
    let config = |scheme: Scheme, tau: f64| SessionConfig {
        tau,
        snr_db: unit.snr_db,
        block_side: unit.l,
        seed: session_seed,
        scheme,
        ..ctx.base.clone()
    };

    // main runs are needed for no-guidance replays even if main is not listed
    let needs_main = grid
        .schemes
        .iter()
        .any(|s| matches!(s, Scheme::Main | Scheme::NoGuidance));
    let mut main_runs: BTreeMap<u64, (Result<SessionResult, String>, f64)> = BTreeMap::new();
    if needs_main {
        for &tau in &grid.tau {
            let start = Instant::now();
            let r = run_session(image, &config(Scheme::Main, tau), ctx.suite, link)
                .map_err(|e| e.to_string());
            main_runs.insert(tau.to_bits(), (r, start.elapsed().as_secs_f64() * 1e3));
        }
    }

    let mut out = Vec::new();
    for &scheme in &grid.schemes {
        for &tau in &grid.tau {
            let start = Instant::now();
            let result = match scheme {
                Scheme::Main => {
                    let (r, ms) = &main_runs[&tau.to_bits()];
                    r.clone().map(|r| (r, *ms))
                }
                Scheme::NoGuidance => match &main_runs[&tau.to_bits()].0 {
                    Ok(main) => run_session_with(
                        image,
                        &config(scheme, tau),
                        ctx.suite,
                        link,
                        RequestPolicy::replay_of(main),
                    )
                    .map_err(|e| e.to_string())
                    .map(|r| (r, start.elapsed().as_secs_f64() * 1e3)),
                    Err(e) => Err(format!("main scheme failed: {e}")),
                },
                Scheme::FullMask => run_session(image, &config(scheme, tau), ctx.suite, link)
                    .map_err(|e| e.to_string())
                    .map(|r| (r, start.elapsed().as_secs_f64() * 1e3)),
            };
            let cell = result
                .and_then(|(r, ms)| {
                    let row = row_for(ctx, unit, scheme, tau, &source_caption, &r, ms)?;
                    Ok((row, r.image))
                })
                .map_err(|e| fail(scheme, tau, e));
            out.push(cell);
        }
    }
    out
}

/// Runs the grid, handing rows to `sink` in grid order as batches complete.
/// Units run in parallel when the suite allows it.
pub fn run_grid(
    grid: &ExperimentGrid,
    ctx: &SweepContext<'_>,
    mut sink: impl FnMut(&ResultRow) -> Result<(), SweepError>,
) -> Result<SweepSummary, SweepError> {
    grid.validate()?;
    if ctx.images.is_empty() {
        return Err(SweepError::NoImages);
    }
    let mut units = Vec::new();
    for &l in &grid.block_side {
        for &snr_db in &grid.snr_db {
            for image in 0..ctx.images.len() {
                for &seed in &grid.seeds {
                    units.push(Unit {
                        snr_db,
                        l,
                        image,
                        seed,
                    });
                }
            }
        }
    }

    let batch = if ctx.suite.concurrent {
        (rayon::current_num_threads() * 2).max(1)
    } else {
        1
    };
    let mut acc = Accumulator::new(ctx.base.t_max);
    let mut failures = Vec::new();
    let mut rows = 0;
    for chunk in units.chunks(batch) {
        let outcomes: Vec<Vec<CellOutcome>> = if ctx.suite.concurrent {
            chunk.par_iter().map(|&u| run_unit(ctx, grid, u)).collect()
        } else {
            chunk.iter().map(|&u| run_unit(ctx, grid, u)).collect()
        };
        for cell in outcomes.into_iter().flatten() {
            match cell {
                Ok((row, image)) => {
                    log::debug!(
                        "cell {} snr={} tau={} image={} seed={} took {:.1} ms",
                        row.scheme,
                        row.snr_db,
                        row.tau,
                        row.image,
                        row.seed,
                        row.runtime_ms
                    );
                    sink(&row)?;
                    acc.add(&row, image);
                    rows += 1;
                }
                Err(f) => {
                    log::warn!(
                        "cell {} snr={} tau={} l={} image={} seed={} failed: {}",
                        f.scheme,
                        f.snr_db,
                        f.tau,
                        f.l,
                        f.image,
                        f.seed,
                        f.error
                    );
                    failures.push(f);
                }
            }
        }
    }
    Ok(SweepSummary {
        groups: acc.finish(grid, ctx),
        failures,
        rows,
    })
}

type Group = (Vec<ResultRow>, Vec<(String, Image)>);

struct Accumulator {
    t_max: usize,
    groups: BTreeMap<(Scheme, u64), Group>,
}

impl Accumulator {
    fn new(t_max: usize) -> Self {
        Self {
            t_max,
            groups: BTreeMap::new(),
        }
    }

    fn add(&mut self, row: &ResultRow, image: Image) {
        let entry = self
            .groups
            .entry((row.scheme, row.tau.to_bits()))
            .or_default();
        entry.0.push(row.clone());
        entry.1.push((row.image.clone(), image));
    }

    fn finish(self, grid: &ExperimentGrid, ctx: &SweepContext<'_>) -> Vec<GroupSummary> {
        let mut out = Vec::new();
        for &scheme in &grid.schemes {
            for &tau in &grid.tau {
                let Some((rows, images)) = self.groups.get(&(scheme, tau.to_bits())) else {
                    continue;
                };
                let n = rows.len() as f64;
                let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
                let mut histogram = vec![0; self.t_max + 1];
                for r in rows {
                    if r.t >= histogram.len() {
                        histogram.resize(r.t + 1, 0);
                    }
                    histogram[r.t] += 1;
                }
                let fid = ctx.scorer.and_then(|s| {
                    let generated: Vec<Image> = images.iter().map(|(_, im)| im.clone()).collect();
                    let reference: Vec<Image> = images
                        .iter()
                        .filter_map(|(name, _)| {
                            ctx.images
                                .iter()
                                .find(|(n, _)| n == name)
                                .map(|(_, im)| im.clone())
                        })
                        .collect();
                    s.fid(&generated, &reference).ok()
                });
                out.push(GroupSummary {
                    scheme,
                    tau,
                    sessions: rows.len(),
                    mean_t: mean(|r| r.t as f64),
                    mean_kappa: mean(|r| r.kappa),
                    mean_rouge_l: mean(|r| r.rouge_l),
                    mean_ssim: mean(|r| r.ssim),
                    histogram,
                    fid,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (csv, json)")),
        }
    }
}

/// Streams rows as CSV; the header is written even if no rows follow.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Result<Self, SweepError> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(inner);
        writer.write_record(CSV_COLUMNS)?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<(), SweepError> {
        self.writer.serialize(row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, SweepError> {
        self.writer.flush()?;
        self.writer
            .into_inner()
            .map_err(|e| SweepError::Io(io::Error::other(e.to_string())))
    }
}

pub fn write_rows<W: Write>(
    rows: &[ResultRow],
    format: Format,
    mut out: W,
) -> Result<W, SweepError> {
    match format {
        Format::Csv => {
            let mut sink = CsvSink::new(out)?;
            for r in rows {
                sink.write(r)?;
            }
            sink.finish()
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
            Ok(out)
        }
    }
}

/// Writes rows to `path` in `format`.
pub fn emit(rows: &[ResultRow], format: Format, path: &Path) -> Result<(), SweepError> {
    let file = BufWriter::new(File::create(path)?);
    write_rows(rows, format, file)?.flush()?;
    Ok(())
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Deterministic two-region scenes with soft texture: a coloured top half and
/// bottom half at varying brightness, plus a few blobs.
pub fn synthetic_corpus(count: usize, dims: &TensorDims) -> Vec<(String, Image)> {
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k as u64);
            let top = hsv(
                rng.random_range(0.0..360.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.35..1.0),
            );
            let bottom = hsv(
                rng.random_range(0.0..360.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.35..1.0),
            );
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.05..0.2),
                        hsv(
                            rng.random_range(0.0..360.0),
                            0.8,
                            rng.random_range(0.2..1.0),
                        ),
                    )
                })
                .collect();
            let freq = rng.random_range(2.0..8.0);
            let (h, w) = (dims.height as f64, dims.width as f64);
            let image = Image::from_fn(dims.channels, dims.height, dims.width, |c, y, x| {
                let (fy, fx) = (y as f64 / h, x as f64 / w);
                let c3 = c.min(2);
                let mut v = if fy < 0.5 { top[c3] } else { bottom[c3] };
                for &(by, bx, r, col) in &blobs {
                    let d2 = (fy - by).powi(2) + (fx - bx).powi(2);
                    if d2 < r * r {
                        v = 0.5 * v + 0.5 * col[c3];
                    }
                }
                v + 0.05 * (freq * std::f64::consts::TAU * (fx + 0.5 * fy)).sin()
            });
            (format!("synth{k:02}"), image)
        })
        .collect()
}
