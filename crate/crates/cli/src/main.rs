mod backend;
mod imageio;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use semreq::control::{run_scheme, Accounting, RoundRecord};
use semreq::diffusion::ForwardNoise;
use semreq::latent::RateReport;
use semreq::metrics::{psnr, ssim};
use semreq::phy::ber_point;
use semreq::selftest::run_selftest;
use semreq::sweep::{
    run_grid, synthetic_corpus, CsvSink, ExperimentGrid, Format, ResultRow, SweepContext,
};
use semreq::{ChannelConfig, LinkModel, Scheme, SessionConfig, TensorDims, TerminatedBy};

use backend::BackendOpts;

#[derive(Parser)]
#[command(
    name = "semreq",
    version,
    about = "Semantic retransmission over a simulated 16-QAM link"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session and report every round.
    Run(RunArgs),
    /// Run a parameter grid and write one row per session.
    Sweep(SweepArgs),
    /// Measure uncoded and coded bit error rates.
    PhyBench(PhyBenchArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
    /// Serve the toy backends over the bridge protocol on stdio.
    #[command(hide = true)]
    MockBridge(MockBridgeArgs),
}

/// Parameters shared by `run` and `sweep`.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Request ratio per round.
    #[arg(long, default_value_t = 0.0625)]
    rho: f64,
    /// First-pass sending rate.
    #[arg(long, default_value_t = 0.125)]
    q0: f64,
    #[arg(long, default_value_t = 6)]
    tmax: usize,
    /// Guidance scale.
    #[arg(long, default_value_t = 9.0)]
    w: f64,
    /// Maximum DDIM steps.
    #[arg(long = "T", default_value_t = 50)]
    steps: usize,
    /// Decode only the guided branch each round.
    #[arg(long)]
    single_branch: bool,
    /// Seed the forward noise instead of using the deterministic map.
    #[arg(long)]
    stochastic: bool,
    /// Image size as CxHxW.
    #[arg(long, default_value = "3x512x512", value_parser = parse_triple)]
    image_size: [usize; 3],
    /// Latent size as CxHxW.
    #[arg(long, default_value = "4x64x64", value_parser = parse_triple)]
    latent_size: [usize; 3],
    #[command(flatten)]
    backend: BackendOpts,
}

impl CommonArgs {
    fn base_config(&self, seed: u64) -> SessionConfig {
        SessionConfig {
            rho: self.rho,
            q0: self.q0,
            t_max: self.tmax,
            guidance: self.w,
            steps: self.steps,
            seed,
            dual_branch: !self.single_branch,
            forward_noise: if self.stochastic {
                ForwardNoise::Stochastic { seed }
            } else {
                ForwardNoise::Deterministic
            },
            ..SessionConfig::default()
        }
    }

    fn dims(&self) -> Result<TensorDims> {
        Ok(TensorDims::new(self.image_size, self.latent_size)?)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    #[arg(long, default_value_t = 0.7)]
    tau: f64,
    /// Block side in latent cells.
    #[arg(long = "l", default_value_t = 4)]
    block_side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "main")]
    scheme: Scheme,
    /// Disable channel noise.
    #[arg(long)]
    noiseless: bool,
    /// Input image (PNG or PPM); resized to the image size. Defaults to a
    /// synthetic scene.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Index of the synthetic scene used without `--input`.
    #[arg(long, default_value_t = 0)]
    synthetic: usize,
    /// Write the reconstruction here.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,6,7,8,9,10")]
    snr: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.7")]
    tau: Vec<f64>,
    #[arg(long = "l", value_delimiter = ',', default_value = "4")]
    block_side: Vec<usize>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "main,no_guidance,full_mask"
    )]
    scheme: Vec<Scheme>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds per image.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Number of synthetic scenes, ignored with `--image-dir`.
    #[arg(long, default_value_t = 16)]
    images: usize,
    /// Directory of PNG/PPM inputs.
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Row output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-(scheme, τ) summary as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct PhyBenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,7,8,10,12")]
    snr: Vec<f64>,
    /// Info bits per point.
    #[arg(long, default_value_t = 100_000)]
    bits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MockBridgeArgs {
    #[arg(long, default_value = "3x64x64", value_parser = parse_triple)]
    image_size: [usize; 3],
    #[arg(long, default_value = "4x8x8", value_parser = parse_triple)]
    latent_size: [usize; 3],
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected CxHxW, got `{s}`"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| format!("`{p}` is not a size"))?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a SessionConfig,
    source_caption: String,
    received_caption: Option<&'a str>,
    terminated_by: TerminatedBy,
    rounds: &'a [RoundRecord],
    rate: RateReport,
    accounting: Accounting,
    ssim: f64,
    psnr: f64,
}

fn link(snr: f64, seed: u64, noiseless: bool) -> Result<LinkModel> {
    Ok(if noiseless {
        LinkModel::Noiseless
    } else {
        LinkModel::Awgn(ChannelConfig::new(snr, seed)?)
    })
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let backend = args.common.backend.open(args.common.dims()?)?;
    let suite = &backend.suite;
    let image = match &args.input {
        Some(path) => imageio::load(path, &suite.dims)?,
        None => synthetic_corpus(args.synthetic + 1, &suite.dims)
            .pop()
            .map(|(_, im)| im)
            .context("empty corpus")?,
    };
    let cfg = SessionConfig {
        tau: args.tau,
        snr_db: args.snr,
        block_side: args.block_side,
        scheme: args.scheme,
        ..args.common.base_config(args.seed)
    };
    let source_caption = suite.captioner.caption(&image)?;
    let result = run_scheme(
        &image,
        &cfg,
        suite,
        link(args.snr, args.seed, args.noiseless)?,
    )
    .map_err(|abort| {
        anyhow::anyhow!(
            "session failed after {} rounds: {}",
            abort.rounds.len(),
            abort.error
        )
    })?;
    if let Some(path) = &args.output {
        imageio::save(path, &result.image)?;
    }
    let report = RunReport {
        config: &cfg,
        source_caption,
        received_caption: result.received_caption.as_deref(),
        terminated_by: result.terminated_by,
        rounds: &result.rounds,
        rate: result.rate,
        accounting: result.accounting,
        ssim: ssim(&image, &result.image)?,
        psnr: psnr(&image, &result.image)?,
    };
    let mut out = io::stdout().lock();
    if args.json {
        serde_json::to_writer_pretty(&mut out, &report)?;
        writeln!(out)?;
    } else {
        writeln!(out, "source caption:   {}", report.source_caption)?;
        writeln!(
            out,
            "received caption: {}",
            report.received_caption.unwrap_or("-")
        )?;
        for r in report.rounds {
            writeln!(
                out,
                "t={} d={:.4} s={:.4} S={} r={} gamma={} received={} requested={} caption={}",
                r.t,
                r.d,
                r.s,
                r.steps,
                r.r.map_or("-".into(), |v| format!("{v:.4}")),
                r.selected_guidance,
                r.received_blocks,
                r.requested.len(),
                r.candidate_caption.as_deref().unwrap_or("-")
            )?;
        }
        writeln!(
            out,
            "terminated_by={:?} q={:.4} kappa={:.5} info_bits={} coded_bits={} ssim={:.4} psnr={:.2}",
            report.terminated_by,
            report.rate.q,
            report.rate.kappa,
            report.accounting.info_bits(),
            report.accounting.coded_payload_bits(),
            report.ssim,
            report.psnr
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let backend = args.common.backend.open(args.common.dims()?)?;
    let images = match &args.image_dir {
        Some(dir) => imageio::load_dir(dir, &backend.suite.dims)?,
        None => synthetic_corpus(args.images, &backend.suite.dims),
    };
    if images.is_empty() {
        bail!("no input images");
    }
    let grid = ExperimentGrid {
        snr_db: args.snr,
        tau: args.tau,
        block_side: args.block_side,
        schemes: args.scheme,
        seeds: (0..args.seeds).collect(),
    };
    let ctx = SweepContext {
        base: args.common.base_config(args.seed),
        suite: &backend.suite,
        images: &images,
        master_seed: args.seed,
        scorer: backend.scorer(),
    };
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let summary = match args.format {
        Format::Csv => {
            let mut csv = CsvSink::new(sink)?;
            let summary = run_grid(&grid, &ctx, |row| csv.write(row))?;
            csv.finish()?.flush()?;
            summary
        }
        Format::Json => {
            let mut rows: Vec<ResultRow> = Vec::new();
            let summary = run_grid(&grid, &ctx, |row| {
                rows.push(row.clone());
                Ok(())
            })?;
            semreq::sweep::write_rows(&rows, Format::Json, sink)?.flush()?;
            summary
        }
    };
    for g in &summary.groups {
        eprintln!(
            "{} tau={} sessions={} mean_t={:.3} mean_kappa={:.5} mean_rouge_l={:.4} mean_ssim={:.4} hist={:?}{}",
            g.scheme,
            g.tau,
            g.sessions,
            g.mean_t,
            g.mean_kappa,
            g.mean_rouge_l,
            g.mean_ssim,
            g.histogram,
            g.fid.map_or(String::new(), |f| format!(" fid={f:.4}"))
        );
    }
    if let Some(path) = &args.summary {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &summary)?;
    }
    if summary.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &summary.failures {
        eprintln!(
            "FAILED {} snr={} tau={} l={} image={} seed={}: {}",
            f.scheme, f.snr_db, f.tau, f.l, f.image, f.seed, f.error
        );
    }
    if summary.rows == 0 {
        bail!("every cell failed");
    }
    Ok(ExitCode::from(2))
}

fn cmd_phy_bench(args: PhyBenchArgs) -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    writeln!(out, "snr_db,info_bits,uncoded,coded_hard,coded_soft")?;
    for &snr in &args.snr {
        let p = ber_point(snr, args.bits, args.seed)?;
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            p.snr_db, p.info_bits, p.uncoded, p.coded_hard, p.coded_soft
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(args: SelftestArgs) -> Result<ExitCode> {
    let checks = run_selftest(args.seed);
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_mock_bridge(args: MockBridgeArgs) -> Result<ExitCode> {
    let dims = TensorDims::new(args.image_size, args.latent_size)?;
    let server = semreq::backends::bridge::mock::MockServer::new(semreq::BackendSuite::toy(dims)?);
    server.serve(io::stdin().lock(), io::stdout().lock())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::PhyBench(a) => cmd_phy_bench(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::MockBridge(a) => cmd_mock_bridge(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendChoice;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn triples() {
        assert_eq!(parse_triple("3x512x512"), Ok([3, 512, 512]));
        assert!(parse_triple("3x512").is_err());
        assert!(parse_triple("ax1x1").is_err());
    }

    #[test]
    fn flag_names() {
        let cli = Cli::try_parse_from([
            "semreq",
            "run",
            "--snr",
            "7",
            "--tau",
            "0.5",
            "--l",
            "8",
            "--rho",
            "0.125",
            "--q0",
            "0.25",
            "--tmax",
            "3",
            "--w",
            "4",
            "--T",
            "20",
            "--seed",
            "9",
            "--scheme",
            "no-guidance",
            "--backend",
            "toy",
        ])
        .unwrap();
        let Command::Run(run) = cli.command else {
            panic!()
        };
        assert_eq!(run.block_side, 8);
        assert_eq!(run.common.steps, 20);
        assert_eq!(run.scheme, Scheme::NoGuidance);
        assert_eq!(run.common.backend.backend, BackendChoice::Toy);
        let cli = Cli::try_parse_from([
            "semreq",
            "sweep",
            "--snr",
            "5,10",
            "--scheme",
            "main,full_mask",
        ])
        .unwrap();
        let Command::Sweep(s) = cli.command else {
            panic!()
        };
        assert_eq!(s.snr, vec![5.0, 10.0]);
        assert_eq!(s.scheme, vec![Scheme::Main, Scheme::FullMask]);
    }
}
