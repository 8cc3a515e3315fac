use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use semreq::backends::bridge::{caps, BridgeBackend, BridgeClient};
use semreq::backends::QualityScorer;
use semreq::{BackendSuite, TensorDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Toy,
    Bridge,
}

#[derive(Args, Clone)]
pub struct BackendOpts {
    #[arg(long, value_enum, default_value = "toy")]
    pub backend: BackendChoice,
    /// Bridge server command, run with the protocol on its stdio.
    #[arg(long)]
    pub bridge_cmd: Option<String>,
    /// Bridge server address (`host:port`).
    #[arg(long, conflicts_with = "bridge_cmd")]
    pub bridge_addr: Option<String>,
}

pub struct Backend {
    pub suite: BackendSuite,
    bridge: Option<BridgeBackend>,
}

impl Backend {
    /// The bridge's metric scorer, when it offers all three metrics.
    pub fn scorer(&self) -> Option<&dyn QualityScorer> {
        self.bridge
            .as_ref()
            .filter(|b| b.report().has(caps::LPIPS | caps::CLIP_IT | caps::FID))
            .map(|b| b as &dyn QualityScorer)
    }
}

impl BackendOpts {
    /// Toy backends use `dims`; the bridge reports its own.
    pub fn open(&self, dims: TensorDims) -> Result<Backend> {
        match self.backend {
            BackendChoice::Toy => Ok(Backend {
                suite: BackendSuite::toy(dims)?,
                bridge: None,
            }),
            BackendChoice::Bridge => {
                let client = match (&self.bridge_cmd, &self.bridge_addr) {
                    (Some(cmd), None) => {
                        let mut parts = cmd.split_whitespace().map(str::to_owned);
                        let program = parts.next().context("empty --bridge-cmd")?;
                        let args: Vec<String> = parts.collect();
                        BridgeClient::spawn(&program, &args)?
                    }
                    (None, Some(addr)) => BridgeClient::connect(addr.as_str())?,
                    _ => bail!("--backend bridge needs --bridge-cmd or --bridge-addr"),
                };
                let bridge = BridgeBackend::new(Arc::new(client)).context("probing bridge")?;
                let needed = caps::ENCODE | caps::DECODE | caps::DENOISE | caps::CAPTION;
                if !bridge.report().has(needed) {
                    bail!(
                        "bridge lacks session capabilities (reported {:#04x})",
                        bridge.report().capabilities
                    );
                }
                if bridge.report().dims != dims {
                    log::info!("bridge reports dims {:?}", bridge.report().dims);
                }
                Ok(Backend {
                    suite: bridge.suite(),
                    bridge: Some(bridge),
                })
            }
        }
    }
}
