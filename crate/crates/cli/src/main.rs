//! `brachy`: batch front end for the planning pipeline.
//!
//! Exit codes: 0 success, 1 domain error (including a failing constraint
//! under `check --strict`), 2 usage error.

mod commands;
mod io;
mod workflow;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use io::Failure;

#[derive(Parser, Debug)]
#[command(name = "brachy", version, about = "Image-guided interstitial brachytherapy planning tools")]
pub struct Cli {
    /// Machine-readable JSON on stdout (carries `"schema": 1`).
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StlFormatArg {
    Binary,
    Ascii,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Re-encode an STL file, or inspect an SVOL volume / label map.
    Convert {
        input: PathBuf,
        /// Output STL path; omit to inspect the input.
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "binary")]
        format: StlFormatArg,
    },
    /// Rigid registration from landmark pairs, optionally refined by ICP.
    Register {
        /// JSON file with `model_points` and `image_points` (≥ 3 pairs).
        #[arg(long)]
        landmarks: PathBuf,
        /// Refine against the applicator surface of a label map.
        #[arg(long)]
        icp: bool,
        /// Label map holding the target surface (required with --icp).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Label whose surface is the ICP target.
        #[arg(long, default_value = brachy_core::phantom::APPLICATOR)]
        target_structure: String,
        /// Catalog device whose mesh is sampled for the model cloud.
        #[arg(long, default_value = "template-6x6")]
        device: String,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iterations: usize,
        /// Write the transform JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded GrowCut segmentation.
    Growcut {
        #[arg(long)]
        volume: PathBuf,
        /// Label map of seed voxels (0 = unlabeled).
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        max_passes: usize,
    },
    /// Grow one structure into another by a Euclidean margin.
    ExpandMargin {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "HR_CTV")]
        source: String,
        #[arg(long, default_value = "IR_CTV")]
        target: String,
        #[arg(long, default_value_t = 10.0)]
        margin_mm: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-hole target reach and OAR transit for a device.
    Feasibility {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "template-6x6")]
        device: String,
        /// Device-to-image transform JSON; identity when omitted.
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        min_depth: f64,
        #[arg(long, default_value_t = 150.0)]
        max_depth: f64,
    },
    /// Per-fraction dose of a plan on the grid of a label map.
    Dose {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dose-volume histograms and metrics per structure.
    Dvh {
        #[arg(long)]
        dose: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Include the cumulative curve points.
        #[arg(long)]
        points: bool,
    },
    /// Constraint verdicts for a dose (or a plan) over a label map.
    Check {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
        dose: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 50.0)]
        ebrt: f64,
        #[arg(long, default_value_t = 5)]
        fractions: u32,
        /// Exit 1 when any row fails.
        #[arg(long)]
        strict: bool,
    },
    /// Run the HTTP service and the igtlink listener.
    Serve {
        #[arg(long, env = "BRACHY_DATA")]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        http: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:18944")]
        igtl: SocketAddr,
        #[arg(long)]
        no_igtl: bool,
    },
    /// Send TRANSFORM / STATUS messages to an igtlink peer.
    IgtlSend {
        #[arg(long, default_value = "127.0.0.1:18944")]
        addr: SocketAddr,
        /// Device name; the service routes TRANSFORMs by case id.
        #[arg(long)]
        device_name: String,
        /// Transform JSON to send.
        #[arg(long, required_unless_present = "status")]
        transform: Option<PathBuf>,
        /// Send a STATUS message with this text instead.
        #[arg(long, conflicts_with = "transform")]
        status: Option<String>,
        #[arg(long, default_value_t = 0)]
        timestamp: u64,
    },
    /// Listen for igtlink messages and print them.
    IgtlRecv {
        #[arg(long, default_value = "127.0.0.1:18944")]
        bind: SocketAddr,
        /// Stop after this many messages.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Write the synthetic pelvis phantom and its reference inputs.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2.0)]
        spacing: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Scripted ARRIVAL to POSTOP run on the phantom against a local archive.
    Workflow {
        /// Archive directory (created if needed).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "phantom-001")]
        case_id: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}
