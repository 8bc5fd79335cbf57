use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_point, parse_range, parse_shape};
use seedloc::Point3;

#[derive(Parser, Debug)]
#[command(name = "seedloc", version, about = "Seed localization in 3D CT-like volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// VOI center in world millimetres.
    #[arg(long, value_name = "X,Y,Z", value_parser = parse_point, allow_hyphen_values = true)]
    pub center: Option<Point3>,
    /// VOI size in voxels.
    #[arg(long, value_name = "NX,NY,NZ", value_parser = parse_shape)]
    pub voi: Option<[usize; 3]>,
    /// Isotropic resampling spacing in millimetres.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// HU clamp window.
    #[arg(long, value_name = "LO,HI", value_parser = parse_range, allow_hyphen_values = true)]
    pub clamp: Option<[f64; 2]>,
    /// Detection distance threshold in millimetres.
    #[arg(long = "threshold-mm")]
    pub threshold_mm: Option<f64>,
    /// Volumes processed in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenPhantom {
        /// Number of volumes.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Preprocess volumes and build their probability-map targets.
    MakeTargets {
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the network on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Detect seeds in volumes with a trained model.
    Infer {
        /// Checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Dataset manifest whose volumes are processed.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Individual volume files.
        volumes: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score detections against ground-truth annotations.
    Evaluate {
        /// Ground-truth annotation file.
        #[arg(long, requires = "det", conflicts_with = "dataset")]
        gt: Option<PathBuf>,
        /// Detection file.
        #[arg(long, requires = "gt")]
        det: Option<PathBuf>,
        /// Dataset manifest; detections are looked up in --detections.
        #[arg(long, requires = "detections")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate evaluation reports into a CSV and a text table.
    Report {
        /// `.eval.json` files or directories containing them.
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenPhantom { common, .. }
            | Command::MakeTargets { common, .. }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Gradcheck { common }
            | Command::Report { common, .. } => common,
        }
    }
}
