use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2d::losses::LossKind;
use s2d::sampling::Problem;
use s2d::trainer::{Preset, SampleCount};
use s2d::{DecoderKind, FirstLayerKind};

#[derive(Parser, Debug)]
#[command(name = "s2d", version, about = "Sparse-to-dense depth prediction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset (rgb/*.ppm, depth/*.pgm, manifest.txt).
    Synth(SynthArgs),
    /// Train a model; writes model.ckpt and log.csv into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; prints a metrics CSV row.
    Eval(EvalArgs),
    /// Predict dense depth for one image.
    Predict(PredictArgs),
    /// Train and evaluate over problems, sample counts and seeds.
    Sweep(SweepArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

/// `N` or `HxW`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("'{s}' is not N or HxW"));
        let (height, width) = match s.split_once(['x', 'X']) {
            Some((h, w)) => (parse(h)?, parse(w)?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        if height == 0 || width == 0 {
            return Err(format!("size '{s}' has a zero extent"));
        }
        Ok(Size { height, width })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchitectureArg {
    Network,
    /// Echoes the sparse input; with `--samples all` it reproduces ground truth.
    SparseEcho,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Frame size, `N` or `HxW`.
    #[arg(long, default_value = "64")]
    pub size: Size,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Foreground objects per scene.
    #[arg(long, default_value_t = s2d::synth::DEFAULT_OBJECT_COUNT)]
    pub objects: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Copy RGB normalization from this dataset instead of computing it.
    #[arg(long)]
    pub normalization_from: Option<PathBuf>,
}

/// Training hyper-parameters shared by `train` and `sweep`. Unset values
/// keep the preset's defaults.
#[derive(Args, Debug)]
pub struct TrainingFlags {
    #[arg(long, value_parser = parse_from_str::<Preset>, default_value = "desk")]
    pub preset: Preset,
    /// Model input size, `N` or `HxW` [default: the preset's, capped at the
    /// smallest frame in the data].
    #[arg(long)]
    pub size: Option<Size>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<LossKind>)]
    pub loss: Option<LossKind>,
    /// conv, depthwise or chandrop.
    #[arg(long, value_parser = parse_from_str::<FirstLayerKind>)]
    pub first_layer: Option<FirstLayerKind>,
    /// deconv2, deconv3, upconv or upproj.
    #[arg(long, value_parser = parse_from_str::<DecoderKind>)]
    pub decoder: Option<DecoderKind>,
    /// Encoder stage widths, e.g. `16,32,64,128`.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub decoder_stages: Option<usize>,
    /// Disable scale/rotation/jitter/flip augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// rgb, sd or rgbd.
    #[arg(long, value_parser = parse_from_str::<Problem>, default_value = "rgbd")]
    pub problem: Problem,
    /// Expected sparse samples per frame, or `all` [default: 100, or 0 for rgb].
    #[arg(long, value_parser = parse_from_str::<SampleCount>)]
    pub samples: Option<SampleCount>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchitectureArg::Network)]
    pub architecture: ArchitectureArg,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sparse samples per frame [default: as trained].
    #[arg(long, value_parser = parse_from_str::<SampleCount>)]
    pub samples: Option<SampleCount>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (binary PPM).
    #[arg(long)]
    pub rgb: PathBuf,
    /// Sparse depth (16-bit PGM, zero = no sample).
    #[arg(long)]
    pub sparse: Option<PathBuf>,
    /// Landmarks in camera coordinates, `x y z` per line; needs --intrinsics.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Camera intrinsics file: `fx fy cx cy height width`.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Keep every N-th row of --depth as the sparse input.
    #[arg(long)]
    pub scanline_stride: Option<usize>,
    /// Dense ground-truth depth PGM; with it, metrics are printed as CSV.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Zero the prediction outside the convex hull of the sparse samples.
    #[arg(long)]
    pub trusted_region: bool,
    /// Output depth PGM.
    #[arg(long)]
    pub out: PathBuf,
    /// Point cloud path [default: --out with a .ply extension]; written
    /// whenever --intrinsics is given.
    #[arg(long)]
    pub ply: Option<PathBuf>,
    /// On-disk depth units per meter for every PGM read or written.
    #[arg(long, default_value_t = s2d::pnm::DEFAULT_DEPTH_SCALE)]
    pub depth_scale: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Training dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Test dataset [default: the last --test-count frames of --data].
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Frames held out of --data when --test-data is absent [default: a quarter].
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_from_str::<Problem>, default_value = "rgb,sd,rgbd")]
    pub problems: Vec<Problem>,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
    pub sample_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = s2d::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
}

fn parse_from_str<T: FromStr<Err = s2d::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: s2d::Error| e.to_string())
}
