// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::abu::{make_abu_pairs, train_abu, AbuArch};
use crate::binarization::{AbuTopk, SearchMode, TopkConfig, TopkMetric};
use crate::model::{make_training_blocks, train, CodecArch};
use crate::nn::TrainConfig;
use crate::pipeline::sweep::{GEOMETRY_TARGETS, JOINT_TARGETS};
use crate::pipeline::{decode, encode, rd_sweep, CodecConfig, Models, ABU_FILE, CODEC_FILE};
use crate::quality::{ReportRow, CSV_HEADER};
use crate::{Error, PointCloud, Result};

/// Extension of compressed files.
pub const BITSTREAM_EXT: &str = "ipcc";

#[derive(Debug, Parser)]
#[command(name = "voxpcc", version, about = "Learned block-based point cloud codec")]
pub struct Cli {
    /// Use the joint geometry + colour codec instead of the geometry-only one.
    #[arg(long = "with_color", global = true)]
    pub with_color: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reads a Point Cloud PLY file, compresses it, and writes the bitstream file.
    Compress(CompressArgs),
    /// Reads a bitstream file, decodes the voxel blocks, and reconstructs the Point Cloud.
    Decompress(DecompressArgs),
    /// Trains a coding model on PLY files.
    Train(TrainArgs),
    /// Trains a learned up-sampling model for one sampling factor.
    #[command(name = "train-abu")]
    TrainAbu(TrainAbuArgs),
    /// Measures a decoded cloud against its reference and prints a CSV row.
    Evaluate(EvaluateArgs),
    /// Encodes a cloud under a grid of configurations and selects target rates.
    #[command(name = "rd-sweep")]
    RdSweep(RdSweepArgs),
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long = "helpfull", action = ArgAction::HelpLong, help = "show full help message and exit")]
    helpfull: Option<bool>,
    /// Input Point Cloud filename (.ply).
    pub input_file: PathBuf,
    /// Directory where to load model checkpoints.
    #[arg(long_help = "Directory where to load model checkpoints. For compression, a single directory should be provided: ./models/test")]
    pub model_dir: PathBuf,
    /// Directory where the compressed Point Cloud will be saved.
    pub output_dir: PathBuf,
    /// Size of the 3D coding block units.
    #[arg(
        long = "blk_size",
        default_value_t = 128,
        long_help = "Size of the 3D coding block units. Should be a multiple of 64."
    )]
    pub blk_size: usize,
    /// Explicit quantization step.
    #[arg(
        long = "q_step",
        default_value_t = 1.0,
        long_help = "Explicit quantization step. Can be any positive real value."
    )]
    pub q_step: f64,
    /// Down-sampling scale.
    #[arg(
        long = "scale",
        default_value = "None",
        long_help = "Down-sampling scale. If 'None', it is automatically determined. Multiple comma separated values can be provided. Can be any positive real value when not using ABU, otherwise only an integer power of 2."
    )]
    pub scale: String,
    /// Metrics to use for the optimized Top-k binarization.
    #[arg(
        long = "topk_metrics",
        default_value = "d1yuv",
        long_help = "Metrics to use for the optimized Top-k binarization. Available: 'd1', 'd2', 'd1yuv', 'd2yuv', 'd1rgb', 'd2rgb'. If coding geometry-only, only the geometry metric is used."
    )]
    pub topk_metrics: TopkMetric,
    /// Weight of the colour metric in the joint top-k optimization.
    #[arg(
        long = "color_weight",
        default_value_t = 0.5,
        long_help = "Weight of the colour metric in the joint top-k optimization, in percentage. Between 0 and 1."
    )]
    pub color_weight: f64,
    /// Use faster top-k optimization algorithm for the coding model.
    #[arg(long = "use_fast_topk")]
    pub use_fast_topk: bool,
    /// Define the maximum factor used by the Top-K optimization algorithms.
    #[arg(long = "max_topk", default_value_t = 10.0)]
    pub max_topk: f64,
    /// Define the patience for early stopping in the Top-K optimization algorithms.
    #[arg(long = "topk_patience", default_value_t = 5)]
    pub topk_patience: usize,
    /// Use Basic Up-sampling (False) or Advanced Block Up-sampling - ABU (True).
    #[arg(long = "use_abu")]
    pub use_abu: bool,
    /// Directory where to load ABU model.
    #[arg(
        long = "abu_model_dir",
        default_value = "",
        long_help = "Directory where to load ABU model. A directory should be provided for each down-sampling scale, separated by commas: ../models/test1,../models/test2"
    )]
    pub abu_model_dir: String,
    /// Type of Top-k optimization for the ABU at the encoder.
    #[arg(
        long = "abu_topk",
        default_value = "full",
        long_help = "Type of Top-k optimization for the ABU at the encoder: 'none' - Use the same as the coding model. 'full' - Use the regular algorithm (default). 'fast' - Use the faster algorithm."
    )]
    pub abu_topk: AbuTopk,
    /// Define the maximum factor used by the Top-K optimization algorithms.
    #[arg(long = "abu_max_topk", default_value_t = 10.0)]
    pub abu_max_topk: f64,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long = "helpfull", action = ArgAction::HelpLong, help = "show full help message and exit")]
    helpfull: Option<bool>,
    /// Input bitstream filename.
    pub input_file: PathBuf,
    /// Directory where to load model checkpoints.
    #[arg(long_help = "Directory where to load model checkpoints. For decompression, a single directory should be provided: ../models/test")]
    pub model_dir: PathBuf,
    /// Directory where to load ABU model.
    #[arg(
        long = "abu_model_dir",
        default_value = "",
        long_help = "Directory where to load ABU model. A directory should be provided for each down-sampling scale, separated by commas: ../models/test1,../models/test2"
    )]
    pub abu_model_dir: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory the checkpoint is written to.
    pub output_dir: PathBuf,
    /// Training clouds (.ply).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Validation clouds (.ply); the training clouds stand in when absent.
    #[arg(long = "val")]
    pub val: Vec<PathBuf>,
    /// TOML file with training hyper-parameters.
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    #[arg(long = "blk_size", default_value_t = 64)]
    pub blk_size: usize,
    /// Down-sample the training clouds by this factor first.
    #[arg(long = "scale", default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Debug, Args)]
pub struct TrainAbuArgs {
    /// Directory the checkpoint is written to.
    pub output_dir: PathBuf,
    /// Training clouds (.ply).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long = "val")]
    pub val: Vec<PathBuf>,
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    /// Sampling factor the model up-samples by (a power of 2).
    #[arg(long = "scale", default_value_t = 2)]
    pub scale: u32,
    /// Region size at full resolution.
    #[arg(long = "blk_size", default_value_t = 64)]
    pub blk_size: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference cloud (.ply).
    pub reference: PathBuf,
    /// Decoded cloud (.ply).
    pub decoded: PathBuf,
    /// Bitstream whose size gives the rate.
    #[arg(long = "bitstream")]
    pub bitstream: Option<PathBuf>,
    /// Name of the row; defaults to the reference file stem.
    #[arg(long = "name")]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct RdSweepArgs {
    /// Input Point Cloud filename (.ply).
    pub input_file: PathBuf,
    /// Codec model directories, comma separated (one per rate/distortion trade-off).
    #[arg(long = "model_dirs")]
    pub model_dirs: String,
    #[arg(long = "q_steps", default_value = "1")]
    pub q_steps: String,
    #[arg(long = "blk_sizes", default_value = "128")]
    pub blk_sizes: String,
    #[arg(long = "scales", default_value = "1")]
    pub scales: String,
    /// Target rates in bpp; defaults depend on --with_color.
    #[arg(long = "targets")]
    pub targets: Option<String>,
    #[arg(long = "use_abu")]
    pub use_abu: bool,
    #[arg(long = "abu_model_dir", default_value = "")]
    pub abu_model_dir: String,
    /// Write the CSV here instead of standard output.
    #[arg(long = "output")]
    pub output: Option<PathBuf>,
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let v: Vec<T> = split_list(s)
        .map(|x| x.parse().map_err(|_| Error::arg(format!("bad {what} value '{x}'"))))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::arg(format!("empty {what} list")));
    }
    Ok(v)
}

fn dir_list(s: &str) -> Vec<PathBuf> {
    split_list(s).map(PathBuf::from).collect()
}

/// `None` (auto) or a list of explicit factors.
pub fn parse_scales(s: &str) -> Result<Vec<Option<f64>>> {
    if s.trim() == "None" {
        return Ok(vec![None]);
    }
    Ok(parse_list::<f64>(s, "scale")?.into_iter().map(Some).collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cloud".into())
}

fn load_input(path: &Path, with_color: bool) -> Result<PointCloud> {
    let pc = PointCloud::load(path)?;
    if with_color && !pc.has_colors() {
        return Err(Error::InvalidCloud(format!("{} has no colours", path.display())));
    }
    Ok(if with_color { pc } else { pc.geometry_only() })
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

impl CompressArgs {
    pub fn codec_config(&self, with_color: bool, scale: Option<f64>) -> CodecConfig {
        CodecConfig {
            with_color,
            blk_size: self.blk_size,
            q_step: self.q_step,
            scale,
            topk: TopkConfig {
                metric: self.topk_metrics,
                color_weight: self.color_weight,
                max_topk: self.max_topk,
                patience: self.topk_patience,
                mode: if self.use_fast_topk { SearchMode::Fast } else { SearchMode::Full },
            },
            use_abu: self.use_abu,
            abu_topk: self.abu_topk,
            abu_max_topk: self.abu_max_topk,
        }
    }
}

fn compress(a: &CompressArgs, with_color: bool, out: &mut dyn Write) -> Result<()> {
    if a.blk_size % 64 != 0 {
        eprintln!("warning: block size {} is not a multiple of 64", a.blk_size);
    }
    let pc = load_input(&a.input_file, with_color)?;
    let models = Models::load(&a.model_dir, &dir_list(&a.abu_model_dir))?;
    let scales = parse_scales(&a.scale)?;
    std::fs::create_dir_all(&a.output_dir)?;
    let name = stem(&a.input_file);
    for scale in &scales {
        let enc = encode(&pc, &a.codec_config(with_color, *scale), &models)?;
        let file = match (scales.len(), scale) {
            (1, _) | (_, None) => format!("{name}.{BITSTREAM_EXT}"),
            (_, Some(s)) => format!("{name}_sf{s}.{BITSTREAM_EXT}"),
        };
        let path = a.output_dir.join(file);
        std::fs::write(&path, &enc.bytes)?;
        writeln!(
            out,
            "{}: {} points, sf {}, {} blocks, {} bytes, {:.6} bpp",
            path.display(),
            pc.len(),
            enc.bitstream.header.sf,
            enc.bitstream.records.len(),
            enc.bytes.len(),
            enc.bpp()
        )?;
    }
    Ok(())
}

/// Where `decompress` writes the decoded cloud: next to the bitstream.
pub fn decoded_path(bitstream: &Path) -> PathBuf {
    bitstream.with_file_name(format!("{}_dec.ply", stem(bitstream)))
}

fn decompress(a: &DecompressArgs, with_color: bool, out: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(&a.input_file)?;
    let stream_color = crate::pipeline::Bitstream::from_bytes(&bytes)?.header.with_color;
    if stream_color != with_color {
        return Err(Error::arg(if stream_color {
            "the stream holds colour; pass --with_color"
        } else {
            "the stream is geometry-only; drop --with_color"
        }));
    }
    let models = Models::load(&a.model_dir, &dir_list(&a.abu_model_dir))?;
    let pc = decode(&bytes, &models)?;
    let path = decoded_path(&a.input_file);
    pc.save(&path)?;
    writeln!(out, "{}: {} points", path.display(), pc.len())?;
    Ok(())
}

fn load_all(paths: &[PathBuf], with_color: bool) -> Result<Vec<PointCloud>> {
    paths.iter().map(|p| load_input(p, with_color)).collect()
}

fn train_cmd(a: &TrainArgs, with_color: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let arch = CodecArch::from_config(if with_color { 4 } else { 1 }, &cfg)?;
    arch.check_block_size(a.blk_size)?;
    let sf = Some(a.scale);
    let train_set = make_training_blocks(&load_all(&a.inputs, with_color)?, a.blk_size, sf)?;
    let val = make_training_blocks(&load_all(&a.val, with_color)?, a.blk_size, sf)?;
    if train_set.is_empty() {
        return Err(Error::arg("no training block holds enough points"));
    }
    let (codec, report) = train(arch, &train_set, &val, &cfg)?;
    std::fs::create_dir_all(&a.output_dir)?;
    codec.save(a.output_dir.join(CODEC_FILE))?;
    writeln!(
        out,
        "{} blocks, {} epochs, loss {:.6} -> {:.6}, best epoch {}",
        train_set.len(),
        report.epochs(),
        report.initial_loss,
        report.final_loss,
        report.best_epoch
    )?;
    Ok(())
}

fn train_abu_cmd(a: &TrainAbuArgs, with_color: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let arch = AbuArch::new(if with_color { 4 } else { 1 }, cfg.width_divisor)?;
    let pairs = make_abu_pairs(&load_all(&a.inputs, with_color)?, a.blk_size, a.scale)?;
    let val = make_abu_pairs(&load_all(&a.val, with_color)?, a.blk_size, a.scale)?;
    let (model, report) = train_abu(arch, a.scale, &pairs, &val, &cfg)?;
    std::fs::create_dir_all(&a.output_dir)?;
    model.save(a.output_dir.join(ABU_FILE))?;
    writeln!(
        out,
        "{} regions, {} epochs, loss {:.6} -> {:.6}",
        pairs.len(),
        report.epochs(),
        report.initial_loss,
        report.final_loss
    )?;
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, with_color: bool, out: &mut dyn Write) -> Result<()> {
    let reference = load_input(&a.reference, with_color)?;
    let decoded = load_input(&a.decoded, with_color)?;
    let bytes = match &a.bitstream {
        Some(p) => std::fs::metadata(p)?.len() as usize,
        None => 0,
    };
    let name = a.name.clone().unwrap_or_else(|| stem(&a.reference));
    let row = ReportRow::measure(&name, &reference, &decoded, bytes)?;
    writeln!(out, "{CSV_HEADER}\n{}", row.to_csv())?;
    Ok(())
}

fn rd_sweep_cmd(a: &RdSweepArgs, with_color: bool, out: &mut dyn Write) -> Result<()> {
    let pc = load_input(&a.input_file, with_color)?;
    let abu_dirs = dir_list(&a.abu_model_dir);
    let model_dirs = dir_list(&a.model_dirs);
    if model_dirs.is_empty() {
        return Err(Error::arg("--model_dirs lists no directory"));
    }
    let models: Vec<Models> = model_dirs.iter().map(|d| Models::load(d, &abu_dirs)).collect::<Result<_>>()?;
    let q_steps: Vec<f64> = parse_list(&a.q_steps, "q_step")?;
    let blk_sizes: Vec<usize> = parse_list(&a.blk_sizes, "blk_size")?;
    let scales = parse_scales(&a.scales)?;
    let targets = match &a.targets {
        Some(t) => parse_list(t, "target")?,
        None if with_color => JOINT_TARGETS.to_vec(),
        None => GEOMETRY_TARGETS.to_vec(),
    };
    let mut grid = Vec::new();
    for (dir, m) in model_dirs.iter().zip(&models) {
        for &qs in &q_steps {
            for &bs in &blk_sizes {
                for &sf in &scales {
                    let label = format!(
                        "{} qs={qs} bs={bs} sf={}",
                        dir.display(),
                        sf.map_or("auto".to_string(), |s| s.to_string())
                    );
                    let cfg = CodecConfig {
                        with_color,
                        blk_size: bs,
                        q_step: qs,
                        scale: sf,
                        use_abu: a.use_abu,
                        ..CodecConfig::default()
                    };
                    grid.push((label.replace(',', ";"), cfg, m));
                }
            }
        }
    }
    let result = rd_sweep(&stem(&a.input_file), &pc, &grid, &targets)?;
    for t in result.missed_targets() {
        eprintln!("warning: no hull point within 10% of {t} bpp");
    }
    match &a.output {
        Some(p) => std::fs::write(p, result.to_csv())?,
        None => out.write_all(result.to_csv().as_bytes())?,
    }
    Ok(())
}

/// Runs the already parsed command line.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let c = cli.with_color;
    match &cli.command {
        Command::Compress(a) => compress(a, c, out),
        Command::Decompress(a) => decompress(a, c, out),
        Command::Train(a) => train_cmd(a, c, out),
        Command::TrainAbu(a) => train_abu_cmd(a, c, out),
        Command::Evaluate(a) => evaluate_cmd(a, c, out),
        Command::RdSweep(a) => rd_sweep_cmd(a, c, out),
    }
}

/// Parses `args` (program name first) and runs them; returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("voxpcc").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn compress_defaults() {
        let cli = parse(&["compress", "in.ply", "m", "out"]);
        assert!(!cli.with_color);
        let Command::Compress(a) = cli.command else { panic!() };
        let cfg = a.codec_config(false, None);
        assert_eq!(cfg, CodecConfig::default());
        assert_eq!(a.scale, "None");
        assert_eq!(a.abu_model_dir, "");
    }

    #[test]
    fn every_flag_accepted() {
        let cli = parse(&[
            "--with_color",
            "compress",
            "in.ply",
            "m",
            "out",
            "--blk_size",
            "64",
            "--q_step",
            "1.25",
            "--scale",
            "2,4",
            "--topk_metrics",
            "d2rgb",
            "--color_weight",
            "0.3",
            "--use_fast_topk",
            "--max_topk",
            "6",
            "--topk_patience",
            "3",
            "--use_abu",
            "--abu_model_dir",
            "a,b",
            "--abu_topk",
            "fast",
            "--abu_max_topk",
            "4",
        ]);
        assert!(cli.with_color);
        let Command::Compress(a) = cli.command else { panic!() };
        assert_eq!(parse_scales(&a.scale).unwrap(), vec![Some(2.0), Some(4.0)]);
        assert_eq!(dir_list(&a.abu_model_dir), vec![PathBuf::from("a"), PathBuf::from("b")]);
        let cfg = a.codec_config(true, Some(2.0));
        assert_eq!(cfg.topk.metric, TopkMetric::D2Rgb);
        assert_eq!(cfg.topk.mode, SearchMode::Fast);
        assert_eq!((cfg.blk_size, cfg.q_step, cfg.topk.patience), (64, 1.25, 3));
        assert_eq!((cfg.abu_topk, cfg.abu_max_topk, cfg.use_abu), (AbuTopk::Fast, 4.0, true));
    }

    #[test]
    fn decompress_with_abu_dir() {
        let cli = parse(&["decompress", "s.ipcc", "m", "--abu_model_dir", "x/sfactor4"]);
        let Command::Decompress(a) = cli.command else { panic!() };
        assert_eq!(a.abu_model_dir, "x/sfactor4");
    }

    #[test]
    fn bad_arguments_fail() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(main_with(["voxpcc", "compress", "in.ply"], &mut o, &mut e), 2);
        assert_eq!(main_with(["voxpcc", "compress", "a", "b", "c", "--bogus"], &mut o, &mut e), 2);
        assert_eq!(main_with(["voxpcc", "compress", "a", "b", "c", "--topk_metrics", "d3"], &mut o, &mut e), 2);
        assert_eq!(main_with(["voxpcc", "compress", "/nonexistent.ply", "b", "c"], &mut o, &mut e), 1);
        assert!(String::from_utf8(e).unwrap().contains("error"));
    }

    #[test]
    fn help_exits_zero() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(main_with(["voxpcc", "compress", "--helpfull"], &mut o, &mut e), 0);
        let text = String::from_utf8(o).unwrap();
        assert!(text.contains("Should be a multiple of 64"));
    }

    #[test]
    fn scale_lists() {
        assert_eq!(parse_scales("None").unwrap(), vec![None]);
        assert_eq!(parse_scales("1.5").unwrap(), vec![Some(1.5)]);
        assert!(parse_scales("two").is_err());
        assert_eq!(decoded_path(Path::new("r/x.ipcc")), PathBuf::from("r/x_dec.ply"));
    }
}
