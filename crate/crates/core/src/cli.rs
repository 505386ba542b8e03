//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::detect::{detections_to_json, DecodeOptions, Detection, DEFAULT_CONF_THRESH, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::image::read_ppm;
use crate::netcfg::{count_ops, derive_tincy, load_config, load_weights, save_weights, NetworkConfig, NetworkWeights};
use crate::pipeline::{build_pipeline, Frame, FrameSink, FrameSource, PipelineOptions};
use crate::runtime::{EngineOptions, Network, Precision};

#[derive(Debug, Parser)]
#[command(name = "tincy", version, about = "Quantized YOLO-style detection with a pipelined frame runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Network config file
    pub cfg: PathBuf,
    /// Weights file or directory, or `random[:SEED]` for random parameters
    pub weights: String,
    /// Run 8-bit layers at full precision
    #[arg(long)]
    pub float_ref: bool,
    /// Detection confidence threshold
    #[arg(long, default_value_t = DEFAULT_CONF_THRESH)]
    pub thresh: f32,
    /// IoU at which non-maximum suppression drops a box
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms: f32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect objects in one PPM image
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        image: PathBuf,
        /// Write the annotated image here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the detections as JSON here
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Stream a directory of PPM frames through the pipeline
    Run {
        #[command(flatten)]
        model: ModelArgs,
        frames_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after this many frames
        #[arg(long)]
        frames: Option<u64>,
    },
    /// Print the per-layer operation counts of a network
    CountOps {
        cfg: PathBuf,
        /// Apply the Tincy transforms to the config first
        #[arg(long)]
        tincy_from_tiny: bool,
        #[arg(long)]
        json: bool,
    },
    /// Time every pipeline stage over a directory of frames
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        frames_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Write random parameters for a network in the loadable layout
    InitWeights {
        cfg: PathBuf,
        /// Weights file, or directory when the network has binary layers
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config_dir(cfg: &Path) -> &Path {
    match cfg.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn load_params(spec: &str, config: &NetworkConfig, cfg: &Path) -> Result<NetworkWeights> {
    if let Some(rest) = spec.strip_prefix("random") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad random seed {s:?}")))?,
            None if rest.is_empty() => 0,
            None => return load_weights(Path::new(spec), config, config_dir(cfg)),
        };
        return NetworkWeights::random(config, seed);
    }
    load_weights(Path::new(spec), config, config_dir(cfg))
}

fn load_network(model: &ModelArgs) -> Result<Network> {
    let config = load_config(&model.cfg)?;
    let weights = load_params(&model.weights, &config, &model.cfg)?;
    let opts = EngineOptions {
        precision: if model.float_ref {
            Precision::FloatReference
        } else {
            Precision::LowPrecision
        },
        ..Default::default()
    };
    Network::build(&config, &weights, &opts)
}

fn decode_options(model: &ModelArgs) -> DecodeOptions {
    DecodeOptions {
        conf_thresh: model.thresh,
        nms_iou: model.nms,
    }
}

/// Sorted `.ppm` files of a directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    frames.sort();
    Ok(frames)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn frame_source(frames: Vec<PathBuf>) -> FrameSource {
    Box::new(move |seq| Ok(frames.get(seq as usize).cloned().map(Frame::from_path)))
}

fn print_detections(out: &mut impl Write, dets: &[Detection]) -> Result<()> {
    for d in dets {
        writeln!(
            out,
            "{}: {:.0}% at ({:.3}, {:.3}) size {:.3}x{:.3}",
            d.label,
            d.confidence * 100.0,
            d.bbox[0],
            d.bbox[1],
            d.bbox[2],
            d.bbox[3]
        )?;
    }
    Ok(())
}

fn detect(model: &ModelArgs, image: &Path, out: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let net = load_network(model)?;
    let img = read_ppm(image)?;
    let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let result = Arc::new(Mutex::new(None));
    let slot = result.clone();
    let mut frame = Some(Frame::from_image(name, img));
    let source: FrameSource = Box::new(move |_| Ok(frame.take()));
    let sink: FrameSink = Box::new(move |_, f| {
        *slot.lock().unwrap() = Some(f);
        Ok(())
    });
    let opts = PipelineOptions {
        decode: decode_options(model),
        out_dir: None,
    };
    let start = Instant::now();
    build_pipeline(net, source, sink, opts).run(1, Some(1))?;
    info!("inference took {:.1} ms", start.elapsed().as_secs_f64() * 1e3);
    let frame = result.lock().unwrap().take().expect("one frame went through");
    print_detections(&mut std::io::stdout().lock(), &frame.detections)?;
    if let Some(path) = out {
        crate::image::write_ppm(path, frame.annotated.as_ref().expect("box drawing ran"))?;
    }
    if let Some(path) = json {
        fs::write(path, detections_to_json(&frame.detections)).map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LogRecord<'a> {
    seq: u64,
    frame: &'a str,
    detections: &'a [Detection],
}

/// Name of the ordered detection log `run` writes into its output directory.
pub const RUN_LOG: &str = "detections.jsonl";

fn run_frames(
    model: &ModelArgs,
    frames_dir: &Path,
    out_dir: &Path,
    workers: Option<usize>,
    limit: Option<u64>,
) -> Result<()> {
    let net = load_network(model)?;
    let frames = list_frames(frames_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let log_path = out_dir.join(RUN_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::file(&log_path, e))?);
    let sink: FrameSink = Box::new(move |seq, f| {
        let rec = LogRecord {
            seq,
            frame: &f.name,
            detections: &f.detections,
        };
        serde_json::to_writer(&mut log, &rec)?;
        writeln!(log)?;
        log.flush()?;
        Ok(())
    });
    let opts = PipelineOptions {
        decode: decode_options(model),
        out_dir: Some(out_dir.to_path_buf()),
    };
    let workers = workers.unwrap_or_else(default_workers);
    let mut pipeline = build_pipeline(net, frame_source(frames), sink, opts);
    let report = pipeline.run(workers, limit)?;
    let secs = report.wall.as_secs_f64();
    println!(
        "{} frames in {:.2} s ({:.2} fps) with {} workers",
        report.emitted.len(),
        secs,
        report.emitted.len() as f64 / secs.max(1e-9),
        workers
    );
    Ok(())
}

fn bench(model: &ModelArgs, frames_dir: &Path, workers: Option<usize>, limit: Option<u64>, json: bool) -> Result<()> {
    let net = load_network(model)?;
    let frames = list_frames(frames_dir)?;
    let n = limit.unwrap_or(frames.len() as u64).min(frames.len() as u64);
    let opts = PipelineOptions {
        decode: decode_options(model),
        out_dir: None,
    };
    let mut pipeline = build_pipeline(net, frame_source(frames), Box::new(|_, _| Ok(())), opts);
    let report = pipeline.run(workers.unwrap_or_else(default_workers), Some(n))?;
    let table = report.bench_table();
    if json {
        println!("{}", table.to_json());
    } else {
        println!("{table}");
        if let Some(gap) = report.mean_inter_departure(0) {
            println!("{:.2} fps", 1.0 / gap.as_secs_f64());
        }
    }
    Ok(())
}

fn count(cfg: &Path, tincy: bool, json: bool) -> Result<()> {
    let mut config = load_config(cfg)?;
    if tincy {
        config = derive_tincy(&config)?;
    }
    let c = count_ops(&config)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&c)?);
        return Ok(());
    }
    println!("{:>5}  {:<5} {:>14}  {:>14}", "Layer", "Type", "Output", "Ops/frame");
    for l in &c.layers {
        let (ch, h, w) = l.output;
        println!(
            "{:>5}  {:<5} {:>14}  {:>14}",
            l.number,
            l.kind,
            format!("{ch}x{h}x{w}"),
            l.ops
        );
    }
    println!("reduced precision {}", c.reduced_precision_ops);
    println!("8-bit {}", c.eight_bit_ops);
    println!("float {}", c.float_ops);
    println!("pool {}", c.pool_ops);
    println!("Total {}", c.total);
    Ok(())
}

fn init_weights(cfg: &Path, out: &Path, seed: u64) -> Result<()> {
    let config = load_config(cfg)?;
    let weights = NetworkWeights::random(&config, seed)?;
    save_weights(out, &config, &weights, config_dir(cfg))
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Detect { model, image, out, json } => detect(model, image, out.as_deref(), json.as_deref()),
        Command::Run {
            model,
            frames_dir,
            out_dir,
            workers,
            frames,
        } => run_frames(model, frames_dir, out_dir, *workers, *frames),
        Command::CountOps {
            cfg,
            tincy_from_tiny,
            json,
        } => count(cfg, *tincy_from_tiny, *json),
        Command::Bench {
            model,
            frames_dir,
            workers,
            frames,
            json,
        } => bench(model, frames_dir, *workers, *frames, *json),
        Command::InitWeights { cfg, out, seed } => init_weights(cfg, out, *seed),
    }
}
