use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use cisplit_core::codec::{rate_fidelity_curve, CodecBitstream};
use cisplit_core::concealment::{loss_sweep, Concealment, LossKind};
use cisplit_core::io;
use cisplit_core::model::{CutPoint, StubModel, CALIBRATION_IMAGES};
use cisplit_core::motion::shift_experiment;
use cisplit_core::quantizer::{sweep, QuantMode, QuantizerSpec};
use cisplit_core::stats::{collect_stats, TensorStats};
use cisplit_core::strategy::{latency_regions, log_grid, StrategyProfile};
use cisplit_core::tensor::Shape;
use cisplit_pipeline::config::{CodecSetting, PipelineConfig};
use cisplit_pipeline::experiments::{
    parse_f64_list, parse_int_list, write_csv, write_json, CodecCurveRow, MotionRow,
};
use cisplit_pipeline::profiles::{measure_profiles, ProfileSettings};
use cisplit_pipeline::session::run_session;
use cisplit_pipeline::transcode;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "cisplit",
    version,
    about = "Split-inference feature coding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Stub model seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Clone)]
struct QuantArgs {
    #[arg(long, default_value_t = 256)]
    levels: u16,
    /// Clip half-width in standard deviations.
    #[arg(long, default_value_t = 4.0)]
    width: f64,
    /// `aggregate` or `per_neuron`.
    #[arg(long, default_value = "aggregate")]
    mode: String,
}

impl QuantArgs {
    fn spec(&self) -> Result<QuantizerSpec> {
        Ok(QuantizerSpec::new(
            self.levels,
            self.width,
            parse_mode(&self.mode)?,
        )?)
    }
}

fn parse_mode(s: &str) -> Result<QuantMode> {
    match s {
        "aggregate" => Ok(QuantMode::Aggregate),
        "per_neuron" | "per-neuron" => Ok(QuantMode::PerNeuron),
        _ => bail!("unknown quantizer mode {s:?}; expected aggregate or per_neuron"),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write corpus tensors (inputs, or cut tensors with --cut) as FTSR files.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        first: u64,
        #[arg(long)]
        cut: Option<CutPoint>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Calibration statistics for a cut point, as JSON.
    Stats {
        #[arg(long, default_value = "stage2")]
        cut: CutPoint,
        #[arg(long, default_value_t = CALIBRATION_IMAGES)]
        samples: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Agreement and MSE over a grid of quantizer settings.
    QuantSweep {
        #[arg(long, default_value = "stage2")]
        cut: CutPoint,
        #[arg(long, default_value = "2..16")]
        levels: String,
        #[arg(long, default_value = "1..5")]
        widths: String,
        #[arg(long, default_value_t = 1.0)]
        width_step: f64,
        #[arg(long, default_value = "aggregate")]
        mode: String,
        #[arg(long, default_value_t = 256)]
        images: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Coded size against agreement for each quality, per cut.
    CodecCurve {
        #[arg(long, default_value = "stage1,stage2,stage3", value_delimiter = ',')]
        cuts: Vec<CutPoint>,
        #[arg(long, default_value = "1,5,10,20,30,50,70,90,100")]
        qualities: String,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, default_value_t = 256)]
        images: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Motion-compensated prediction error for horizontal input shifts.
    MotionDemo {
        #[arg(long, default_value = "stage3")]
        cut: CutPoint,
        #[arg(long, default_value = "8,16,18,24,34")]
        shifts: String,
        #[arg(long, default_value_t = 32)]
        images: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Agreement under simulated loss for each concealment strategy.
    ConcealSweep {
        #[arg(long, default_value = "stage2")]
        cut: CutPoint,
        #[arg(long, default_value = "0,0.1,0.2,0.5")]
        rates: String,
        #[arg(long, default_value = "by_element,by_channel", value_delimiter = ',')]
        kinds: Vec<LossKind>,
        #[arg(
            long,
            default_value = "zero,channel_mean,dataset_mean,hybrid",
            value_delimiter = ','
        )]
        strategies: Vec<Concealment>,
        #[arg(long, default_value_t = 256)]
        images: u64,
        #[arg(long, default_value_t = 1)]
        mask_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Lowest-latency strategy across a bandwidth sweep.
    LatencyRegions {
        /// JSON array of strategy profiles; measured when omitted.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Where to save measured profiles.
        #[arg(long)]
        profiles_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.002)]
        rtt_s: f64,
        #[arg(long, default_value_t = 1e3)]
        lo: f64,
        #[arg(long, default_value_t = 1e9)]
        hi: f64,
        #[arg(long, default_value_t = 20)]
        per_decade: usize,
        #[arg(long, default_value_t = 4.0)]
        client_slowdown: f64,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run a simulated client-server session and write its report.
    Simulate {
        /// Pipeline config JSON, or a bare link scenario.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Event log destination.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Code an FTSR float tensor into an FTCB bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Statistics JSON from `stats`; derived from the model when omitted.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, default_value_t = 90, conflicts_with = "target_bytes")]
        quality: u8,
        #[arg(long)]
        target_bytes: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Decode an FTCB bitstream back to an FTSR float tensor.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn corpus(images: u64) -> Vec<u64> {
    (0..images).collect()
}

fn calibration(model: &StubModel, cut: CutPoint) -> Result<TensorStats> {
    Ok(collect_stats(
        &model.calibration_tensors(cut, CALIBRATION_IMAGES),
    )?)
}

fn load_stats(path: Option<&Path>, shape: Shape, seed: u64) -> Result<TensorStats> {
    let stats = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TensorStats>(&text).context("parsing statistics")?
        }
        None => {
            let cut = CutPoint::ALL
                .into_iter()
                .find(|c| c.output_shape() == shape)
                .ok_or_else(|| anyhow!("shape {shape} matches no cut point; pass --stats"))?;
            calibration(&StubModel::new(seed), cut)?
        }
    };
    if stats.shape != shape {
        bail!(
            "statistics are for {} but the tensor is {shape}",
            stats.shape
        );
    }
    Ok(stats)
}

#[derive(Serialize)]
struct CorpusManifest {
    seed: u64,
    cut: Option<String>,
    shape: Shape,
    ids: Vec<u64>,
    files: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            out,
            count,
            first,
            cut,
            model,
        } => {
            fs::create_dir_all(&out)?;
            let m = StubModel::new(model.seed);
            let ids: Vec<u64> = (first..first + count).collect();
            let mut files = Vec::new();
            let mut shape = cisplit_core::model::INPUT_SHAPE;
            for &id in &ids {
                let t = match cut {
                    Some(c) => m.cut_tensor(id, c),
                    None => m.generate_input(id, (0.0, 0.0)),
                };
                shape = t.shape();
                let name = format!("img_{id:06}.ftsr");
                io::write_tensor(out.join(&name), &t)?;
                files.push(name);
            }
            let manifest = CorpusManifest {
                seed: model.seed,
                cut: cut.map(|c| c.name()),
                shape,
                ids,
                files,
            };
            write_json(&out.join("manifest.json"), &manifest)?;
            write_json(&out.join("model.json"), &m.manifest())?;
        }
        Command::Stats {
            cut,
            samples,
            out,
            model,
        } => {
            let m = StubModel::new(model.seed);
            let stats = collect_stats(&m.calibration_tensors(cut, samples))?;
            write_json(&out, &stats)?;
        }
        Command::QuantSweep {
            cut,
            levels,
            widths,
            width_step,
            mode,
            images,
            out,
            model,
        } => {
            let m = StubModel::new(model.seed);
            let stats = calibration(&m, cut)?;
            let rows = sweep(
                &m,
                &corpus(images),
                cut,
                &parse_int_list::<u16>(&levels)?,
                &parse_f64_list(&widths, width_step)?,
                parse_mode(&mode)?,
                &stats,
            )?;
            write_csv(&out, &rows)?;
        }
        Command::CodecCurve {
            cuts,
            qualities,
            quant,
            images,
            out,
            model,
        } => {
            let m = StubModel::new(model.seed);
            let spec = quant.spec()?;
            let qs = parse_int_list::<u8>(&qualities)?;
            let mut rows = Vec::new();
            for cut in cuts {
                let stats = calibration(&m, cut)?;
                for r in rate_fidelity_curve(&m, &corpus(images), cut, &spec, &stats, &qs)? {
                    rows.push(CodecCurveRow {
                        cut: cut.name(),
                        quality: r.quality,
                        mean_bytes: r.mean_bytes,
                        agreement: r.agreement,
                    });
                }
            }
            write_csv(&out, &rows)?;
        }
        Command::MotionDemo {
            cut,
            shifts,
            images,
            out,
            model,
        } => {
            let m = StubModel::new(model.seed);
            let ids = corpus(images);
            let rows = parse_f64_list(&shifts, 1.0)?
                .into_iter()
                .map(|s| Ok(MotionRow::from(&shift_experiment(&m, &ids, cut, s)?)))
                .collect::<Result<Vec<_>>>()?;
            write_csv(&out, &rows)?;
        }
        Command::ConcealSweep {
            cut,
            rates,
            kinds,
            strategies,
            images,
            mask_seed,
            out,
            model,
        } => {
            let m = StubModel::new(model.seed);
            let stats = calibration(&m, cut)?;
            let rates = parse_f64_list(&rates, 1.0)?;
            let mut rows = Vec::new();
            for kind in kinds {
                rows.extend(loss_sweep(
                    &m,
                    &corpus(images),
                    cut,
                    kind,
                    &rates,
                    &strategies,
                    &stats,
                    mask_seed,
                )?);
            }
            write_csv(&out, &rows)?;
        }
        Command::LatencyRegions {
            profiles,
            profiles_out,
            rtt_s,
            lo,
            hi,
            per_decade,
            client_slowdown,
            frames,
            out,
            model,
        } => {
            let profiles: Vec<StrategyProfile> = match profiles {
                Some(p) => serde_json::from_str(
                    &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )
                .context("parsing profiles")?,
                None => measure_profiles(&ProfileSettings {
                    seed: model.seed,
                    quantizer: QuantizerSpec::new(256, 4.0, QuantMode::Aggregate)?,
                    codec: CodecSetting::Quality(90),
                    frames,
                    client_slowdown,
                    calibration_images: CALIBRATION_IMAGES,
                })?,
            };
            if let Some(p) = profiles_out {
                write_json(&p, &profiles)?;
            }
            let rows = latency_regions(&profiles, rtt_s, &log_grid(lo, hi, per_decade))?;
            write_csv(&out, &rows)?;
        }
        Command::Simulate { config, out, log } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = PipelineConfig::from_json(&text)?;
            let outcome = run_session(&cfg)?;
            write_json(&out, &outcome.report)?;
            if let Some(p) = log {
                fs::write(&p, outcome.log).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Encode {
            input,
            output,
            stats,
            quant,
            quality,
            target_bytes,
            model,
        } => {
            let t = io::read_tensor(&input)?;
            let stats = load_stats(stats.as_deref(), t.shape(), model.seed)?;
            let setting = match target_bytes {
                Some(n) => CodecSetting::TargetBytes(n),
                None => CodecSetting::Quality(quality),
            };
            let b = transcode::encode_tensor(&t, &quant.spec()?, &stats, setting)?;
            fs::write(&output, b.bytes())
                .with_context(|| format!("writing {}", output.display()))?;
        }
        Command::Decode {
            input,
            output,
            stats,
            quant,
            model,
        } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let b = CodecBitstream::from_bytes(bytes)?;
            let stats = load_stats(stats.as_deref(), b.layout().tensor_shape(), model.seed)?;
            let t = transcode::decode_tensor(b.bytes(), &quant.spec()?, &stats)?;
            io::write_tensor(&output, &t)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
