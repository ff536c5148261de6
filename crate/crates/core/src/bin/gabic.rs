//! Command-line front end: train, encode, decode, eval, maps, selftest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gabic::attention::AttentionMode;
use gabic::codec::{allocation_diff, Bitstream, Codec};
use gabic::config::KeyValues;
use gabic::evaluator::{bd_rate, rd_sweep, RatePoint, RdCurve, RdPoint, BD_METHOD};
use gabic::image::Image;
use gabic::network::{Checkpoint, Dtype, Gabic, ModelConfig};
use gabic::range_coder::{self, ScaleTables, DEFAULT_PRECISION, DEFAULT_TAIL_MASS};
use gabic::tensor::{Real, Rng, Tensor};
use gabic::trainer::{validation_set, Dataset, RunOptions, TrainConfig, Trainer};
use gabic::{Error, Result};

#[derive(Parser)]
#[command(name = "gabic", version, about = "Learned image codec with graph window attention")]
struct Cli {
    /// `key = value` file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Train(TrainArgs),
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rate-point index recorded in the header
        #[arg(long)]
        lambda_index: Option<u8>,
    },
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    Maps {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on generated images instead of a folder
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 256)]
    synthetic_count: usize,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Best-validation checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Per-step CSV log
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a training checkpoint
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Start from the weights of a model checkpoint (fine-tuning)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train in 64-bit floating point
    #[arg(long)]
    f64: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape { .. } => 3,
        Error::InvalidArgument(_) => 4,
        Error::NonFinite(_) => 5,
        Error::Format { .. } => 6,
        Error::Truncated(_) => 7,
        Error::Corrupt(_) => 8,
        Error::Checksum { .. } => 9,
        Error::ConfigMismatch { .. } => 10,
        Error::Io(_) => 11,
    }
}

const SELFTEST_FAILED: u8 = 12;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error[usage]: {}", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = std::env::var("GABIC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match cli.cmd {
        Cmd::Train(ref a) => train(&cli, a),
        Cmd::Encode {
            ref model,
            ref input,
            ref out,
            lambda_index,
        } => encode(model, input, out, lambda_index),
        Cmd::Decode {
            ref model,
            ref input,
            ref out,
        } => decode(model, input, out),
        Cmd::Eval {
            ref models,
            ref images,
            ref csv,
        } => eval(models, images, csv),
        Cmd::Maps {
            ref model_a,
            ref model_b,
            ref input,
            ref out_prefix,
        } => maps(model_a, model_b, input, out_prefix),
        Cmd::Selftest => return selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_model(path: &Path) -> Result<(Checkpoint, Gabic<f32>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model::<f32>()?;
    Ok((ck, model))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut kv = match &cli.config {
        Some(p) => KeyValues::parse(&fs::read_to_string(p).map_err(Error::at_path(p))?)?,
        None => KeyValues::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(k, v);
        }
    };
    flag("train.lambda", a.lambda.map(|v| v.to_string()));
    flag("train.seed", cli.seed.map(|v| v.to_string()));
    flag("train.epochs", a.epochs.map(|v| v.to_string()));
    flag("train.steps_per_epoch", a.steps_per_epoch.map(|v| v.to_string()));
    flag("train.lr0", a.lr0.map(|v| v.to_string()));
    flag("model.attention", a.mode.map(|m| m.as_str().to_string()));
    flag("model.k", a.k.map(|v| v.to_string()));
    flag("model.heads", a.heads.map(|v| v.to_string()));
    let config = TrainConfig::from_kv(&kv, TrainConfig::toy(0.025))?;

    let data = match &a.data {
        Some(dir) => Dataset::from_dir(dir)?,
        None => Dataset::synthetic(a.synthetic_count, config.crop, config.seed)?,
    };
    if a.f64 {
        run_training::<f64>(config, a, &data)
    } else {
        run_training::<f32>(config, a, &data)
    }
}

fn run_training<S: Real>(config: TrainConfig, a: &TrainArgs, data: &Dataset) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::<S>::from_checkpoint(&Checkpoint::load(p)?)?;
            if t.config().model != config.model {
                return Err(Error::ConfigMismatch {
                    stream: t.config().model.hash(),
                    model: config.model.hash(),
                });
            }
            if let Some(e) = a.epochs {
                t.set_epochs(e);
            }
            t
        }
        None => match &a.init {
            Some(p) => Trainer::new(config, Checkpoint::load(p)?.to_model::<S>()?)?,
            None => Trainer::<S>::from_scratch(config)?,
        },
    };
    eprintln!("# resolved config ({})\n{}", S::NAME, trainer.config().to_kv().to_text());
    let val = validation_set().stack::<S>()?;
    let mut log_file = a.log.as_ref().map(fs::File::create).transpose()?;
    let report = trainer.run(
        data,
        &val,
        RunOptions {
            checkpoint: Some(a.out.clone()),
            log: log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
        },
    )?;
    if !a.out.exists() {
        // no epoch ran (already complete on resume)
        trainer.checkpoint().save(&a.out)?;
    }
    if let Some(v) = report.epochs.last() {
        println!(
            "steps {} epochs {} best_epoch {} val_bpp {:.4} val_psnr {:.3}",
            trainer.step_count(),
            trainer.epoch(),
            report.best_epoch,
            v.bpp,
            v.psnr
        );
    }
    Ok(())
}

fn encode(model: &Path, input: &Path, out: &Path, lambda_index: Option<u8>) -> Result<()> {
    let (ck, m) = load_model(model)?;
    let lambda_index = lambda_index.or_else(|| ck.meta.get("lambda_index").and_then(|v| v.parse().ok()));
    let img = Image::read(input)?;
    let enc = Codec::new(m)?.encode(&img, lambda_index)?;
    fs::write(out, enc.bytes()).map_err(Error::at_path(out))?;
    println!(
        "{}x{} bytes {} bpp {:.4} bpp_est {:.4}",
        img.width,
        img.height,
        enc.bitstream.byte_len(),
        enc.bpp(),
        enc.estimated_bpp()
    );
    Ok(())
}

fn decode(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let (_, m) = load_model(model)?;
    let img = Codec::new(m)?.decode_bytes(&fs::read(input).map_err(Error::at_path(input))?)?;
    img.write(out)?;
    println!("{}x{}", img.width, img.height);
    Ok(())
}

fn read_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir).map_err(Error::at_path(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no PPM/PGM images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), Image::read(p)?)))
        .collect()
}

fn eval(models: &[PathBuf], images: &Path, csv: &Path) -> Result<()> {
    let points = models
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (ck, model) = load_model(p)?;
            let lambda = ck.meta.get("train.lambda").and_then(|v| v.parse().ok()).unwrap_or(i as f64 + 1.0);
            Ok(RatePoint { lambda, model })
        })
        .collect::<Result<Vec<_>>>()?;
    let images = read_images(images)?;
    let sweep = rd_sweep("eval", &points, &images)?;
    sweep.write_csv(fs::File::create(csv).map_err(Error::at_path(csv))?)?;
    println!("{:>10} {:>10} {:>10}", "lambda", "bpp", "psnr");
    for (p, m) in sweep.points.iter().zip(&points) {
        println!("{:>10} {:>10.4} {:>10.3}", m.lambda, p.bpp, p.psnr);
    }
    println!("bd_method {BD_METHOD}");
    Ok(())
}

fn maps(a: &Path, b: &Path, input: &Path, prefix: &str) -> Result<()> {
    let img = Image::read(input)?;
    let (_, ma) = load_model(a)?;
    let (_, mb) = load_model(b)?;
    let ea = Codec::new(ma)?.encode(&img, None)?;
    let eb = Codec::new(mb)?.encode(&img, None)?;
    let (map_a, map_b) = (ea.allocation_map(), eb.allocation_map());
    let top = map_a.bits.iter().chain(&map_b.bits).copied().fold(0.0, f64::max);
    map_a.to_image(Some(top)).write(format!("{prefix}_a.pgm"))?;
    map_b.to_image(Some(top)).write(format!("{prefix}_b.pgm"))?;
    let diff = allocation_diff(&map_a, &map_b)?;
    diff.render().write(format!("{prefix}_diff.ppm"))?;
    println!(
        "bits_a {:.1} bits_b {:.1} diff_scale {:.6} bpp_a {:.4} bpp_b {:.4}",
        map_a.total(),
        map_b.total(),
        diff.scale(),
        ea.bpp(),
        eb.bpp()
    );
    Ok(())
}

fn check(name: &str, ok: Result<bool>) -> bool {
    let pass = matches!(ok, Ok(true));
    match ok {
        Ok(_) => println!("{} {name}", if pass { "PASS" } else { "FAIL" }),
        Err(e) => println!("FAIL {name}: {e}"),
    }
    pass
}

fn selftest() -> ExitCode {
    let mut all = true;
    all &= check("range coder round trip", (|| {
        let tables = ScaleTables::new(DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
        let mut rng = Rng::new(1);
        let sig: Vec<f64> = (0..20_000).map(|_| rng.uniform_range(0.05, 30.0)).collect();
        let sym: Vec<i32> = sig.iter().map(|s| (rng.normal() * s * 1.5).round() as i32).collect();
        let refs: Vec<_> = sig.iter().map(|&s| tables.for_sigma(s)).collect();
        let bytes = range_coder::encode(&sym, &refs)?;
        Ok(range_coder::decode(&bytes, &refs, sym.len())? == sym)
    })());
    all &= check("attention k-NN full neighbourhood equals dense", (|| {
        use gabic::attention::{bind_params, gwam_forward, GwamConfig, GwamParams};
        use gabic::tensor::Graph;
        let mut rng = Rng::new(2);
        let cfg = GwamConfig {
            k: 16,
            include_self: true,
            ..GwamConfig::new(4)
        };
        let params = GwamParams::<f64>::random(cfg.clone(), 8, 1.0, &mut rng)?;
        let x = Tensor::<f64>::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        let run = |cfg: &GwamConfig| -> Result<Tensor<f64>> {
            let mut g = Graph::new();
            let h = bind_params(&mut g, &params, false);
            let xv = g.constant(x.clone());
            let y = gwam_forward(&mut g, xv, cfg, &h)?;
            Ok(g.value(y).clone())
        };
        let dense = GwamConfig {
            mode: AttentionMode::Dense,
            ..cfg.clone()
        };
        Ok(run(&cfg)?.max_abs_diff(&run(&dense)?) < 1e-9)
    })());
    all &= check("bd-rate of halved rates", (|| {
        let pts = |f: f64| RdCurve::new("c", (0..4).map(|i| RdPoint { bpp: f * 0.1 * 2f64.powi(i), psnr: 28.0 + 2.5 * i as f64 }).collect());
        Ok((bd_rate(&pts(1.0)?, &pts(0.5)?)? + 50.0).abs() < 1e-6)
    })());
    all &= check("checkpoint round trip", (|| {
        let m = Gabic::<f32>::new(ModelConfig::gradcheck(), 3)?;
        let ck = Checkpoint::from_model(&m);
        let back = Checkpoint::from_bytes(&ck.to_bytes())?;
        Ok(back.dtype == Dtype::F32 && back.to_model::<f32>()?.params().tensors() == m.params().tensors())
    })());
    all &= check("codec decode equals encoder reconstruction", (|| {
        let codec = Codec::new(Gabic::new(ModelConfig::toy(), 4)?)?;
        let img = gabic::trainer::synthetic_images(1, 48, 5).remove(0);
        let enc = codec.encode(&img, None)?;
        let bytes = enc.bytes();
        let ok = Bitstream::parse(&bytes)? == enc.bitstream && codec.decode_bytes(&bytes)? == enc.reconstruction;
        Ok(ok && codec.decode_bytes(&bytes[..bytes.len() - 1]).is_err())
    })());
    println!("{BD_METHOD}");
    if all {
        ExitCode::SUCCESS
    } else {
        eprintln!("error[selftest]: invariant check failed");
        ExitCode::from(SELFTEST_FAILED)
    }
}
