use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unitquant::calib::{CalibConfig, FisherSource, InputMode, Method};
use unitquant::cli::{cmd_eval, cmd_quantize, cmd_train, write_json, QuantizeRun, TrainRun};
use unitquant::data::{Dataset, Split, DATA_ENV, DEFAULT_DATA_DIR};
use unitquant::train::TrainConfig;

#[derive(Parser)]
#[command(name = "unitquant", version, about = "Unit-wise post-training quantization")]
struct Cli {
    /// Dataset root holding IDX files.
    #[arg(long, global = true, env = DATA_ENV, default_value = DEFAULT_DATA_DIR)]
    data: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rtn,
    Layerwise,
    Unitwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Quantized,
    Float,
}

#[derive(Clone, Copy, ValueEnum)]
enum FisherArg {
    Labels,
    Argmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the reference CNN.
    Train {
        #[arg(long, short, default_value = "model.json")]
        output: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train on the first N samples only.
        #[arg(long)]
        subset: Option<usize>,
    },
    /// Quantize a float model and write the quantized model plus a JSON report.
    Quantize {
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short, default_value = "quantized.json")]
        output: PathBuf,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        /// JSON run configuration (e.g. the `config` of an earlier report);
        /// flags given explicitly override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["2", "3", "4", "8"])]
        bits_w: Option<String>,
        #[arg(long, value_parser = ["4", "8", "32"])]
        bits_a: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        unit_size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        calib_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        input_mode: Option<InputArg>,
        #[arg(long, value_enum)]
        fisher: Option<FisherArg>,
    },
    /// Top-1 / top-5 accuracy of a model on a dataset split.
    Eval {
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Hessian block structure and Taylor-remainder diagnostics on a small MLP.
    ProbeHessian {
        #[arg(long, short, default_value = "probe.json")]
        output: PathBuf,
        /// Also write the tables as CSV next to the JSON.
        #[arg(long)]
        csv: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
}

fn run(cli: Cli) -> unitquant::Result<()> {
    let dataset = Dataset::new(&cli.data);
    match cli.cmd {
        Cmd::Train {
            output,
            epochs,
            batch_size,
            lr,
            seed,
            subset,
        } => {
            let run = TrainRun {
                dataset,
                output,
                train: TrainConfig {
                    epochs,
                    batch_size,
                    lr,
                    seed,
                    subset,
                    ..TrainConfig::default()
                },
            };
            let s = cmd_train(&run)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Quantize {
            model,
            output,
            report,
            config,
            bits_w,
            bits_a,
            mode,
            unit_size,
            steps,
            calib_size,
            seed,
            input_mode,
            fisher,
        } => {
            let mut run = match config {
                Some(p) => serde_json::from_str::<QuantizeRun>(&std::fs::read_to_string(p)?)?,
                None => QuantizeRun {
                    dataset: dataset.clone(),
                    model: model.clone(),
                    output: output.clone(),
                    method: Method::Unitwise,
                    calib_size: 1024,
                    calib: CalibConfig::default(),
                },
            };
            run.model = model;
            run.output = output;
            if let Some(b) = bits_w {
                run.calib.weight_bits = b.parse().expect("validated by clap");
            }
            if let Some(b) = bits_a {
                run.calib.act_bits = b.parse().expect("validated by clap");
            }
            if let Some(m) = mode {
                run.method = match m {
                    ModeArg::Rtn => Method::Rtn,
                    ModeArg::Layerwise => Method::Layerwise,
                    ModeArg::Unitwise => Method::Unitwise,
                };
            }
            if let Some(u) = unit_size {
                run.calib.unit_size = u;
            }
            if let Some(s) = steps {
                run.calib.steps = s;
            }
            if let Some(c) = calib_size {
                run.calib_size = c;
            }
            if let Some(s) = seed {
                run.calib.seed = s;
            }
            if let Some(i) = input_mode {
                run.calib.input_mode = match i {
                    InputArg::Quantized => InputMode::Quantized,
                    InputArg::Float => InputMode::Float,
                };
            }
            if let Some(f) = fisher {
                run.calib.fisher_source = match f {
                    FisherArg::Labels => FisherSource::Labels,
                    FisherArg::Argmax => FisherSource::Argmax,
                };
            }
            let (_, rep) = cmd_quantize(&run)?;
            write_json(&rep, &report)?;
            println!(
                "fp top-1 {:.4} | rtn top-1 {:.4} | {:?} top-1 {:.4} | {:.1}s",
                rep.fp_accuracy.top1, rep.rtn_accuracy.top1, rep.mode_flags.method, rep.calibrated_accuracy.top1, rep.total_seconds
            );
        }
        Cmd::Eval { model, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let acc = cmd_eval(&model, &dataset, split)?;
            println!("{}", serde_json::to_string_pretty(&acc)?);
        }
        Cmd::ProbeHessian {
            output,
            csv,
            seed,
            samples,
        } => {
            let probe = unitquant::cli::cmd_probe_hessian(&dataset, seed, samples)?;
            write_json(&probe, &output)?;
            if csv {
                let stem = output.with_extension("");
                std::fs::write(stem.with_extension("mass.csv"), probe.mass_csv())?;
                std::fs::write(stem.with_extension("taylor.csv"), probe.taylor_csv())?;
            }
            println!("{}", probe.mass_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
