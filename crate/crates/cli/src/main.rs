use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vil_core::ablate::{run_ablation, AblationConfig};
use vil_core::autograd::BackwardFault;
use vil_core::bench::{run_bench, BenchSpec};
use vil_core::config::TrainConfig;
use vil_core::dataset::{synthesize_dataset, CornersSpec};
use vil_core::flops::{chunk_sweep, estimate_model_flops, expected_flops_with_droppath, optimal_chunk};
use vil_core::mlstm::KernelMode;
use vil_core::model::{count_params, layout, load_checkpoint, Model, Preset, ViLConfig};
use vil_core::par::Execution;
use vil_core::train::{accuracy, output_dir, train, TrainData, CHECKPOINT_FILE, METRICS_FILE};
use vil_core::verify::{equivalence_sweep, gradcheck_fixture, gradcheck_model, ChunkSpec, EquivalenceSpec, GradcheckOptions};
use vil_core::{Real, VilError};

/// Vision-LSTM training, verification and cost-model tool.
#[derive(Parser)]
#[command(name = "vil", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Run batch-level work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Tiny,
    Small,
    Base,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Small => Preset::Small,
            PresetArg::Base => Preset::Base,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the corners task; writes metrics.csv and model.ckpt.
    Train,
    /// Accuracy of a checkpoint on both splits of the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient check of a micro model in 64-bit.
    Gradcheck {
        /// Check at most this many entries per parameter tensor.
        #[arg(long)]
        max_per_group: Option<usize>,
        /// Test fixture: scale the input gradients of one op, e.g. `matmul:1.5`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Maximum deviation between recurrent, parallel and chunkwise kernels.
    Equivalence {
        #[arg(long, value_delimiter = ',', default_value = "16,64,128")]
        lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8,64")]
        dims: Vec<usize>,
        /// Chunk sizes: integers, `L/2` or `L`.
        #[arg(long, value_delimiter = ',', default_value = "1,3,L/2,L")]
        chunks: Vec<String>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Defaults to 1e-4 in f32 and 1e-10 in f64.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Time the kernels over a range of sequence lengths; writes bench.csv.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        chunks: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Repeat the kernel within one timing sample until it lasts this long.
        #[arg(long, default_value_t = 5.0)]
        min_sample_ms: f64,
    },
    /// Train every (design, pooling) row of an ablation config over its seeds.
    Ablate,
    /// Write the corners dataset (train/ and eval/) to --out.
    Synth,
    /// Analytic MAC counts of a preset or configured model.
    Flops {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        resolution: Option<usize>,
        /// Kernel mode: parallel, recurrent or chunkwise:C.
        #[arg(long)]
        mode: Option<KernelMode>,
        /// Expected count under stochastic depth with this peak rate.
        #[arg(long)]
        drop_path: Option<f64>,
        /// Also print the chunk-size sweep of one mLSTM head.
        #[arg(long)]
        sweep: bool,
    },
    /// Parameter count of a preset or configured model.
    Params {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// List every tensor.
        #[arg(long)]
        verbose: bool,
    },
}

/// A check ran but did not pass.
struct CheckFailed(String);

enum Failure {
    Check(CheckFailed),
    Error(VilError),
}

impl From<VilError> for Failure {
    fn from(e: VilError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn exec(c: &Common) -> Execution {
    if c.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn train_config(c: &Common) -> Result<TrainConfig, Failure> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| VilError::Usage("this command needs --config PATH".into()))?;
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn model_config(c: &Common, preset: Option<PresetArg>) -> Result<ViLConfig, Failure> {
    match (preset, &c.config) {
        (Some(p), _) => Ok(ViLConfig::preset(p.into())),
        (None, Some(_)) => Ok(train_config(c)?.model),
        (None, None) => Ok(ViLConfig::preset(Preset::Tiny)),
    }
}

fn write_out(c: &Common, name: &str, text: &str) -> CliResult {
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let c = &cli.common;
    match cli.command {
        Command::Train => match c.precision {
            Precision::F32 => cmd_train::<f32>(c),
            Precision::F64 => cmd_train::<f64>(c),
        },
        Command::Eval { checkpoint } => match c.precision {
            Precision::F32 => cmd_eval::<f32>(c, &checkpoint),
            Precision::F64 => cmd_eval::<f64>(c, &checkpoint),
        },
        Command::Gradcheck {
            max_per_group,
            inject_fault,
        } => cmd_gradcheck(c, max_per_group, inject_fault),
        Command::Equivalence {
            lens,
            dims,
            chunks,
            trials,
            tolerance,
        } => cmd_equivalence(c, lens, dims, &chunks, trials, tolerance),
        Command::Bench {
            lens,
            dim,
            chunks,
            repeats,
            warmup,
            min_sample_ms,
        } => {
            let spec = BenchSpec {
                lens,
                dim,
                chunks: parse_chunks(&chunks)?,
                repeats,
                warmup,
                min_sample_ms,
                seed: c.seed.unwrap_or(0),
                ..Default::default()
            };
            let report = run_bench(&spec)?;
            print!("{report}");
            write_out(c, "bench.csv", &report.to_csv())
        }
        Command::Ablate => {
            let path = c
                .config
                .as_ref()
                .ok_or_else(|| VilError::Usage("ablate needs --config PATH".into()))?;
            let text = fs::read_to_string(path)?;
            let cfg = AblationConfig::from_toml(&text).map_err(|e| e.context(path.display().to_string()))?;
            let report = run_ablation(&cfg, c.out.as_deref(), exec(c))?;
            print!("{report}");
            Ok(())
        }
        Command::Synth => {
            let mut spec = match &c.config {
                Some(_) => train_config(c)?.dataset.corners,
                None => CornersSpec::default(),
            };
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            let dir = c
                .out
                .as_ref()
                .ok_or_else(|| VilError::Usage("synth needs --out DIR".into()))?;
            synthesize_dataset(&spec, dir, exec(c))?;
            println!(
                "wrote {} train and {} eval images to {}",
                spec.train_size,
                spec.eval_size,
                dir.display()
            );
            Ok(())
        }
        Command::Flops {
            preset,
            resolution,
            mode,
            drop_path,
            sweep,
        } => {
            let mut cfg = model_config(c, preset)?;
            if let Some(m) = mode {
                cfg.kernel = m;
            }
            let res = resolution.unwrap_or(cfg.image_size);
            let report = estimate_model_flops(&cfg, res)?;
            println!("{report}");
            if let Some(rate) = drop_path {
                let e = expected_flops_with_droppath(&report, rate)?;
                println!("expected with drop path {rate}: {e:.0} ({:.3} G)", e / 1e9);
            }
            if sweep {
                let ld = cfg.layer_dims()?;
                let (best, n) = optimal_chunk(report.len, ld.head_qk(), ld.head_v())?;
                println!("chunk sweep per head (L={}): minimum {n} at C={best}", report.len);
                let text: String = std::iter::once("C,count\n".to_string())
                    .chain(
                        chunk_sweep(report.len, ld.head_qk(), ld.head_v())?
                            .into_iter()
                            .map(|(c, n)| format!("{c},{n}\n")),
                    )
                    .collect();
                write_out(c, "chunk_sweep.csv", &text)?;
            }
            write_out(c, "flops.csv", &report.to_csv())
        }
        Command::Params { preset, verbose } => {
            let cfg = model_config(c, preset)?;
            if verbose {
                for s in layout(&cfg)? {
                    println!("{:<36} {:>16} {:>10}", s.name, format!("{:?}", s.shape), s.numel());
                }
            }
            let n = count_params(&cfg)?;
            println!("parameters: {n} ({:.2} M)", n as f64 / 1e6);
            Ok(())
        }
    }
}

fn parse_chunks(items: &[String]) -> Result<Vec<ChunkSpec>, Failure> {
    Ok(items.iter().map(|s| s.parse()).collect::<Result<Vec<ChunkSpec>, VilError>>()?)
}

fn cmd_train<T: Real>(c: &Common) -> CliResult {
    let cfg = train_config(c)?;
    let dir = output_dir(&cfg, c.out.as_deref());
    let data = TrainData::load(&cfg, exec(c))?;
    println!(
        "training {} steps ({} parameters, peak lr {:.3e}, {})",
        cfg.total_steps(),
        count_params(&cfg.model)?,
        cfg.peak_lr(),
        T::NAME
    );
    let outcome = train::<T>(&cfg, &data, Some(&dir), exec(c))?;
    for m in &outcome.metrics {
        println!(
            "step {:>6}  loss {:.4}  train_acc {:.3}  eval_acc {:.3}  lr {:.2e}  {:.1} ms/step",
            m.step, m.loss, m.train_acc, m.eval_acc, m.lr, m.ms_per_step
        );
    }
    println!(
        "final train accuracy {:.4}, eval accuracy {:.4}",
        outcome.train_acc, outcome.eval_acc
    );
    println!(
        "wrote {} and {}",
        dir.join(METRICS_FILE).display(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_eval<T: Real>(c: &Common, checkpoint: &Path) -> CliResult {
    let cfg = train_config(c)?;
    let params = load_checkpoint::<T>(checkpoint, &cfg.model)?;
    let model = Model::from_params(cfg.model.clone(), params)?;
    let data = TrainData::load(&cfg, exec(c))?;
    println!("train accuracy {:.4}", accuracy(&model, &data.train, exec(c))?);
    println!("eval accuracy {:.4}", accuracy(&model, &data.eval, exec(c))?);
    Ok(())
}

fn parse_fault(s: &str) -> Result<BackwardFault, Failure> {
    const OPS: [&str; 8] = [
        "matmul",
        "mlstm_parallel",
        "norm",
        "grouped_linear",
        "conv2d_depthwise",
        "add_row",
        "mul",
        "silu",
    ];
    let (op, scale) = s
        .split_once(':')
        .ok_or_else(|| VilError::Usage(format!("fault must be OP:SCALE, got {s:?}")))?;
    let op = OPS
        .into_iter()
        .find(|o| *o == op)
        .ok_or_else(|| VilError::Usage(format!("unknown op {op:?}; one of {OPS:?}")))?;
    let scale = scale
        .parse()
        .map_err(|_| VilError::Usage(format!("bad fault scale {scale:?}")))?;
    Ok(BackwardFault { op, scale })
}

fn cmd_gradcheck(c: &Common, max_per_group: Option<usize>, fault: Option<String>) -> CliResult {
    if c.precision == Precision::F32 && std::env::args().any(|a| a == "--precision") {
        eprintln!("note: the gradient check always runs in f64");
    }
    let cfg = match &c.config {
        Some(_) => train_config(c)?.model,
        None => ViLConfig::micro(8, 2, 4),
    };
    let (model, image, label) = gradcheck_fixture(&cfg, c.seed.unwrap_or(0))?;
    let opts = GradcheckOptions {
        max_per_group,
        fault: fault.as_deref().map(parse_fault).transpose()?,
        exec: exec(c),
        ..Default::default()
    };
    let report = gradcheck_model(&model, &image, label, &opts)?;
    println!("{report}");
    write_out(c, "gradcheck.txt", &report.to_string())?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(CheckFailed(format!(
            "relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            report.tolerance
        ))))
    }
}

fn cmd_equivalence(
    c: &Common,
    lens: Vec<usize>,
    dims: Vec<usize>,
    chunks: &[String],
    trials: usize,
    tolerance: Option<f64>,
) -> CliResult {
    let spec = EquivalenceSpec {
        lens,
        dims,
        chunks: parse_chunks(chunks)?,
        trials,
        seed: c.seed.unwrap_or(0),
    };
    let report = match c.precision {
        Precision::F32 => equivalence_sweep::<f32>(&spec, tolerance.unwrap_or(1e-4), exec(c))?,
        Precision::F64 => equivalence_sweep::<f64>(&spec, tolerance.unwrap_or(1e-10), exec(c))?,
    };
    println!("{:>6} {:>5} {:>6} {:>12}", "L", "d", "C", "max_dev");
    let mut csv = String::from("L,d,C,worst_trial,max_dev\n");
    for case in &report.cases {
        println!("{:>6} {:>5} {:>6} {:>12.3e}", case.len, case.dim, case.chunk, case.max_dev);
        csv.push_str(&format!(
            "{},{},{},{},{:e}\n",
            case.len, case.dim, case.chunk, case.trial, case.max_dev
        ));
    }
    write_out(c, "equivalence.csv", &csv)?;
    let failures: Vec<_> = report.failures().collect();
    if let Some(w) = report.worst() {
        println!(
            "{} precision, {} trials, tolerance {:.0e}: worst {:.3e}",
            report.precision, report.trials, report.tolerance, w.max_dev
        );
    }
    match failures.first() {
        None => Ok(()),
        Some(f) => Err(Failure::Check(CheckFailed(format!(
            "{} case(s) over tolerance; first: L={} d={} C={} trial={} deviation {:.3e}",
            failures.len(),
            f.len,
            f.dim,
            f.chunk,
            f.trial,
            f.max_dev
        )))),
    }
}
