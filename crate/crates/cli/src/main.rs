//! `entroprune` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use entroprune::eval::{capture_dumps, evaluate, load_images, EvalDataset};
use entroprune::pipeline::{
    load_dumps, report_with, sparsify_layer, sparsify_network, NetworkPruneOptions, PruneMode,
};
use entroprune::{zoo, Error, FlopConvention, LayerDump, NetworkSpec, Result, SparsifyConfig, Tensor};

const EXIT_DATA: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "entroprune", version, about = "Entropy-regularized channel pruning for CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sparsify one layer from its dump directory and write the solver artifacts.
    SparsifyLayer {
        /// Directory holding meta.json, X.tdf and Y.tdf.
        dump: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Print a JSON summary instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Sparsify every dumped layer of a network, prune it and report.
    SparsifyNet {
        /// Directory of layer dump directories.
        dumps: PathBuf,
        /// Network description (net.json).
        #[arg(long)]
        net: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        /// Keep original kernels of surviving channels instead of the refit.
        #[arg(long)]
        mask_only: bool,
        /// Prune layers sharing their input with a projection shortcut.
        #[arg(long)]
        merge_residual: bool,
        /// Only these layers (comma separated).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        /// Concurrent layer solves.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Top-1 accuracy of a network on a labelled image set.
    Eval {
        net: PathBuf,
        /// Images: IDX (MNIST) or TDF.
        #[arg(long)]
        images: PathBuf,
        /// Labels: IDX or TDF.
        #[arg(long)]
        labels: PathBuf,
        /// Evaluate only the first N examples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Compare parameters, sparsity and FLOPs of a pruned network with its baseline.
    Report {
        baseline: PathBuf,
        pruned: PathBuf,
        #[arg(long, value_enum, default_value_t = Flops::One)]
        flops: Flops,
        /// Named layer group for local sparsity, as NAME=ID,ID,...; repeatable.
        #[arg(long = "group", value_parser = parse_group)]
        groups: Vec<(String, Vec<String>)>,
        #[arg(long)]
        json: bool,
    },
    /// Run images through a network and write dumps of the named layers.
    Capture {
        net: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Layers to capture (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "dumps")]
        out: PathBuf,
    },
    /// Write a reference architecture with seeded random weights.
    Init {
        #[arg(value_enum)]
        arch: Arch,
        /// Channel configuration name for `vgg16-pruned`.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Architecture only, no weight files.
        #[arg(long)]
        no_weights: bool,
        #[arg(long, default_value = "net")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SolverFlags {
    /// Entropy weight (negative).
    #[arg(long, allow_negative_numbers = true, default_value_t = SparsifyConfig::default().eps_w)]
    eps_w: f64,
    /// Ridge weight on the regression matrix.
    #[arg(long, default_value_t = SparsifyConfig::default().eps_l2)]
    eps_l2: f64,
    /// Cap on sampled output positions per layer.
    #[arg(long, default_value_t = SparsifyConfig::default().max_points)]
    max_points: usize,
    #[arg(long, default_value_t = SparsifyConfig::default().seed)]
    seed: u64,
    /// Channels with weight below this are pruned.
    #[arg(long, default_value_t = SparsifyConfig::default().prune_threshold)]
    threshold: f64,
}

impl SolverFlags {
    fn config(&self) -> SparsifyConfig {
        SparsifyConfig {
            eps_w: self.eps_w,
            eps_l2: self.eps_l2,
            max_points: self.max_points,
            seed: self.seed,
            prune_threshold: self.threshold,
            ..SparsifyConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Flops {
    /// A multiply-add counts once.
    One,
    /// A multiply-add counts twice.
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Lenet,
    Vgg16,
    Vgg16Pruned,
    Resnet18,
}

fn parse_group(s: &str) -> std::result::Result<(String, Vec<String>), String> {
    let (name, ids) = s.split_once('=').ok_or("expected NAME=ID,ID,...")?;
    let ids: Vec<String> = ids.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect();
    if name.is_empty() || ids.is_empty() {
        return Err("expected NAME=ID,ID,...".into());
    }
    Ok((name.to_string(), ids))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SparsifyLayer { dump, solver, out, json } => {
            let cfg = solver.config();
            cfg.validate()?;
            let dump = LayerDump::load(&dump)?;
            let r = sparsify_layer(&dump, &cfg)?;
            r.solve.save(&out)?;
            let summary = json!({
                "layer_id": r.layer_id,
                "channels": r.geometry.in_channels,
                "kept": r.kept_in,
                "mse": r.solve.mse,
                "loss": r.solve.loss_trace.last(),
                "iterations": r.solve.iterations,
                "converged": r.solve.converged,
            });
            if json {
                println!("{summary}");
            } else {
                println!(
                    "layer={} kept={}/{} mse={:.6e} iterations={} converged={}",
                    r.layer_id,
                    r.kept_in.len(),
                    r.geometry.in_channels,
                    r.solve.mse,
                    r.solve.iterations,
                    r.solve.converged
                );
            }
        }
        Command::SparsifyNet {
            dumps,
            net,
            solver,
            mask_only,
            merge_residual,
            layers,
            jobs,
            out,
            json,
        } => {
            let opts = NetworkPruneOptions {
                config: solver.config(),
                mode: if mask_only { PruneMode::MaskOnly } else { PruneMode::Refit },
                merge_residual,
                jobs,
                layers,
            };
            opts.config.validate()?;
            let net = NetworkSpec::load(&net)?;
            let dumps = load_dumps(&dumps)?;
            let outcome = sparsify_network(&net, &dumps, &opts)?;
            outcome.save(&out)?;
            for (id, reason) in &outcome.skipped {
                eprintln!("skipped {id}: {reason}");
            }
            if json {
                print!("{}", outcome.report.to_json());
            } else {
                print!("{}", outcome.report);
            }
        }
        Command::Eval {
            net,
            images,
            labels,
            limit,
            json,
        } => {
            let net = NetworkSpec::load(&net)?;
            let mut data = EvalDataset::load(&images, &labels)?;
            if let Some(n) = limit {
                data = data.head(n)?;
            }
            let acc = evaluate(&net, &data)?;
            if json {
                println!("{}", json!({ "accuracy": acc, "samples": data.len() }));
            } else {
                println!("accuracy={acc:.4}");
            }
        }
        Command::Report {
            baseline,
            pruned,
            flops,
            groups,
            json,
        } => {
            let base = NetworkSpec::load(&baseline)?;
            let pruned = NetworkSpec::load(&pruned)?;
            let convention = match flops {
                Flops::One => FlopConvention::MultiplyAddAsOne,
                Flops::Two => FlopConvention::MultiplyAddAsTwo,
            };
            let r = report_with(&base, &pruned, base.input_shape, convention, &groups)?;
            if json {
                print!("{}", r.to_json());
            } else {
                print!("{r}");
            }
        }
        Command::Capture {
            net,
            images,
            layers,
            limit,
            out,
        } => {
            let net = NetworkSpec::load(&net)?;
            let mut images = load_images(&images)?;
            if let Some(n) = limit {
                let s = images.shape().to_vec();
                let n = n.min(s[0]);
                let per: usize = s[1..].iter().product();
                images = Tensor::new(vec![n, s[1], s[2], s[3]], images.data()[..n * per].to_vec())?;
            }
            let ids: Vec<&str> = layers.iter().map(String::as_str).collect();
            for dump in capture_dumps(&net, &images, &ids)? {
                let dir = out.join(&dump.layer_id);
                dump.save(&dir)?;
                info!("wrote {}", dir.display());
            }
        }
        Command::Init {
            arch,
            config,
            seed,
            no_weights,
            out,
        } => {
            let mut net = match arch {
                Arch::Lenet => zoo::lenet(),
                Arch::Vgg16 => zoo::vgg16(),
                Arch::Resnet18 => zoo::resnet18(),
                Arch::Vgg16Pruned => {
                    let name = config.ok_or_else(|| {
                        Error::Config("vgg16-pruned needs --config NAME".into())
                    })?;
                    zoo::vgg16_pruned(&name).ok_or_else(|| {
                        let known: Vec<&str> = zoo::VGG16_PRUNED.iter().map(|(n, _)| *n).collect();
                        Error::Config(format!("unknown configuration {name}; known: {}", known.join(", ")))
                    })?
                }
            };
            if !no_weights {
                zoo::init_weights(&mut net, seed);
            }
            let path = out.join("net.json");
            net.save(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if e.is_solver_failure() { EXIT_SOLVER } else { EXIT_DATA })
        }
    }
}
