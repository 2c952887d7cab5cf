//! Command-line entry point: tiling, training, evaluation, prediction,
//! gradient checking, and parameter reporting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use granet::checkpoint;
use granet::config::{NetworkConfig, RunConfig};
use granet::error::{Error, Result};
use granet::gradcheck::{self, CheckModule};
use granet::metrics::{report, ConfusionMatrix};
use granet::network::GraNetModel;
use granet::pipeline::{predict_cloud, prepare_blocks, split_train_val};
use granet::pointcloud::{
    normalize_hag, read_pts, sniff_labels, write_error_map, write_labels, ClassMap, PointCloud,
};
use granet::spatial::tile_blocks;
use granet::training::train;

/// Environment variable that supplies the config path when `--config` is
/// not given.
const CONFIG_ENV: &str = "GRANET_CONFIG";

#[derive(Parser)]
#[command(name = "granet", about = "ALS point cloud semantic labeling", version)]
struct Cli {
    /// Worker threads for neighbor searches (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Config file; falls back to $GRANET_CONFIG, then to built-in defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a point cloud into overlapping subblocks and write the manifest.
    Tile {
        input: PathBuf,
        out_manifest: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        block: f64,
        #[arg(long, default_value_t = 25.0)]
        sub: f64,
        #[arg(long, default_value_t = 12.5)]
        stride: f64,
        /// Replace elevations by height above the per-cell minimum first.
        #[arg(long)]
        hag: bool,
        #[arg(long, default_value_t = 25.0)]
        hag_cell_size: f64,
    },
    /// Train a model per the config file; writes checkpoint_best.bin and
    /// train.log under the output directory.
    Train {
        /// Output directory (overrides data.output_dir from the config).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on labeled data; prints and writes metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled .pts file (default: data.test from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Predict labels for a cloud; writes labels.pts and, when ground
    /// truth is present, errormap.pts.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on miniature module instances.
    Gradcheck {
        /// losda|sra|cra|mode1|mode2|mode3|full|all
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Report learnable parameter counts for the configured model.
    Params,
}

fn load_config(cli_path: &Option<PathBuf>) -> Result<RunConfig> {
    let path = cli_path
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn read_cloud(path: &Path, class_map: ClassMap, hag: bool, cell: f64) -> Result<PointCloud> {
    let labeled = sniff_labels(path)?;
    let cloud = read_pts(path, labeled, class_map)?;
    if hag {
        normalize_hag(&cloud, cell)
    } else {
        Ok(cloud)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_tile(
    cfg: &RunConfig,
    input: &Path,
    out_manifest: &Path,
    block: f64,
    sub: f64,
    stride: f64,
    hag: bool,
    hag_cell_size: f64,
) -> Result<()> {
    let class_map = cfg.network.class_map(cfg.data.class_names.as_deref())?;
    let cloud = read_cloud(input, class_map, hag, hag_cell_size)?;
    let plan = tile_blocks(&cloud, block, sub, stride)?;
    std::fs::write(out_manifest, plan.to_manifest()).map_err(|e| Error::io(out_manifest, e))?;
    println!(
        "{} points -> {} subblocks",
        cloud.len(),
        plan.subblock_count()
    );
    let counts: Vec<usize> = plan.members.iter().map(Vec::len).collect();
    for (origin, count) in plan.origins.iter().zip(&counts) {
        println!("subblock {} {} {}", origin[0], origin[1], count);
    }
    let min = counts.iter().min().unwrap();
    let max = counts.iter().max().unwrap();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    println!("points per subblock: min {min}, mean {mean:.1}, max {max}");
    println!("manifest written to {}", out_manifest.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out_dir = out.unwrap_or_else(|| cfg.data.output_dir.clone());
    ensure_dir(&out_dir)?;
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is required for training".into()))?;
    let class_map = cfg.network.class_map(cfg.data.class_names.as_deref())?;
    let cloud = read_cloud(
        train_path,
        class_map.clone(),
        cfg.data.hag,
        cfg.data.hag_cell_size,
    )?;
    if cloud.labels().is_none() {
        return Err(Error::Contract(
            "training data must carry labels on every point".into(),
        ));
    }
    let (_, blocks) = prepare_blocks(&cloud, &cfg.network, &cfg.data, cfg.training.seed)?;

    let (train_blocks, val_blocks) = match &cfg.data.validation {
        Some(val_path) => {
            let val_cloud = read_cloud(val_path, class_map, cfg.data.hag, cfg.data.hag_cell_size)?;
            let (_, val_blocks) =
                prepare_blocks(&val_cloud, &cfg.network, &cfg.data, cfg.training.seed)?;
            (blocks, val_blocks)
        }
        None => {
            let (ti, vi) = split_train_val(
                blocks.len(),
                cfg.data.validation_fraction,
                cfg.training.seed,
            );
            let t: Vec<_> = ti.iter().map(|&i| blocks[i].clone()).collect();
            let v: Vec<_> = vi.iter().map(|&i| blocks[i].clone()).collect();
            (t, v)
        }
    };
    println!(
        "training on {} blocks, validating on {}",
        train_blocks.len(),
        val_blocks.len()
    );

    let mut model = GraNetModel::init(&cfg.network)?;
    println!("model parameters: {}", model.param_count());
    let ckpt_path = out_dir.join("checkpoint_best.bin");
    let mut log_lines = String::new();
    let history = train(
        &mut model,
        &train_blocks,
        &val_blocks,
        &cfg.training,
        Some(&ckpt_path),
        |log| {
            let line = log.to_line();
            println!("{line}");
            log_lines.push_str(&line);
            log_lines.push('\n');
        },
    )?;
    let log_path = out_dir.join("train.log");
    std::fs::write(&log_path, log_lines).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "saved {} checkpoints; best validation loss {}",
        history.checkpoints.len(),
        history
            .checkpoints
            .last()
            .map(|(_, l)| *l)
            .unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let data_path = data
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| Error::Config("eval needs --data or data.test in the config".into()))?;
    let mut model = checkpoint::load(checkpoint)?;
    let class_map = model.config.class_map(cfg.data.class_names.as_deref())?;
    let cloud = read_cloud(
        &data_path,
        class_map.clone(),
        cfg.data.hag,
        cfg.data.hag_cell_size,
    )?;
    let truth = cloud.labels().ok_or_else(|| {
        Error::Contract("evaluation data must carry labels on every point".into())
    })?;
    let predicted = predict_cloud(&mut model, &cloud, &cfg.data, cfg.training.seed)?;
    let mut cm = ConfusionMatrix::new(model.config.class_count);
    cm.accumulate(&truth, &predicted)?;
    let rep = report(&cm)?;
    print!("{}", rep.to_table(&class_map));
    let out_dir = out.unwrap_or_else(|| cfg.data.output_dir.clone());
    ensure_dir(&out_dir)?;
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, rep.to_csv(&class_map)).map_err(|e| Error::io(&csv_path, e))?;
    println!("metrics written to {}", csv_path.display());
    Ok(())
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let data_path = data
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| Error::Config("predict needs --data or data.test in the config".into()))?;
    let mut model = checkpoint::load(checkpoint)?;
    let class_map = model.config.class_map(cfg.data.class_names.as_deref())?;
    let cloud = read_cloud(&data_path, class_map, cfg.data.hag, cfg.data.hag_cell_size)?;
    let predicted = predict_cloud(&mut model, &cloud, &cfg.data, cfg.training.seed)?;
    let out_dir = out.unwrap_or_else(|| cfg.data.output_dir.clone());
    ensure_dir(&out_dir)?;
    let labels_path = out_dir.join("labels.pts");
    write_labels(&cloud, &predicted, &labels_path)?;
    println!("labels written to {}", labels_path.display());
    if cloud.labels().is_some() {
        let map_path = out_dir.join("errormap.pts");
        write_error_map(&cloud, &predicted, &map_path)?;
        println!("error map written to {}", map_path.display());
    } else {
        eprintln!("warning: input has no ground-truth labels, skipping the error map");
    }
    Ok(())
}

fn cmd_gradcheck(module: &str) -> Result<bool> {
    let modules: Vec<CheckModule> = if module == "all" {
        CheckModule::all().to_vec()
    } else {
        vec![CheckModule::parse(module)?]
    };
    let mut all_pass = true;
    for m in modules {
        for (name, err) in gradcheck::run(m)? {
            let pass = err <= gradcheck::TOLERANCE;
            all_pass &= pass;
            println!(
                "gradcheck {name}: max relative error {err:.3e} -> {}",
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(all_pass)
}

fn cmd_params(network: &NetworkConfig) -> Result<()> {
    let mut model = GraNetModel::init(network)?;
    let breakdown = model.param_breakdown();
    let mut total = 0usize;
    for (module, count) in &breakdown {
        println!("{module:<10} {count}");
        total += count;
    }
    println!("{:<10} {total}", "total");
    println!("gra_mode = {}", network.gra_mode.as_str());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Tile {
            input,
            out_manifest,
            block,
            sub,
            stride,
            hag,
            hag_cell_size,
        } => cmd_tile(
            &cfg,
            &input,
            &out_manifest,
            block,
            sub,
            stride,
            hag,
            hag_cell_size,
        )
        .map(|()| true),
        Command::Train { out } => cmd_train(&cfg, out).map(|()| true),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&cfg, &checkpoint, data, out).map(|()| true),
        Command::Predict {
            checkpoint,
            data,
            out,
        } => cmd_predict(&cfg, &checkpoint, data, out).map(|()| true),
        Command::Gradcheck { module } => cmd_gradcheck(&module),
        Command::Params => cmd_params(&cfg.network).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
