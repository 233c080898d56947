//! `nops`: data generation, training, evaluation, the clustering baseline
//! and ablations from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use nops_core::ablation::{comparison_table, run_grid, run_percentile_sweep};
use nops_core::autodiff::checkpoint;
use nops_core::baseline::{run_eums, write_pseudo_labels};
use nops_core::config::{parse_kv, write_kv, Settings};
use nops_core::eval::evaluate;
use nops_core::io::{
    find_split, load_dataset_dir, read_split_file, write_dataset_dir, write_split_file, Dataset,
    SplitSpec, SyntheticConfig,
};
use nops_core::model::{Model, ModelConfig};
use nops_core::train::{mask_scenes, metrics_log, train, Trained};
use nops_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "nops",
    version,
    about = "Online novel-class discovery for point cloud segmentation"
)]
struct Cli {
    /// Plain-text key=value file overriding the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single key=value override, applied after --config. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (scan/label pairs) and its split files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        val_scenes: Option<usize>,
    },
    /// Train the discovery model; writes checkpoint, metrics log and config.
    Train(RunArgs),
    /// Evaluate a trained model on the validation scenes.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train` or `baseline`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label of the one-line summary table.
        #[arg(long, default_value = "NOPS")]
        method: String,
    },
    /// Run the offline clustering baseline end to end.
    Baseline(RunArgs),
    /// Run the component ladder and the percentile sweep.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated training seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = Which::Both)]
        only: Which,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    Grid,
    Sweep,
    Both,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory (`sequences/<seq>/{velodyne,labels}`).
    #[arg(long)]
    dataset: PathBuf,
    /// Builtin split name, or a split file path.
    #[arg(long)]
    split: String,
    /// Dataset name when the directory has no dataset.meta.
    #[arg(long, value_parser = ["semantickitti", "semanticposs"])]
    kind: Option<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.apply(&parse_kv(&fs::read_to_string(path)?)?)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        s.nops.train.seed = seed;
        s.data.seed = seed;
    }
    Ok(s)
}

fn load(data: &DataArgs) -> Result<(Dataset, SplitSpec)> {
    let ds = load_dataset_dir(&data.dataset, data.kind.as_deref())?;
    let path = Path::new(&data.split);
    let split = if path.is_file() {
        read_split_file(path, &ds.classes)?
    } else {
        find_split(&ds.classes, &data.split)?
    };
    info!(
        "{}: {} train / {} val scenes, split {}",
        ds.classes.dataset(),
        ds.train.len(),
        ds.val.len(),
        split.name
    );
    Ok((ds, split))
}

fn prepare_out(out: &Path, s: &Settings) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved"), s.resolved())?;
    Ok(())
}

const MODEL_META: &str = "model.meta";
const CHECKPOINT: &str = "model.ckpt";

/// Writes the checkpoint plus what is needed to rebuild the network.
fn save_model(dir: &Path, trained: &Trained, split: &SplitSpec) -> Result<()> {
    checkpoint::save(&dir.join(CHECKPOINT), &trained.params)?;
    let c = trained.model.config();
    let meta: Vec<(String, String)> = [
        ("split", split.name.clone()),
        ("inference_head", trained.inference_head.to_string()),
        ("model.d", c.d.to_string()),
        ("model.k", c.k.to_string()),
        ("model.hidden", c.hidden.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.overcluster_factor", c.overcluster_factor.to_string()),
        ("model.overcluster", c.overcluster.to_string()),
        ("model.temperature", c.temperature.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    fs::write(dir.join(MODEL_META), write_kv(&meta))?;
    fs::write(dir.join("metrics.tsv"), metrics_log(&trained.log))?;
    Ok(())
}

fn load_model(
    dir: &Path,
    split: &SplitSpec,
) -> Result<(Model, nops_core::autodiff::ParamStore, usize)> {
    let meta_path = dir.join(MODEL_META);
    let kv = parse_kv(&fs::read_to_string(&meta_path)?)?;
    let get = |k: &str| -> Result<&str> {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format {
                path: meta_path.display().to_string(),
                detail: format!("missing `{k}`"),
            })
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format {
            path: meta_path.display().to_string(),
            detail: format!("bad `{k}`"),
        })
    };
    if get("split")? != split.name {
        return Err(Error::Config(format!(
            "model was trained on split {}, not {}",
            get("split")?,
            split.name
        )));
    }
    let cfg = ModelConfig {
        d: num("model.d")?,
        k: num("model.k")?,
        hidden: num("model.hidden")?,
        heads: num("model.heads")?,
        overcluster_factor: num("model.overcluster_factor")?,
        overcluster: get("model.overcluster")? == "true",
        temperature: get("model.temperature")?
            .parse()
            .map_err(|_| Error::Format {
                path: meta_path.display().to_string(),
                detail: "bad `model.temperature`".into(),
            })?,
    };
    let model = Model::new(cfg, split.n_base(), split.n_novel())?;
    let params = checkpoint::load(&dir.join(CHECKPOINT))?;
    model.check_params(&params)?;
    Ok((model, params, num("inference_head")?))
}

fn gen_data(s: &Settings, out: &Path) -> Result<()> {
    let d = &s.data;
    let ds = Dataset::synthetic(
        &SyntheticConfig::toy(d.scenes, d.points, d.seed),
        d.val_scenes,
    )?;
    prepare_out(out, s)?;
    write_dataset_dir(out, &ds)?;
    for split in nops_core::io::builtin_splits("synthetic")? {
        write_split_file(
            &out.join(format!("split-{}.txt", split.name)),
            &split,
            &ds.classes,
        )?;
    }
    info!(
        "wrote {} train and {} val scenes to {}",
        ds.train.len(),
        ds.val.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut s = settings(&cli)?;
    match cli.command {
        Command::GenData {
            out,
            scenes,
            points,
            val_scenes,
        } => {
            s.data.scenes = scenes.unwrap_or(s.data.scenes);
            s.data.points = points.unwrap_or(s.data.points);
            s.data.val_scenes = val_scenes.unwrap_or(s.data.val_scenes);
            s.validate()?;
            gen_data(&s, &out)
        }
        Command::Train(args) => {
            s.validate()?;
            let (ds, split) = load(&args.data)?;
            prepare_out(&args.out, &s)?;
            let trained = train(&ds, &split, &s.nops)?;
            save_model(&args.out, &trained, &split)?;
            info!(
                "inference head {}; wrote {}",
                trained.inference_head,
                args.out.display()
            );
            Ok(())
        }
        Command::Eval {
            data,
            model,
            out,
            method,
        } => {
            s.validate()?;
            let (ds, split) = load(&data)?;
            let (model, params, head) = load_model(&model, &split)?;
            if ds.val.is_empty() {
                return Err(Error::Config("dataset has no validation scenes".into()));
            }
            let report = evaluate(&model, &params, head, &ds.val, &split, &ds.classes)?;
            prepare_out(&out, &s)?;
            fs::write(out.join("report.tsv"), report.to_tsv())?;
            fs::write(
                out.join("summary.tsv"),
                format!("{}\n{}\n", report.wide_header(), report.wide_row(&method)),
            )?;
            println!(
                "novel mIoU {:.4}  base mIoU {:.4}  all mIoU {:.4}",
                report.novel_miou, report.base_miou, report.all_miou
            );
            Ok(())
        }
        Command::Baseline(args) => {
            s.validate()?;
            let (ds, split) = load(&args.data)?;
            prepare_out(&args.out, &s)?;
            let scenes = mask_scenes(&ds.train, &split)?;
            let n = &s.nops;
            let out = run_eums(
                &scenes,
                &ds.val,
                &split,
                &ds.classes,
                &n.model,
                &n.augment,
                &n.train,
                &s.eums,
            )?;
            save_model(&args.out, &out.trained, &split)?;
            let dir = args.out.join("pseudo_labels");
            fs::create_dir_all(&dir)?;
            for (scene, pairs) in ds.train.iter().zip(&out.pseudo_labels) {
                write_pseudo_labels(
                    &dir.join(format!("{}.bin", scene.scene_id.replace('/', "_"))),
                    pairs,
                )?;
            }
            info!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Ablate { run, seeds, only } => {
            s.validate()?;
            let (ds, split) = load(&run.data)?;
            prepare_out(&run.out, &s)?;
            let seeds = if seeds.is_empty() {
                vec![s.nops.train.seed]
            } else {
                seeds
            };
            if only != Which::Sweep {
                let rows = run_grid(&ds, &split, &s.nops, &seeds)?;
                let table = comparison_table(&rows);
                fs::write(run.out.join("ablation.tsv"), &table)?;
                print!("{table}");
            }
            if only != Which::Grid {
                let rows = run_percentile_sweep(&ds, &split, &s.nops, &seeds)?;
                let table = comparison_table(&rows);
                fs::write(run.out.join("percentile.tsv"), &table)?;
                print!("{table}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Parse errors (unknown flags included) print usage and exit with 2.
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
