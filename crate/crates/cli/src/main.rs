//! `jsmkit` command-line front end.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jsmkit::diffnet::{load_checkpoint, save_checkpoint};
use jsmkit::harness::{
    ablate, evaluate, export_saliency, manifest_for, read_dataset, write_ablation, write_dataset, Evaluation,
    ExperimentConfig,
};
use jsmkit::jal::{train, FusionMode, FusionSample, JalConfig, Trained};
use jsmkit::jsm::{class_counts, classify_voxels, compute_jsm, weight_mask};
use jsmkit::register::{read_field, register, warp, write_field_as};
use jsmkit::synthdata::{adasyn_oversample, generate_dataset, Dataset, Split, CLASS_NAMES};
use jsmkit::volume::{read_volume, write_volume, BoundaryPolicy, VoxelType};
use jsmkit::{Error, Result};

#[derive(Parser)]
#[command(name = "jsmkit", version, about = "Jacobian saliency maps and Jacobian-augmented training")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML with [model], [jal], [data], ... sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the step being run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData,
    /// Register a moving volume onto a fixed one.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
    },
    /// Jacobian determinant map and penalty weights of a displacement field.
    Jsm {
        #[arg(long)]
        field: PathBuf,
    },
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate trained models on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Train with and without the penalty and compare.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Run the penalty-weight sweep from `[ablation] sweep` instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Export input-gradient saliency for one subject.
    Explain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Subject id; defaults to the first test subject.
        #[arg(long)]
        subject: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn samples(ds: &Dataset, split: Split) -> Vec<FusionSample> {
    ds.part(split).iter().map(|s| s.to_sample()).collect()
}

fn training_samples(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<FusionSample>> {
    if cfg.data.adasyn_k == 0 {
        return Ok(samples(ds, Split::Train));
    }
    let train: Vec<_> = ds.part(Split::Train).into_iter().cloned().collect();
    let over = adasyn_oversample(&train, cfg.data.adasyn_k, cfg.data.adasyn_beta, cfg.jal.seed)?;
    log::info!("ADASYN: {} -> {} training subjects", train.len(), over.subjects.len());
    Ok(over.subjects.iter().map(|s| s.to_sample()).collect())
}

fn mode_str(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::Early => "early",
        FusionMode::Late => "late",
    }
}

fn save_trained(t: &Trained, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trained.toml"), format!("mode = \"{}\"\nbranches = {}\n", mode_str(t.mode), t.models.len()))?;
    for (i, (m, h)) in t.models.iter().zip(&t.histories).enumerate() {
        save_checkpoint(m, dir.join(format!("branch{i}.ckpt")))?;
        fs::write(dir.join(format!("history_branch{i}.csv")), h.to_csv())?;
    }
    Ok(())
}

fn load_trained(dir: &Path) -> Result<Trained> {
    let text = fs::read_to_string(dir.join("trained.toml"))?;
    let mode = if text.contains("mode = \"early\"") {
        FusionMode::Early
    } else if text.contains("mode = \"late\"") {
        FusionMode::Late
    } else {
        return Err(Error::Format { offset: 0, msg: "trained.toml names no fusion mode".into() });
    };
    let branches = match mode {
        FusionMode::Early => 1,
        FusionMode::Late => 2,
    };
    let models = (0..branches)
        .map(|i| load_checkpoint(dir.join(format!("branch{i}.ckpt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained { mode, models, histories: Vec::new() })
}

fn write_evaluation(e: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), e.metrics.to_csv(&CLASS_NAMES))?;
    let mut cm = String::from("truth,");
    cm += &CLASS_NAMES.join(",");
    cm.push('\n');
    for (t, row) in e.confusion.rows().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(cm, "{},{}", CLASS_NAMES[t], cells.join(","));
    }
    fs::write(dir.join("confusion.csv"), cm)?;
    let mut b = String::from("batch,accuracy,macro_sensitivity,macro_specificity\n");
    for (i, m) in e.batches.iter().enumerate() {
        let _ = writeln!(b, "{i},{},{},{}", m.accuracy, m.macro_sensitivity, m.macro_specificity);
    }
    fs::write(dir.join("batches.csv"), b)?;
    fs::write(
        dir.join("summary.toml"),
        format!(
            "accuracy = {:?}\nmacro_accuracy = {:?}\nmacro_sensitivity = {:?}\nmacro_specificity = {:?}\ngradient_mass = {:?}\n",
            e.accuracy,
            e.metrics.macro_accuracy,
            e.metrics.macro_sensitivity,
            e.metrics.macro_specificity,
            e.gradient_mass
        ),
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    let out = &common.out;
    match cli.command {
        Command::GenData => {
            if let Some(s) = common.seed {
                cfg.data.phantom.seed = s;
            }
            let d = &cfg.data;
            let ds = generate_dataset(&d.phantom, d.per_class, d.test_fraction, d.confounded)?;
            write_dataset(&ds, &manifest_for(&ds, &d.phantom, d.per_class, d.test_fraction, d.confounded), out)?;
            log::info!("wrote {} subjects to {}", ds.subjects.len(), out.display());
        }
        Command::Register { moving, fixed } => {
            let (m, f) = (read_volume(&moving)?, read_volume(&fixed)?);
            let r = register(&m, &f, &cfg.registration)?;
            fs::create_dir_all(out)?;
            write_field_as(&r.field, out.join("field.jsmv"), VoxelType::F64x3)?;
            write_volume(&warp(&m, &r.field, BoundaryPolicy::Clamp)?, out.join("warped.jsmv"))?;
            fs::write(out.join("cost.log"), r.cost_log())?;
            if !r.converged {
                log::warn!("registration stopped at max_iters before reaching tol");
            }
        }
        Command::Jsm { field } => {
            let j = compute_jsm(&read_field(&field)?)?;
            let mask = weight_mask(&j, cfg.jal.mask_params())?;
            let c = class_counts(&classify_voxels(&j, cfg.jal.flat_tol)?);
            fs::create_dir_all(out)?;
            write_volume(j.volume(), out.join("jsm.jsmv"))?;
            write_volume(mask.weights(), out.join("weights.jsmv"))?;
            fs::write(
                out.join("jsm.toml"),
                format!("expansion = {}\nnone = {}\ncompression = {}\n", c.expansion, c.none, c.compression),
            )?;
        }
        Command::Train { data } => {
            if let Some(s) = common.seed {
                cfg.jal.seed = s;
            }
            let (ds, _) = read_dataset(&data)?;
            let t = train(&training_samples(&ds, &cfg)?, cfg.mode, &cfg.jal, &cfg.model)?;
            save_trained(&t, out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        }
        Command::Eval { data, model } => {
            let (ds, _) = read_dataset(&data)?;
            let t = load_trained(&model)?;
            let e = evaluate(&t, &samples(&ds, Split::Test), cfg.jal.batch_size, cfg.jal.flat_tol)?;
            write_evaluation(&e, out)?;
            println!("accuracy {:.4} macro accuracy {:.4}", e.accuracy, e.metrics.macro_accuracy);
        }
        Command::Ablate { data, sweep } => {
            if let Some(s) = common.seed {
                cfg.jal.seed = s;
            }
            let (ds, _) = read_dataset(&data)?;
            let train_set = training_samples(&ds, &cfg)?;
            let test_set = samples(&ds, Split::Test);
            if sweep {
                fs::create_dir_all(out)?;
                let mut log = String::from("mode,lambda,accuracy,macro_accuracy,gradient_mass\n");
                for &mode in &cfg.ablation.modes {
                    for lambda in std::iter::once(0.0).chain(cfg.ablation.sweep.iter().copied()) {
                        let jal = JalConfig { lambda, ..cfg.jal.clone() };
                        let row = match train(&train_set, mode, &jal, &cfg.model) {
                            Ok(t) => {
                                let e = evaluate(&t, &test_set, jal.batch_size, jal.flat_tol)?;
                                format!("{},{},{},{}", mode_str(mode), lambda, e.accuracy, e.metrics.macro_accuracy)
                                    + &format!(",{}", e.gradient_mass)
                            }
                            Err(Error::Numerical(msg)) => {
                                log::warn!("{} lambda {lambda}: {msg}", mode_str(mode));
                                format!("{},{lambda},NA,NA,NA", mode_str(mode))
                            }
                            Err(e) => return Err(e),
                        };
                        log::info!("{row}");
                        let _ = writeln!(log, "{row}");
                    }
                }
                fs::write(out.join("sweep.csv"), log)?;
            } else {
                let report = ablate(&train_set, &test_set, &cfg.ablation.modes, &cfg.jal, &cfg.model)?;
                write_ablation(&report, out)?;
                for arm in &report.arms {
                    println!(
                        "{} lambda {}: macro accuracy {:.4} gradient mass {:.4}",
                        mode_str(arm.mode),
                        arm.lambda,
                        arm.evaluation.metrics.macro_accuracy,
                        arm.evaluation.gradient_mass
                    );
                }
            }
        }
        Command::Explain { data, model, subject } => {
            let (ds, _) = read_dataset(&data)?;
            let t = load_trained(&model)?;
            let s = match subject {
                Some(id) => ds.subjects.iter().find(|s| s.id == id),
                None => ds.part(Split::Test).into_iter().next(),
            }
            .ok_or_else(|| Error::Input("subject not found".into()))?;
            let summary = export_saliency(&t, s, out)?;
            for m in &summary.modalities {
                println!("modality {}: rank correlation {:.4}", m.modality, m.rank_correlation);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
