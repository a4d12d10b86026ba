//! Workflow driver: train reference and orthogonal models, craft attacks,
//! apply defenses, run the transfer protocol, and emit reports.
//!
//! Every run writes `resolved.cfg` (the file config merged with CLI
//! overrides) into the output directory before doing any work, so any
//! output directory can be reproduced byte-for-byte from itself.
//!
//! Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use orthograd::attacks::AttackSpec;
use orthograd::checkpoint::{file_sha256, load_checkpoint, save_checkpoint, CheckpointMeta, DType};
use orthograd::config::Config;
use orthograd::data::{save_csv, Dataset};
use orthograd::defenses::DefenseSpec;
use orthograd::error::{Error, Result};
use orthograd::eval::{
    compare_defenses, emit_report, run_transfer, sweep_lambda, EvalProtocol, FoolingReport,
};
use orthograd::nn::{Model, OptimizerSpec};
use orthograd::ortho::{measure_pair_similarity, train_ordinary, train_orthogonal, OrthoConfig};
use orthograd::Tensor;

#[derive(Parser)]
#[command(name = "orthograd", version, about = "Orthogonal-gradient training and transferability evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ordinary reference model.
    Train(CommonArgs),
    /// Train a model with gradients orthogonal to a frozen reference.
    TrainOrtho(CommonArgs),
    /// Craft adversarial examples for the configured dataset.
    Attack(CommonArgs),
    /// Apply an input-transformation defense to the configured dataset.
    Defend(CommonArgs),
    /// Run the transfer protocol: craft on a source, measure on targets.
    Evaluate(CommonArgs),
    /// Train one orthogonal model per lambda and evaluate each.
    SweepLambda(CommonArgs),
    /// Compare defenses on an ordinary target against an orthogonal target.
    CompareDefenses(CommonArgs),
    /// Re-emit plots and a summary from an existing report CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override reference.checkpoint.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Override eval.eps_grid with a single budget.
    #[arg(long)]
    eps: Option<f64>,
    /// Override eval.attacks with a single attack kind.
    #[arg(long)]
    attack: Option<String>,
    /// Override eval.defense.
    #[arg(long)]
    defense: Option<String>,
    /// Data-parallel workers for crafting and evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override eval.n_samples.
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSV to re-emit (falls back to the `report.input` config key).
    input: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => with_resolved(&a, cmd_train),
        Command::TrainOrtho(a) => with_resolved(&a, cmd_train_ortho),
        Command::Attack(a) => with_resolved(&a, cmd_attack),
        Command::Defend(a) => with_resolved(&a, cmd_defend),
        Command::Evaluate(a) => with_resolved(&a, cmd_evaluate),
        Command::SweepLambda(a) => with_resolved(&a, cmd_sweep_lambda),
        Command::CompareDefenses(a) => with_resolved(&a, cmd_compare_defenses),
        Command::Report(a) => cmd_report(&a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// Merge CLI overrides into the file config, log it, then run the command.
fn with_resolved(args: &CommonArgs, run: impl Fn(&CommonArgs, &Config) -> Result<()>) -> Result<()> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("train.seed", seed.to_string())?;
    }
    if let Some(lambda) = args.lambda {
        cfg.set("train.lambda", lambda.to_string())?;
    }
    if let Some(reference) = &args.reference {
        cfg.set("reference.checkpoint", reference.display().to_string())?;
    }
    if let Some(eps) = args.eps {
        cfg.set("eval.eps_grid", eps.to_string())?;
    }
    if let Some(attack) = &args.attack {
        cfg.set("eval.attacks", attack.clone())?;
    }
    if let Some(defense) = &args.defense {
        cfg.set("eval.defense", defense.clone())?;
    }
    if let Some(n) = args.n_samples {
        cfg.set("eval.n_samples", n.to_string())?;
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("resolved.cfg"), cfg.resolved_text())?;
    run(args, &cfg)
}

fn optimizer_from(cfg: &Config) -> Result<OptimizerSpec> {
    OptimizerSpec::sgd(
        cfg.require_f64("train.lr")?,
        cfg.require_f64("train.momentum")?,
        cfg.require_usize("train.batch")?,
    )
}

fn ortho_config_from(cfg: &Config) -> Result<OrthoConfig> {
    let mut oc = OrthoConfig::new(
        cfg.get_f64("train.lambda")?.unwrap_or(0.0),
        cfg.require_usize("train.max_epochs")?,
        optimizer_from(cfg)?,
        cfg.require_u64("train.seed")?,
    )?;
    if let Some(check) = cfg.get_usize("train.epochs_check")? {
        oc.epochs_check = check;
    }
    Ok(oc)
}

fn split_dataset(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let ds = cfg.dataset()?;
    let val_fraction = cfg.val_fraction()?;
    ds.split(1.0 - val_fraction)
}

fn protocol_from(cfg: &Config) -> Result<EvalProtocol> {
    EvalProtocol::new(
        cfg.require_usize("eval.n_samples")?,
        cfg.eps_grid()?,
        cfg.attack_kinds()?,
        cfg.require_u64("train.seed")?,
    )
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).map(|(m, _)| m)
}

fn model_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn cmd_train(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let (train, val) = split_dataset(cfg)?;
    let arch = cfg.arch(train.image_shape(), train.num_classes())?;
    let mut oc = ortho_config_from(cfg)?;
    oc.lambda = 0.0;
    let (model, record) = train_ordinary(&arch, &train, &val, &oc)?;
    let meta = CheckpointMeta {
        seed: oc.seed,
        lambda: 0.0,
        reference_hash: "none".into(),
        val_accuracy: record.best_accuracy,
    };
    save_checkpoint(&model, &meta, &args.out.join("model.orth"), DType::F64)?;
    fs::write(args.out.join("train_record.csv"), record.to_csv())?;
    println!(
        "trained {} epochs, best val accuracy {:.4} (epoch {})",
        record.epochs.len(),
        record.best_accuracy,
        record.best_epoch
    );
    Ok(())
}

fn cmd_train_ortho(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let (train, val) = split_dataset(cfg)?;
    let ref_path = PathBuf::from(cfg.require("reference.checkpoint")?);
    let reference = load_model(&ref_path)?;
    let arch = cfg.arch(train.image_shape(), train.num_classes())?;
    let oc = ortho_config_from(cfg)?;
    let (model, record) = train_orthogonal(&arch, &reference, &train, &val, &oc)?;
    let meta = CheckpointMeta {
        seed: oc.seed,
        lambda: oc.lambda,
        reference_hash: file_sha256(&ref_path)?,
        val_accuracy: record.best_accuracy,
    };
    save_checkpoint(&model, &meta, &args.out.join("model.orth"), DType::F64)?;
    fs::write(args.out.join("train_record.csv"), record.to_csv())?;
    let stats = measure_pair_similarity(&reference, &model, &val, 10, 32.min(val.len()))?;
    fs::write(
        args.out.join("similarity.csv"),
        format!("mean,std,mean_abs\n{},{},{}\n", stats.mean, stats.std, stats.mean_abs),
    )?;
    println!(
        "trained lambda={} model: val accuracy {:.4}, delta mean {:.4} (|delta| {:.4})",
        oc.lambda, record.best_accuracy, stats.mean, stats.mean_abs
    );
    Ok(())
}

fn attack_spec_from(cfg: &Config) -> Result<AttackSpec> {
    let kinds = cfg.attack_kinds()?;
    if kinds.len() != 1 {
        return Err(Error::Config(
            "attack needs exactly one kind (use --attack or a single-entry eval.attacks)".into(),
        ));
    }
    let grid = cfg.eps_grid()?;
    if grid.len() != 1 {
        return Err(Error::Config(
            "attack needs exactly one budget (use --eps or a single-entry eval.eps_grid)".into(),
        ));
    }
    Ok(AttackSpec::new(kinds[0], grid[0])?.with_seed(cfg.require_u64("train.seed")?))
}

fn cmd_attack(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let ds = cfg.dataset()?;
    let model = load_model(Path::new(cfg.require("reference.checkpoint")?))?;
    let spec = attack_spec_from(cfg)?;
    for w in spec.warnings() {
        eprintln!("warning: {w}");
    }
    let mut perturbed = Vec::with_capacity(ds.images().numel());
    let mut linf_all = Vec::with_capacity(ds.len());
    let mut at = 0;
    while at < ds.len() {
        let upper = (at + 64).min(ds.len());
        let idx: Vec<usize> = (at..upper).collect();
        let (batch, labels) = ds.batch(&idx);
        let crafted = orthograd::attacks::craft_batch(&model, &batch, &labels, &spec, at as u64)?;
        perturbed.extend_from_slice(crafted.perturbed.data());
        linf_all.extend(crafted.linf);
        at = upper;
    }
    let out_ds = ds.with_images(
        Tensor::new(ds.images().shape().to_vec(), perturbed)?,
        &format!("{}-adv", ds.split_id()),
    )?;
    save_csv(&out_ds, &args.out.join("adversarial.csv"))?;
    let mut meta = String::from("index,true_label,linf\n");
    for (i, linf) in linf_all.iter().enumerate() {
        meta.push_str(&format!("{},{},{}\n", i, ds.labels()[i], linf));
    }
    fs::write(args.out.join("attack_meta.csv"), meta)?;
    println!(
        "crafted {} {} examples at eps {} (max linf {})",
        ds.len(),
        spec.kind.name(),
        spec.epsilon,
        linf_all.iter().cloned().fold(0.0, f64::max)
    );
    Ok(())
}

fn cmd_defend(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let ds = cfg.dataset()?;
    let spec = DefenseSpec::parse(cfg.require("eval.defense")?)?;
    let defended = spec.apply_batch(ds.images())?;
    let out_ds = ds.with_images(defended, &format!("{}-{}", ds.split_id(), spec.id()))?;
    save_csv(&out_ds, &args.out.join("defended.csv"))?;
    println!("applied {} to {} images", spec.id(), ds.len());
    Ok(())
}

fn cmd_evaluate(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let (_, val) = split_dataset(cfg)?;
    let protocol = protocol_from(cfg)?;
    let source_path = PathBuf::from(cfg.require("eval.source")?);
    let source = load_model(&source_path)?;
    let target_paths: Vec<PathBuf> =
        cfg.require("eval.targets")?.split(',').map(|p| PathBuf::from(p.trim())).collect();
    let targets: Vec<(String, Model)> = target_paths
        .iter()
        .map(|p| Ok((model_id(p), load_model(p)?)))
        .collect::<Result<_>>()?;
    let defense = cfg.get("eval.defense").map(DefenseSpec::parse).transpose()?;
    let target_refs: Vec<(&str, &Model)> =
        targets.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let report = run_transfer(
        (&model_id(&source_path), &source),
        &target_refs,
        &val,
        &protocol,
        defense.as_ref(),
        args.workers,
    )?;
    emit_report(&report, &args.out)?;
    println!("{}", summarize(&report));
    Ok(())
}

fn cmd_sweep_lambda(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let (train, val) = split_dataset(cfg)?;
    let ref_path = PathBuf::from(cfg.require("reference.checkpoint")?);
    let reference = load_model(&ref_path)?;
    let arch = cfg.arch(train.image_shape(), train.num_classes())?;
    let base = ortho_config_from(cfg)?;
    let protocol = protocol_from(cfg)?;
    let lambdas = cfg.lambdas()?;
    let arms = sweep_lambda(&arch, &reference, &lambdas, &train, &val, &base, &protocol, args.workers)?;

    let mut summary = String::from("lambda,delta_mean,delta_std,delta_mean_abs,val_acc\n");
    for arm in &arms {
        let dir = args.out.join(format!("lambda_{}", arm.lambda));
        fs::create_dir_all(&dir)?;
        let meta = CheckpointMeta {
            seed: base.seed,
            lambda: arm.lambda,
            reference_hash: file_sha256(&ref_path)?,
            val_accuracy: arm.train_record.best_accuracy,
        };
        save_checkpoint(&arm.model, &meta, &dir.join("model.orth"), DType::F64)?;
        fs::write(dir.join("train_record.csv"), arm.train_record.to_csv())?;
        emit_report(&arm.report, &dir)?;
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            arm.lambda, arm.stats.mean, arm.stats.std, arm.stats.mean_abs, arm.train_record.best_accuracy
        ));
    }
    fs::write(args.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn default_defense_grid() -> Vec<DefenseSpec> {
    let mut specs = Vec::new();
    for q in [95, 90, 85, 80] {
        specs.push(DefenseSpec::Jpeg { quality: q });
    }
    for w in [3.0, 5.0, 7.0, 9.0] {
        specs.push(DefenseSpec::Tvm { weight: w, iters: 25, step: 0.1 });
    }
    for d in [1, 2, 3, 4] {
        specs.push(DefenseSpec::BitReduction { depth: d });
    }
    for w in [3, 5, 7, 9] {
        specs.push(DefenseSpec::Bilateral {
            window: w,
            sigma_spatial: w as f64 / 3.0,
            sigma_range: 0.1,
        });
    }
    specs
}

fn cmd_compare_defenses(args: &CommonArgs, cfg: &Config) -> Result<()> {
    let (_, val) = split_dataset(cfg)?;
    let protocol = protocol_from(cfg)?;
    let source_path = PathBuf::from(cfg.require("eval.source")?);
    let source = load_model(&source_path)?;
    let target_paths: Vec<PathBuf> =
        cfg.require("eval.targets")?.split(',').map(|p| PathBuf::from(p.trim())).collect();
    if target_paths.len() != 2 {
        return Err(Error::Config(
            "compare-defenses expects eval.targets = <ordinary>,<orthogonal>".into(),
        ));
    }
    let ordinary = load_model(&target_paths[0])?;
    let orthogonal = load_model(&target_paths[1])?;
    let specs = match cfg.get("compare.defenses") {
        Some(raw) => raw
            .split(';')
            .map(|p| DefenseSpec::parse(p.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => default_defense_grid(),
    };
    let report = compare_defenses(
        (&model_id(&source_path), &source),
        (&model_id(&target_paths[0]), &ordinary),
        (&model_id(&target_paths[1]), &orthogonal),
        &specs,
        &val,
        &protocol,
        args.workers,
    )?;
    emit_report(&report, &args.out)?;
    println!("{}", summarize(&report));
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(input) = &args.input {
        cfg.set("report.input", input.display().to_string())?;
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("resolved.cfg"), cfg.resolved_text())?;
    let input = PathBuf::from(cfg.require("report.input")?);
    let report = FoolingReport::parse_csv(&fs::read_to_string(&input)?)?;
    emit_report(&report, &args.out)?;
    println!("{}", summarize(&report));
    Ok(())
}

fn summarize(report: &FoolingReport) -> String {
    let mut out = String::new();
    out.push_str("target          attack   eps      defense       fooling\n");
    let mut rows: Vec<&orthograd::eval::FoolingRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| {
        (&a.target, &a.attack)
            .cmp(&(&b.target, &b.attack))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.defense.cmp(&b.defense))
    });
    for r in rows {
        out.push_str(&format!(
            "{:<15} {:<8} {:<8} {:<13} {:5.1}%\n",
            r.target,
            r.attack,
            r.epsilon,
            r.defense,
            100.0 * r.ratio()
        ));
    }
    out
}
