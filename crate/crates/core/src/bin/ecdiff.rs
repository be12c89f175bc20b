//! Command-line entry point: dataset synthesis, ROI extraction from 4-d
//! volumes, adversarial diffusion training, reverse-chain sampling, and
//! cross-validated evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ecdiff::error::{EcdiffError, Result};
use ecdiff::evaluation::{
    altered_connectivity, downstream_classify, edge_auroc, group_average_bec, roi_importance,
    BecSample, ClassifierKind,
};
use ecdiff::ingest::{
    class_labels, extract_roi_series, load_atlas, load_manifest, load_volume4d, read_matrix_csv,
    save_manifest, synth_population, write_matrix_csv, SynthSpec,
};
use ecdiff::training::{sample_bec, StepMetrics, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "ecdiff", version, about = "Denoise ROI time series with a few-step conditional diffusion GAN and estimate directed connectivity")]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file (training keys; flags win over file values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-subject data generation/sampling. Never affects
    /// result values.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population with known directed connectivity.
    Synth(SynthArgs),
    /// Average a 4-d NIfTI volume into per-ROI series using an atlas mask.
    Extract(ExtractArgs),
    /// Train the denoising generator and discriminator on a manifest.
    Train(TrainArgs),
    /// Run the reverse chain per subject, writing denoised series and
    /// connectivity matrices.
    Sample(SampleArgs),
    /// Cross-validated classification metrics and group-level analysis.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    n_rois: usize,
    #[arg(long, default_value_t = 200)]
    length: usize,
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    #[arg(long, default_value_t = 1.0)]
    edge_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.1)]
    spectral_margin: f64,
    #[arg(long, default_value_t = 20)]
    subjects_per_class: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// Leading volumes to drop before averaging.
    #[arg(long, default_value_t = 10)]
    discard: usize,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Resume from a checkpoint (its embedded config wins; --epochs sets the
    /// new target epoch count).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    t_total: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_rec: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Ablation: drop the temporal down/up-sampling hierarchy.
    #[arg(long)]
    no_hierarchy: bool,
    /// Ablation: replace attention blocks with plain convolutions.
    #[arg(long)]
    sete_as_conv: bool,
    /// Ablation: single-resolution discriminator.
    #[arg(long)]
    single_scale_d: bool,
    /// Ablation: disable spatial attention inside each block.
    #[arg(long)]
    no_sma: bool,
    /// Ablation: disable temporal attention inside each block.
    #[arg(long)]
    no_tma: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Reverse-chain samples per subject; more than one also writes the
    /// per-entry spread of the connectivity matrices.
    #[arg(long, default_value_t = 1)]
    n_samples: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding bec_<id>.csv files (from `sample`).
    #[arg(long)]
    bec_dir: PathBuf,
    /// Magnitude threshold for group-averaged connectivity.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    /// Connections reported per direction in the alteration ranking.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value = "linear-margin")]
    classifier: String,
}

/// Record of one invocation, written next to the outputs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    inputs: Vec<String>,
    outputs: Vec<String>,
    resolved_config: serde_json::Value,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    started: u128,
    inputs: Vec<String>,
    outputs: Vec<String>,
    resolved_config: serde_json::Value,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        inputs,
        outputs,
        resolved_config,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EcdiffError::Data(e.to_string()))?;
    std::fs::write(dir.join("run_manifest.json"), text)?;
    Ok(())
}

/// Deterministic parallel map: results are collected by index, so values
/// never depend on the thread count.
fn par_map<T, R, F>(threads: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send + Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = threads.max(1);
    if threads == 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut out: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let out_cell = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                out_cell.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.unwrap()).collect()
}

fn load_train_config(cli: &Cli, args: Option<&TrainArgs>) -> Result<TrainConfig> {
    // defaults < config file < flags
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                EcdiffError::Config(format!("cannot read config {}: {}", path.display(), e))
            })?;
            toml::from_str(&text)
                .map_err(|e| EcdiffError::Config(format!("{}: {}", path.display(), e)))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(a) = args {
        if let Some(v) = a.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.t_total {
            cfg.t_total = v;
        }
        if let Some(v) = a.stride {
            cfg.stride = v;
        }
        if let Some(v) = a.levels {
            cfg.levels = v;
            cfg.blocks_per_level = vec![2; v];
        }
        if let Some(v) = a.heads {
            cfg.heads = v;
        }
        if let Some(v) = a.lr_g {
            cfg.lr_g = v;
        }
        if let Some(v) = a.lr_d {
            cfg.lr_d = v;
        }
        if let Some(v) = a.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = a.lambda_rec {
            cfg.lambda_rec = v;
        }
        if let Some(v) = a.lambda_cls {
            cfg.lambda_cls = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        cfg.ablation.no_hierarchy |= a.no_hierarchy;
        cfg.ablation.sete_as_conv |= a.sete_as_conv;
        cfg.ablation.no_sma |= a.no_sma;
        cfg.ablation.no_tma |= a.no_tma;
        cfg.single_scale_d |= a.single_scale_d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .ok_or_else(|| EcdiffError::Config("--out is required for this command".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let started = now_ms();
    let dir = out_dir(cli)?;
    let spec = SynthSpec {
        n_rois: args.n_rois,
        length: args.length,
        density: args.density,
        edge_scale: args.edge_scale,
        noise_sd: args.noise_sd,
        spectral_margin: args.spectral_margin,
        n_subjects_per_class: args.subjects_per_class,
        class_count: args.classes,
        seed: cli.seed.unwrap_or(17),
    };
    let records = synth_population(&spec)?;
    let manifest_path = dir.join("manifest.csv");
    save_manifest(&records, &manifest_path)?;
    let outputs: Vec<String> = std::iter::once("manifest.csv".to_string())
        .chain(records.iter().flat_map(|r| {
            vec![
                format!("{}/rough_{}.csv", r.label, r.id),
                format!("{}/clean_{}.csv", r.label, r.id),
                format!("{}/truebec_{}.csv", r.label, r.id),
            ]
        }))
        .collect();
    write_run_manifest(
        &dir,
        "synth",
        spec.seed,
        started,
        vec![],
        outputs,
        serde_json::to_value(&spec).unwrap(),
    )?;
    println!("synth: wrote {} subjects to {}", records.len(), dir.display());
    Ok(())
}

fn cmd_extract(cli: &Cli, args: &ExtractArgs) -> Result<()> {
    let started = now_ms();
    let dir = out_dir(cli)?;
    let volume = load_volume4d(&args.volume)?;
    let atlas = load_atlas(&args.atlas)?;
    let series = extract_roi_series(&volume, &atlas, args.discard)?;
    let out_path = dir.join("series.csv");
    write_matrix_csv(&out_path, &series.values)?;
    write_run_manifest(
        &dir,
        "extract",
        cli.seed.unwrap_or(0),
        started,
        vec![args.volume.display().to_string(), args.atlas.display().to_string()],
        vec!["series.csv".to_string()],
        serde_json::json!({ "discard": args.discard }),
    )?;
    println!(
        "extract: {} ROIs x {} time points -> {}",
        series.n_rois(),
        series.len(),
        out_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    steps: usize,
    seg: f64,
    mdd: f64,
    rec: f64,
    scp: f64,
    cls: f64,
    generator_total: f64,
}

fn epoch_line(epoch: usize, steps: &[StepMetrics]) -> EpochLine {
    let n = steps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
    EpochLine {
        epoch,
        steps: steps.len(),
        seg: mean(&|m| m.seg),
        mdd: mean(&|m| m.mdd),
        rec: mean(&|m| m.rec),
        scp: mean(&|m| m.scp),
        cls: mean(&|m| m.cls),
        generator_total: mean(&|m| m.generator_total),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let started = now_ms();
    let dir = out_dir(cli)?;
    let records = load_manifest(&args.manifest, None)?;
    if records.is_empty() {
        return Err(EcdiffError::Data("manifest has no subjects".into()));
    }
    if records.iter().any(|r| r.clean.is_none()) {
        return Err(EcdiffError::Data("training requires clean series for every subject".into()));
    }
    let n = records[0].rough.n_rois();
    let d = records[0].rough.len();

    let mut trainer = match &args.resume {
        Some(ck) => {
            let mut t = Trainer::load(ck)?;
            if let Some(epochs) = args.epochs {
                t.cfg.epochs = epochs;
            }
            t
        }
        None => {
            let cfg = load_train_config(cli, Some(args))?;
            Trainer::new(cfg, n, d, class_labels(&records))?
        }
    };

    // config echo
    let echo = toml::to_string(&trainer.cfg).map_err(|e| EcdiffError::Config(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), &echo)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut log = if trainer.epoch > 0 && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        std::fs::File::create(&metrics_path)?
    };
    use std::io::Write as _;

    let mut outputs = vec!["config.toml".to_string(), "metrics.jsonl".to_string()];
    while trainer.epoch < trainer.cfg.epochs {
        let steps = trainer.train_epoch(&records)?;
        let line = epoch_line(trainer.epoch, &steps);
        writeln!(log, "{}", serde_json::to_string(&line).unwrap())?;
        if trainer.cfg.checkpoint_every > 0 && trainer.epoch % trainer.cfg.checkpoint_every == 0 {
            let name = format!("ck_epoch_{:04}.bin", trainer.epoch);
            trainer.save(&dir.join(&name))?;
            outputs.push(name);
        }
    }
    trainer.save(&dir.join("checkpoint.bin"))?;
    outputs.push("checkpoint.bin".to_string());

    write_run_manifest(
        &dir,
        "train",
        trainer.cfg.seed,
        started,
        vec![args.manifest.display().to_string()],
        outputs,
        serde_json::to_value(&trainer.cfg).unwrap(),
    )?;
    println!("train: {} epochs, {} steps -> {}", trainer.epoch, trainer.step, dir.display());
    Ok(())
}

fn cmd_sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let started = now_ms();
    let dir = out_dir(cli)?;
    let trainer = Trainer::load(&args.checkpoint)?;
    let records = load_manifest(&args.manifest, Some(&trainer.models.class_labels))?;
    let seed = cli.seed.unwrap_or(trainer.cfg.seed);

    let results = par_map(cli.threads, records, |idx, record| {
        let subject_seed = seed.wrapping_add(1 + idx as u64);
        sample_bec(
            &record.rough.values,
            &trainer.models,
            &trainer.sched,
            subject_seed,
            args.n_samples,
        )
        .map(|out| (record.id.clone(), out))
    });

    let mut outputs = Vec::new();
    for res in results {
        let (id, out) = res?;
        let f0_name = format!("f0prime_{}.csv", id);
        let bec_name = format!("bec_{}.csv", id);
        write_matrix_csv(&dir.join(&f0_name), &out.f0_prime)?;
        write_matrix_csv(&dir.join(&bec_name), &out.a_mean)?;
        outputs.push(f0_name);
        outputs.push(bec_name);
        if let Some(std) = out.a_std {
            let std_name = format!("bec_std_{}.csv", id);
            write_matrix_csv(&dir.join(&std_name), &std)?;
            outputs.push(std_name);
        }
    }
    write_run_manifest(
        &dir,
        "sample",
        seed,
        started,
        vec![args.checkpoint.display().to_string(), args.manifest.display().to_string()],
        outputs,
        serde_json::json!({ "n_samples": args.n_samples }),
    )?;
    println!("sample: wrote outputs for {} subjects to {}", outputs_count(&dir)?, dir.display());
    Ok(())
}

fn outputs_count(dir: &Path) -> Result<usize> {
    Ok(std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("bec_"))
        .count())
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let started = now_ms();
    let dir = out_dir(cli)?;
    let kind: ClassifierKind = args.classifier.parse()?;
    let seed = cli.seed.unwrap_or(17);
    let records = load_manifest(&args.manifest, None)?;
    if records.is_empty() {
        return Err(EcdiffError::Data("manifest has no subjects".into()));
    }
    let labels = class_labels(&records);

    // sampled connectivity per subject
    let mut becs: BTreeMap<String, ndarray::Array2<f64>> = BTreeMap::new();
    for r in &records {
        let path = args.bec_dir.join(format!("bec_{}.csv", r.id));
        let a = read_matrix_csv(&path)
            .map_err(|e| EcdiffError::Data(format!("subject {}: {}", r.id, e)))?;
        becs.insert(r.id.clone(), a);
    }

    let mut outputs = Vec::new();

    // per-class averages
    let mut class_avgs: BTreeMap<String, ndarray::Array2<f64>> = BTreeMap::new();
    for label in &labels {
        let group: Vec<ndarray::Array2<f64>> = records
            .iter()
            .filter(|r| &r.label == label)
            .map(|r| becs[&r.id].clone())
            .collect();
        let avg = group_average_bec(&group, args.threshold)?;
        let name = format!("bec_avg_{}.csv", label);
        write_matrix_csv(&dir.join(&name), &avg)?;
        outputs.push(name);
        class_avgs.insert(label.clone(), avg);
    }

    // pairwise classification, alterations, importance
    let mut metrics_json = serde_json::Map::new();
    let mut top_connections = serde_json::Map::new();
    let mut importance_table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let early = &labels[i];
            let late = &labels[j];
            let key = format!("{}_vs_{}", early, late);

            let samples: Vec<BecSample> = records
                .iter()
                .filter(|r| &r.label == early || &r.label == late)
                .map(|r| BecSample {
                    a: becs[&r.id].clone(),
                    positive: &r.label == late,
                    fold: r.fold,
                })
                .collect();
            let (report, fold_classifiers) = downstream_classify(&samples, kind, seed)?;

            // shielding importance, averaged over fold-held-out test sets
            let n_rois = samples[0].a.nrows();
            let mut imp_sum = vec![0.0; n_rois];
            let mut imp_folds = 0usize;
            let max_fold = samples.iter().map(|s| s.fold).max().unwrap();
            let mut top_rois: Vec<usize> = Vec::new();
            for (fold, clf) in (0..=max_fold).zip(fold_classifiers.iter()) {
                let test: Vec<(ndarray::Array2<f64>, bool)> = samples
                    .iter()
                    .filter(|s| s.fold == fold)
                    .map(|s| (s.a.clone(), s.positive))
                    .collect();
                if test.is_empty() {
                    continue;
                }
                let imp = roi_importance(clf.as_ref(), &test)?;
                for (acc, v) in imp_sum.iter_mut().zip(&imp.scores) {
                    *acc += v;
                }
                imp_folds += 1;
                if top_rois.is_empty() {
                    top_rois = imp.top.clone();
                }
            }
            let imp_avg: Vec<f64> =
                imp_sum.iter().map(|v| v / imp_folds.max(1) as f64).collect();
            let mut order: Vec<usize> = (0..n_rois).collect();
            order.sort_by(|&a, &b| {
                imp_avg[b].partial_cmp(&imp_avg[a]).unwrap().then(a.cmp(&b))
            });
            order.truncate(n_rois.div_ceil(10));
            importance_table.insert(key.clone(), imp_avg);

            // ground-truth edge recovery when the manifest carries it
            let mut auroc_vals = Vec::new();
            for r in records.iter().filter(|r| &r.label == early || &r.label == late) {
                if let Some(truth) = &r.true_bec {
                    if let Some(v) = edge_auroc(&becs[&r.id], truth) {
                        auroc_vals.push(v);
                    }
                }
            }

            let mut entry = serde_json::to_value(&report).unwrap();
            let obj = entry.as_object_mut().unwrap();
            obj.insert("top_rois".into(), serde_json::to_value(&order).unwrap());
            if !auroc_vals.is_empty() {
                let mean_auroc = auroc_vals.iter().sum::<f64>() / auroc_vals.len() as f64;
                obj.insert("edge_auroc_mean".into(), serde_json::json!(mean_auroc));
            }
            metrics_json.insert(key.clone(), entry);

            // alteration map: later-stage average minus earlier-stage average
            let alt = altered_connectivity(&class_avgs[early], &class_avgs[late], args.top_k)?;
            let delta_name = format!("delta_{}_{}.csv", early, late);
            write_matrix_csv(&dir.join(&delta_name), &alt.delta)?;
            outputs.push(delta_name);
            top_connections.insert(
                key,
                serde_json::json!({
                    "enhanced": alt.enhanced,
                    "diminished": alt.diminished,
                }),
            );
        }
    }

    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(metrics_json)).unwrap(),
    )?;
    outputs.push("metrics.json".to_string());
    std::fs::write(
        dir.join("top_connections.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(top_connections)).unwrap(),
    )?;
    outputs.push("top_connections.json".to_string());

    // importance scores, one column per class pair
    let mut text = String::from("roi");
    for key in importance_table.keys() {
        text.push(',');
        text.push_str(key);
    }
    text.push('\n');
    let n_rois = records[0].rough.n_rois();
    for roi in 0..n_rois {
        text.push_str(&roi.to_string());
        for scores in importance_table.values() {
            text.push(',');
            text.push_str(&format!("{}", scores[roi]));
        }
        text.push('\n');
    }
    std::fs::write(dir.join("roi_importance.csv"), text)?;
    outputs.push("roi_importance.csv".to_string());

    write_run_manifest(
        &dir,
        "evaluate",
        seed,
        started,
        vec![args.manifest.display().to_string(), args.bec_dir.display().to_string()],
        outputs,
        serde_json::json!({
            "threshold": args.threshold,
            "top_k": args.top_k,
            "classifier": args.classifier,
        }),
    )?;
    println!("evaluate: wrote metrics and analysis to {}", dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(cli, args),
        Command::Extract(args) => cmd_extract(cli, args),
        Command::Train(args) => cmd_train(cli, args),
        Command::Sample(args) => cmd_sample(cli, args),
        Command::Evaluate(args) => cmd_evaluate(cli, args),
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}
