mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tdln::dataio::{
    drop_classes, read_detections, read_series_file, window_truths, write_detections, write_series_file, DetectionRow,
};
use tdln::datagen::{fault_assignment, generate_benchmark, ProcessSpec};
use tdln::metrics::{micro_roc, report};
use tdln::modelfile::{load_model, save_model};
use tdln::pipeline::{detect_online, fit_ablation, fit_offline, FitOutcome};
use tdln::{RawSeries, TdlnModel};

use config::{Resolved, Tunables};

/// Sliding-window fault detection with deep recurrent features and extra trees.
#[derive(Parser)]
#[command(name = "tdln", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    tunables: Tunables,
    /// Suppress per-epoch progress on stderr
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark as train.csv and test.csv
    Gen {
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit a model on a labeled series
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model file to write
        #[arg(long, default_value = "model.tdln")]
        out: PathBuf,
    },
    /// Classify every window of a series
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Detection CSV to write (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accept a labeled file and disregard its label column
        #[arg(long)]
        ignore_labels: bool,
    },
    /// Score detections against the labels of the series they came from
    Eval {
        #[arg(long)]
        detections: PathBuf,
        /// Labeled series the detections were made on
        #[arg(long)]
        truth: PathBuf,
        /// Write the micro-averaged ROC curve as CSV
        #[arg(long)]
        roc_out: Option<PathBuf>,
    },
    /// Train full, dl_only and ml_only variants and compare them on a test series
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Directory for the three model files
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.tunables.resolve()?;
    cfg.pipeline.train.progress = !cli.quiet;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start worker pool")?;
    }
    // Detections written to stdout must stay a clean CSV.
    if matches!(cli.command, Command::Detect { out: None, .. }) {
        eprint!("{}", cfg.echo());
    } else {
        println!("{}", cfg.echo());
    }
    match cli.command {
        Command::Gen { out } => cmd_gen(&cfg, &out),
        Command::Train { data, out } => cmd_train(&cfg, &data, &out),
        Command::Detect {
            model,
            data,
            out,
            ignore_labels,
        } => cmd_detect(&model, &data, out.as_deref(), ignore_labels),
        Command::Eval {
            detections,
            truth,
            roc_out,
        } => cmd_eval(&cfg, &detections, &truth, roc_out.as_deref()),
        Command::Ablate { data, test, out } => cmd_ablate(&cfg, &data, &test, out.as_deref()),
    }
}

fn cmd_gen(cfg: &Resolved, out: &Path) -> Result<()> {
    let spec = ProcessSpec::random(cfg.channels, cfg.bench.seed)?;
    let faults = fault_assignment(&spec, cfg.bench.class_count)?;
    let (train, test) = generate_benchmark::<f64>(&spec, &cfg.bench)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for (name, series) in [("train.csv", &train), ("test.csv", &test)] {
        let path = out.join(name);
        write_series_file(&path, series.values(), Some(series.labels()))
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!("wrote {} ({} rows)", path.display(), series.len());
    }
    println!();
    println!("class\tfault\tmagnitude\tchannels");
    println!("0\tnormal\t-\t-");
    for f in &faults {
        let ch: Vec<String> = f.channels.iter().map(usize::to_string).collect();
        println!("{}\t{}\t{}\t{}", f.class_id, f.family.name(), f.magnitude, ch.join(","));
    }
    Ok(())
}

fn load_labeled(path: &Path, drop: &[usize]) -> Result<RawSeries> {
    let series = read_series_file::<f64>(path)
        .with_context(|| format!("cannot read {}", path.display()))?
        .into_raw()
        .with_context(|| format!("{} needs a label column", path.display()))?;
    if drop.is_empty() {
        return Ok(series);
    }
    let (kept, mapping) = drop_classes(&series, drop)?;
    print_mapping(&mapping);
    Ok(kept)
}

fn print_mapping(mapping: &[(usize, usize)]) {
    println!("class mapping (old -> new)");
    for (old, new) in mapping {
        println!("{old}\t{new}");
    }
    println!();
}

fn print_outcome(outcome: &FitOutcome<f64>) {
    for (r, curve) in outcome.curves.iter().enumerate() {
        if outcome.curves.len() > 1 {
            println!("training round {}", r + 1);
        }
        print!("{}", curve.to_tsv());
        println!();
    }
    println!("validation ({})", outcome.model.mode.name());
    print!("{}", outcome.validation.to_text());
    print!("{}", outcome.validation.to_machine_block());
}

fn cmd_train(cfg: &Resolved, data: &Path, out: &Path) -> Result<()> {
    let series = load_labeled(data, &cfg.drop_classes)?;
    let outcome = fit_offline(&series, &cfg.pipeline)?;
    print_outcome(&outcome);
    save_model(&outcome.model, out).with_context(|| format!("cannot write {}", out.display()))?;
    println!("model written to {}", out.display());
    Ok(())
}

fn detection_rows(model: &TdlnModel, data: &tdln::Matrix) -> Result<Vec<DetectionRow>> {
    Ok(detect_online(model, data)?
        .into_iter()
        .map(|d| DetectionRow {
            start: d.start,
            end: d.end,
            predicted: d.predicted,
            probabilities: d.probabilities,
            provisional: d.provisional,
        })
        .collect())
}

fn cmd_detect(model_path: &Path, data: &Path, out: Option<&Path>, ignore_labels: bool) -> Result<()> {
    let model: TdlnModel = load_model(model_path).with_context(|| format!("cannot load {}", model_path.display()))?;
    let series = read_series_file::<f64>(data).with_context(|| format!("cannot read {}", data.display()))?;
    if series.labels.is_some() && !ignore_labels {
        bail!(
            "{} has a label column; pass --ignore-labels to classify it anyway",
            data.display()
        );
    }
    if series.values.rows() == 0 {
        bail!("{} has no data rows", data.display());
    }
    let rows = detection_rows(&model, &series.values)?;
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            write_detections(BufWriter::new(file), &rows, model.class_count)?;
            println!("{} windows written to {}", rows.len(), path.display());
        }
        None => write_detections(io::stdout().lock(), &rows, model.class_count)?,
    }
    Ok(())
}

/// Windows that take part in an evaluation.
struct Scored {
    predicted: Vec<usize>,
    probabilities: Vec<Vec<f64>>,
    actual: Vec<usize>,
    /// Windows spanning several labels or carrying a dropped label.
    skipped: usize,
}

fn score(rows: &[DetectionRow], n: usize, labels: &[usize], drop: &[usize]) -> Result<Scored> {
    let truths = window_truths(rows, labels)?;
    let mut map = Vec::new();
    let mut next = 0;
    for c in 0..labels.iter().max().map_or(0, |m| m + 1) {
        if drop.contains(&c) {
            map.push(None);
        } else {
            map.push(Some(next));
            next += 1;
        }
    }
    let mut s = Scored {
        predicted: Vec::new(),
        probabilities: Vec::new(),
        actual: Vec::new(),
        skipped: 0,
    };
    for (row, truth) in rows.iter().zip(truths) {
        let Some(t) = truth.and_then(|t| map[t]) else {
            s.skipped += 1;
            continue;
        };
        if t >= n {
            bail!(
                "true class {t} of window {}..{} is outside the {n} classes of the detections",
                row.start,
                row.end
            );
        }
        s.predicted.push(row.predicted);
        s.probabilities.push(row.probabilities.clone());
        s.actual.push(t);
    }
    Ok(s)
}

fn cmd_eval(cfg: &Resolved, detections: &Path, truth: &Path, roc_out: Option<&Path>) -> Result<()> {
    let file = File::open(detections).with_context(|| format!("cannot open {}", detections.display()))?;
    let (rows, n) = read_detections(file).with_context(|| format!("cannot read {}", detections.display()))?;
    let series = read_series_file::<f64>(truth).with_context(|| format!("cannot read {}", truth.display()))?;
    let labels = series
        .labels
        .with_context(|| format!("{} needs a label column", truth.display()))?;
    if !cfg.drop_classes.is_empty() {
        let kept = (0..labels.iter().max().map_or(0, |m| m + 1)).filter(|c| !cfg.drop_classes.contains(c));
        let mapping: Vec<(usize, usize)> = kept.enumerate().map(|(new, old)| (old, new)).collect();
        print_mapping(&mapping);
    }
    let s = score(&rows, n, &labels, &cfg.drop_classes)?;
    let rep = report(&s.predicted, &s.probabilities, &s.actual, n)?;
    println!("windows skipped (mixed or dropped labels): {}", s.skipped);
    print!("{}", rep.to_text());
    print!("{}", rep.to_machine_block());
    if let Some(path) = roc_out {
        let roc = micro_roc(&s.probabilities, &s.actual, n)?;
        let mut f = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
        f.write_all(roc.to_csv().as_bytes())?;
        f.flush()?;
    }
    Ok(())
}

fn cmd_ablate(cfg: &Resolved, data: &Path, test: &Path, out: Option<&Path>) -> Result<()> {
    let train = load_labeled(data, &cfg.drop_classes)?;
    let test_series = load_labeled(test, &cfg.drop_classes)?;
    let ab = fit_ablation(&train, &cfg.pipeline)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    println!("mode\tmacro_fdr\tmacro_fdr_faults\tmicro_auc\taccuracy");
    let mut blocks = String::new();
    for outcome in [&ab.full, &ab.dl_only, &ab.ml_only] {
        let model = &outcome.model;
        let rows = detection_rows(model, test_series.values())?;
        let s = score(&rows, model.class_count, test_series.labels(), &[])?;
        let rep = report(&s.predicted, &s.probabilities, &s.actual, model.class_count)?;
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        println!(
            "{}\t{}\t{}\t{}\t{:.4}",
            model.mode.name(),
            f(rep.macro_fdr.value),
            f(rep.macro_fdr_faults.value),
            f(rep.micro_auc),
            rep.accuracy
        );
        blocks.push_str(&format!("mode={}\n{}", model.mode.name(), rep.to_machine_block()));
        if let Some(dir) = out {
            let path = dir.join(format!("{}.tdln", model.mode.name()));
            save_model(model, &path).with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    println!();
    print!("{blocks}");
    Ok(())
}
