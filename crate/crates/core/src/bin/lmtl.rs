//! Command-line driver for the landmark multi-task pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use landmark_mtl::cascade::PseudoLabels;
use landmark_mtl::corpus::{self, Manifest};
use landmark_mtl::experiment::{
    self, AdaptRow, Dataset, ExperimentConfig, ExperimentError, Result, Split, System,
};
use landmark_mtl::landmarks::{self, LandmarkClass};
use landmark_mtl::net::{self, MTLNet};

#[derive(Parser)]
#[command(name = "lmtl", version, about = "Landmark multi-task learning for cross-lingual acoustic models")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-utterance work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory; overrides output.directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source and target corpora.
    Synth,
    /// Derive frame landmark labels and TextGrids from phone alignments.
    Label {
        /// Manifest to label; defaults to the source training split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Phone inventory; defaults to the one named in the manifest.
        #[arg(long)]
        inventory: Option<PathBuf>,
        /// Expansion radius in frames; defaults to landmarks.expand_radius.
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Train the single-task and multi-task source models.
    TrainSource,
    /// Run the source landmark detector over the target training data.
    Cascade {
        /// Source model; defaults to the selected multi-task model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Target manifest; defaults to the target training split.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train baseline, multi-task and confidence-weighted target models.
    Adapt {
        /// Data fractions to run; defaults to corpus.fractions.
        #[arg(long = "fraction")]
        fractions: Vec<f64>,
    },
    /// Summarize adaptation metrics into tables.
    Report {
        /// Directory holding adaptation metrics; defaults to <out>/adapt.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Every step from synth through report.
    Run,
    /// Print the effective config.
    Config,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    threads: usize,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&self) -> Result<std::collections::BTreeMap<Split, PathBuf>> {
        experiment::resolve_corpus(&self.cfg, &self.out)
    }

    fn dataset(&self, path: &Path) -> Result<Dataset> {
        Dataset::load_path(path, &self.cfg, self.threads)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

fn save_net(path: &Path, net: &MTLNet) -> Result<()> {
    write(path, net::encode_model(net))
}

fn alpha_tag(alpha: f64) -> String {
    format!("{alpha:.2}")
}

fn fraction_tag(fraction: f64) -> String {
    format!("f{fraction:.3}")
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let paths = ctx.corpus()?;
    if ctx.cfg.corpus.synthetic.is_none() {
        return Err(ExperimentError::Config("corpus.synthetic is not set".into()));
    }
    for (split, path) in paths {
        let m = Manifest::load(&path)?;
        println!("{:<13} {:>5} utterances  {}", split.name(), m.utterances.len(), path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct LabelSummary {
    utterance: String,
    frames: usize,
    events: usize,
    landmark_frames: usize,
}

fn cmd_label(ctx: &Ctx, manifest: Option<PathBuf>, inventory: Option<PathBuf>, radius: Option<usize>) -> Result<()> {
    let manifest_path = match manifest {
        Some(p) => p,
        None => ctx.corpus()?[&Split::SourceTrain].clone(),
    };
    let manifest = Manifest::load_unchecked(&manifest_path)?;
    let inv = match inventory {
        Some(p) => corpus::load_inventory(p)?,
        None => manifest.load_inventory()?,
    };
    let radius = radius.unwrap_or(ctx.cfg.landmarks.expand_radius);
    let out = ctx.dir("labels");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let spec = &ctx.cfg.features.frame_spec;
    let results = experiment::par_map(&manifest.utterances, ctx.threads, |utt| {
        let one = || -> Result<LabelSummary> {
            let mut utt = utt.clone();
            utt.segments = manifest.read_segments(&utt)?;
            let frames = experiment::raw_features(&manifest, &utt, spec)?.frames();
            let hop = spec.hop;
            let events = landmarks::segments_to_events(&utt.segments, &inv, hop, &utt.id)?;
            let mut fl = landmarks::events_to_frame_labels(&events, frames, hop);
            if radius > 0 {
                fl = landmarks::expand_labels(&fl, radius)?;
            }
            write(&out.join(format!("{}.lmk.csv", utt.id)), fl.to_csv())?;
            write(
                &out.join(format!("{}.TextGrid", utt.id)),
                landmarks::export_textgrid(&utt, &events)?,
            )?;
            Ok(LabelSummary {
                utterance: utt.id.clone(),
                frames,
                events: events.len(),
                landmark_frames: fl.landmark_count(),
            })
        };
        Ok(one().map_err(|e| format!("utterance '{}': {e}", utt.id)))
    })?;
    let mut failures = Vec::new();
    let mut csv = String::from("utterance,frames,events,landmark_frames\n");
    for r in results {
        match r {
            Ok(s) => csv.push_str(&format!("{},{},{},{}\n", s.utterance, s.frames, s.events, s.landmark_frames)),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("error: {f}");
        }
        return Err(ExperimentError::Missing(format!(
            "{} of {} utterances could not be labeled",
            failures.len(),
            manifest.utterances.len()
        )));
    }
    write(&out.join("summary.csv"), csv)?;
    println!("labeled {} utterances into {}", manifest.utterances.len(), out.display());
    Ok(())
}

fn cmd_train_source(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let train = ctx.dataset(&corpus[&Split::SourceTrain])?;
    let dev = ctx.dataset(&corpus[&Split::SourceDev])?;
    let outcome = experiment::train_source(&ctx.cfg, &train, &dev)?;
    let out = ctx.dir("source");
    for run in &outcome.runs {
        let tag = alpha_tag(run.alpha);
        save_net(&out.join(format!("alpha_{tag}.lmnn")), &run.net)?;
        write(&out.join(format!("history_alpha_{tag}.csv")), run.history.to_csv())?;
    }
    for (name, run) in [("baseline", outcome.baseline_run()), ("mtl", outcome.selected_run())] {
        save_net(&out.join(format!("{name}.lmnn")), &run.net)?;
        write_json(
            &out.join(format!("{name}.json")),
            &serde_json::json!({
                "system": name,
                "alpha": run.alpha,
                "dev_phone_fer": run.dev_phone_fer,
                "dev_landmark_fer": run.dev_landmark_fer,
                "dev_landmark_accuracy": 1.0 - run.dev_landmark_fer,
            }),
        )?;
    }
    write_json(&out.join("summary.json"), &outcome.summary())?;
    println!("alpha   dev phone FER   dev landmark FER");
    for run in &outcome.runs {
        println!("{:<6}  {:>13.4}   {:>16.4}", alpha_tag(run.alpha), run.dev_phone_fer, run.dev_landmark_fer);
    }
    println!("selected alpha {}", outcome.selected_run().alpha);
    Ok(())
}

fn cmd_cascade(ctx: &Ctx, model: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<()> {
    let model = model.unwrap_or_else(|| ctx.dir("source").join("mtl.lmnn"));
    if !model.is_file() {
        return Err(ExperimentError::Missing(format!(
            "source model {} not found; run train-source first",
            model.display()
        )));
    }
    let net = net::load_model(&model)?;
    let manifest_path = match manifest {
        Some(p) => p,
        None => ctx.corpus()?[&Split::TargetTrain].clone(),
    };
    let manifest = Manifest::load(&manifest_path)?;
    let mut ds = Dataset::load(&manifest, &ctx.cfg, ctx.threads)?;
    experiment::cascade_dataset(&net, &mut ds, ctx.cfg.mtl.tau, ctx.threads)?;
    let out = ctx.dir("cascade");
    let written = experiment::write_pseudo_manifest(&manifest, &ds, &out)?;
    let mut counts = [0usize; LandmarkClass::COUNT];
    let (mut conf_sum, mut frames, mut agree, mut gold_frames) = (0.0, 0usize, 0usize, 0usize);
    for u in &ds.utts {
        let pl: &PseudoLabels = u.pseudo.as_ref().expect("cascaded");
        for (&k, &c) in pl.classes.iter().zip(&pl.confidences) {
            counts[k] += 1;
            conf_sum += c;
            frames += 1;
        }
        if let Some(g) = &u.gold {
            gold_frames += g.len();
            agree += g.labels.iter().zip(&pl.classes).filter(|(a, &b)| a.index() == b).count();
        }
    }
    let histogram: serde_json::Map<String, serde_json::Value> = LandmarkClass::ALL
        .iter()
        .map(|c| (c.symbol().to_string(), counts[c.index()].into()))
        .collect();
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "utterances": ds.utts.len(),
            "frames": frames,
            "mean_confidence": conf_sum / frames.max(1) as f64,
            "class_counts": histogram,
            "agreement_with_alignment_labels": if gold_frames > 0 { Some(agree as f64 / gold_frames as f64) } else { None },
        }),
    )?;
    println!("pseudo-labeled {} utterances ({} frames) -> {}", ds.utts.len(), frames, written.display());
    Ok(())
}

fn cmd_adapt(ctx: &Ctx, fractions: Vec<f64>) -> Result<()> {
    let fractions = if fractions.is_empty() { ctx.cfg.corpus.fractions.clone() } else { fractions };
    for &f in &fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(ExperimentError::Config(format!("fraction {f} outside (0, 1]")));
        }
    }
    let source_dir = ctx.dir("source");
    let summary_path = source_dir.join("summary.json");
    let model_path = source_dir.join("mtl.lmnn");
    let baseline_path = source_dir.join("baseline.lmnn");
    let pseudo_manifest = ctx.dir("cascade").join("manifest.json");
    for (p, step) in [(&summary_path, "train-source"), (&model_path, "train-source"), (&baseline_path, "train-source"), (&pseudo_manifest, "cascade")] {
        if !p.is_file() {
            return Err(ExperimentError::Missing(format!("{} not found; run {step} first", p.display())));
        }
    }
    let summary: experiment::SourceSummary = serde_json::from_str(
        &fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?,
    )
    .map_err(|e| ExperimentError::Config(format!("{}: {e}", summary_path.display())))?;
    let source = net::load_model(&model_path)?;
    let baseline = net::load_model(&baseline_path)?;
    let corpus = ctx.corpus()?;
    let train = ctx.dataset(&pseudo_manifest)?;
    let dev = ctx.dataset(&corpus[&Split::TargetDev])?;
    let test = ctx.dataset(&corpus[&Split::TargetTest])?;
    let out = ctx.dir("adapt");
    for f in fractions {
        let runs = experiment::adapt_fraction(
            &ctx.cfg,
            experiment::AdaptSources { baseline: &baseline, mtl: &source },
            summary.selected_alpha,
            &train,
            &dev,
            &test,
            f,
            &System::ALL,
        )?;
        let dir = out.join(fraction_tag(f));
        let rows: Vec<&AdaptRow> = runs.iter().map(|r| &r.row).collect();
        for run in &runs {
            save_net(&dir.join(format!("{}.lmnn", run.row.system.name())), &run.net)?;
            write(&dir.join(format!("{}_history.csv", run.row.system.name())), run.history.to_csv())?;
        }
        write_json(&dir.join("metrics.json"), &rows)?;
        for r in rows {
            println!(
                "fraction {:<5} {:<15} test phone FER {:.4}",
                r.fraction,
                r.system.name(),
                r.test_phone_fer
            );
        }
    }
    Ok(())
}

fn collect_rows(dir: &Path) -> Result<Vec<AdaptRow>> {
    let mut files = Vec::new();
    let top = dir.join("metrics.json");
    if top.is_file() {
        files.push(top);
    }
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path().join("metrics.json");
            if p.is_file() {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(io_err(&f))?;
        let mut r: Vec<AdaptRow> =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", f.display())))?;
        rows.append(&mut r);
    }
    if rows.is_empty() {
        return Err(ExperimentError::Missing(format!("no metrics.json under {}", dir.display())));
    }
    Ok(rows)
}

fn cmd_report(ctx: &Ctx, metrics: Option<PathBuf>) -> Result<()> {
    let dir = metrics.unwrap_or_else(|| ctx.dir("adapt"));
    let rows = collect_rows(&dir)?;
    let report = experiment::render_report(&rows);
    let out = ctx.dir("report");
    write(&out.join("report.csv"), &report.csv)?;
    write(&out.join("report.txt"), &report.text)?;
    write(&out.join("trend.csv"), &report.trend)?;
    print!("{}", report.text);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    let ctx = Ctx {
        out: cfg.output.directory.clone(),
        cfg,
        threads: cli.threads.max(1),
    };
    match cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Label { manifest, inventory, radius } => cmd_label(&ctx, manifest, inventory, radius),
        Command::TrainSource => cmd_train_source(&ctx),
        Command::Cascade { model, manifest } => cmd_cascade(&ctx, model, manifest),
        Command::Adapt { fractions } => cmd_adapt(&ctx, fractions),
        Command::Report { metrics } => cmd_report(&ctx, metrics),
        Command::Run => {
            cmd_synth(&ctx)?;
            cmd_train_source(&ctx)?;
            cmd_cascade(&ctx, None, None)?;
            cmd_adapt(&ctx, Vec::new())?;
            cmd_report(&ctx, None)
        }
        Command::Config => {
            print!("{}", ctx.cfg.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { 3 } else { 2 })
        }
    }
}
