use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use perturbench::data::{load_bundle, write_bundle, ExpressionMatrix, Layout};
use perturbench::embed::{fit_pca, random_embed, transform_pca, PcaParams};
use perturbench::harness::{
    emit_report, read_report_json, run_pipeline, Inputs, ReportFormat, RunConfig, Task,
};
use perturbench::metrics::consistency::Tail;
use perturbench::metrics::reconstruction::{Activation, SpearmanAxis};
use perturbench::metrics::separability::KnnTopMode;
use perturbench::postprocess::{self, CenterMode, PostProcessing};
use perturbench::preprocess::{
    filter_min_counts, make_probe_split, make_recon_split, normalize_log1p, DEFAULT_MIN_COUNTS,
    DEFAULT_TARGET_SUM, DEFAULT_TRAIN_FRAC,
};
use perturbench::synth::{self, SynthConfig};

const EXIT_FATAL: u8 = 1;
const EXIT_CELL_ERRORS: u8 = 2;

#[derive(Parser)]
#[command(name = "perturbench", version, about = "Evaluate perturbation-screen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a bundle, check it, and print a summary.
    Validate { bundle: PathBuf },
    /// Drop low-count samples and optionally log-normalize the expression.
    Preprocess {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_COUNTS)]
        min_counts: f64,
        /// Store log1p(target_sum · x / rowsum) instead of raw counts.
        #[arg(long)]
        lognorm: bool,
        #[arg(long, default_value_t = DEFAULT_TARGET_SUM)]
        target_sum: f64,
    },
    /// Write a batch-level train/test split as JSON.
    Split {
        bundle: PathBuf,
        #[arg(long, value_enum)]
        kind: SplitKindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRAIN_FRAC)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.2)]
        holdout_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute a baseline embedding and store it in the bundle.
    Embed {
        bundle: PathBuf,
        #[arg(long, value_enum)]
        method: EmbedMethod,
        /// Stored name; defaults to the method name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = perturbench::embed::DEFAULT_PCA_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write to a new bundle instead of updating in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-process a stored embedding into a new stored embedding.
    Postprocess {
        bundle: PathBuf,
        #[arg(long)]
        embedding: String,
        #[arg(long)]
        method: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum, default_value_t = CenterModeArg::PerBatchControl)]
        center_mode: CenterModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one task or all of them and write a report.
    Eval(EvalArgs),
    /// Generate a synthetic bundle with planted ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-emit or print a saved JSON report.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
        format: FormatArg,
        /// Directory to write into; prints the TSV to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// mixing, probe, consistency, knn, recall, recon or all
    task: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long = "embedding")]
    embeddings: Vec<String>,
    #[arg(long = "post-processing")]
    post_processing: Vec<String>,
    /// Split for probe/knn (probe split) or recon (reconstruction split).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    recon_split: Option<PathBuf>,
    #[arg(long = "db")]
    databases: Vec<PathBuf>,
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    knn_mode: Option<KnnModeArg>,
    #[arg(long)]
    null_threshold: Option<f64>,
    #[arg(long)]
    min_null: Option<usize>,
    #[arg(long, value_enum)]
    tail: Option<TailArg>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    spearman_axis: Option<SpearmanAxisArg>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long, value_enum, default_values_t = [FormatArg::Tsv, FormatArg::Json])]
    format: Vec<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitKindArg {
    Probe,
    Recon,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMethod {
    Pca,
    Random,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Tsv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => ReportFormat::Tsv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterModeArg {
    PerBatchControl,
    Global,
}

impl From<CenterModeArg> for CenterMode {
    fn from(c: CenterModeArg) -> Self {
        match c {
            CenterModeArg::PerBatchControl => CenterMode::PerBatchControl,
            CenterModeArg::Global => CenterMode::Global,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KnnModeArg {
    RankedFrequency,
    NearestRows,
}

#[derive(Clone, Copy, ValueEnum)]
enum TailArg {
    Right,
    LeftAsPrinted,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Identity,
    Relu,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpearmanAxisArg {
    PerSample,
    PerGene,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_FATAL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PERTURBENCH_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PERTURBENCH_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { bundle } => {
            let ds = load_bundle(&bundle)?;
            let meta = &ds.metadata;
            println!("samples\t{}", ds.n_samples());
            println!("batches\t{}", meta.batches().len());
            println!("perturbations\t{}", meta.perturbations().len());
            println!("controls\t{}", meta.control_rows().len());
            match &ds.expression {
                Some(e) => println!("expression\t{} genes, {}", e.n_genes(), e.layout()),
                None => println!("expression\tnone"),
            }
            for (name, emb) in &ds.embeddings {
                println!("embedding\t{name}\t{}\t{}", emb.dim(), emb.provenance());
            }
        }
        Command::Preprocess {
            bundle,
            out,
            min_counts,
            lognorm,
            target_sum,
        } => {
            let ds = load_bundle(&bundle)?;
            let expr = ds.expression()?;
            let mask = filter_min_counts(expr, min_counts)?;
            let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let dropped = mask.len() - keep.len();
            let mut filtered = ds.select_rows(&keep);
            if lognorm {
                let e = filtered.expression()?;
                let normed: ExpressionMatrix = normalize_log1p(e, target_sum)?;
                debug_assert_eq!(normed.layout(), Layout::Lognorm);
                filtered.expression = Some(normed);
            }
            write_bundle(&filtered, &out)?;
            println!("kept {} of {} samples ({dropped} dropped)", keep.len(), mask.len());
        }
        Command::Split {
            bundle,
            kind,
            out,
            train_frac,
            holdout_frac,
            seed,
        } => {
            let ds = load_bundle(&bundle)?;
            let spec = match kind {
                SplitKindArg::Probe => make_probe_split(&ds.metadata, train_frac, seed)?,
                SplitKindArg::Recon => make_recon_split(&ds.metadata, train_frac, holdout_frac, seed)?,
            };
            std::fs::write(&out, spec.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Embed {
            bundle,
            method,
            name,
            dim,
            seed,
            out,
        } => {
            let mut ds = load_bundle(&bundle)?;
            let (default_name, emb) = match method {
                EmbedMethod::Pca => {
                    let expr = ds.expression()?;
                    let model = fit_pca(expr, &PcaParams::new(dim, seed))?;
                    ("pca", transform_pca(&model, expr)?)
                }
                EmbedMethod::Random => ("random", random_embed(ds.n_samples(), dim, seed)?),
            };
            let name = name.unwrap_or_else(|| default_name.to_string());
            ds.embeddings.insert(name, emb);
            write_bundle(&ds, out.as_deref().unwrap_or(&bundle))?;
        }
        Command::Postprocess {
            bundle,
            embedding,
            method,
            name,
            center_mode,
            out,
        } => {
            let mut ds = load_bundle(&bundle)?;
            let kind: PostProcessing = method.parse()?;
            let processed = postprocess::apply(kind, ds.embedding(&embedding)?, &ds.metadata, center_mode.into())?;
            let name = name.unwrap_or_else(|| format!("{embedding}.{kind}"));
            ds.embeddings.insert(name, processed.embedding);
            write_bundle(&ds, out.as_deref().unwrap_or(&bundle))?;
        }
        Command::Eval(args) => return eval(args),
        Command::Synth { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<SynthConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let generated = synth::generate(&cfg)?;
            write_bundle(&generated.dataset, &out)?;
            synth::write_ground_truth(&generated, &out)?;
            println!(
                "wrote {} cells, {} genes, {} true links to {}",
                generated.dataset.n_samples(),
                cfg.n_genes,
                generated.true_links.len(),
                out.display()
            );
        }
        Command::Report { report, format, out } => {
            let r = read_report_json(&report)?;
            match out {
                Some(dir) => {
                    emit_report(&r, &dir, &[format.into()])?;
                }
                None => match format {
                    FormatArg::Tsv => print!("{}", perturbench::harness::report_tsv(&r)),
                    FormatArg::Json => println!("{}", serde_json::to_string_pretty(&r)?),
                },
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.tasks = if args.task == "all" {
        Task::ALL.to_vec()
    } else {
        vec![args.task.parse()?]
    };
    if let Some(b) = args.bundle {
        cfg.bundle = b;
    }
    if cfg.bundle.as_os_str().is_empty() {
        bail!("no bundle given (use --bundle or a config file)");
    }
    if !args.embeddings.is_empty() {
        cfg.embeddings = args.embeddings;
    }
    if !args.post_processing.is_empty() {
        cfg.post_processing = args
            .post_processing
            .iter()
            .map(|p| p.parse())
            .collect::<perturbench::Result<_>>()?;
    }
    if let Some(s) = args.split {
        if cfg.tasks == [Task::Recon] {
            cfg.recon_split = Some(s);
        } else {
            cfg.probe_split = Some(s);
        }
    }
    if let Some(s) = args.recon_split {
        cfg.recon_split = Some(s);
    }
    if !args.databases.is_empty() {
        cfg.databases = args.databases;
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    if let Some(p) = args.perplexity {
        cfg.mixing.perplexity = p;
    }
    if let Some(e) = args.epochs {
        cfg.probe.epochs = e;
    }
    if let Some(k) = args.k {
        cfg.knn.k = Some(k);
    }
    if let Some(m) = args.knn_mode {
        cfg.knn.mode = match m {
            KnnModeArg::RankedFrequency => KnnTopMode::RankedFrequency,
            KnnModeArg::NearestRows => KnnTopMode::NearestRows,
        };
    }
    if let Some(t) = args.null_threshold {
        cfg.consistency.null_threshold = t;
    }
    if let Some(m) = args.min_null {
        cfg.consistency.min_null = m;
    }
    if let Some(t) = args.tail {
        cfg.consistency.tail = match t {
            TailArg::Right => Tail::Right,
            TailArg::LeftAsPrinted => Tail::LeftAsPrinted,
        };
    }
    if let Some(a) = args.activation {
        cfg.recon.activation = match a {
            ActivationArg::Identity => Activation::Identity,
            ActivationArg::Relu => Activation::Relu,
        };
    }
    if let Some(a) = args.spearman_axis {
        cfg.recon.spearman_axis = match a {
            SpearmanAxisArg::PerSample => SpearmanAxis::PerSample,
            SpearmanAxisArg::PerGene => SpearmanAxis::PerGene,
        };
    }
    if let Some(d) = args.pca_dim {
        cfg.pca_dim = d;
    }
    cfg.validate()?;

    let inputs = Inputs::load(&cfg)?;
    let report = run_pipeline(&cfg, &inputs)?;
    let formats: Vec<ReportFormat> = args.format.iter().map(|&f| f.into()).collect();
    let written = emit_report(&report, &cfg.output_dir, &formats)?;
    for p in &written {
        println!("{}", display(p));
    }
    let n_errors = report.n_errors();
    if n_errors > 0 {
        eprintln!("{n_errors} report cells carry errors");
        return Ok(ExitCode::from(EXIT_CELL_ERRORS));
    }
    Ok(ExitCode::SUCCESS)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
