//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures. With `--json`, errors are written to stderr as
//! `{"error": {"reason", "message", "exit_code"}}`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use clipaway_core::adapter::train::{EncodedPairs, ImageFiles};
use clipaway_core::adapter::{save_adapter, write_loss_csv, AdapterTrainer, ProjectionAdapter};
use clipaway_core::eval::coco::IngestOptions;
use clipaway_core::eval::synthetic::write_synthetic_coco;
use clipaway_core::eval::{ingest_coco, run_benchmark, write_reports, BenchmarkConfig, BenchmarkEntry, MetricReport};
use clipaway_core::pipeline::{compute_final_embedding, dilate_mask, BackendKind, ConditioningMode, RemovalRequest};
use clipaway_core::raster::{load_mask, load_rgb, save_png};
use clipaway_core::Error;
use serde_json::json;

use crate::config::{apply_overrides, ToolkitConfig};
use crate::models::{training_encoders, Models};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clipaway", version, about = "Object removal with background-focused image prompts")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use deterministic mock encoders and backends; no weights needed.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Machine-readable output and errors.
    #[arg(long, global = true)]
    pub json: bool,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the projection adapter on a directory of images.
    TrainAdapter(TrainArgs),
    /// Remove the masked object from one image.
    Remove(RemoveArgs),
    /// Run the removal benchmark over COCO-format annotations.
    Eval(EvalArgs),
    /// Dump the foreground, background and final embeddings.
    Embed(EmbedArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Where to write the trained adapter weights.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Full training checkpoint, rewritten periodically.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RemoveArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub dilation_kernel: Option<u32>,
    #[arg(long)]
    pub steps: Option<u32>,
    /// JSON object of option overrides, applied last.
    #[arg(long)]
    pub options: Option<String>,
    /// Diagnostics sidecar path; defaults to the output path with `.json`.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    /// COCO instances JSON plus an image directory.
    Coco,
    /// A small procedurally generated COCO-format set, written to the output directory.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::Coco)]
    pub dataset: DatasetKind,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Comma-separated backends; defaults to every configured backend.
    #[arg(long, value_delimiter = ',')]
    pub backends: Vec<BackendKind>,
    /// Also run each backend with the background-focused image prompt.
    #[arg(long)]
    pub with_clipaway: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip instances already recorded in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub include_crowd: bool,
    /// Image count for `--dataset synthetic`.
    #[arg(long, default_value_t = 8)]
    pub synthetic_images: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// JSON output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dilation_kernel: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub jobs_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub reason: String,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            reason: "usage".into(),
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            reason: e.reason().into(),
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Self {
                code: EXIT_RUNTIME,
                reason: "runtime_error".into(),
                message: format!("{e:#}"),
            },
        }
    }
}

fn report_failure(f: &Failure, json: bool) {
    if json {
        let body = json!({ "error": { "reason": f.reason, "message": f.message, "exit_code": f.code } });
        eprintln!("{body}");
    } else {
        eprintln!("error: {}", f.message);
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json = args.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            if json {
                report_failure(&Failure::usage(e.to_string().trim().to_string()), true);
            } else {
                let _ = e.print();
            }
            return EXIT_USAGE;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            report_failure(&f, json);
            f.code
        }
    }
}

/// Load, apply flag overrides and validate.
pub fn resolve_config(cli: &Cli) -> Result<ToolkitConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ToolkitConfig::load(p).map_err(|e| Failure {
            code: EXIT_USAGE,
            reason: e.reason().into(),
            message: e.to_string(),
        })?,
        None => ToolkitConfig::default(),
    };
    cfg.mock |= cli.mock;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Serve(a) = &cli.command {
        if let Some(h) = &a.host {
            cfg.service.host = h.clone();
        }
        if let Some(p) = a.port {
            cfg.service.port = p;
        }
        if let Some(d) = &a.jobs_dir {
            cfg.service.jobs_dir = d.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &ToolkitConfig, json: bool) {
    if json {
        let body = json!({
            "event": "resolved_config",
            "seed": cfg.seed,
            "config_sha256": cfg.snapshot_hash(),
            "config": cfg,
        });
        eprintln!("{body}");
    } else {
        eprintln!("# resolved config (sha256 {}), seed = {}", cfg.snapshot_hash(), cfg.seed);
        for line in cfg.to_toml().lines() {
            eprintln!("#   {line}");
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli)?;
    echo_config(&cfg, cli.json);
    match &cli.command {
        Command::TrainAdapter(a) => train(&cfg, a, cli.json),
        Command::Remove(a) => remove(&cfg, a, cli.json),
        Command::Eval(a) => eval(&cfg, a, cli.json),
        Command::Embed(a) => embed(&cfg, a),
        Command::Serve(_) => serve(cfg),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn train(cfg: &ToolkitConfig, a: &TrainArgs, json: bool) -> Result<(), Failure> {
    let images_dir = a
        .images
        .clone()
        .or_else(|| cfg.training.image_dir.clone())
        .ok_or_else(|| Failure::usage("--images (or [training] image_dir) is required"))?;
    let out = a.out.clone().unwrap_or_else(|| cfg.training.output.clone());
    let mut tcfg = cfg.training.optimizer.clone();
    tcfg.seed = cfg.seed;
    if let Some(s) = a.steps {
        tcfg.total_steps = s;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        tcfg.learning_rate = lr;
    }
    tcfg.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let images = ImageFiles::from_dir(&images_dir)?;
    let (region, plain) = training_encoders(cfg)?;
    let pairs = EncodedPairs::new(&images, region.as_ref(), plain.as_ref(), tcfg.cache_embeddings)?;
    let mut trainer = match &a.resume {
        Some(p) => AdapterTrainer::resume(p, pairs)?,
        None => {
            let adapter = ProjectionAdapter::new(tcfg.seed);
            AdapterTrainer::new(adapter.into_mlp(), pairs, tcfg.clone())?
        }
    };
    if let Some(p) = a.checkpoint.clone().or_else(|| cfg.training.checkpoint.clone()) {
        trainer = trainer.with_checkpoint_path(p);
    }
    trainer.run()?;
    let (mlp, losses) = trainer.into_parts();
    let adapter = ProjectionAdapter::from_mlp(mlp)?;
    save_adapter(&adapter, &out)?;
    if let Some(p) = a.loss_csv.clone().or_else(|| cfg.training.loss_csv.clone()) {
        write_loss_csv(&p, &losses)?;
    }
    let summary = json!({
        "adapter": out,
        "adapter_sha256": clipaway_core::file_hash(&out)?,
        "steps": losses.len(),
        "initial_loss": losses.first(),
        "final_loss": losses.last(),
        "seed": cfg.seed,
    });
    if json {
        print_json(&summary);
    } else {
        println!(
            "trained {} steps: loss {:.6e} -> {:.6e}; wrote {}",
            losses.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN),
            out.display()
        );
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn remove(cfg: &ToolkitConfig, a: &RemoveArgs, json: bool) -> Result<(), Failure> {
    let mut opts = cfg.default_options();
    if let Some(b) = a.backend {
        opts.backend = b;
    }
    if let Some(k) = a.dilation_kernel {
        opts.dilation_kernel = k;
    }
    if let Some(s) = a.steps {
        opts.steps = s;
    }
    if let Some(o) = &a.options {
        opts = apply_overrides(&opts, o).map_err(|e| Failure::usage(e.to_string()))?;
    }
    opts.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let image = load_rgb(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let models = Models::from_config(cfg)?;
    let backend = models.backend(opts.backend)?;
    let request = RemovalRequest {
        image,
        mask,
        options: opts,
    };
    let result = models.pipeline.remove_object(request, backend.as_ref())?;
    save_png(&result.output, &a.out)?;
    let diag_path = a.diagnostics.clone().unwrap_or_else(|| sidecar_path(&a.out));
    let diag = serde_json::to_vec_pretty(&result.diagnostics).map_err(Error::from)?;
    std::fs::write(&diag_path, diag).map_err(|e| Error::io(&diag_path, e))?;

    let d = &result.diagnostics;
    if json {
        print_json(&json!({
            "output": a.out,
            "diagnostics": diag_path,
            "backend": d.backend,
            "dilation_kernel": d.dilation_kernel,
            "cos_final_fg": d.cos_final_fg,
            "warnings": d.warnings,
            "timing": d.timing,
        }));
    } else {
        println!(
            "wrote {} ({}x{}) with backend {}; diagnostics in {}",
            a.out.display(),
            result.output.width(),
            result.output.height(),
            d.backend_id,
            diag_path.display()
        );
        for w in &d.warnings {
            println!("warning: {w}");
        }
    }
    Ok(())
}

fn eval(cfg: &ToolkitConfig, a: &EvalArgs, json: bool) -> Result<(), Failure> {
    let out = a.out.clone().unwrap_or_else(|| cfg.eval.output_dir.clone());
    let (annotations, images) = match a.dataset {
        DatasetKind::Synthetic => {
            let ds = write_synthetic_coco(&out.join("synthetic"), a.synthetic_images, 2, cfg.seed)?;
            (ds.annotation_file, ds.image_dir)
        }
        DatasetKind::Coco => {
            let ann = a
                .annotations
                .clone()
                .or_else(|| cfg.eval.annotation_file.clone())
                .ok_or_else(|| Failure::usage("--annotations (or [eval] annotation_file) is required"))?;
            let img = a
                .images
                .clone()
                .or_else(|| cfg.eval.image_dir.clone())
                .ok_or_else(|| Failure::usage("--images (or [eval] image_dir) is required"))?;
            (ann, img)
        }
    };

    let models = Models::from_config(cfg)?;
    let kinds: Vec<BackendKind> = if a.backends.is_empty() {
        models.backends.keys().copied().collect()
    } else {
        a.backends.clone()
    };
    let mut entries = Vec::new();
    for kind in kinds {
        let backend = models.backend(kind)?;
        entries.push(BenchmarkEntry::new(backend.clone(), ConditioningMode::Unconditioned));
        if a.with_clipaway {
            entries.push(BenchmarkEntry::new(backend, ConditioningMode::Clipaway));
        }
    }

    let options = IngestOptions {
        include_crowd: a.include_crowd || cfg.eval.include_crowd,
    };
    let mut instances = ingest_coco(&annotations, &images, options)?;
    let classes: Vec<String> = clipaway_core::eval::CocoDataset::load(&annotations)?
        .thing_classes()
        .iter()
        .map(|c| c.name.clone())
        .collect();
    let bcfg = BenchmarkConfig {
        limit: a.limit.or(cfg.eval.limit),
        seed: cfg.seed,
        options: cfg.default_options(),
        template: cfg.eval.template.clone(),
        cmmd: cfg.eval.cmmd,
        output_dir: Some(out.clone()),
        resume: a.resume,
    };
    let mut reports = run_benchmark(&mut instances, &classes, &models.eval_models()?, &entries, &bcfg)?;
    for r in &mut reports {
        r.ingest = instances.stats().clone();
        r.provenance.extend(models.provenance().clone());
    }
    write_reports(&out, &reports)?;

    if json {
        print_json(&serde_json::to_value(&reports).map_err(Error::from)?);
    } else {
        print_table(&reports, &out);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn print_table(reports: &[MetricReport], out: &Path) {
    println!(
        "{:<28} {:>6} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}",
        "entry", "n", "CLIP-d", "acc@1", "acc@3", "acc@5", "FID", "CMMD"
    );
    for r in reports {
        println!(
            "{:<28} {:>6} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>10} {:>10}",
            r.label,
            r.n_instances,
            fmt_opt(r.clip_distance_mean, 4),
            r.clip_acc.at1,
            r.clip_acc.at3,
            r.clip_acc.at5,
            fmt_opt(r.fid, 3),
            fmt_opt(r.cmmd, 4),
        );
    }
    println!("reports written to {}", out.display());
}

fn embed(cfg: &ToolkitConfig, a: &EmbedArgs) -> Result<(), Failure> {
    let kernel = a.dilation_kernel.unwrap_or(cfg.pipeline.dilation_kernel);
    let image = load_rgb(&a.image)?;
    let mask = load_mask(&a.mask)?;
    if mask.dimensions() != image.dimensions() {
        return Err(Error::MaskShapeMismatch {
            mask: mask.dimensions(),
            image: image.dimensions(),
        }
        .into());
    }
    let dilated = dilate_mask(&mask, kernel).map_err(|e| Failure::usage(e.to_string()))?;
    let models = Models::from_config(cfg)?;
    let fe = compute_final_embedding(
        &image,
        &dilated,
        models.pipeline.region_encoder.as_ref(),
        &models.pipeline.adapter,
    )?;
    let body = json!({
        "dilation_kernel": kernel,
        "e_fg": fe.e_fg,
        "e_bg": fe.e_bg,
        "e_final": fe.e_final,
        "cos_final_fg": fe.cos_final_fg,
        "warnings": fe.warnings,
        "provenance": models.provenance(),
    });
    let text = serde_json::to_string_pretty(&body).map_err(Error::from)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn serve(cfg: ToolkitConfig) -> Result<(), Failure> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
    rt.block_on(crate::service::serve(cfg)).map_err(Failure::from)?;
    Ok(())
}
