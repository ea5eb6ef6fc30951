//! Command-line driver: generate toy denoising traces, reproduce the
//! motivating analyses, simulate a hardware preset under an execution
//! flow variant, and compare all presets.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O error, 4 invariant
//! violation (the bit-exactness self-check failed).

use clap::{Args, Parser, Subcommand};
use ditto_core::driver::{compare, quantize_trace, run_variant};
use ditto_core::flow::Variant;
use ditto_core::hwsim::{HwConfig, Preset};
use ditto_core::metrics;
use ditto_core::refmodel::{build_model, run_sampler, ModelSpec, SamplerConfig};
use ditto_core::trace::{import_trace, trace_to_bytes, Trace};
use ditto_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Like `println!` but tolerant of a closed stdout (e.g. piping into
/// `head`), which must not turn a successful run into a panic.
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

const CSV_SCHEMAS: &str = "\
Report schemas:
  analyze:  CSV long format `model,layer,step,metric,value` (one file per
            analysis: similarity, range, bitwidth, bops) plus analysis.json.
  simulate: report.csv `preset,variant,step,layer,mode,compute_cycles,
            stall_cycles,enc_cycles,vpu_cycles,defo_cycles,total_cycles,
            traffic_bytes,bops,energy` plus report.json and plan.json.
  compare:  compare.csv `preset,variant,cycles,cycles_norm,energy_norm,
            traffic_norm,bops_norm` (normalized to the ITC row).
Every output starts with a `# config_digest=...` line (CSV) or carries a
`config_digest` field (JSON) naming the effective config that produced it.
Seeds default from the DITTO_SEED environment variable when neither a
flag nor a config file provides one.";

#[derive(Parser)]
#[command(name = "ditto", version, about = "Temporal-difference processing experiments", after_long_help = CSV_SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a toy model, run the sampler, and write the trace file.
    GenTrace {
        /// toy-unet or toy-dit
        #[arg(long)]
        model: Option<String>,
        /// Denoising steps (>= 2).
        #[arg(long)]
        steps: Option<usize>,
        /// Model + sampler seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output trace path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Similarity / range / bit-width / relative-BOPs reports for a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cost one hardware preset under an execution-flow variant.
    Simulate {
        #[arg(long)]
        trace: PathBuf,
        /// ditto, ditto-plus, dynamic-ditto, or ideal.
        #[arg(long)]
        variant: Option<String>,
        /// itc, diffy, cambricon-d, ditto, or ditto-plus.
        #[arg(long, conflicts_with = "hw_config")]
        preset: Option<String>,
        /// Custom hardware config as JSON (unknown keys rejected).
        #[arg(long)]
        hw_config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run all five presets with their matching variants.
    Compare {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// One JSON document covering every subcommand; flags override fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentConfig {
    model: Option<String>,
    steps: Option<usize>,
    seed: Option<u64>,
    high_similarity: Option<bool>,
    variant: Option<String>,
    preset: Option<String>,
    hw_config: Option<HwConfig>,
    out_dir: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Io(String),
    Invariant(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Invariant(m) => m,
        }
    }
}

fn usage(msg: impl Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn io_err(msg: impl Display) -> CliError {
    CliError::Io(msg.to_string())
}

/// Core errors are usage errors (bad spec, bad trace) except I/O and the
/// exactness self-check, which gets its own exit code.
fn core_err(e: CoreError) -> CliError {
    match e {
        CoreError::Io(_) => io_err(e),
        CoreError::ExactnessViolation { .. } => CliError::Invariant(e.to_string()),
        _ => usage(e),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Whole-file atomic write: temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err)?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    fs::write(tmp.path(), bytes).map_err(io_err)?;
    tmp.persist(path).map_err(io_err)?;
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    match &args.config {
        None => Ok(ExperimentConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err)?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))
        }
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("DITTO_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn parse_model(name: &str) -> Result<ModelSpec, CliError> {
    match name {
        "toy-unet" => Ok(ModelSpec::toy_unet()),
        "toy-dit" => Ok(ModelSpec::toy_dit()),
        other => Err(usage(format!(
            "unknown model `{other}` (expected toy-unet or toy-dit)"
        ))),
    }
}

fn parse_variant(name: &str) -> Result<Variant, CliError> {
    match name {
        "ditto" => Ok(Variant::Ditto),
        "ditto-plus" => Ok(Variant::DittoPlus),
        "dynamic-ditto" => Ok(Variant::DynamicDitto),
        "ideal" => Ok(Variant::Ideal),
        other => Err(usage(format!(
            "unknown variant `{other}` (expected ditto, ditto-plus, dynamic-ditto, or ideal)"
        ))),
    }
}

fn parse_preset(name: &str) -> Result<Preset, CliError> {
    match name {
        "itc" => Ok(Preset::Itc),
        "diffy" => Ok(Preset::Diffy),
        "cambricon-d" => Ok(Preset::CambriconD),
        "ditto" => Ok(Preset::Ditto),
        "ditto-plus" => Ok(Preset::DittoPlus),
        other => Err(usage(format!("unknown preset `{other}`"))),
    }
}

/// Writes the merged config next to the outputs and returns its digest;
/// every report then names the digest of the config that produced it.
fn seal_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String, CliError> {
    let json = serde_json::to_string_pretty(cfg).map_err(|e| io_err(e.to_string()))?;
    let digest = sha256_hex(json.as_bytes());
    write_atomic(&out_dir.join("effective-config.json"), json.as_bytes())?;
    Ok(digest)
}

fn write_csv(path: &Path, digest: &str, body: &str) -> Result<(), CliError> {
    let text = format!("# config_digest={digest}\n{body}");
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, digest: &str, data: &T) -> Result<(), CliError> {
    let doc = serde_json::json!({ "config_digest": digest, "data": data });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| io_err(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn load_trace(path: &Path) -> Result<Trace, CliError> {
    if !path.exists() {
        return Err(io_err(format!(
            "trace file {} does not exist",
            path.display()
        )));
    }
    import_trace(path).map_err(core_err)
}

fn model_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into())
}

fn gen_trace(
    model: Option<String>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
    args: ConfigArgs,
) -> Result<(), CliError> {
    let mut cfg = load_config(&args)?;
    cfg.model = model.or(cfg.model.take());
    cfg.steps = steps.or(cfg.steps);
    cfg.seed = seed.or(cfg.seed).or_else(env_seed);

    let model_name = cfg.model.clone().unwrap_or_else(|| "toy-unet".into());
    let steps = cfg.steps.unwrap_or(20);
    let seed = cfg.seed.unwrap_or(42);
    let spec = parse_model(&model_name)?.with_seed(seed);
    let mut sampler = SamplerConfig::new(steps, seed);
    if let Some(hs) = cfg.high_similarity {
        sampler.high_similarity = hs;
    }
    let graph = build_model(&spec).map_err(core_err)?;
    let trace = run_sampler(&graph, &sampler).map_err(core_err)?;
    let bytes = trace_to_bytes(&trace).map_err(core_err)?;
    write_atomic(&out, &bytes)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        seal_config(&cfg, dir)?;
    }
    outln!(
        "wrote {} ({} steps, {} records)",
        out.display(),
        trace.steps,
        trace.records.len()
    );
    outln!("sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn analyze(
    trace_path: PathBuf,
    out_dir: Option<PathBuf>,
    args: ConfigArgs,
) -> Result<(), CliError> {
    let mut cfg = load_config(&args)?;
    cfg.out_dir = out_dir.or(cfg.out_dir.take());
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let trace = load_trace(&trace_path)?;
    let q = quantize_trace(&trace).map_err(core_err)?;
    let model = model_label(&trace_path);
    let digest = seal_config(&cfg, &out_dir)?;

    let sim = metrics::similarity_report(&trace).map_err(core_err)?;
    let ranges = metrics::range_report(&q);
    let bits = metrics::bitwidth_report(&q).map_err(core_err)?;
    let bops = metrics::relative_bops(&q);

    write_csv(
        &out_dir.join("similarity.csv"),
        &digest,
        &sim.to_csv(&model),
    )?;
    write_csv(&out_dir.join("range.csv"), &digest, &ranges.to_csv(&model))?;
    write_csv(&out_dir.join("bitwidth.csv"), &digest, &bits.to_csv(&model))?;
    write_csv(&out_dir.join("bops.csv"), &digest, &bops.to_csv(&model))?;
    write_json(
        &out_dir.join("analysis.json"),
        &digest,
        &serde_json::json!({
            "model": model,
            "similarity": sim,
            "range": ranges,
            "bitwidth": bits,
            "relative_bops": bops,
        }),
    )?;
    outln!(
        "temporal cosine mean {:.4}, spatial {:.4}; zero fractions: temporal {:.4} vs activation {:.4}",
        sim.temporal_mean, sim.spatial_mean, bits.temporal.zero, bits.activations.zero
    );
    outln!("reports written to {}", out_dir.display());
    Ok(())
}

fn simulate(
    trace_path: PathBuf,
    variant: Option<String>,
    preset: Option<String>,
    hw_config: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    args: ConfigArgs,
) -> Result<(), CliError> {
    let mut cfg = load_config(&args)?;
    cfg.variant = variant.or(cfg.variant.take());
    cfg.preset = preset.or(cfg.preset.take());
    cfg.out_dir = out_dir.or(cfg.out_dir.take());
    if let Some(path) = hw_config {
        let text = fs::read_to_string(&path).map_err(io_err)?;
        let hw: HwConfig = serde_json::from_str(&text)
            .map_err(|e| usage(format!("hw config {}: {e}", path.display())))?;
        cfg.hw_config = Some(hw);
        cfg.preset = None;
    }
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let variant = parse_variant(cfg.variant.as_deref().unwrap_or("ditto"))?;
    let hw = match (&cfg.hw_config, &cfg.preset) {
        (Some(hw), _) => hw.clone(),
        (None, name) => {
            let preset = parse_preset(name.as_deref().unwrap_or("ditto"))?;
            if !preset.supports_diff() {
                return Err(usage(format!(
                    "preset `{preset}` has no difference datapath and cannot run variant `{}`",
                    cfg.variant.as_deref().unwrap_or("ditto")
                )));
            }
            preset.config()
        }
    };
    hw.validate().map_err(core_err)?;

    let trace = load_trace(&trace_path)?;
    let q = quantize_trace(&trace).map_err(core_err)?;
    let digest = seal_config(&cfg, &out_dir)?;
    let (mut report, plan) = run_variant(&q, variant, &hw).map_err(core_err)?;
    report.high_similarity = cfg.high_similarity.unwrap_or(true);
    write_csv(&out_dir.join("report.csv"), &digest, &report.to_csv())?;
    write_json(&out_dir.join("report.json"), &digest, &report)?;
    write_json(&out_dir.join("plan.json"), &digest, &plan)?;
    outln!(
        "{} / {}: {} cycles, {} bytes traffic, {:.1} energy, exact={}",
        report.preset,
        report.variant,
        report.total_cycles,
        report.total_traffic,
        report.total_energy,
        report.exact
    );
    outln!("reports written to {}", out_dir.display());
    Ok(())
}

fn run_compare(
    trace_path: PathBuf,
    out_dir: Option<PathBuf>,
    args: ConfigArgs,
) -> Result<(), CliError> {
    let mut cfg = load_config(&args)?;
    cfg.out_dir = out_dir.or(cfg.out_dir.take());
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let trace = load_trace(&trace_path)?;
    let q = quantize_trace(&trace).map_err(core_err)?;
    let digest = seal_config(&cfg, &out_dir)?;
    let (matrix, reports) = compare(&q).map_err(core_err)?;
    write_csv(&out_dir.join("compare.csv"), &digest, &matrix.to_csv())?;
    write_json(&out_dir.join("compare.json"), &digest, &matrix)?;
    write_json(&out_dir.join("compare-reports.json"), &digest, &reports)?;
    for row in &matrix.rows {
        outln!(
            "{:<12} {:<14} cycles {:>12} (x{:.3}) energy x{:.3} traffic x{:.3} bops x{:.3}",
            row.preset,
            row.variant,
            row.cycles,
            row.cycles_norm,
            row.energy_norm,
            row.traffic_norm,
            row.bops_norm
        );
    }
    let (m, t) = matrix.defo_accuracy;
    let frac = if t == 0 { 1.0 } else { m as f64 / t as f64 };
    outln!("defo accuracy vs ideal: {m}/{t} ({frac:.3})");
    outln!("reports written to {}", out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenTrace {
            model,
            steps,
            seed,
            out,
            cfg,
        } => gen_trace(model, steps, seed, out, cfg),
        Cmd::Analyze {
            trace,
            out_dir,
            cfg,
        } => analyze(trace, out_dir, cfg),
        Cmd::Simulate {
            trace,
            variant,
            preset,
            hw_config,
            out_dir,
            cfg,
        } => simulate(trace, variant, preset, hw_config, out_dir, cfg),
        Cmd::Compare {
            trace,
            out_dir,
            cfg,
        } => run_compare(trace, out_dir, cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
