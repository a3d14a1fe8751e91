use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use jlcm::learner::write_trace_csv;
use jlcm::{
    compress_model, deserialize_compressed, evaluate, load_calibration, load_container, measure_footprint,
    serialize_compressed, ClusteringMethod, CompressedModel, Error, ModeChoice, RunConfig,
};
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "jlcm", version, about = "Compress linear-layer models with learned codebooks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a model file.
    Compress(CompressArgs),
    /// Compare a compressed model against the original.
    Eval(EvalArgs),
    /// Report memory footprint and whether it fits a capacity.
    Footprint(FootprintArgs),
    /// Print per-layer plans and codebooks.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration batch; required unless --optimize false.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 7.5, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, default_value = "auto", value_parser = parse_mode)]
    mode: ModeChoice,
    #[arg(long, default_value = "kmeans", value_parser = parse_clustering)]
    clustering: ClusteringMethod,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    optimize: bool,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 12_345)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON run report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for per-layer loss traces as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Compressed (JLCZ) or plain (JLCM) model.
    #[arg(long)]
    compressed: PathBuf,
    /// Calibration-format batch of evaluation inputs.
    #[arg(long)]
    inputs: PathBuf,
    /// Report written by `compress`; its permutations align rows for the
    /// per-layer weight error.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct FootprintArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    /// Device capacity in bytes.
    #[arg(long)]
    capacity: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    compressed: PathBuf,
    #[arg(long)]
    json: bool,
}

fn parse_mode(s: &str) -> Result<ModeChoice, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_clustering(s: &str) -> Result<ClusteringMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Compress(a) => cmd_compress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Footprint(a) => cmd_footprint(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Usage for bad arguments, numeric for optimizer failures, data otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    let Some(mut err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_DATA;
    };
    if err.is_numeric() {
        return EXIT_NUMERIC;
    }
    while let Error::Layer { source, .. } = err {
        err = source;
    }
    match err {
        Error::InvalidAlpha(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var("JLCM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| UsageError(format!("JLCM_THREADS must be a positive integer, got {v:?}")).into()),
        Err(_) => Ok(None),
    }
}

fn cmd_compress(a: CompressArgs) -> anyhow::Result<()> {
    jlcm::planner::validate_alpha(a.alpha)?;
    if a.optimize && a.calib.is_none() {
        return Err(UsageError("--calib is required unless --optimize false".into()).into());
    }
    let mut cfg = RunConfig {
        alpha: a.alpha,
        mode: a.mode,
        clustering: a.clustering,
        optimize: a.optimize,
        threads: threads_from_env()?,
        ..RunConfig::default()
    };
    cfg.schedule.iterations = a.iters;
    cfg.schedule.seed = a.seed;

    let model = load_container(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let calib = match &a.calib {
        Some(p) => Some(load_calibration(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let out = compress_model(&model, calib.as_ref(), &cfg)?;
    serialize_compressed(&out.compressed, &a.out).with_context(|| format!("writing {}", a.out.display()))?;

    if let Some(dir) = &a.trace {
        fs::create_dir_all(dir)?;
        for rec in out.layers.iter().filter(|r| !r.trace.is_empty()) {
            let path = dir.join(format!("layer{}.csv", rec.index));
            write_trace_csv(&rec.trace, fs::File::create(&path)?).with_context(|| format!("writing {}", path.display()))?;
        }
    }

    let report = out.report(&cfg, calib.as_ref().map(|c| &c.inputs))?;
    let report_json = serde_json::to_value(&report)?;
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&report_json)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report_json)?);
        return Ok(());
    }
    println!(
        "alpha achieved {:.4} (weights only {:.4}), {} bytes",
        out.footprint.alpha_achieved,
        out.footprint.alpha_weights,
        out.footprint.m_bytes()
    );
    for rec in &out.layers {
        println!(
            "layer {}: {} |C|={} groups={} weight mse {:.6e} -> {:.6e}",
            rec.index,
            rec.plan.mode,
            rec.plan.codebook_size,
            rec.plan.num_groups(),
            rec.init_weight_mse,
            rec.final_weight_mse
        );
    }
    if let Some(m) = &report.metrics {
        println!("calibration output mse {:.6e}", m.output_mse);
    }
    Ok(())
}

/// Plain models are accepted wherever a compressed one is expected.
fn load_any(path: &Path) -> anyhow::Result<CompressedModel> {
    let head = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let result = if head.starts_with(jlcm::container::MODEL_MAGIC) {
        load_container(path).map(|m| CompressedModel::passthrough(&m))
    } else {
        deserialize_compressed(path)
    };
    result.with_context(|| format!("reading {}", path.display()))
}

fn permutations_from_report(path: &Path) -> anyhow::Result<Vec<Option<Vec<usize>>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let layers = v["layers"].as_array().ok_or_else(|| anyhow!("{} has no layers array", path.display()))?;
    layers
        .iter()
        .map(|l| match &l["permutation"] {
            serde_json::Value::Null => Ok(None),
            p => Ok(Some(serde_json::from_value(p.clone())?)),
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut original = load_container(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let compressed = load_any(&a.compressed)?.to_model(&original.name)?;
    let inputs = load_calibration(&a.inputs).with_context(|| format!("reading {}", a.inputs.display()))?;
    if let Some(report) = &a.report {
        for (l, sigma) in permutations_from_report(report)?.into_iter().enumerate() {
            if let Some(sigma) = sigma {
                original = original.apply_permutation(l, &sigma)?;
            }
        }
    }
    let m = evaluate(&original, &compressed, &inputs.inputs)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&m)?);
        return Ok(());
    }
    println!("output mse: {:.6e}", m.output_mse);
    println!("max abs deviation: {:.6e}", m.max_abs_deviation);
    if let Some(t) = m.top1_agreement {
        println!("top-1 agreement: {t:.4}");
    }
    for (l, mse) in m.layer_weight_mse.iter().enumerate() {
        println!("layer {l} weight mse: {mse:.6e}");
    }
    Ok(())
}

fn cmd_footprint(a: FootprintArgs) -> anyhow::Result<()> {
    let model = load_container(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let compressed = load_any(&a.compressed)?;
    let r = measure_footprint(&compressed, &model)?;
    let fits = a.capacity.map(|c| r.m_bytes() <= c);
    if a.json {
        let mut v = serde_json::to_value(&r)?;
        v["bytes"] = json!(r.m_bytes());
        v["weight_share"] = json!(r.weight_share());
        if let Some(f) = fits {
            v["capacity"] = json!(a.capacity);
            v["fits"] = json!(f);
        }
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("M_W bits: {}", r.m_w);
    println!("M_A bits: {}", r.m_a);
    println!("M_ref bits: {}", r.m_ref);
    println!("total bytes: {}", r.m_bytes());
    println!("weight share: {:.4}", r.weight_share());
    println!("alpha achieved: {:.4}", r.alpha_achieved);
    println!("alpha weights: {:.4}", r.alpha_weights);
    if let Some(f) = fits {
        println!("fits: {f}");
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let model = load_any(&a.compressed)?;
    if a.json {
        let layers: Vec<_> = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let cbs = l.codebook_set();
                json!({
                    "index": i,
                    "mode": format!("{:?}", l.mode),
                    "n_o": l.n_o,
                    "n_i": l.n_i,
                    "activation": format!("{:?}", l.activation),
                    "codebook_size": l.codebook_size,
                    "num_codebooks": l.num_codebooks,
                    "bits_per_index": l.bits_per_index(),
                    "codebooks": cbs.as_ref().map(|c| c.codebooks.clone()),
                    "scales": cbs.as_ref().and_then(|c| c.scales.clone()),
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&json!({ "layers": layers }))?);
        return Ok(());
    }
    for (i, l) in model.layers.iter().enumerate() {
        println!(
            "layer {i}: {:?} {}x{} {:?} |C|={} codebooks={} scales={} bits={}",
            l.mode,
            l.n_o,
            l.n_i,
            l.activation,
            l.codebook_size,
            l.num_codebooks,
            l.scales.len(),
            l.bits_per_index()
        );
        for (g, cb) in l.codebook_set().iter().flat_map(|c| c.codebooks.iter()).enumerate() {
            let vals: Vec<String> = cb.iter().map(|v| format!("{v}")).collect();
            println!("  codebook {g}: {}", vals.join(" "));
        }
        if !l.scales.is_empty() {
            let vals: Vec<String> = l.scales.iter().map(|v| format!("{v}")).collect();
            println!("  scales: {}", vals.join(" "));
        }
    }
    Ok(())
}
