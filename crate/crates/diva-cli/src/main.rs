//! Single entry point for the pipeline: data generation, two-stage training,
//! the SFT baseline, evaluation, diagnostics, and factor export.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use diva_core::diagnostics;
use diva_core::synthdata::{self, MaskPattern};
use diva_core::training::{
    evaluate, load_checkpoint, run_sft_baseline, run_stage1, run_stage2, save_checkpoint,
    LossReport, RunConfig, TrainState,
};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser, Debug)]
#[command(
    name = "diva",
    version,
    about = "Dual-flow factorized mutual-reinforcement training lab"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed; every stream (data, masks, init, batching) derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML run configuration; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path. Relative paths resolve under $DIVA_OUT_ROOT when set.
    #[arg(long)]
    out: PathBuf,
    /// Strict-deterministic mode: ordered reductions and freeze
    /// verification. The implementation runs this way unconditionally; the
    /// flag is recorded in the manifest.
    #[arg(long, default_value_t = false)]
    strict_deterministic: bool,
}

#[derive(Args, Debug, Clone)]
struct AblationArgs {
    /// Mask pattern for the generation flow.
    #[arg(long, value_parser = ["random", "contiguous"])]
    mask_pattern: Option<String>,
    /// Mid-layer band as a:b (1-based, inclusive).
    #[arg(long)]
    mid_range: Option<String>,
    /// Factor encoder body.
    #[arg(long, value_parser = ["gated-mlp", "linear-ln"])]
    encoder: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic paired dataset (JSON-lines).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples; overrides the config value.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Stage 1: encoder warmup against the frozen backbone.
    Stage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Stage 2: backbone refinement with the MI objectives.
    Stage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to start from (required).
        #[arg(long)]
        from_stage1: Option<PathBuf>,
        /// Drop the unique-information regularizer (weight forced to 0).
        #[arg(long, default_value_t = false)]
        no_uni: bool,
        /// Drop the stop-gradient: targets come from live parameters.
        #[arg(long, default_value_t = false)]
        no_sg: bool,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Matched-budget supervised fine-tuning baseline (no extra terms).
    SftBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Representation diagnostics over a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subset of {residual, er, grad-conflict, freq}, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Radial cutoff as a fraction of Nyquist for the frequency profile.
        #[arg(long, default_value_t = 0.5)]
        cutoff: f64,
    },
    /// Evaluate a checkpoint on a held-out dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export factor vectors to CSV (with an optional 2-D PCA projection).
    ExportFactors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write a 2-D PCA projection of the shared factors.
        #[arg(long, default_value_t = false)]
        pca: bool,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<diva_core::Error> for CliError {
    fn from(e: diva_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}

fn resolve_out(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("DIVA_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    version: String,
    seed: u64,
    strict_deterministic: bool,
    config: RunConfig,
    started_unix: u64,
    finished_unix: Option<u64>,
    status: String,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, strict: bool, config: RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            strict_deterministic: strict,
            config,
            started_unix: now_unix(),
            finished_unix: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join("manifest.json.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, self).map_err(|e| CliError::Runtime(e.to_string()))?;
        f.write_all(b"\n")?;
        f.flush()?;
        std::fs::rename(tmp, dir.join("manifest.json"))?;
        Ok(())
    }

    fn finalize(&mut self, dir: &Path, status: &str) {
        self.finished_unix = Some(now_unix());
        self.status = status.to_string();
        let _ = self.write(dir);
    }
}

/// Run a fallible body with manifest bracketing: written before work starts,
/// finalized on success and on failure alike.
fn with_manifest(
    dir: &Path,
    manifest: &mut RunManifest,
    body: impl FnOnce(&mut RunManifest) -> Result<(), CliError>,
) -> Result<(), CliError> {
    manifest.write(dir)?;
    match body(manifest) {
        Ok(()) => {
            manifest.finalize(dir, "ok");
            Ok(())
        }
        Err(e) => {
            manifest.finalize(dir, &format!("failed: {}", e.message()));
            Err(e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

fn parse_mid_range(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(CliError::Usage(format!("--mid-range expects a:b, got `{s}`")));
    }
    let a = parts[0]
        .parse()
        .map_err(|_| CliError::Usage(format!("--mid-range start `{}`", parts[0])))?;
    let b = parts[1]
        .parse()
        .map_err(|_| CliError::Usage(format!("--mid-range end `{}`", parts[1])))?;
    Ok((a, b))
}

fn apply_ablation(run: &mut RunConfig, ab: &AblationArgs) -> Result<(), CliError> {
    if let Some(p) = &ab.mask_pattern {
        run.mask.pattern = match p.as_str() {
            "random" => MaskPattern::Random,
            "contiguous" => MaskPattern::Contiguous,
            _ => unreachable!("clap validates the pattern"),
        };
    }
    if let Some(mr) = &ab.mid_range {
        let (a, b) = parse_mid_range(mr)?;
        run.model.mid_start = a;
        run.model.mid_end = b;
    }
    if let Some(e) = &ab.encoder {
        run.factor.encoder = match e.as_str() {
            "gated-mlp" => diva_core::factorization::EncoderKind::GatedMlp,
            "linear-ln" => diva_core::factorization::EncoderKind::LinearLn,
            _ => unreachable!("clap validates the encoder"),
        };
    }
    Ok(())
}

fn load_data(path: &Path, run: &mut RunConfig) -> Result<Vec<synthdata::PairedSample>, CliError> {
    let (header, samples) = synthdata::read_dataset(path)?;
    run.data = header.config();
    run.validate()?;
    Ok(samples)
}

fn write_report(w: &mut impl Write, r: &LossReport) {
    let _ = serde_json::to_writer(&mut *w, r);
    let _ = w.write_all(b"\n");
    let _ = w.flush();
}

fn run_training_command(
    name: &str,
    common: &Common,
    data: &Path,
    mutate: impl FnOnce(&mut RunConfig) -> Result<(), CliError>,
    trainer: impl FnOnce(
        &RunConfig,
        &[synthdata::PairedSample],
        u64,
        &mut dyn FnMut(&LossReport),
    ) -> diva_core::Result<TrainState<f32>>,
) -> Result<(), CliError> {
    let out = resolve_out(&common.out);
    let mut run = load_config(common)?;
    mutate(&mut run)?;
    let samples = load_data(data, &mut run)?;
    let mut manifest = RunManifest::new(name, common.seed, common.strict_deterministic, run.clone());
    manifest.outputs = ["manifest.json", "config.toml", "reports.jsonl", "state.ckpt"]
        .iter()
        .map(|s| out.join(s).display().to_string())
        .collect();

    with_manifest(&out.clone(), &mut manifest, |_m| {
        std::fs::write(out.join("config.toml"), run.to_toml())?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("reports.jsonl"))?);
        let state = trainer(&run, &samples, common.seed, &mut |r| write_report(&mut w, r))?;
        w.flush()?;
        save_checkpoint(&state, &out.join("state.ckpt"))?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { common, n } => {
            let out = resolve_out(&common.out);
            let mut run = load_config(&common)?;
            if let Some(n) = n {
                run.data.n_samples = n;
            }
            run.data.validate()?;
            let samples = synthdata::generate_dataset(&run.data, common.seed)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            synthdata::write_dataset(&out, &run.data, common.seed, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }

        Cmd::Stage1 {
            common,
            data,
            ablation,
        } => run_training_command(
            "stage1",
            &common,
            &data,
            |run| apply_ablation(run, &ablation),
            |run, samples, seed, on_report| run_stage1::<f32>(run, samples, seed, on_report),
        ),

        Cmd::Stage2 {
            common,
            data,
            from_stage1,
            no_uni,
            no_sg,
            ablation,
        } => {
            let from = from_stage1.ok_or_else(|| {
                CliError::Usage("stage2 requires --from-stage1 <checkpoint>".into())
            })?;
            let state = load_checkpoint::<f32>(&from)?;
            let base = state.run.clone();
            let has_config = common.config.is_some();
            run_training_command(
                "stage2",
                &common,
                &data,
                |run| {
                    // without an explicit config, inherit the stage-1 echo
                    if !has_config {
                        *run = base.clone();
                    }
                    apply_ablation(run, &ablation)?;
                    run.stage2.use_uni = !no_uni;
                    run.stage2.use_sg = !no_sg;
                    Ok(())
                },
                move |run, samples, _seed, on_report| run_stage2::<f32>(run, state, samples, on_report),
            )
        }

        Cmd::SftBaseline {
            common,
            data,
            ablation,
        } => run_training_command(
            "sft-baseline",
            &common,
            &data,
            |run| apply_ablation(run, &ablation),
            |run, samples, seed, on_report| run_sft_baseline::<f32>(run, samples, seed, on_report),
        ),

        Cmd::Eval { common, ckpt, data } => {
            let out = resolve_out(&common.out);
            let state = load_checkpoint::<f32>(&ckpt)?;
            let (header, samples) = synthdata::read_dataset(&data)?;
            {
                let mut d = header.config();
                d.n_samples = state.run.data.n_samples;
                if d != state.run.data {
                    return Err(CliError::Runtime(
                        "held-out dataset is incompatible with the checkpoint's data config".into(),
                    ));
                }
            }
            let mut manifest = RunManifest::new(
                "eval",
                common.seed,
                common.strict_deterministic,
                state.run.clone(),
            );
            manifest.outputs = vec![out.join("eval.json").display().to_string()];
            with_manifest(&out.clone(), &mut manifest, |_m| {
                let report = evaluate(&state, &samples, common.seed)?;
                let mut f = std::fs::File::create(out.join("eval.json"))?;
                serde_json::to_writer_pretty(&mut f, &report)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                f.write_all(b"\n")?;
                println!("{}", serde_json::to_string(&report).unwrap());
                Ok(())
            })
        }

        Cmd::Diagnose {
            common,
            ckpt,
            data,
            metrics,
            batch,
            cutoff,
        } => {
            for m in &metrics {
                if !["residual", "er", "grad-conflict", "freq"].contains(&m.as_str()) {
                    return Err(CliError::Usage(format!(
                        "--metrics: unknown metric `{m}` (expected residual, er, grad-conflict, freq)"
                    )));
                }
            }
            let out = resolve_out(&common.out);
            let state = load_checkpoint::<f32>(&ckpt)?;
            let (_, samples) = synthdata::read_dataset(&data)?;
            let take = batch.min(samples.len());
            let batch_refs: Vec<(usize, &synthdata::PairedSample)> =
                samples.iter().take(take).enumerate().collect();
            let mut manifest = RunManifest::new(
                "diagnose",
                common.seed,
                common.strict_deterministic,
                state.run.clone(),
            );
            with_manifest(&out.clone(), &mut manifest, |m| {
                let mut outputs = Vec::new();
                for metric in &metrics {
                    let (profiles, file) = match metric.as_str() {
                        "residual" => (
                            diagnostics::residual_profiles(&state, &batch_refs, common.seed, 0.95)?,
                            "residual.csv",
                        ),
                        "er" => (
                            diagnostics::er_profiles(&state, &batch_refs, common.seed)?,
                            "er_increment.csv",
                        ),
                        "grad-conflict" => (
                            diagnostics::grad_conflict_profile(&state, &batch_refs, common.seed)?,
                            "grad_conflict.csv",
                        ),
                        "freq" => (
                            diagnostics::freq_profiles(&state, &batch_refs, common.seed, cutoff)?,
                            "freq.csv",
                        ),
                        _ => unreachable!(),
                    };
                    diagnostics::write_profile_csv(&profiles, &out.join(file))?;
                    outputs.push(out.join(file).display().to_string());
                }
                m.outputs = outputs;
                Ok(())
            })
        }

        Cmd::ExportFactors {
            common,
            ckpt,
            data,
            pca,
        } => {
            let out = resolve_out(&common.out);
            let state = load_checkpoint::<f32>(&ckpt)?;
            let (_, samples) = synthdata::read_dataset(&data)?;
            let mut manifest = RunManifest::new(
                "export-factors",
                common.seed,
                common.strict_deterministic,
                state.run.clone(),
            );
            with_manifest(&out.clone(), &mut manifest, |m| {
                let csv = out.join("factors.csv");
                diagnostics::export_factors(&state, &samples, &csv)?;
                let mut outputs = vec![csv.display().to_string()];
                if pca {
                    let coords_path = out.join("factors_pca2d.csv");
                    write_shared_pca(&csv, &coords_path)?;
                    outputs.push(coords_path.display().to_string());
                }
                m.outputs = outputs;
                Ok(())
            })
        }
    }
}

/// Project the exported shared-factor rows to 2-D and write
/// sample_id,flow,layer,x,y.
fn write_shared_pca(factors_csv: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(factors_csv)?;
    let mut keys = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts[6] != "sh" {
            continue;
        }
        keys.push((parts[0].to_string(), parts[4].to_string(), parts[5].to_string()));
        rows.push(parts[7..].iter().map(|v| v.parse::<f64>().unwrap_or(0.0)).collect());
    }
    if rows.len() < 3 {
        return Err(CliError::Runtime(
            "not enough shared-factor rows for a 2-D projection".into(),
        ));
    }
    let d = rows[0].len();
    let m = diva_core::mat::Mat::from_fn(rows.len(), d, |r, c| rows[r][c]);
    let coords = diagnostics::pca_project2d(&m)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "sample_id,flow,layer,x,y").map_err(CliError::from)?;
    for (i, (sid, flow, layer)) in keys.iter().enumerate() {
        writeln!(f, "{sid},{flow},{layer},{},{}", coords.at(i, 0), coords.at(i, 1))
            .map_err(CliError::from)?;
    }
    f.flush()?;
    Ok(())
}
