//! Command-line front end. Exit codes: 0 ok, 2 invalid input, 3 a stage
//! failed, 4 shard verification found problems.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{self, ConfigError, JobConfig, Overrides};
use crate::export;
use crate::extractor::synthetic;
use crate::manifest;
use crate::pipeline::{self, ExecuteOptions, PipelineError, RunReport, Stage};
use crate::posepost::KeypointPreset;
use crate::registry::{Kind, Registry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "signpipe",
    version,
    about = "Preprocess sign-language corpora into training shards"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one job.
    Run(RunArgs),
    /// Run every job of an experiment file in order.
    Experiment(ExperimentArgs),
    /// Check a job config and print its run id and hash.
    Validate(ValidateArgs),
    /// Ingest a manifest and print it in canonical form, or summary stats.
    ManifestInspect(InspectArgs),
    /// Check shards against their index.
    ShardsVerify(VerifyArgs),
    /// List registered components.
    RegistryList(ListArgs),
    /// Serve the synthetic landmark backend over stdin/stdout.
    ExtractorServe,
}

#[derive(Debug, Args)]
pub struct OverrideArgs {
    /// Dotted override, e.g. `runtime.workers=4`. Repeatable; applied last.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub workers: Option<u32>,
    /// Recompute every stage.
    #[arg(long)]
    pub no_resume: bool,
    #[arg(long, env = "SIGNPIPE_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Job YAML file.
    #[arg(long, short, alias = "config")]
    pub job: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Abort the process right after this stage commits.
    #[arg(long, hide = true, value_name = "STAGE")]
    pub halt_after: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment YAML file.
    #[arg(long, short)]
    pub file: PathBuf,
    /// Keep going after a failed job.
    #[arg(long)]
    pub continue_on_error: bool,
    #[arg(long)]
    pub workers: Option<u32>,
    #[arg(long)]
    pub no_resume: bool,
    #[arg(long, env = "SIGNPIPE_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, short, alias = "config")]
    pub job: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub file: PathBuf,
    #[arg(long, default_value = "canonical_csv")]
    pub adapter: String,
    /// Print counts, splits and duration quartiles instead of rows.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// A run directory or its `shards/` directory.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Stage(String),
    Verify(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Stage(_) => EXIT_STAGE,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }

    fn line(&self) -> String {
        let (tag, msg) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Stage(m) => ("stage", m),
            CliError::Verify(m) => ("verify", m),
        };
        format!("error[{tag}]: {}", msg.replace('\n', " "))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Stage(e.to_string())
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    let mut out = io::stdout().lock();
    match cmd {
        Command::Run(args) => {
            let config = load_job(&args.job, &args.overrides)?;
            let opts = halt_options(args.halt_after.as_deref())?;
            let result = pipeline::execute_job(&config, &opts);
            let report_path = pipeline::run_dir(&config).join(RunReport::FILE_NAME);
            if report_path.exists() {
                let _ = writeln!(out, "report {}", report_path.display());
            }
            let report = result?;
            print_summary(&mut out, &report);
            Ok(EXIT_OK)
        }
        Command::Experiment(args) => {
            let mut exp = config::load_experiment(&args.file).map_err(|e| CliError::Validation(e.to_string()))?;
            exp.continue_on_error |= args.continue_on_error;
            for job in &mut exp.jobs {
                apply_flags(job, args.workers, args.no_resume, args.output_root.as_deref())?;
            }
            let opts = ExecuteOptions::default();
            let outcomes = pipeline::execute_experiment(&exp, &opts);
            let mut first_err = None;
            for o in outcomes {
                match o.result {
                    Ok(report) => {
                        let _ = writeln!(
                            out,
                            "job {} {} ok samples={}",
                            o.index, o.run_id, report.samples_exported
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(out, "job {} {} failed", o.index, o.run_id);
                        eprintln!("{}", CliError::from(e).line());
                        if first_err.is_none() {
                            first_err = Some(o.index);
                        }
                    }
                }
            }
            match first_err {
                None => Ok(EXIT_OK),
                Some(i) => Err(CliError::Stage(format!(
                    "experiment {}: job {i} failed",
                    exp.experiment_name
                ))),
            }
        }
        Command::Validate(args) => {
            let config = load_job(&args.job, &args.overrides)?;
            pipeline::validate_job(&config)?;
            let _ = writeln!(out, "run_id {}", pipeline::run_id(&config));
            let _ = writeln!(out, "config_hash {}", pipeline::job_hash(&config));
            Ok(EXIT_OK)
        }
        Command::ManifestInspect(args) => {
            let ingested = manifest::ingest(&args.adapter, &args.file, &Default::default())
                .map_err(|e| CliError::Validation(e.to_string()))?;
            if args.stats {
                let stats = manifest::manifest_stats(&ingested.manifest);
                let mut v = serde_json::to_value(&stats).expect("stats serialize");
                if let Value::Object(m) = &mut v {
                    m.insert("rejected".into(), ingested.rejects.len().into());
                }
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json"));
            } else {
                let mut w = csv::Writer::from_writer(&mut out);
                let _ = w.write_record(manifest::MANIFEST_HEADER);
                for r in &ingested.manifest.records {
                    let _ = w.write_record(r.row());
                }
                let _ = w.flush();
            }
            Ok(EXIT_OK)
        }
        Command::ShardsVerify(args) => {
            let dir = if args.dir.join(export::ShardIndex::FILE_NAME).exists() {
                args.dir.clone()
            } else {
                args.dir.join(Stage::Export.dir_name())
            };
            let report = export::verify_shards(&dir);
            let _ = writeln!(out, "shards {} samples {}", report.shards, report.samples);
            for p in &report.problems {
                let _ = writeln!(out, "problem: {p}");
            }
            if report.ok() {
                Ok(EXIT_OK)
            } else {
                Err(CliError::Verify(format!(
                    "{} problem(s) in {}",
                    report.problems.len(),
                    dir.display()
                )))
            }
        }
        Command::RegistryList(args) => {
            let reg = Registry::builtin();
            let kinds: Vec<Kind> = match &args.kind {
                Some(k) => vec![Kind::parse(k).ok_or_else(|| CliError::Validation(format!("unknown kind `{k}`")))?],
                None => Kind::ALL.to_vec(),
            };
            for k in kinds {
                for name in reg.list(k) {
                    let _ = writeln!(out, "{k}\t{name}");
                }
            }
            if args.kind.is_none() {
                for name in KeypointPreset::builtin_names() {
                    let _ = writeln!(out, "preset\t{name}");
                }
            }
            Ok(EXIT_OK)
        }
        Command::ExtractorServe => {
            let stdin = io::stdin().lock();
            synthetic::serve(stdin, out).map_err(|e| CliError::Stage(e.to_string()))?;
            Ok(EXIT_OK)
        }
    }
}

/// File, then flags, then `--set`, each later layer winning.
pub fn load_job(path: &Path, flags: &OverrideArgs) -> Result<JobConfig, ConfigError> {
    let mut tree = config::read_tree(path)?;
    let mut layer = Overrides::new();
    if let Some(w) = flags.workers {
        layer.insert("runtime.workers".into(), w.into());
    }
    if flags.no_resume {
        layer.insert("runtime.resume".into(), false.into());
    }
    if let Some(root) = &flags.output_root {
        layer.insert("runtime.output_root".into(), root.display().to_string().into());
    }
    tree = config::merge_overrides(tree, &layer)?;
    for s in &flags.set {
        let (k, v) = config::parse_override(s)?;
        tree = config::merge_overrides(tree, &Overrides::from([(k, v)]))?;
    }
    config::from_tree(tree)
}

fn apply_flags(
    job: &mut JobConfig,
    workers: Option<u32>,
    no_resume: bool,
    root: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(w) = workers {
        job.runtime.workers = w;
    }
    if no_resume {
        job.runtime.resume = false;
    }
    if let Some(root) = root {
        job.runtime.output_root = root.to_path_buf();
    }
    job.validate()?;
    Ok(())
}

fn halt_options(halt_after: Option<&str>) -> Result<ExecuteOptions, CliError> {
    let Some(name) = halt_after else {
        return Ok(ExecuteOptions::default());
    };
    let target = Stage::parse(name).ok_or_else(|| CliError::Validation(format!("unknown stage `{name}`")))?;
    Ok(ExecuteOptions {
        after_commit: Some(Box::new(move |stage| {
            if stage == target {
                eprintln!("halting after {stage}");
                std::process::abort();
            }
        })),
    })
}

fn print_summary(out: &mut impl Write, report: &RunReport) {
    let _ = writeln!(out, "run_id {}", report.run_id);
    for s in &report.stages {
        let _ = writeln!(
            out,
            "{:<12} in={} out={} rejected={}{}",
            s.stage.as_str(),
            s.counts.input,
            s.counts.out,
            s.counts.rejected,
            if s.reused { " (reused)" } else { "" }
        );
    }
    let _ = writeln!(
        out,
        "shards {} samples {}",
        report.shards.len(),
        report.samples_exported
    );
}
