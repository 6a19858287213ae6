use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use specguard_core::sim::simulate;
use specguard_core::{
    analyze, parse_program, print_program, repair_program, AnalysisConfig, CacheGeometry, Format, MispredictPolicy,
    Program, Report, SimConfig, SpecWindow, TaintConfig, TaintMode,
};

mod input;

#[derive(Parser)]
#[command(name = "specguard", version, about = "Detect and fence speculative-execution gadgets in IR programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report Spectre and Meltdown findings.
    Analyze {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        opts: AnalysisOpts,
    },
    /// Insert fences before every detected secret read or speculative write
    /// and write FILE.patched.ir.
    Repair {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        opts: AnalysisOpts,
    },
    /// Run one program with a misprediction policy and print its trace as
    /// JSON lines.
    Simulate {
        file: PathBuf,
        /// Source bytes, region contents and privileged registers.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `all`, `none`, or SITE:DIR[,SITE:DIR...] with DIR one of
        /// correct, wrong, taken, fallthrough.
        #[arg(long, default_value = "none")]
        mispredict: MispredictPolicy,
        #[arg(long, default_value_t = specguard_core::DEFAULT_SEW)]
        sew: u32,
        #[arg(long = "cache-geometry", default_value = "64:8:64")]
        geometry: CacheGeometry,
        /// Allow a second misprediction inside a transient episode.
        #[arg(long)]
        nested: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Look for Meltdown reads and Prime+Probe attack code.
    ScanMalware {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        opts: AnalysisOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Text,
}

#[derive(Args, Clone)]
struct AnalysisOpts {
    #[arg(long)]
    mode: Option<TaintMode>,
    #[arg(long, default_value_t = specguard_core::DEFAULT_SEW)]
    sew: u32,
    /// TOML file with `sources = [...]` and optionally `mode`.
    #[arg(long)]
    sources: Option<PathBuf>,
    /// SETS:WAYS:LINE, needed for Prime+Probe scanning.
    #[arg(long = "cache-geometry")]
    geometry: Option<CacheGeometry>,
    /// Extra protected regions.
    #[arg(long, value_delimiter = ',')]
    protected: Vec<String>,
    #[arg(long, value_enum, default_value = "json")]
    format: OutFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl AnalysisOpts {
    fn config(&self) -> Result<AnalysisConfig> {
        let mut taint = match &self.sources {
            Some(p) => TaintConfig::from_toml(&read(p)?).with_context(|| p.display().to_string())?,
            None => TaintConfig::default(),
        };
        if let Some(m) = self.mode {
            taint.mode = m;
        }
        let window = SpecWindow::new(self.sew).context("--sew must be at least 1")?;
        Ok(AnalysisConfig { taint, window, geometry: self.geometry, protected: self.protected.clone() })
    }

    fn format(&self) -> Format {
        match self.format {
            OutFormat::Json => Format::Json,
            OutFormat::Text => Format::Text,
        }
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn load(p: &Path) -> Result<Program> {
    parse_program(&read(p)?).with_context(|| p.display().to_string())
}

fn name_of(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn render(reports: &[Report], format: Format) -> String {
    match format {
        Format::Json if reports.len() == 1 => reports[0].to_json(),
        Format::Json => serde_json::to_string_pretty(reports).expect("reports serialize"),
        Format::Text => reports.iter().map(Report::to_text).collect(),
    }
}

fn reports(files: &[PathBuf], config: &AnalysisConfig) -> Result<Vec<Report>> {
    files
        .par_iter()
        .map(|f| {
            let p = load(f)?;
            let a = analyze(&p, config).with_context(|| f.display().to_string())?;
            Ok(Report::new(&name_of(f), config, &a))
        })
        .collect()
}

fn patched_path(f: &Path) -> PathBuf {
    let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    f.with_file_name(format!("{stem}.patched.ir"))
}

/// Returns whether anything was found.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Analyze { files, opts } => {
            let rs = reports(&files, &opts.config()?)?;
            emit(&opts.out, &render(&rs, opts.format()))?;
            Ok(rs.iter().any(Report::has_findings))
        }
        Command::ScanMalware { files, opts } => {
            let rs = reports(&files, &opts.config()?)?;
            emit(&opts.out, &render(&rs, opts.format()))?;
            Ok(rs.iter().any(|r| !r.malware.is_empty()))
        }
        Command::Repair { files, opts } => {
            let config = opts.config()?;
            let results: Vec<(PathBuf, usize)> = files
                .par_iter()
                .map(|f| {
                    let fixed = repair_program(&load(f)?, &config).with_context(|| f.display().to_string())?;
                    let dst = patched_path(f);
                    std::fs::write(&dst, print_program(&fixed.program))
                        .with_context(|| format!("cannot write {}", dst.display()))?;
                    Ok((dst, fixed.fences()))
                })
                .collect::<Result<_>>()?;
            let text: String = match opts.format {
                OutFormat::Json => {
                    let v: Vec<_> = results
                        .iter()
                        .map(|(p, n)| serde_json::json!({ "patched": p.display().to_string(), "fences": n }))
                        .collect();
                    serde_json::to_string_pretty(&v).expect("json")
                }
                OutFormat::Text => {
                    results.iter().map(|(p, n)| format!("{}: {n} fence(s)\n", p.display())).collect()
                }
            };
            emit(&opts.out, &text)?;
            Ok(results.iter().any(|(_, n)| *n > 0))
        }
        Command::Simulate { file, input, mispredict, sew, geometry, nested, out } => {
            let p = load(&file)?;
            let inp = match &input {
                Some(i) => input::parse_input(&read(i)?).with_context(|| i.display().to_string())?,
                None => Default::default(),
            };
            let window = SpecWindow::new(sew).context("--sew must be at least 1")?;
            let config = SimConfig { window, geometry, policy: mispredict, nested, ..SimConfig::default() };
            let t = simulate(&p, &inp, &config)?;
            let mut text = String::new();
            for e in &t.events {
                text += &serde_json::to_string(e).expect("event serializes");
                text.push('\n');
            }
            let summary = serde_json::json!({
                "registers": t.registers,
                "faulted": t.faulted,
                "steps": t.steps,
            });
            text += &summary.to_string();
            text.push('\n');
            emit(&out, &text)?;
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
