use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdml::archetypes::{conformance_check, preset, ArchetypeKind, VariantFlags};
use cdml::harness::{
    emit_scenario, parse_scenario, run_scenario, status_exit_code, write_outputs, HarnessError, ReportFormat,
    ScenarioConfig,
};
use cdml::parallel::par_map;

#[derive(Parser)]
#[command(name = "cdml", version, about = "Simulate collaborative distributed machine learning archetypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and write its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "CDML_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also write trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Parse a scenario and check it against its archetype.
    Validate { scenario: PathBuf },
    /// Built-in archetype presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Run every scenario matching a glob, in parallel.
    Sweep {
        pattern: String,
        #[arg(long, env = "CDML_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset scenario.
    Emit {
        archetype: String,
        /// Variant flag, `name` or `name=value`; repeatable.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Jsonl => ReportFormat::Jsonl,
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

fn run_one(cfg: &ScenarioConfig, out: &Path, format: Format, trace: bool) -> Result<i32, HarnessError> {
    let run = run_scenario(cfg)?;
    let dir = out.join(&cfg.name);
    write_outputs(&run, format.into(), trace, &dir)?;
    let r = &run.report;
    println!(
        "{}: {} after {} rounds, {} ticks -> {}",
        cfg.name,
        serde_json::to_value(r.status).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default(),
        r.rounds_completed,
        r.ticks,
        dir.display()
    );
    if let Some(reason) = &r.reason {
        println!("  reason: {reason}");
    }
    Ok(status_exit_code(r.status))
}

fn emit_preset(archetype: &str, flags: &[String]) -> Result<String, HarnessError> {
    let kind = ArchetypeKind::parse(archetype).ok_or_else(|| HarnessError::Config {
        path: "archetype".into(),
        message: format!("unknown archetype {archetype:?}"),
    })?;
    let mut variants = VariantFlags::default();
    for f in flags {
        variants.set(f).map_err(|message| HarnessError::Config {
            path: "variant".into(),
            message,
        })?;
    }
    let cfg = preset(kind, variants).map_err(HarnessError::Conformance)?;
    Ok(emit_scenario(&cfg))
}

fn sweep(pattern: &str, out: &Path, format: Format, trace: bool) -> Result<i32, HarnessError> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| HarnessError::Config {
            path: "pattern".into(),
            message: e.to_string(),
        })?
        .filter_map(Result::ok)
        .collect();
    if paths.is_empty() {
        return Err(HarnessError::Config {
            path: "pattern".into(),
            message: format!("no scenario matches {pattern:?}"),
        });
    }
    let results = par_map(&paths, |p| load(p).and_then(|cfg| run_scenario(&cfg).map(|run| (cfg, run))));
    let mut code = 0;
    for (path, result) in paths.iter().zip(results) {
        let this = match result {
            Ok((cfg, run)) => {
                let dir = out.join(&cfg.name);
                write_outputs(&run, format.into(), trace, &dir)?;
                println!("{}: {:?} after {} rounds", path.display(), run.report.status, run.report.rounds_completed);
                status_exit_code(run.report.status)
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                e.exit_code()
            }
        };
        if code == 0 {
            code = this;
        }
    }
    Ok(code)
}

fn dispatch(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            format,
            trace,
        } => {
            let mut cfg = load(&scenario)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            run_one(&cfg, &out, format, trace)
        }
        Command::Validate { scenario } => {
            let cfg = load(&scenario)?;
            println!("{}", conformance_check(&cfg));
            Ok(0)
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                for kind in ArchetypeKind::ALL {
                    println!("{:<16} variants: {}", kind.name(), kind.variant_names().join(", "));
                }
                Ok(0)
            }
            PresetAction::Emit { archetype, variants } => {
                print!("{}", emit_preset(&archetype, &variants)?);
                Ok(0)
            }
        },
        Command::Sweep {
            pattern,
            out,
            format,
            trace,
        } => sweep(&pattern, &out, format, trace),
    }
}

fn main() -> ExitCode {
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
