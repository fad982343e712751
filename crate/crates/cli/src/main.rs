use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leakwatch::BinaryIdentity;
use leakwatch_cli::{
    cmd_db_flush, cmd_db_show, cmd_ingest, cmd_run_suite, cmd_suggest, overhead, parse_test_input,
    program_identity, read_program, render_db, render_ingest, render_overhead, render_report,
    CliError, Format, Phase, SuiteConfig, SuiteSource, EXIT_LEAKS, EXIT_OK,
};

/// Locates where leaked memory can be freed, from test runs.
#[derive(Parser)]
#[command(name = "leakwatch", version)]
struct Cli {
    /// Leak database directory [default: ~/.aw/db]
    #[arg(long, global = true, env = "AW_DB_ROOT")]
    db_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Worker threads for suite runs
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Exit with status 4 when the report lists leaks
    #[arg(long, global = true)]
    fail_on_leaks: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct IdentityArgs {
    /// Micro-program file; supplies name, directory and stamp
    #[arg(long, conflicts_with_all = ["name", "stamp"])]
    program: Option<PathBuf>,
    /// Binary name
    #[arg(long)]
    name: Option<String>,
    /// Absolute directory of the binary
    #[arg(long)]
    dir: Option<String>,
    /// Compile stamp of the binary
    #[arg(long)]
    stamp: Option<String>,
}

impl IdentityArgs {
    fn resolve(&self) -> Result<BinaryIdentity, CliError> {
        if let Some(path) = &self.program {
            let prog = read_program(path)?;
            return program_identity(&prog, path, self.dir.as_deref());
        }
        match (&self.name, &self.dir, &self.stamp) {
            (Some(n), Some(d), Some(s)) => BinaryIdentity::new(n.clone(), d.clone(), s.clone())
                .map_err(|e| CliError::Config(e.to_string())),
            _ => Err(CliError::Config(
                "identify the binary with --program, or with all of --name, --dir and --stamp"
                    .into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a suite twice per test and print fix suggestions
    Run {
        #[command(flatten)]
        identity: IdentityArgs,
        /// Directory of <test id>.jsonl event streams
        #[arg(long, conflicts_with = "program")]
        traces: Option<PathBuf>,
        /// Test input as ID=DECISIONS, e.g. t2=tf; replaces the program's tests
        #[arg(long = "input", requires = "program")]
        inputs: Vec<String>,
    },
    /// Run one pass over an event stream
    Ingest {
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        test_id: String,
        #[arg(long, value_enum)]
        phase: Phase,
    },
    /// Print fix suggestions from the stored database
    Suggest {
        #[command(flatten)]
        identity: IdentityArgs,
    },
    /// Inspect or reset a leak database
    Db {
        #[command(subcommand)]
        action: DbAction,
    },
    /// Instrumentation overhead in percent
    Overhead {
        /// Seconds with instrumentation
        #[arg(long)]
        instrumented: f64,
        /// Seconds without instrumentation
        #[arg(long)]
        baseline: f64,
    },
}

#[derive(Subcommand)]
enum DbAction {
    Show {
        #[command(flatten)]
        identity: IdentityArgs,
    },
    Flush {
        #[command(flatten)]
        identity: IdentityArgs,
    },
}

fn db_root(cli: &Cli) -> Result<PathBuf, CliError> {
    if let Some(root) = &cli.db_root {
        return Ok(root.clone());
    }
    std::env::var_os("HOME")
        .map(|home| PathBuf::from(home).join(".aw").join("db"))
        .ok_or_else(|| CliError::Config("HOME is not set; pass --db-root".into()))
}

fn execute(cli: &Cli) -> Result<i32, CliError> {
    let leak_status = |leaks: usize| {
        if cli.fail_on_leaks && leaks > 0 {
            EXIT_LEAKS
        } else {
            EXIT_OK
        }
    };
    match &cli.command {
        Command::Overhead {
            instrumented,
            baseline,
        } => {
            let pct =
                overhead(*instrumented, *baseline).map_err(|e| CliError::Config(e.to_string()))?;
            print!("{}", render_overhead(pct, cli.format));
            Ok(EXIT_OK)
        }
        Command::Run {
            identity,
            traces,
            inputs,
        } => {
            let source = match (&identity.program, traces) {
                (Some(path), None) => SuiteSource::Program {
                    path: path.clone(),
                    inputs: inputs
                        .iter()
                        .map(|s| parse_test_input(s))
                        .collect::<Result<_, _>>()?,
                    dir: identity.dir.clone(),
                },
                (None, Some(dir)) => SuiteSource::TraceDir {
                    dir: dir.clone(),
                    identity: identity.resolve()?,
                },
                _ => {
                    return Err(CliError::Config(
                        "run needs exactly one of --program and --traces".into(),
                    ))
                }
            };
            let config = SuiteConfig {
                source,
                db_root: db_root(cli)?,
                jobs: cli.jobs,
            };
            let (report, _) = cmd_run_suite(&config)?;
            print!("{}", render_report(&report, cli.format, cli.verbose));
            Ok(leak_status(report.leaks.len()))
        }
        Command::Ingest {
            identity,
            trace,
            test_id,
            phase,
        } => {
            let report = cmd_ingest(trace, &identity.resolve()?, test_id, &db_root(cli)?, *phase)?;
            print!("{}", render_ingest(&report, cli.format));
            Ok(EXIT_OK)
        }
        Command::Suggest { identity } => {
            let report = cmd_suggest(&identity.resolve()?, &db_root(cli)?)?;
            print!("{}", render_report(&report, cli.format, cli.verbose));
            Ok(leak_status(report.leaks.len()))
        }
        Command::Db { action } => {
            let db = match action {
                DbAction::Show { identity } => cmd_db_show(&identity.resolve()?, &db_root(cli)?)?,
                DbAction::Flush { identity } => cmd_db_flush(&identity.resolve()?, &db_root(cli)?)?,
            };
            print!("{}", render_db(&db, cli.format, cli.verbose));
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("leakwatch: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
