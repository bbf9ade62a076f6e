//! Command line: a small function-call REPL over the kit, plus fixture and
//! service subcommands.

mod parse;
mod repl;

use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::cleanroom::ExpertMode;
use crate::kit::KitError;
use crate::sandbox::{self, SandboxError, SandboxRoot};

pub use parse::{parse_line, Call, Statement, SyntaxError};
pub use repl::{kit_config, repl, run_lines, Interpreter, DETACH, PROMPT};

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub mode: ExpertMode,
    pub base_dir: PathBuf,
    pub sandbox: bool,
    pub script_file: Option<PathBuf>,
    pub timeout: Duration,
    pub site: Option<PathBuf>,
}

impl CliConfig {
    pub fn new(base_dir: PathBuf) -> Self {
        CliConfig {
            mode: ExpertMode::NonExpert,
            base_dir,
            sandbox: false,
            script_file: None,
            timeout: crate::cleanroom::DEFAULT_TIMEOUT,
            site: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("script {0} not found")]
    ScriptNotFound(PathBuf),
    #[error("unknown function {0:?}; enter \"help()\" for the list")]
    UnknownFunction(String),
    #[error("{0}")]
    BadArgs(String),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("shell() needs a terminal; use shell('command') in scripts")]
    NoTerminal,
    #[error("cannot start a shell: {0}")]
    SpawnFailed(String),
    #[error(transparent)]
    Kit(#[from] KitError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Service(#[from] crate::service::ServiceError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Kit(e) => e.exit_code(),
            CliError::Sandbox(SandboxError::Kit(e)) => e.exit_code(),
            CliError::Sandbox(_) | CliError::SpawnFailed(_) | CliError::Service(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "startkit", version, about = "Run development tasks in a clean, controlled shell")]
pub struct Args {
    /// Keep your own settings; only fill in what is missing.
    #[arg(long, global = true)]
    pub expert: bool,
    /// Work area (defaults to the current directory).
    #[arg(long, global = true)]
    pub base_dir: Option<PathBuf>,
    /// Use a generated sandbox site under <base-dir>/.startkit/sandbox.
    #[arg(long, global = true)]
    pub sandbox: bool,
    /// Software site to use (also STARTKIT_SITE).
    #[arg(long, env = "STARTKIT_SITE", global = true)]
    pub site: Option<PathBuf>,
    /// Run the commands in FILE instead of reading them interactively.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Per-command timeout in seconds.
    #[arg(long, global = true)]
    pub timeout: Option<u64>,
    #[command(subcommand)]
    pub command: Option<Cmd>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Fixture site management.
    #[command(subcommand)]
    Sandbox(SandboxCmd),
    /// Serve the catalog, invocations and event stream on a loopback port.
    Serve {
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
}

#[derive(Debug, Subcommand)]
pub enum SandboxCmd {
    /// Build (or refresh) a sandbox with site, reference, mirror and work dirs.
    Make { dir: PathBuf },
    /// Apply a scenario from the built-in corpus and write a receipt.
    Inject {
        dir: PathBuf,
        scenario: String,
        #[arg(long)]
        receipt: Option<PathBuf>,
    },
    /// Undo an injection.
    Revert { receipt: PathBuf },
    /// Run every corpus scenario in fresh sandboxes under DIR and report.
    Scenarios { dir: PathBuf },
}

impl Args {
    pub fn config(&self) -> CliConfig {
        let mut c = CliConfig::new(self.base_dir.clone().unwrap_or_else(repl::default_base_dir));
        c.mode = if self.expert { ExpertMode::Expert } else { ExpertMode::NonExpert };
        c.sandbox = self.sandbox;
        c.script_file = self.script.clone();
        c.site = self.site.clone();
        if let Some(t) = self.timeout {
            c.timeout = Duration::from_secs(t);
        }
        c
    }
}

fn sandbox_cmd(cmd: &SandboxCmd) -> Result<(), CliError> {
    match cmd {
        SandboxCmd::Make { dir } => {
            let root = SandboxRoot::make(dir)?;
            println!("site      {}", root.site.display());
            println!("reference {}", root.reference.display());
            println!("work      {}", root.work.display());
        }
        SandboxCmd::Inject { dir, scenario, receipt } => {
            let corpus = sandbox::load_corpus()?;
            let s = corpus
                .iter()
                .find(|s| &s.name == scenario)
                .ok_or_else(|| CliError::BadArgs(format!("no scenario named {scenario}")))?;
            let root = SandboxRoot::at(dir);
            let r = sandbox::inject(&s.name, &s.injections, &root)?;
            let path = receipt.clone().unwrap_or_else(|| dir.join(format!("{scenario}.receipt.json")));
            r.save(&path).map_err(SandboxError::from)?;
            println!("injected {scenario}; receipt {}", path.display());
            for (k, v) in &r.env {
                println!("export {k}={}", crate::cleanroom::shell_quote(v));
            }
        }
        SandboxCmd::Revert { receipt } => {
            let r = sandbox::InjectionReceipt::load(receipt).map_err(SandboxError::from)?;
            sandbox::revert(&r)?;
            println!("reverted {}", r.scenario);
        }
        SandboxCmd::Scenarios { dir } => {
            let mut failed = 0;
            for (i, s) in sandbox::load_corpus()?.iter().enumerate() {
                let report = sandbox::run_scenario(s, &dir.join(format!("{i:02}-{}", s.name)), None)?;
                let verdict = if report.passed() { "ok  " } else { "FAIL" };
                println!("{verdict} {}", report.summary());
                failed += usize::from(!report.passed());
            }
            if failed > 0 {
                return Err(CliError::BadArgs(format!("{failed} scenario(s) did not behave as declared")));
            }
        }
    }
    Ok(())
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let config = args.config();
    let result = match &args.command {
        None => return repl(&config),
        Some(Cmd::Sandbox(cmd)) => sandbox_cmd(cmd),
        Some(Cmd::Serve { port }) => serve_forever(&config, *port),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("==> ERROR: {e}");
            e.exit_code()
        }
    }
}

fn serve_forever(config: &CliConfig, port: u16) -> Result<(), CliError> {
    let kit = kit_config(config)?;
    let handle = crate::service::serve(crate::service::ServiceConfig { kit, port })?;
    println!("listening on {}", handle.local_addr());
    handle.wait();
    Ok(())
}
