use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use super::parse::{parse_line, Call, Statement};
use super::{CliConfig, CliError};
use crate::events::EventKind;
use crate::interact::{Bridge, BridgeState};
use crate::kit::{Kit, KitConfig, KitError};
use crate::recipes::RecipeResult;
use crate::sandbox::SandboxRoot;

pub const PROMPT: &str = ">>> ";
pub const DETACH: &str = "detach";

const HELP: &[(&str, &str)] = &[
    ("help()", "show this list"),
    ("recipes()", "list the recipe catalog with inputs"),
    ("run('Options.txt')", "do everything needed to run the framework on an options file"),
    ("invoke('recipe', key=value, ...)", "run any recipe from the catalog"),
    ("script('recipe', file='x.sh', key=value, ...)", "write a standalone script repeating a recipe"),
    ("package('Name')", "create a new package in the work area"),
    ("packages()", "list packages in the work area"),
    ("update('Name', release='R', mode='M')", "move a package to another release or compile mode"),
    ("framework()", "start the framework interactively; 'detach' returns here"),
    ("shell()", "open a login shell with the kit's environment"),
    ("shell('command')", "run one command in the kit's shell"),
    ("transcript()", "show the commands the kit has run"),
    ("exit()", "leave"),
];

fn banner_version() -> String {
    let v = env!("CARGO_PKG_VERSION");
    v.strip_suffix(".0").unwrap_or(v).to_string()
}

/// Build the kit a CLI configuration describes.
pub fn kit_config(config: &CliConfig) -> Result<KitConfig, CliError> {
    let mut kc = KitConfig::new(&config.base_dir);
    kc.mode = config.mode;
    kc.timeout = config.timeout;
    kc.site = config.site.clone();
    if config.sandbox {
        let root = SandboxRoot::make(&config.base_dir.join(".startkit").join("sandbox"))?;
        kc.site = Some(root.site.clone());
        kc.fallback_sites = root.fallback_sites();
    }
    Ok(kc)
}

pub struct Interpreter<W: Write> {
    kit: Kit,
    out: W,
    status: i32,
    bridge: Option<Bridge>,
    interactive: bool,
    done: bool,
}

impl<W: Write> Interpreter<W> {
    pub fn new(config: &CliConfig, out: W, interactive: bool) -> Result<Self, CliError> {
        let kit = Kit::open(kit_config(config)?)?;
        Ok(Interpreter { kit, out, status: 0, bridge: None, interactive, done: false })
    }

    pub fn with_kit(kit: Kit, out: W, interactive: bool) -> Self {
        Interpreter { kit, out, status: 0, bridge: None, interactive, done: false }
    }

    pub fn kit(&mut self) -> &mut Kit {
        &mut self.kit
    }

    pub fn output(&self) -> &W {
        &self.out
    }

    /// Exit status of the most recent failure, 0 if nothing failed.
    pub fn status(&self) -> i32 {
        self.status
    }

    pub fn finished(&self) -> bool {
        self.done
    }

    pub fn attached(&self) -> bool {
        self.bridge.is_some()
    }

    pub fn banner(&mut self) {
        let _ = writeln!(self.out, "==>     : welcome to Startup Kit v{}", banner_version());
        let _ = writeln!(self.out, "==> NOTE: enter \"help()\" to receive help");
    }

    pub fn prompt(&self) -> &'static str {
        if self.bridge.is_some() {
            ""
        } else {
            PROMPT
        }
    }

    fn say(&mut self, text: &str) {
        let _ = writeln!(self.out, "{text}");
    }

    fn fail(&mut self, err: CliError) {
        self.status = err.exit_code();
        let _ = writeln!(self.out, "==> ERROR: {err}");
        if let CliError::Kit(KitError::Recipe(e)) = &err {
            if let Some(f) = e.failure() {
                let _ = self.out.write_all(&f.diagnostic);
                if !f.diagnostic.ends_with(b"\n") && !f.diagnostic.is_empty() {
                    let _ = writeln!(self.out);
                }
                if let Some(hint) = &f.hint {
                    let _ = writeln!(self.out, "==> HINT: {hint}");
                }
            }
        }
    }

    /// Handle one line of input.
    pub fn execute_line(&mut self, line: &str) {
        if self.bridge.is_some() {
            self.forward_to_framework(line);
            return;
        }
        match parse_line(line) {
            Ok(Statement::Empty) => {}
            Ok(Statement::Bare(word)) if word == DETACH => {}
            Ok(Statement::Bare(word)) => self.fail(CliError::UnknownFunction(word)),
            Ok(Statement::Call(call)) => {
                if let Err(e) = self.call(&call) {
                    self.fail(e);
                }
            }
            Err(e) => self.fail(e.into()),
        }
    }

    fn forward_to_framework(&mut self, line: &str) {
        let bridge = self.bridge.as_mut().expect("attached");
        if line.trim() == DETACH {
            let code = bridge.stop();
            self.bridge = None;
            self.say(&format!("==> detached from the framework (exit status {code})"));
            return;
        }
        match bridge.send_line(line) {
            Ok(reply) => {
                let closed = matches!(bridge.state(), BridgeState::Closed(_));
                if !reply.is_empty() {
                    let _ = writeln!(self.out, "{reply}");
                }
                if closed {
                    self.bridge = None;
                    self.say("==> the framework has exited");
                } else {
                    let _ = write!(self.out, "{}", crate::kit::FRAMEWORK_PROMPT.trim_start_matches('^'));
                    let _ = self.out.flush();
                }
            }
            Err(e) => {
                self.bridge = None;
                self.fail(CliError::Kit(e.into()));
            }
        }
    }

    fn recipe_done(&mut self, result: &RecipeResult, after_seq: u64) {
        for e in self.kit.events().snapshot().iter().filter(|e| e.seq > after_seq && e.kind == EventKind::Command && e.origin == "shell") {
            let _ = writeln!(self.out, "    $ {}", e.payload);
        }
        for w in result.warnings() {
            let _ = writeln!(self.out, "==> WARNING: {w}");
        }
        let steps = result.executed_steps().len();
        let _ = writeln!(self.out, "==> {}: ok ({steps} steps run)", result.recipe);
        for (path, sha) in &result.artifacts {
            let _ = writeln!(self.out, "    {path}  {}", &sha[..12]);
        }
    }

    fn one_arg<'c>(call: &'c Call, what: &str) -> Result<&'c str, CliError> {
        match call.args.as_slice() {
            [a] => Ok(a),
            _ => Err(CliError::BadArgs(format!("{}() takes exactly one {what}", call.name))),
        }
    }

    fn no_args(call: &Call) -> Result<(), CliError> {
        if call.args.is_empty() && call.kwargs.is_empty() {
            Ok(())
        } else {
            Err(CliError::BadArgs(format!("{}() takes no arguments", call.name)))
        }
    }

    fn call(&mut self, call: &Call) -> Result<(), CliError> {
        let kwargs: BTreeMap<String, String> = call.kwargs.iter().cloned().collect();
        match call.name.as_str() {
            "help" => {
                let width = HELP.iter().map(|(f, _)| f.len()).max().unwrap_or(0);
                for (f, what) in HELP {
                    let _ = writeln!(self.out, "  {f:width$}  {what}");
                }
            }
            "recipes" => {
                Self::no_args(call)?;
                for r in self.kit.catalog() {
                    let inputs: Vec<String> = r.inputs.iter().map(|i| format!("{}={}", i.name, i.default)).collect();
                    let _ = writeln!(self.out, "  {:10} [{}] {}  ({})", r.name, r.category, r.description, inputs.join(", "));
                }
            }
            "run" => {
                let file = Self::one_arg(call, "options file")?;
                let before = self.kit.events().last_seq();
                let result = self.kit.run_options(file)?;
                self.recipe_done(&result, before);
            }
            "invoke" => {
                let name = Self::one_arg(call, "recipe name")?;
                let before = self.kit.events().last_seq();
                let result = self.kit.invoke(name, &kwargs)?;
                self.recipe_done(&result, before);
            }
            "script" => {
                let name = Self::one_arg(call, "recipe name")?;
                let mut inputs = kwargs;
                let file = inputs.remove("file").unwrap_or_else(|| format!("{name}.sh"));
                let text = self.kit.script(name, &inputs)?;
                let path = self.kit.base_dir().join(&file);
                std::fs::write(&path, text).map_err(KitError::from)?;
                self.say(&format!("==> wrote {}", path.display()));
            }
            "package" => {
                let name = Self::one_arg(call, "package name")?;
                let skeleton = self.kit.new_package(name)?;
                for f in &skeleton.files {
                    let _ = writeln!(self.out, "    {}", f.path);
                }
                self.say(&format!("==> created package {name}"));
            }
            "packages" => {
                Self::no_args(call)?;
                for p in self.kit.packages()? {
                    let _ = writeln!(self.out, "  {p}");
                }
            }
            "update" => {
                let name = Self::one_arg(call, "package name")?;
                let changes = self.kit.update_package(name, kwargs.get("release").map(String::as_str), kwargs.get("mode").map(String::as_str))?;
                if changes.is_empty() {
                    self.say("==> nothing to change");
                }
                for c in &changes.changes {
                    let _ = writeln!(self.out, "    {} ({:?})", c.path, c.reason);
                }
            }
            "framework" => {
                Self::no_args(call)?;
                let bridge = self.kit.start_framework()?;
                let _ = write!(self.out, "{}", bridge.banner());
                let _ = self.out.flush();
                self.bridge = Some(bridge);
            }
            "shell" => match call.args.as_slice() {
                [] => {
                    let code = self.login_shell()?;
                    self.say(&format!("==> back in the kit (shell exit status {code})"));
                }
                [cmd] => {
                    let r = self.kit.shell(cmd)?;
                    let _ = self.out.write_all(&r.stdout);
                    let _ = self.out.write_all(&r.stderr);
                    if r.exit_code != 0 {
                        self.say(&format!("==> exit status {}", r.exit_code));
                    }
                }
                _ => return Err(CliError::BadArgs("shell() takes at most one command".into())),
            },
            "transcript" => {
                Self::no_args(call)?;
                let commands: Vec<String> = self.kit.session().history().to_vec();
                for c in commands {
                    let _ = writeln!(self.out, "$ {c}");
                }
            }
            "exit" | "quit" => self.done = true,
            other => return Err(CliError::UnknownFunction(other.to_string())),
        }
        Ok(())
    }

    /// A login shell with the session's environment and directory.
    fn login_shell(&mut self) -> Result<i32, CliError> {
        if !self.interactive || !std::io::stdin().is_terminal() {
            return Err(CliError::NoTerminal);
        }
        let env = self.kit.session().environment().map_err(KitError::from)?;
        let cwd = self.kit.session().current_dir().map_err(KitError::from)?;
        let shell = self.kit.session().shell().to_path_buf();
        let status = Command::new(&shell)
            .arg("-l")
            .env_clear()
            .envs(&env)
            .current_dir(cwd)
            .status()
            .map_err(|e| CliError::SpawnFailed(format!("{}: {e}", shell.display())))?;
        Ok(status.code().unwrap_or(2))
    }

    pub fn close(mut self) {
        if let Some(mut b) = self.bridge.take() {
            b.stop();
        }
        self.kit.close();
    }
}

/// Feed every line of `input` to the interpreter; returns the exit status.
pub fn run_lines<W: Write, R: BufRead>(interp: &mut Interpreter<W>, input: R, echo_prompt: bool) -> i32 {
    for line in input.lines() {
        if echo_prompt {
            let p = interp.prompt();
            let _ = write!(interp.out, "{p}");
            let _ = interp.out.flush();
        }
        let Ok(line) = line else { break };
        interp.execute_line(&line);
        if interp.finished() {
            break;
        }
    }
    interp.status()
}

/// Run the REPL on stdin/stdout, or a script file when configured.
pub fn repl(config: &CliConfig) -> i32 {
    let stdout = std::io::stdout();
    let script = match &config.script_file {
        Some(path) => match std::fs::File::open(path) {
            Ok(f) => Some(std::io::BufReader::new(f)),
            Err(_) => {
                let err = CliError::ScriptNotFound(path.clone());
                eprintln!("==> ERROR: {err}");
                return err.exit_code();
            }
        },
        None => None,
    };
    let mut interp = match Interpreter::new(config, stdout.lock(), script.is_none()) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("==> ERROR: {e}");
            return e.exit_code();
        }
    };
    let code = match script {
        Some(reader) => run_lines(&mut interp, reader, false),
        None => {
            interp.banner();
            let code = run_lines(&mut interp, std::io::stdin().lock(), true);
            let _ = writeln!(interp.out);
            code
        }
    };
    interp.close();
    code
}

pub fn default_base_dir() -> PathBuf {
    std::env::current_dir().unwrap_or_else(|_| Path::new(".").to_path_buf())
}
