//! Command-line interface. Commands write to a caller-supplied writer and
//! return the process exit code, so they can be exercised in tests.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use scalewise_core::replay::replay;
use scalewise_core::script::{run_script, Script};

use crate::assets::{load_engine, load_kb, validate_catalog, AssetPaths};
use crate::jsonl::{log_path, read_log, verify_file, JsonlSink, VerifyFailure};
use crate::remote::{Endpoints, Remote};
use crate::service::{router, AppState, ServiceOptions};

#[derive(Parser, Debug)]
#[command(name = "scalewise", version, about = "Conversational psychometric scale recommendation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AssetArgs {
    /// Engine config JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of scale definition files.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Knowledge base JSON.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Lexicon JSON.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

impl AssetArgs {
    fn paths(&self) -> AssetPaths {
        AssetPaths { kb: self.kb.clone(), lexicon: self.lexicon.clone(), catalog: self.catalog.clone(), config: self.config.clone() }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    #[command(flatten)]
    pub assets: AssetArgs,
    #[arg(long, env = "SCALEWISE_BIND", default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, env = "SCALEWISE_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Where per-session audit logs are written.
    #[arg(long, env = "SCALEWISE_LOG_DIR", default_value = "logs")]
    pub log_dir: PathBuf,
    #[arg(long, env = "SCALEWISE_EXTRACTOR_URL")]
    pub extractor_url: Option<String>,
    #[arg(long, env = "SCALEWISE_RERANKER_URL")]
    pub reranker_url: Option<String>,
    #[arg(long, env = "SCALEWISE_REWRITER_URL")]
    pub rewriter_url: Option<String>,
    /// Notified whenever a session enters intervention.
    #[arg(long, env = "SCALEWISE_WEBHOOK_URL")]
    pub webhook_url: Option<String>,
    #[arg(long, default_value_t = 15)]
    pub keepalive_secs: u64,
    /// Disable the asynchronous risk monitor (turns are still checked).
    #[arg(long)]
    pub no_monitor: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Drive a scripted persona session and print its trace and metrics.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[command(flatten)]
        assets: AssetArgs,
        /// Also write the audit log to <dir>/<session_id>.jsonl.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Print metrics as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Re-execute a recorded session and compare every decision.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        assets: AssetArgs,
    },
    /// Check the hash chain of a recorded session.
    Verify {
        #[arg(long)]
        log: PathBuf,
    },
    /// Check every scale file in a directory; one finding per line.
    ValidateCatalog {
        dir: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Serve(args) => serve(args).map(|_| 0),
        Command::Simulate { script, assets, log_dir, json } => simulate(&script, &assets, log_dir.as_deref(), json, out),
        Command::Replay { log, assets } => replay_cmd(&log, &assets, out),
        Command::Verify { log } => verify_cmd(&log, out),
        Command::ValidateCatalog { dir, kb } => validate_cmd(&dir, kb.as_deref(), out),
    }
}

pub fn simulate(script_path: &Path, assets: &AssetArgs, log_dir: Option<&Path>, json: bool, out: &mut dyn Write) -> Result<i32> {
    let engine = Arc::new(load_engine(&assets.paths())?);
    let text = std::fs::read_to_string(script_path).with_context(|| format!("reading {}", script_path.display()))?;
    let script: Script = serde_json::from_str(&text).with_context(|| format!("parsing {}", script_path.display()))?;
    let sink = match log_dir {
        Some(dir) => {
            let path = log_path(dir, &script.session_id());
            Some(Box::new(JsonlSink::create(&path).with_context(|| format!("creating {}", path.display()))?) as Box<dyn scalewise_core::AuditSink>)
        }
        None => None,
    };
    let run = run_script(engine, &script, sink)?;
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&serde_json::json!({ "trace": run.trace, "metrics": run.metrics }))?)?;
        return Ok(0);
    }
    writeln!(out, "session {}", run.runner.session_id())?;
    for t in &run.trace {
        let mut line = format!("step {:>2} {:<14} turn {:>2} {:<14} risk {:<8}", t.step, t.action, t.turn, t.phase.to_string(), t.risk_level.to_string());
        if let Some(a) = &t.asked_attribute {
            line.push_str(&format!(" asked={a}"));
        }
        if !t.recommended.is_empty() {
            let ids: Vec<&str> = t.recommended.iter().map(|s| s.as_str()).collect();
            line.push_str(&format!(" recommended={}", ids.join(",")));
        }
        if let Some(i) = &t.item {
            line.push_str(&format!(" item={i}"));
        }
        if let Some(e) = &t.error {
            line.push_str(&format!(" [{e}]"));
        }
        writeln!(out, "{}", line.trim_end())?;
    }
    let m = &run.metrics;
    writeln!(out, "metrics:")?;
    writeln!(out, "  turns: {} (refine {})", m.turns, m.refine_turns)?;
    writeln!(out, "  first refinement turn: {}", opt(m.first_refinement_turn))?;
    writeln!(out, "  first recommendation turn: {}", opt(m.first_recommendation_turn))?;
    writeln!(out, "  override turns: {:?}", m.override_turns)?;
    writeln!(out, "  assessments completed: {}", m.assessments_completed)?;
    for (id, total, band) in &m.results {
        writeln!(out, "  result: {id} total {total} band {band}")?;
    }
    writeln!(out, "  rejected inputs: {}", m.rejected_inputs)?;
    writeln!(out, "  final phase: {}", m.final_phase.map(|p| p.to_string()).unwrap_or_default())?;
    writeln!(out, "  audit events: {}", m.audit_events)?;
    Ok(0)
}

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

pub fn replay_cmd(log: &Path, assets: &AssetArgs, out: &mut dyn Write) -> Result<i32> {
    let events = read_log(log)?;
    let engine = Arc::new(load_engine(&assets.paths())?);
    let report = match replay(&events, engine) {
        Ok(r) => r,
        Err(e) => {
            writeln!(out, "replay rejected: {e}")?;
            return Ok(2);
        }
    };
    writeln!(out, "session {}: {} inputs, {} events checked", report.session_id, report.inputs, report.events_checked)?;
    if !report.config_matches {
        writeln!(out, "note: config differs from the one recorded at genesis")?;
    }
    match &report.divergence {
        None => {
            writeln!(out, "ok: replay reproduced every event")?;
            Ok(0)
        }
        Some(d) => {
            writeln!(out, "diverged at seq {}", d.seq)?;
            writeln!(out, "  recorded: {}", d.recorded.as_deref().unwrap_or("<none>"))?;
            writeln!(out, "  replayed: {}", d.replayed.as_deref().unwrap_or("<none>"))?;
            Ok(1)
        }
    }
}

pub fn verify_cmd(log: &Path, out: &mut dyn Write) -> Result<i32> {
    match verify_file(log) {
        Ok(n) => {
            writeln!(out, "ok: {n} events")?;
            Ok(0)
        }
        Err(VerifyFailure::Broken(b)) => {
            writeln!(out, "broken at seq {}: {}", b.seq, b.reason)?;
            Ok(1)
        }
        Err(VerifyFailure::Io(e)) => Err(e.into()),
    }
}

pub fn validate_cmd(dir: &Path, kb: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let kb = load_kb(kb)?;
    let findings = validate_catalog(dir, &kb);
    for f in &findings {
        writeln!(out, "{f}")?;
    }
    if findings.is_empty() {
        writeln!(out, "ok: {} valid", dir.display())?;
        Ok(0)
    } else {
        Ok(1)
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let engine = Arc::new(load_engine(&args.assets.paths())?);
    let endpoints = Endpoints {
        extractor: args.extractor_url,
        reranker: args.reranker_url,
        rewriter: args.rewriter_url,
        webhook: args.webhook_url,
    };
    let options = ServiceOptions {
        log_dir: Some(args.log_dir.clone()),
        keepalive: Duration::from_secs(args.keepalive_secs.max(1)),
        monitor: !args.no_monitor,
    };
    let addr: SocketAddr = format!("{}:{}", args.bind, args.port).parse().context("bind address")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let remote = Remote::new(endpoints, tokio::runtime::Handle::current());
        let state = AppState::new(engine, remote, options);
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, log_dir = %args.log_dir.display(), "serving");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
