use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use opgate_core::canonical::to_canonical_bytes;
use opgate_core::crypto::ChannelKey;
use opgate_core::remote_endpoint::{EndpointConfig, EndpointKeyring, RemoteEndpoint, VerificationProfile};
use opgate_core::risk_model::Policy;
use opgate_core::trusted_plane::{
    console, read_lines, verify_lines, ChainHead, HumanDecision, PlaneConfig, TrustedPlane,
};
use opgate_core::workload_harness::{
    emit_latency_report, init_fixtures_with, read_report, run_suite, EndpointSpec, Injection, Mode, RunConfig,
    SuiteReport,
};

#[derive(Parser)]
#[command(name = "harness", about = "Workload harness for the opgate authorization plane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Seed the fixture trees and write the manifest.
    Init {
        #[arg(long)]
        root: PathBuf,
        /// Endpoint ids to create fixture trees for.
        #[arg(long, value_delimiter = ',', default_value = "pi-01,hifive-01")]
        endpoints: Vec<String>,
    },
    /// Run workload tasks and check the expectations.
    Run(RunArgs),
    /// Verify an evidence log file.
    VerifyEvidence {
        #[arg(long)]
        file: PathBuf,
        /// Expected record count of the retained head.
        #[arg(long, requires = "head_hash")]
        head_count: Option<u64>,
        #[arg(long, requires = "head_count")]
        head_hash: Option<String>,
    },
    /// Latency breakdown from one or more run reports.
    Latency {
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the plane frame server and the console API.
    Serve(ServeArgs),
    /// Print the built-in default policy as canonical JSON.
    DefaultPolicy,
    /// Run one endpoint agent from its config file.
    Endpoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7410")]
        listen: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    root: PathBuf,
    /// Comma-separated task ids, or `all`.
    #[arg(long, default_value = "all")]
    tasks: String,
    #[arg(long, default_value = "protected")]
    mode: Mode,
    /// Policy document; the built-in default when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    inject: Injection,
    #[arg(long, default_value_t = 100)]
    injections: usize,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Answer for confirmation tickets when no operator console is used.
    #[arg(long, default_value = "deny")]
    confirm: HumanDecision,
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    evidence: Option<PathBuf>,
    /// Endpoints as id=profile, e.g. pi-01=fast-verify.
    #[arg(long, value_delimiter = ',')]
    endpoint: Vec<String>,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory for keys, keyrings and the evidence log.
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7400")]
    plane: String,
    #[arg(long, default_value = "127.0.0.1:7401")]
    console: String,
    /// Endpoint ids to provision keyrings for.
    #[arg(long, value_delimiter = ',', default_value = "pi-01,hifive-01")]
    endpoints: Vec<String>,
}

fn load_policy(path: Option<&Path>) -> anyhow::Result<Policy> {
    match path {
        Some(p) => Policy::load(p).with_context(|| format!("loading policy {}", p.display())),
        None => Ok(Policy::default()),
    }
}

fn parse_endpoints(specs: &[String]) -> anyhow::Result<Vec<EndpointSpec>> {
    if specs.is_empty() {
        return Ok(EndpointSpec::defaults());
    }
    specs
        .iter()
        .map(|s| {
            let (id, profile) = s.split_once('=').context("endpoint must be id=profile")?;
            let profile: VerificationProfile = profile.parse().map_err(anyhow::Error::msg)?;
            Ok(EndpointSpec::new(id, profile))
        })
        .collect()
}

fn print_report(report: &SuiteReport) {
    println!("{:<6} {:<10} {:<8} {:<8}", "task", "endpoint", "expected", "decision");
    for r in report.runs.iter().filter(|r| r.repeat == 0) {
        println!(
            "{:<6} {:<10} {:<8} {:<8}",
            r.task_id,
            r.endpoint.as_deref().unwrap_or("-"),
            r.expected.label(),
            r.decision.map(|d| d.label()).unwrap_or("-"),
        );
    }
    println!();
    let (table, _) = emit_latency_report(&report.samples);
    print!("{table}");
    if let Some(s) = &report.injection {
        println!(
            "\ninjection {}: {}/{} rejected, {} side effects",
            s.mode.as_str(),
            s.rejected,
            s.total,
            s.side_effects
        );
    }
    println!();
    for e in &report.expectations {
        println!("{} {}: {}", if e.passed { "PASS" } else { "FAIL" }, e.name, e.detail);
    }
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::new(&args.root);
    if args.tasks != "all" {
        cfg.tasks = Some(args.tasks.split(',').map(|s| s.trim().to_string()).collect());
    }
    cfg.mode = args.mode;
    cfg.policy = load_policy(args.policy.as_deref())?;
    cfg.inject = args.inject;
    cfg.injections = args.injections;
    cfg.seed = args.seed;
    cfg.repeats = args.repeats;
    cfg.confirm = args.confirm;
    cfg.parallel = args.parallel;
    cfg.report_path = args.report;
    cfg.evidence_path = args.evidence;
    cfg.endpoints = parse_endpoints(&args.endpoint)?;
    let report = run_suite(&cfg)?;
    print_report(&report);
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn verify_evidence(file: &Path, head: Option<ChainHead>) -> anyhow::Result<ExitCode> {
    let lines = read_lines(file).with_context(|| format!("reading {}", file.display()))?;
    let report = verify_lines(&lines, head.as_ref());
    println!("{}", String::from_utf8(to_canonical_bytes(&report)?)?);
    Ok(if report.valid {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn latency(reports: &[PathBuf], out: Option<&Path>) -> anyhow::Result<ExitCode> {
    if reports.is_empty() {
        bail!("no reports given");
    }
    let mut samples = Vec::new();
    for p in reports {
        samples.extend(
            read_report(p)
                .with_context(|| format!("reading {}", p.display()))?
                .samples,
        );
    }
    let (table, doc) = emit_latency_report(&samples);
    print!("{table}");
    if let Some(out) = out {
        fs::write(out, to_canonical_bytes(&doc)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    fs::create_dir_all(&args.state)?;
    let executor_key = ChannelKey::generate();
    fs::write(args.state.join("executor.key"), executor_key.to_hex())?;
    let mut cfg = PlaneConfig::new(load_policy(args.policy.as_deref())?, executor_key);
    cfg.evidence_path = Some(args.state.join("evidence.jsonl"));
    for id in &args.endpoints {
        let key = ChannelKey::generate();
        EndpointKeyring::new(id, key.clone()).save(&args.state.join(format!("{id}.keyring.json")))?;
        cfg.endpoints.insert(id.clone(), key);
    }
    let plane = Arc::new(TrustedPlane::new(cfg)?);
    let frames = plane.serve_frames(&args.plane)?;
    println!("plane frames on {}", frames.local_addr());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.console).await?;
        println!("console api on {}", listener.local_addr()?);
        console::serve(listener, plane).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn endpoint(config: &Path, listen: &str) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: EndpointConfig = serde_json::from_str(&text)?;
    let ep = Arc::new(RemoteEndpoint::from_config(&cfg)?);
    let server = ep.serve(listen)?;
    println!(
        "endpoint {} ({}) on {}",
        ep.endpoint_id(),
        ep.profile_name(),
        server.local_addr()
    );
    loop {
        std::thread::park();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { root, endpoints } => {
            let ids: Vec<&str> = endpoints.iter().map(String::as_str).collect();
            init_fixtures_with(&root, &ids)
                .map(|m| {
                    println!("{} fixture files under {}", m.files.len(), root.display());
                    ExitCode::SUCCESS
                })
                .map_err(anyhow::Error::from)
        }
        Command::Run(args) => run(args),
        Command::VerifyEvidence {
            file,
            head_count,
            head_hash,
        } => verify_evidence(
            &file,
            head_count.zip(head_hash).map(|(count, hash)| ChainHead { count, hash }),
        ),
        Command::Latency { reports, out } => latency(&reports, out.as_deref()),
        Command::Serve(args) => serve(args),
        Command::DefaultPolicy => {
            println!("{}", String::from_utf8_lossy(&Policy::default().to_canonical_json()));
            Ok(ExitCode::SUCCESS)
        }
        Command::Endpoint { config, listen } => endpoint(&config, &listen),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
