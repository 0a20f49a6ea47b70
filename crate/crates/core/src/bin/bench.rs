//! Command-line front end: benchmark runs, scripted scenarios, history
//! checks, and standalone node and client processes for TCP clusters.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use optsva::bench::config::{parse_seed, NodeFileConfig, TransportKind};
use optsva::bench::report::{write_csv, write_csv_file};
use optsva::bench::{run_benchmark, scenarios, BenchConfig};
use optsva::client::{Client, ClientConfig, Outcome, RetryPolicy, TxnError};
use optsva::engine::Algorithm;
use optsva::history::check::{check_abort_accounting, check_serializable, check_version_order, Serializability};
use optsva::history::History;
use optsva::ids::NodeId;
use optsva::node::{Node, NodeConfig};
use optsva::object::{catalog, OperationClass, SharedObjectDef};
use optsva::transport::{TcpServer, TcpTransport};
use optsva::value::State;

#[derive(Parser)]
#[command(name = "bench", about = "Distributed transactional memory benchmark and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a distributed Eigenbench workload and report throughput.
    Run(RunArgs),
    /// Replay a scripted three-transaction scenario and check its ordering.
    Scenario {
        name: String,
        /// Also write the recorded history here.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Check a recorded history file.
    Check { history: PathBuf },
    /// Serve objects over TCP.
    Node(NodeArgs),
    /// Open a transaction on a remote object, then hold it.
    ClientHold(HoldArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Total number of clients.
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    record_history: Option<PathBuf>,
    #[arg(long)]
    transport: Option<TransportKind>,
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured listen address.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Object to host, as `id=type:initial` with type cell, counter or
    /// account. May be repeated.
    #[arg(long = "object")]
    objects: Vec<String>,
}

#[derive(Args)]
struct HoldArgs {
    /// Node to connect to, as `id@host:port`.
    #[arg(long)]
    node: String,
    #[arg(long)]
    object: String,
    #[arg(long, default_value_t = 100)]
    client_id: u32,
    #[arg(long, default_value_t = 200)]
    heartbeat_ms: u64,
    /// How long to hold the object before touching it again.
    #[arg(long, default_value_t = 3_600_000)]
    hold_ms: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Scenario { name, history } => scenario(&name, history),
        Command::Check { history } => check(history),
        Command::Node(args) => node(args),
        Command::ClientHold(args) => client_hold(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn run(args: RunArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => BenchConfig::from_file(path)?,
        None => BenchConfig::default(),
    };
    if let Some(a) = args.algorithm {
        config.algorithm = a;
    }
    if let Some(c) = args.clients {
        config.clients = c;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.transport {
        config.transport = t;
    }
    config.csv = args.csv.or(config.csv);
    config.record_history = args.record_history.or(config.record_history);
    let report = run_benchmark(&config)?;
    let row = report.row();
    match &config.csv {
        Some(path) => write_csv_file(path, &[row])?,
        None => write_csv(std::io::stdout().lock(), &[row])?,
    }
    if let (Some(path), Some(h)) = (&config.record_history, &report.history) {
        h.write_jsonl(path)?;
    }
    eprintln!(
        "{}: {} txns, {} ops in {:.2?}, {:.1} ops/s, aborts {} manual / {} forced",
        report.algorithm,
        report.committed_txns,
        report.committed_ops,
        report.wall,
        report.throughput_ops_s,
        report.manual_aborts,
        report.forced_aborts
    );
    Ok(ExitCode::SUCCESS)
}

fn scenario(name: &str, history: Option<PathBuf>) -> CliResult {
    let report = scenarios::run(name)?;
    print!("{report}");
    if let Some(path) = history {
        report.history.write_jsonl(&path)?;
    }
    Ok(if report.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn check(path: PathBuf) -> CliResult {
    let h = History::read_jsonl(&path)?;
    let mut ok = true;
    let versions = check_version_order(&h);
    println!("version order: {} violation(s)", versions.len());
    for v in &versions {
        println!("  {v:?}");
    }
    ok &= versions.is_empty();
    match check_serializable(&h) {
        Serializability::Serializable(order) => {
            let order: Vec<String> = order.iter().map(|t| t.to_string()).collect();
            println!("serializable: yes ({})", order.join(" "));
        }
        Serializability::NotSerializable => {
            println!("serializable: no");
            ok = false;
        }
        Serializability::Unchecked(why) => {
            println!("serializable: unchecked ({why})");
            ok = false;
        }
    }
    let aborts = check_abort_accounting(&h);
    println!(
        "transactions: {} ({} committed, {} manual aborts, {} forced aborts)",
        aborts.transactions, aborts.committed, aborts.manual, aborts.forced
    );
    for v in &aborts.violations {
        println!("  {v}");
    }
    ok &= aborts.ok();
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn parse_object(arg: &str) -> Result<(String, SharedObjectDef, State), String> {
    let (id, rest) = arg.split_once('=').ok_or_else(|| format!("`{arg}` is not id=type:initial"))?;
    let (ty, init) = rest.split_once(':').unwrap_or((rest, "0"));
    let init: i64 = init.parse().map_err(|e| format!("{arg}: {e}"))?;
    let (def, state) = match ty {
        "cell" => (catalog::cell(Duration::ZERO), catalog::cell_state(init)),
        "counter" => (catalog::counter(), catalog::counter_state(init)),
        "account" => (catalog::account(), catalog::account_state(init)),
        other => return Err(format!("unknown object type `{other}`")),
    };
    Ok((id.to_string(), def, state))
}

fn node(args: NodeArgs) -> CliResult {
    let mut config = NodeFileConfig::from_file(&args.config)?;
    if let Some(l) = args.listen {
        config.listen = l;
    }
    let node = Node::new(
        NodeId(config.id),
        NodeConfig {
            workers: config.workers,
            lease_timeout: Some(config.heartbeat_timeout),
        },
        None,
    );
    for spec in &args.objects {
        let (id, def, state) = parse_object(spec)?;
        node.register(id, def, state)?;
    }
    let server = TcpServer::bind(config.listen, node)?;
    println!("listening {}", server.local_addr());
    std::io::stdout().flush()?;
    loop {
        thread::park();
    }
}

fn client_hold(args: HoldArgs) -> CliResult {
    let (id, addr) = parse_seed(&args.node)?;
    let transport = Arc::new(TcpTransport::new([(NodeId(id), addr)]));
    let client = Client::new(
        transport,
        ClientConfig {
            id: args.client_id,
            algorithm: Algorithm::OptsvaCf,
            heartbeat: Some(Duration::from_millis(args.heartbeat_ms)),
            retry: RetryPolicy {
                max_attempts: 1,
                retry_forced: false,
            },
        },
    );
    let mut t = client.transaction();
    let stub = t.updates(args.object.as_str(), None)?;
    let method = stub
        .interface()
        .classes
        .iter()
        .find(|(_, c)| **c == OperationClass::Update)
        .map(|(m, _)| m.clone())
        .ok_or("object has no update method")?;
    let report = t.start(|tx| {
        tx.invoke(&stub, &method, 1)?;
        println!("held {}", tx.id());
        std::io::stdout().flush().ok();
        thread::sleep(Duration::from_millis(args.hold_ms));
        match tx.invoke(&stub, &method, 1) {
            Err(TxnError::Forced(why)) => {
                println!("forced {why}");
                std::io::stdout().flush().ok();
                Err(TxnError::Forced(why))
            }
            other => other.map(|_| ()),
        }
    })?;
    match report.outcome {
        Outcome::Committed(()) => println!("committed"),
        Outcome::Aborted(cause) => println!("aborted {cause:?}"),
    }
    Ok(ExitCode::SUCCESS)
}
