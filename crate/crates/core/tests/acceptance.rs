//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Tolerances are the constants below.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use optsva::bench::random::{generate_small, run_small, SmallConfig, SmallWorkload};
use optsva::bench::{run_benchmark, scenarios, BenchConfig};
use optsva::bench::config::TransportKind;
use optsva::client::{Client, ClientConfig, Outcome};
use optsva::engine::Algorithm;
use optsva::history::check::{check_abort_accounting, check_serializable, check_version_order};
use optsva::ids::NodeId;
use optsva::transport::TcpTransport;
use optsva::value::Value;

const VERSION_CORPUS: usize = 10_000;
const VERSION_BUDGET: Duration = Duration::from_secs(300);
const SERIAL_CORPUS: usize = 1_000;
const SERIAL_BUDGET: Duration = Duration::from_secs(600);
const IRREVOCABLE_RUNS: usize = 500;
const THROUGHPUT_RUNS: usize = 5;
const THROUGHPUT_GAP: f64 = 1.10;
const THROUGHPUT_BUDGET: Duration = Duration::from_secs(300);
const HEARTBEAT_TIMEOUT: Duration = Duration::from_millis(1000);
const RECOVERY_SLACK: Duration = Duration::from_secs(2);
const STRESS: Duration = Duration::from_secs(60);
/// Longest a single step may go without progress.
const WATCHDOG: Duration = Duration::from_secs(60);

struct Outcomes {
    failed: usize,
}

impl Outcomes {
    fn report(&mut self, id: &str, pass: bool, detail: impl AsRef<str>) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        std::io::stdout().flush().ok();
    }
}

/// Kills the process if no step reports progress for `WATCHDOG`.
#[derive(Clone)]
struct Watchdog {
    epoch: Instant,
    last: Arc<AtomicU64>,
    current: Arc<Mutex<&'static str>>,
    done: Arc<AtomicBool>,
}

impl Watchdog {
    fn start() -> Self {
        let w = Watchdog {
            epoch: Instant::now(),
            last: Arc::new(AtomicU64::new(0)),
            current: Arc::new(Mutex::new("")),
            done: Arc::new(AtomicBool::new(false)),
        };
        let v = w.clone();
        thread::spawn(move || loop {
            thread::sleep(Duration::from_secs(1));
            if v.done.load(Ordering::Relaxed) {
                return;
            }
            let idle = v.epoch.elapsed().as_millis() as u64 - v.last.load(Ordering::Relaxed);
            if idle > WATCHDOG.as_millis() as u64 {
                let step = *v.current.lock().unwrap();
                println!("FAIL {step}: watchdog fired after {idle} ms without progress");
                println!("FAIL 10: watchdog timeout");
                std::process::exit(1);
            }
        });
        w
    }

    fn enter(&self, step: &'static str) {
        *self.current.lock().unwrap() = step;
        self.tick();
    }

    fn tick(&self) {
        self.last.store(self.epoch.elapsed().as_millis() as u64, Ordering::Relaxed);
    }
}

fn corpus(seed: u64, n: usize, config: &SmallConfig) -> Vec<SmallWorkload> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_small(&mut rng, config)).collect()
}

/// Criteria 1, 3 and the corpus half of 10.
fn version_discipline(out: &mut Outcomes, dog: &Watchdog) {
    dog.enter("1");
    let started = Instant::now();
    let workloads = corpus(1, VERSION_CORPUS, &SmallConfig::default());
    let (mut violations, mut forced, mut txns) = (0, 0, 0);
    for w in &workloads {
        let run = run_small(w, Algorithm::OptsvaCf);
        violations += check_version_order(&run.history).len();
        forced += run.forced_aborts();
        txns += w.txns.len();
        dog.tick();
    }
    let elapsed = started.elapsed();
    out.report(
        "1",
        violations == 0 && elapsed < VERSION_BUDGET,
        format!("{VERSION_CORPUS} workloads, {txns} transactions, {violations} version-order violations in {elapsed:.1?}"),
    );
    out.report("3", forced == 0, format!("{forced} forced aborts with manual aborts disabled"));
}

fn serializability(out: &mut Outcomes, dog: &Watchdog) {
    dog.enter("2");
    let started = Instant::now();
    let config = SmallConfig {
        abort_probability: 0.2,
        ..SmallConfig::default()
    };
    let workloads = corpus(2, SERIAL_CORPUS, &config);
    let mut bad = Vec::new();
    for algorithm in Algorithm::ALL {
        let mut failures = 0;
        for w in &workloads {
            let h = run_small(w, algorithm).history;
            if !check_serializable(&h).is_serializable() || !check_abort_accounting(&h).ok() {
                failures += 1;
            }
            dog.tick();
        }
        if failures > 0 {
            bad.push(format!("{algorithm}: {failures}"));
        }
    }
    let elapsed = started.elapsed();
    out.report(
        "2",
        bad.is_empty() && elapsed < SERIAL_BUDGET,
        format!(
            "{SERIAL_CORPUS} workloads x {} algorithms in {elapsed:.1?}; failures [{}]",
            Algorithm::ALL.len(),
            bad.join(", ")
        ),
    );
}

fn cascade(out: &mut Outcomes) {
    let r = scenarios::run("cascade").expect("scenario runs");
    let acc = check_abort_accounting(&r.history);
    let manual_is_ti = r.history.of_txn(r.txns[0]).any(|e| {
        matches!(e.kind, optsva::history::EventKind::Abort { cause: optsva::history::AbortCause::Manual })
    });
    let restored = r.check("final x equals T_i's checkpoint").is_some_and(|c| c.ok());
    let forced_is_tj = r.check("T_j outcome").is_some_and(|c| c.ok());
    out.report(
        "4",
        acc.manual == 1 && acc.forced == 1 && manual_is_ti && forced_is_tj && restored,
        format!(
            "manual {} (T_i: {manual_is_ti}), forced {} (T_j: {forced_is_tj}), state restored: {restored}",
            acc.manual, acc.forced
        ),
    );
}

fn asynchrony(out: &mut Outcomes) {
    let r = scenarios::run("read-only-async").expect("scenario runs");
    let c = r.check("T_k accesses x before T_j's first read returns").expect("check exists");
    out.report("5a", c.ok(), format!("T_k access vs T_j first read response: {}", c.observed));

    let r = scenarios::run("last-write-async").expect("scenario runs");
    let [_, j, k] = r.txns;
    let y_first = r.check("T_j's y op starts before T_j accesses x").expect("check exists");
    let tk = r.responses(k, "x");
    let tj: Vec<Value> = r.responses(j, "x").into_iter().filter(|v| *v != Value::Unit).collect();
    let tk_reads_3 = tk.first() == Some(&Value::Int(3));
    let tj_reads_2 = tj == [Value::Int(2)];
    out.report(
        "5b",
        y_first.ok() && tk_reads_3 && tj_reads_2,
        format!(
            "y op before x access: {}; T_k reads {:?} (want 3); T_j later reads {:?} (want 2)",
            y_first.observed,
            tk.first(),
            tj
        ),
    );
}

fn irrevocability(out: &mut Outcomes, dog: &Watchdog) {
    dog.enter("6");
    let config = SmallConfig {
        abort_probability: 0.4,
        irrevocable_probability: 0.3,
        ..SmallConfig::default()
    };
    let mut workloads = corpus(6, IRREVOCABLE_RUNS, &config);
    // Irrevocable transactions never abort themselves; the aborts come from
    // the others.
    for w in &mut workloads {
        for t in &mut w.txns {
            t.abort &= !t.irrevocable;
        }
    }
    let (mut flagged, mut forced, mut background) = (0, 0, 0);
    for w in &workloads {
        let run = run_small(w, Algorithm::OptsvaCf);
        flagged += w.txns.iter().filter(|t| t.irrevocable).count();
        background += w.txns.iter().filter(|t| t.abort).count();
        forced += run.irrevocable_forced(w);
        dog.tick();
    }
    out.report(
        "6",
        forced == 0 && flagged > 0 && background > 0,
        format!("{IRREVOCABLE_RUNS} runs, {flagged} irrevocable transactions, {background} manual aborts, {forced} irrevocable forced aborts"),
    );
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn throughput(out: &mut Outcomes, dog: &Watchdog) {
    dog.enter("7");
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for read_ratio in [0.9, 0.1] {
        let m: Vec<f64> = [Algorithm::OptsvaCf, Algorithm::Sva, Algorithm::Glock]
            .into_iter()
            .map(|algorithm| {
                median(
                    (0..THROUGHPUT_RUNS as u64)
                        .map(|seed| {
                            let r = run_benchmark(&BenchConfig {
                                algorithm,
                                read_ratio,
                                seed: seed + 1,
                                ..BenchConfig::default()
                            })
                            .expect("benchmark runs");
                            dog.tick();
                            r.throughput_ops_s
                        })
                        .collect(),
                )
            })
            .collect();
        pass &= m[0] >= THROUGHPUT_GAP * m[1] && m[1] >= THROUGHPUT_GAP * m[2];
        detail.push(format!(
            "reads {:.0}%: optsva-cf {:.0} / sva {:.0} / glock {:.0} ops/s (gaps {:+.0}%, {:+.0}%)",
            read_ratio * 100.0,
            m[0],
            m[1],
            m[2],
            (m[0] / m[1] - 1.0) * 100.0,
            (m[1] / m[2] - 1.0) * 100.0
        ));
    }
    let elapsed = started.elapsed();
    out.report("7", pass && elapsed < THROUGHPUT_BUDGET, format!("{}; {elapsed:.1?}", detail.join("; ")));
}

/// Reads a child's stdout lines into a channel.
fn lines(child: &mut Child) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    let stdout = child.stdout.take().expect("piped stdout");
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                return;
            }
        }
    });
    rx
}

fn expect_line(rx: &mpsc::Receiver<String>, prefix: &str, within: Duration) -> Option<String> {
    let deadline = Instant::now() + within;
    loop {
        let left = deadline.checked_duration_since(Instant::now())?;
        match rx.recv_timeout(left) {
            Ok(l) if l.starts_with(prefix) => return Some(l),
            Ok(_) => {}
            Err(_) => return None,
        }
    }
}

fn signal(child: &Child, sig: &str) {
    Command::new("kill").arg(format!("-{sig}")).arg(child.id().to_string()).status().expect("kill runs");
}

fn hold(node: &str, id: u32) -> (Child, mpsc::Receiver<String>) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["client-hold", "--node", node, "--object", "x", "--heartbeat-ms", "100"])
        .args(["--client-id", &id.to_string()])
        .args(["--hold-ms", "1500"])
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn client");
    let rx = lines(&mut child);
    (child, rx)
}

/// Commits one increment on `x` and returns how long it took.
fn successor(addr: std::net::SocketAddr, id: u32) -> Result<Duration, String> {
    let client = Client::new(
        Arc::new(TcpTransport::new([(NodeId(0), addr)])),
        ClientConfig {
            id,
            algorithm: Algorithm::OptsvaCf,
            heartbeat: Some(Duration::from_millis(100)),
            ..ClientConfig::default()
        },
    );
    let started = Instant::now();
    let mut t = client.transaction();
    let x = t.updates("x", Some(1)).map_err(|e| e.to_string())?;
    let r = t.start(|tx| tx.invoke(&x, "increment", ())).map_err(|e| e.to_string())?;
    match r.outcome {
        Outcome::Committed(_) => Ok(started.elapsed()),
        Outcome::Aborted(c) => Err(format!("successor aborted: {c:?}")),
    }
}

fn fault_tolerance(out: &mut Outcomes) {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = dir.path().join("node.conf");
    std::fs::write(
        &cfg,
        format!("id = 0\nlisten = 127.0.0.1:0\nheartbeat_timeout_ms = {}\n", HEARTBEAT_TIMEOUT.as_millis()),
    )
    .expect("write config");
    let mut node = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["node", "--config"])
        .arg(&cfg)
        .args(["--object", "x=counter:0"])
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn node");
    let node_rx = lines(&mut node);
    let result = (|| -> Result<String, String> {
        let addr: std::net::SocketAddr = expect_line(&node_rx, "listening ", Duration::from_secs(10))
            .ok_or("node did not start")?["listening ".len()..]
            .parse()
            .map_err(|e| format!("{e}"))?;
        let seed = format!("0@{addr}");
        let bound = HEARTBEAT_TIMEOUT + RECOVERY_SLACK;

        // A killed client.
        let (mut a, a_rx) = hold(&seed, 100);
        expect_line(&a_rx, "held", Duration::from_secs(10)).ok_or("first client never held x")?;
        a.kill().map_err(|e| e.to_string())?;
        a.wait().ok();
        let killed = successor(addr, 1)?;

        // A client that stops and later resumes.
        let (mut b, b_rx) = hold(&seed, 101);
        expect_line(&b_rx, "held", Duration::from_secs(10)).ok_or("second client never held x")?;
        signal(&b, "STOP");
        let paused = successor(addr, 2);
        signal(&b, "CONT");
        let paused = paused?;
        let forced = expect_line(&b_rx, "forced", Duration::from_secs(10)).is_some();
        let ended = expect_line(&b_rx, "aborted", Duration::from_secs(10));
        b.wait().ok();
        let ok = killed < bound && paused < bound && forced && ended.as_deref() == Some("aborted Forced");
        let detail = format!(
            "successor after kill -9 committed in {killed:.2?}, after SIGSTOP in {paused:.2?} (bound {bound:.1?}); resumed client forced: {forced}, {}",
            ended.unwrap_or_else(|| "no outcome".into())
        );
        if ok {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    node.kill().ok();
    node.wait().ok();
    match result {
        Ok(d) => out.report("8", true, d),
        Err(d) => out.report("8", false, d),
    }
}

fn transparency(out: &mut Outcomes) {
    let configs = [
        // Private data only: the reads do not depend on interleaving.
        BenchConfig {
            ops_hot: 0,
            ops_mild: 8,
            ops_cold: Some(2),
            read_ratio: 0.5,
            op_latency_ms: 0.0,
            seed: 9,
            ..BenchConfig::default()
        },
        // One client on the shared arrays.
        BenchConfig {
            clients: 1,
            read_ratio: 0.5,
            op_latency_ms: 0.0,
            seed: 9,
            ..BenchConfig::default()
        },
    ];
    let mut pass = true;
    let mut reads = 0;
    for c in configs {
        let a = run_benchmark(&c).expect("in-process run");
        let b = run_benchmark(&BenchConfig {
            transport: TransportKind::Tcp,
            ..c
        })
        .expect("tcp run");
        pass &= a.reads_per_client == b.reads_per_client && a.committed_ops == b.committed_ops;
        reads += a.reads_per_client.values().map(Vec::len).sum::<usize>();
    }
    out.report("9", pass && reads > 0, format!("{reads} committed reads compared, identical: {pass}"));
}

/// Contended benchmark rounds over every algorithm, alternating with small
/// randomized runs that abort. Benchmark rounds carry no manual aborts:
/// forced retries after cascades can run out of attempts under this much
/// contention, which is starvation, not a deadlock.
fn stress(out: &mut Outcomes, dog: &Watchdog) {
    dog.enter("10");
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let small = SmallConfig {
        abort_probability: 0.3,
        ..SmallConfig::default()
    };
    let (mut rounds, mut txns, mut aborts) = (0u64, 0, 0);
    let mut errors = Vec::new();
    while started.elapsed() < STRESS {
        let algorithm = Algorithm::ALL[rounds as usize % Algorithm::ALL.len()];
        match run_benchmark(&BenchConfig {
            algorithm,
            clients: 12,
            hot_array_size: 3,
            ops_hot: 6,
            read_ratio: 0.5,
            locality_probability: 0.0,
            op_latency_ms: 0.0,
            txns_per_client: 20,
            seed: rounds + 1,
            ..BenchConfig::default()
        }) {
            Ok(r) => txns += r.committed_txns as usize,
            Err(e) => errors.push(format!("{algorithm}: {e}")),
        }
        for _ in 0..20 {
            let w = generate_small(&mut rng, &small);
            let run = run_small(&w, algorithm);
            let (c, m, f) = optsva::bench::random::tally(&run.reports);
            txns += c;
            aborts += m + f;
        }
        rounds += 1;
        dog.tick();
    }
    out.report(
        "10",
        errors.is_empty(),
        format!(
            "criterion-1 corpus finished; {rounds} contended rounds, {txns} commits, {aborts} aborts in {:.1?}, watchdog never fired; errors {errors:?}",
            started.elapsed()
        ),
    );
}

fn main() -> ExitCode {
    let mut out = Outcomes { failed: 0 };
    let dog = Watchdog::start();
    version_discipline(&mut out, &dog);
    serializability(&mut out, &dog);
    cascade(&mut out);
    asynchrony(&mut out);
    irrevocability(&mut out, &dog);
    dog.enter("7");
    throughput(&mut out, &dog);
    dog.enter("8");
    fault_tolerance(&mut out);
    dog.enter("9");
    transparency(&mut out);
    stress(&mut out, &dog);
    dog.done.store(true, Ordering::Relaxed);
    println!("{} criteria failed", out.failed);
    if out.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
