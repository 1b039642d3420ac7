use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cohpio::baselines::DmaMode;
use cohpio::config::{Config, KEYS};
use cohpio::explore::{case_passes, explore, verification_suite};
use cohpio::ffwd::{ff_bench_real, FfRealConfig, FfSim};
use cohpio::matrix::{run_matrix, series, write_csv, write_summary, Series};
use cohpio::stats::percentiles;
use cohpio::stress::{stress_run, StressConfig, StressReport};
use cohpio::workloads::offload::crossover_batches;
use cohpio::workloads::{bloom_crossover, ExperimentResult, ExperimentSpec, Transport, Workload};
use cohpio::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VIOLATION: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "cohpio",
    version,
    about = "Coherence-based CPU/device messaging: simulate, benchmark, verify"
)]
struct Cli {
    /// TOML file of config keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, last wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write raw and summary CSV files into this directory.
    #[arg(long, global = true, value_name = "DIR")]
    csv: Option<PathBuf>,
    /// Iterations per matrix cell.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Link and DMA noise.
    #[arg(long, global = true)]
    jitter: Option<Toggle>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a benchmark matrix.
    #[command(subcommand)]
    Bench(Bench),
    /// Exhaustively explore small protocol configurations, then run
    /// randomized stress runs.
    Verify {
        /// Randomized runs after the exhaustive suite.
        #[arg(long, default_value_t = 1000)]
        random_runs: u64,
    },
    /// Print the calibrated constants and how each was derived.
    Calibrate,
}

#[derive(Subcommand, Debug)]
enum Bench {
    /// Accelerator invocation over every transport.
    Invoke(SizeArgs),
    /// NIC receive and transmit.
    Nic(SizeArgs),
    /// Cache-line message passing, simulated and on real threads.
    Ffwd(FfwdArgs),
    /// Bloom filter and filter-chain offload against the CPU.
    Offload,
}

#[derive(Args, Debug)]
struct SizeArgs {
    /// Comma-separated payload sizes in bytes.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
}

#[derive(Args, Debug)]
struct FfwdArgs {
    /// Cores for the two real threads, e.g. `0,1`.
    #[arg(long, value_name = "A,B")]
    pin: Option<String>,
    /// Messages sent through the simulated channel.
    #[arg(long, default_value_t = 1000)]
    sim_messages: usize,
    /// Skip the real-thread run.
    #[arg(long)]
    sim_only: bool,
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Usage(String),
    Violation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = match &f {
                Failure::Lib(Error::Config { .. }) => EXIT_CONFIG,
                Failure::Lib(Error::Io(_) | Error::Csv(_)) => EXIT_IO,
                Failure::Lib(_) => EXIT_OTHER,
                Failure::Usage(_) => EXIT_CONFIG,
                Failure::Violation(_) => EXIT_VIOLATION,
            };
            match f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Usage(m) | Failure::Violation(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(t) = cli.jitter {
        let v = matches!(t, Toggle::On);
        overrides.push(format!("sim.jitter={v}"));
        overrides.push(format!("dma.jitter={v}"));
    }
    Config::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Bench(b) => bench(cli, &cfg, b),
        Command::Verify { random_runs } => verify(&cfg, *random_runs),
        Command::Calibrate => calibrate(&cfg),
    }
}

fn bench(cli: &Cli, cfg: &Config, b: &Bench) -> Outcome {
    match b {
        Bench::Invoke(a) => {
            let sizes = sizes_or(&a.sizes, &(4..=16).map(|p| 1usize << p).collect::<Vec<_>>());
            let specs = matrix(
                cfg,
                &[Workload::Invoke],
                &Transport::COMPARED,
                &sizes,
                cli.iters.unwrap_or(100),
            );
            let results = run_matrix(cfg, &specs)?;
            print_results(&results);
            emit(cli.csv.as_deref(), "invoke", &series(&results))
        }
        Bench::Nic(a) => {
            let sizes = sizes_or(&a.sizes, &[64, 1536, 9600]);
            let specs = matrix(
                cfg,
                &[Workload::NicRx, Workload::NicTx],
                &Transport::COMPARED,
                &sizes,
                cli.iters.unwrap_or(1000),
            );
            let results = run_matrix(cfg, &specs)?;
            print_results(&results);
            emit(cli.csv.as_deref(), "nic", &series(&results))
        }
        Bench::Offload => offload(cli, cfg),
        Bench::Ffwd(a) => ffwd(cli, cfg, a),
    }
}

fn sizes_or(given: &[usize], default: &[usize]) -> Vec<usize> {
    if given.is_empty() {
        default.to_vec()
    } else {
        given.to_vec()
    }
}

fn matrix(
    cfg: &Config,
    workloads: &[Workload],
    transports: &[Transport],
    sizes: &[usize],
    iters: usize,
) -> Vec<ExperimentSpec> {
    let mut specs = Vec::new();
    for &workload in workloads {
        for &size in sizes {
            for &transport in transports {
                specs.push(ExperimentSpec {
                    workload,
                    transport,
                    size,
                    iters,
                    seed: cfg.seed(),
                });
            }
        }
    }
    specs
}

fn print_results(results: &[ExperimentResult]) {
    println!(
        "{:<20} {:<13} {:>7} {:>11} {:>11} {:>11} {:>11} {:>12}",
        "experiment", "transport", "size", "p50_ns", "p95_ns", "p99_ns", "p100_ns", "MiB/s"
    );
    for r in results {
        let s = &r.summary;
        println!(
            "{:<20} {:<13} {:>7} {:>11} {:>11} {:>11} {:>11} {:>12.1}",
            r.spec.workload.name(),
            r.spec.transport.name(),
            r.spec.size,
            s.p50,
            s.p95,
            s.p99,
            s.p100,
            r.throughput_bytes_per_s / (1024.0 * 1024.0)
        );
    }
}

fn emit(dir: Option<&Path>, name: &str, rows: &[Series<'_>]) -> Outcome {
    if let Some(dir) = dir {
        let (raw, summary) = write_csv(dir, name, rows)?;
        println!("wrote {} and {}", raw.display(), summary.display());
    }
    Ok(())
}

fn offload(cli: &Cli, cfg: &Config) -> Outcome {
    let iters = cli.iters.unwrap_or(10);
    let mut transports = vec![Transport::Cpu];
    transports.extend(Transport::COMPARED);
    let mut specs = matrix(
        cfg,
        &[Workload::OffloadBloom],
        &transports,
        &crossover_batches(),
        iters,
    );
    let chain_sizes: Vec<usize> = (7..=16).map(|p| 1usize << p).collect();
    specs.extend(matrix(
        cfg,
        &[Workload::OffloadFilterchain],
        &transports,
        &chain_sizes,
        iters,
    ));
    let results = run_matrix(cfg, &specs)?;
    print_results(&results);
    for t in Transport::COMPARED {
        let c = bloom_crossover(cfg, t)?;
        match c.batch {
            Some(b) => println!("bloom crossover {}: device faster from batch {b}", t.name()),
            None => println!("bloom crossover {}: device never faster", t.name()),
        }
    }
    emit(cli.csv.as_deref(), "offload", &series(&results))
}

fn parse_pin(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || {
        Failure::Usage(format!(
            "--pin expects two core numbers like 0,1, got {s:?}"
        ))
    };
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn ffwd(cli: &Cli, cfg: &Config, a: &FfwdArgs) -> Outcome {
    let pin = a.pin.as_deref().map(parse_pin).transpose()?;
    if a.sim_messages == 0 {
        return Err(Failure::Usage("--sim-messages must be at least 1".into()));
    }

    let mut sim = FfSim::from_config(cfg, 0);
    let payload_len = sim.max_payload();
    let mut lat = Vec::with_capacity(a.sim_messages);
    let mut max_rt = 0;
    for i in 0..a.sim_messages {
        let payload: Vec<u8> = (0..payload_len).map(|j| (i + j) as u8).collect();
        let m = sim.send(&payload)?;
        if m.payload != payload || m.seq != i as u64 + 1 {
            return Err(Failure::Lib(Error::Protocol(format!(
                "message {} arrived damaged",
                m.seq
            ))));
        }
        max_rt = max_rt.max(m.round_trips());
        lat.push(m.latency_ns);
    }
    let sim_summary = percentiles(&lat)?;
    println!(
        "sim: {} messages, p50 {} ns, p100 {} ns, at most {max_rt} round trips per message",
        sim_summary.n, sim_summary.p50, sim_summary.p100
    );
    let sim_rows = [Series {
        experiment: "ffwd_sim",
        transport: "coherent_line",
        size: payload_len,
        latencies: &lat,
        summary: sim_summary,
        throughput_bytes_per_s: throughput(payload_len, &lat),
    }];
    emit(cli.csv.as_deref(), "ffwd", &sim_rows)?;

    if a.sim_only {
        return Ok(());
    }
    let real_cfg = FfRealConfig {
        iterations: cli.iters.unwrap_or(1_000_000) as u64,
        payload: 64,
        pin,
    };
    let t0 = Instant::now();
    let stats = ff_bench_real(&real_cfg)?;
    let l = &stats.latency;
    println!(
        "real: {} messages in {:.2?}, lost {}, out of order {}, corrupted {}, p50 {} ns, p95 {} ns, p99 {} ns, p100 {} ns",
        stats.messages,
        t0.elapsed(),
        stats.lost,
        stats.out_of_order,
        stats.corrupted,
        l.p50,
        l.p95,
        l.p99,
        l.p100
    );
    if let Some(w) = &stats.warning {
        println!("real: warning: {w}");
    }
    // Wall-clock numbers: summary only, and kept apart from the reproducible files.
    if let Some(dir) = cli.csv.as_deref() {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let path = dir.join("ffwd_real_summary.csv");
        let transport = if stats.pinned {
            "threads_pinned"
        } else {
            "threads"
        };
        let row = Series {
            experiment: "ffwd_real",
            transport,
            size: real_cfg.payload,
            latencies: &[],
            summary: stats.latency,
            throughput_bytes_per_s: 0.0,
        };
        write_summary(std::fs::File::create(&path).map_err(Error::from)?, &[row])?;
        println!("wrote {}", path.display());
    }
    if stats.lost + stats.out_of_order + stats.corrupted > 0 {
        return Err(Failure::Violation(
            "real-thread channel lost or reordered messages".into(),
        ));
    }
    Ok(())
}

fn throughput(bytes: usize, lat: &[u64]) -> f64 {
    let total: u64 = lat.iter().sum();
    if total == 0 {
        0.0
    } else {
        bytes as f64 * lat.len() as f64 / (total as f64 / 1e9)
    }
}

fn verify(cfg: &Config, random_runs: u64) -> Outcome {
    let mut failed = Vec::new();
    for case in verification_suite() {
        let t0 = Instant::now();
        let report = explore(&case.config)?;
        let ok = case_passes(&case, &report);
        println!(
            "{} {:<46} states {:>7} terminal {:>5} stuck {:>3} violations {} ({:.2?})",
            if ok { "PASS" } else { "FAIL" },
            case.name,
            report.states,
            report.terminal,
            report.stuck,
            report.violations(),
            t0.elapsed()
        );
        if let Some(p) = report
            .first_problem
            .as_deref()
            .filter(|_| !ok || case.expect_stuck)
        {
            println!("     first problem: {p}");
        }
        if !ok {
            failed.push(case.name);
        }
    }
    if random_runs > 0 {
        let t0 = Instant::now();
        let mut total = StressReport::default();
        for i in 0..random_runs {
            total.merge(stress_run(&StressConfig {
                seed: cfg.seed().wrapping_add(i),
                ..StressConfig::default()
            }));
        }
        let ok = total.failures() == 0;
        println!(
            "{} {:<46} operations {} swmr {} payload {} other {} ({:.2?})",
            if ok { "PASS" } else { "FAIL" },
            format!("{random_runs} randomized runs"),
            total.operations,
            total.swmr_violations,
            total.payload_violations,
            total.other_failures,
            t0.elapsed()
        );
        if let Some(p) = &total.first_problem {
            println!("     first problem: {p}");
        }
        if !ok {
            failed.push("randomized runs");
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(format!(
            "verification failed: {}",
            failed.join(", ")
        )))
    }
}

/// How each calibrated constant follows from the latency targets it was fit to.
const DERIVATIONS: &[(&str, &str)] = &[
    ("link.one_way_ns", "invoke 900 ns = 2 round trips of (2 x one_way + dir.proc)"),
    ("dir.proc_ns", "same fit; one directory visit per round trip"),
    ("dev.shared_return_penalty_ns", "1600 - 900 ns between shared and exclusive return; 450 is the upgrade round trip, 250 residual"),
    ("dev.per_line_pipeline_ns", "(32 KiB / 2.19 GiB/s - 900 ns) / 255 extra lines"),
    ("dev.thrash_factor", "throughput at 64 KiB falls once the working set exceeds L1"),
    ("nic.rx_fixed_ns", "RX 64 B = 1050 ns: 450 pull round trip + 300 staging + 300 response"),
    ("nic.per_line_rx_ns", "(39430 - 1050) / 74 extra lines at 9600 B"),
    ("nic.tx_fixed_ns", "TX 64 B = 1060 ns with one line"),
    ("nic.per_line_tx_ns", "slope of TX between 64 and 9600 B"),
    ("pcie.read_rtt_ns", "9600 B read = 600 non-posted 16 B reads = 450 us"),
    ("pcie.write_fixed_ns", "64 B write = 340 ns: 280 fixed + 64 B at 1 B/ns"),
    ("pcie.write_stream_rate", "write slope between 1536 and 9600 B"),
    ("dma.desc_overhead_ns", "DMA invoke latency flat near 10 us up to 4 KiB"),
    ("dma.nic_rx_fixed_ns", "DMA RX at 64 B"),
    ("dma.nic_tx_fixed_ns", "DMA TX at 64 B"),
    ("bloom.cpu_per_element_ns", "CPU hashing cost per 128 B element"),
    ("bloom.dev_per_element_ns", "device hashing cost per 128 B element"),
];

fn calibrate(cfg: &Config) -> Outcome {
    println!("{:<30} {:>14}  derivation", "key", "value");
    for (key, how) in DERIVATIONS {
        println!("{:<30} {:>14}  {how}", key, cfg.get(key));
    }
    println!();
    println!("{:<30} {:>14}  meaning", "key", "value");
    for k in KEYS
        .iter()
        .filter(|k| !DERIVATIONS.iter().any(|(d, _)| d == &k.key))
    {
        println!("{:<30} {:>14}  {}", k.key, cfg.get(k.key), k.doc);
    }

    println!();
    println!("model check under this config:");
    let probes = [
        (Workload::Invoke, Transport::EciPio, 128, "invoke 128 B"),
        (Workload::Invoke, Transport::EciPio, 32768, "invoke 32 KiB"),
        (
            Workload::Invoke,
            Transport::PcieDma(DmaMode::Polled),
            64,
            "DMA invoke 64 B",
        ),
        (Workload::NicRx, Transport::EciPio, 64, "RX 64 B"),
        (Workload::NicRx, Transport::EciPio, 1536, "RX 1536 B"),
        (Workload::NicRx, Transport::EciPio, 9600, "RX 9600 B"),
        (Workload::NicTx, Transport::EciPio, 64, "TX 64 B"),
        (Workload::NicRx, Transport::PciePio, 9600, "PIO read 9600 B"),
        (Workload::NicTx, Transport::PciePio, 64, "PIO write 64 B"),
    ];
    let specs: Vec<ExperimentSpec> = probes
        .iter()
        .map(|&(workload, transport, size, _)| ExperimentSpec {
            workload,
            transport,
            size,
            iters: 1,
            seed: cfg.seed(),
        })
        .collect();
    let results = run_matrix(cfg, &specs)?;
    for (r, (_, _, _, label)) in results.iter().zip(probes) {
        let gib = r.throughput_bytes_per_s / f64::from(1u32 << 30);
        println!("  {label:<18} {:>10} ns  {gib:>7.3} GiB/s", r.summary.p50);
    }
    Ok(())
}
