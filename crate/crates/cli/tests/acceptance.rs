//! Acceptance harness: every criterion prints one PASS or FAIL line, and the
//! process exits nonzero if any failed.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use cohpio::baselines::DmaMode;
use cohpio::config::Config;
use cohpio::device::{ComputeFunction, Variant};
use cohpio::explore::{case_passes, explore, verification_suite};
use cohpio::ffwd::{ff_bench_real, FfRealConfig, FfSim};
use cohpio::machine::{Machine, SimParams};
use cohpio::stress::{stress_run, StressConfig, StressReport};
use cohpio::workloads::offload::BloomOffload;
use cohpio::workloads::{
    bloom_crossover, bloom_hashes, run_experiment, ExperimentSpec, Transport, Workload,
};
use cohpio::world::Topology;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn p50(
    cfg: &Config,
    workload: Workload,
    transport: Transport,
    size: usize,
    iters: usize,
) -> Result<u64, String> {
    let spec = ExperimentSpec {
        workload,
        transport,
        size,
        iters,
        seed: cfg.seed(),
    };
    run_experiment(cfg, &spec)
        .map(|r| r.summary.p50)
        .map_err(|e| e.to_string())
}

fn with(overrides: &[&str]) -> Config {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::load(None, &o).expect("valid overrides")
}

fn c1_invoke_latency() -> Check {
    let t0 = Instant::now();
    let opt = p50(
        &Config::default(),
        Workload::Invoke,
        Transport::EciPio,
        128,
        10,
    )?;
    let unopt = p50(
        &with(&["dev.exclusive_return=false"]),
        Workload::Invoke,
        Transport::EciPio,
        128,
        10,
    )?;
    let took = t0.elapsed();
    ensure(opt == 900, format!("optimized P50 {opt} ns, want 900"))?;
    ensure(
        unopt == 1600,
        format!("unoptimized P50 {unopt} ns, want 1600"),
    )?;
    ensure(took < Duration::from_secs(1), format!("took {took:.2?}"))?;
    Ok(format!("P50 900 / 1600 ns in {took:.2?}"))
}

fn c2_message_counts() -> Check {
    for (exclusive, want) in [(true, 4u64), (false, 6)] {
        let mut p = SimParams::default();
        p.device.exclusive_return = exclusive;
        let mut m = Machine::new(p, Topology::CpuDevice);
        let ch = m
            .open_channel(Variant::Bidirectional, 1, ComputeFunction::echo())
            .map_err(|e| e.to_string())?;
        for i in 0..1000u32 {
            let req = i.to_le_bytes();
            let t = m.invoke(ch, &req).map_err(|e| e.to_string())?;
            ensure(
                t.messages == want && t.one_way_traversals == want,
                format!(
                    "exclusive_return={exclusive} iteration {i}: {} messages, {} traversals, want {want}",
                    t.messages, t.one_way_traversals
                ),
            )?;
            ensure(t.data == req, format!("iteration {i}: response corrupted"))?;
        }
    }
    Ok("4 and 6 one-way messages on each of 1000 iterations".into())
}

fn c3_exhaustive() -> Check {
    let t0 = Instant::now();
    let mut notes = Vec::new();
    for case in verification_suite() {
        let r = explore(&case.config).map_err(|e| e.to_string())?;
        ensure(case_passes(&case, &r), format!("{}: {r:?}", case.name))?;
        ensure(
            r.states <= 200_000,
            format!("{}: {} states", case.name, r.states),
        )?;
        if case.config.n == 1
            && case.config.invocations == 1
            && !case.expect_stuck
            && case.config.exclusive_return
        {
            notes.push(format!("n=1 {} states, {} terminal", r.states, r.terminal));
        }
        if case.expect_stuck {
            notes.push(format!("hazard {} stuck", r.stuck));
        }
    }
    let out = Command::new(env!("CARGO_BIN_EXE_cohpio"))
        .args(["verify", "--random-runs", "0"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), "cohpio verify exited nonzero")?;
    let took = t0.elapsed();
    ensure(took < Duration::from_secs(30), format!("took {took:.2?}"))?;
    Ok(format!("{} in {took:.2?}", notes.join(", ")))
}

fn c4_swmr_suite() -> Check {
    let mut total = StressReport::default();
    for seed in 0..10_000u64 {
        total.merge(stress_run(&StressConfig {
            seed,
            ..StressConfig::default()
        }));
    }
    ensure(total.failures() == 0, format!("{:?}", total.first_problem))?;
    Ok(format!(
        "10000 runs, {} operations, no violations",
        total.operations
    ))
}

fn c5_throughput() -> Check {
    let cfg = Config::default();
    let sizes: Vec<usize> = (7..=16).map(|p| 1usize << p).collect();
    let mut tput = Vec::new();
    for &s in &sizes {
        let spec = ExperimentSpec {
            workload: Workload::Invoke,
            transport: Transport::EciPio,
            size: s,
            iters: 3,
            seed: 0,
        };
        tput.push(
            run_experiment(&cfg, &spec)
                .map_err(|e| e.to_string())?
                .throughput_bytes_per_s,
        );
    }
    let gib = f64::from(1u32 << 30);
    let peak = tput[8] / gib;
    ensure(
        (peak / 2.19 - 1.0).abs() <= 0.20,
        format!("32 KiB at {peak:.3} GiB/s"),
    )?;
    ensure(
        tput[..9].windows(2).all(|w| w[1] > w[0]),
        "not increasing from 128 B to 32 KiB",
    )?;
    ensure(tput[9] < tput[8], "64 KiB not below 32 KiB")?;
    Ok(format!(
        "32 KiB {peak:.3} GiB/s, 64 KiB {:.3} GiB/s",
        tput[9] / gib
    ))
}

fn c6_pio_asymmetry() -> Check {
    let p = Config::default().pcie();
    let read = p.pio_read_latency(9600);
    let write = p.pio_write_latency(64);
    ensure(
        (read / 450_280.0 - 1.0).abs() <= 0.005,
        format!("read 9600 B {read} ns"),
    )?;
    ensure(
        (write / 340.0 - 1.0).abs() <= 0.05,
        format!("write 64 B {write} ns"),
    )?;
    for size in (1024..=65536).step_by(128) {
        let (r, w) = (p.pio_read_latency(size), p.pio_write_latency(size));
        ensure(
            r >= 10.0 * w,
            format!("{size} B: read {r} < 10 x write {w}"),
        )?;
    }
    Ok(format!(
        "read 9600 B {:.1} us, write 64 B {write} ns",
        read / 1000.0
    ))
}

fn c7_dma_flatness() -> Check {
    let cfg = Config::default();
    let mut v = Vec::new();
    for p in 6..=12 {
        v.push(p50(
            &cfg,
            Workload::Invoke,
            Transport::PcieDma(DmaMode::Polled),
            1 << p,
            10,
        )?);
    }
    let (lo, hi) = (*v.iter().min().unwrap(), *v.iter().max().unwrap());
    let spread = hi as f64 / lo as f64 - 1.0;
    ensure(spread <= 0.10, format!("P50 spread {:.1}%", spread * 100.0))?;
    Ok(format!("P50 {lo}..{hi} ns, spread {:.1}%", spread * 100.0))
}

fn c8_tails() -> Check {
    let det = Config::default();
    for w in [Workload::NicRx, Workload::NicTx] {
        for size in [64usize, 1536, 9600] {
            let spec = ExperimentSpec {
                workload: w,
                transport: Transport::EciPio,
                size,
                iters: 1000,
                seed: 0,
            };
            let s = run_experiment(&det, &spec)
                .map_err(|e| e.to_string())?
                .summary;
            ensure(
                s.p100 == s.p50,
                format!("{} {size} B: P50 {} P100 {}", w.name(), s.p50, s.p100),
            )?;
        }
    }
    let jit = with(&["dma.jitter=true"]);
    let mut ratios = Vec::new();
    for size in [64usize, 1536, 9600] {
        let spec = ExperimentSpec {
            workload: Workload::NicRx,
            transport: Transport::PcieDma(DmaMode::Polled),
            size,
            iters: 1000,
            seed: 0,
        };
        let s = run_experiment(&jit, &spec)
            .map_err(|e| e.to_string())?
            .summary;
        let ratio = s.p100 as f64 / s.p50 as f64;
        ensure(ratio > 1.3, format!("DMA {size} B: P100/P50 {ratio:.2}"))?;
        ratios.push(format!("{ratio:.2}"));
    }
    Ok(format!(
        "ECI P100 = P50 everywhere; DMA P100/P50 {}",
        ratios.join(" / ")
    ))
}

fn c9_nic_rx() -> Check {
    let cfg = Config::default();
    let mut got = Vec::new();
    for (size, target) in [(64usize, 1050.0), (1536, 7240.0), (9600, 39430.0)] {
        let v = p50(&cfg, Workload::NicRx, Transport::EciPio, size, 5)?;
        let err = v as f64 / target - 1.0;
        ensure(err.abs() <= 0.15, format!("{size} B: {v} ns vs {target}"))?;
        got.push(format!("{:.2}", v as f64 / 1000.0));
    }
    Ok(format!("RX P50 {} us", got.join(" / ")))
}

fn c10_ffwd() -> Check {
    let mut sim = FfSim::from_config(&Config::default(), 0);
    let len = sim.max_payload();
    for i in 0..1000usize {
        let payload: Vec<u8> = (0..len).map(|j| (i * 7 + j) as u8).collect();
        let m = sim.send(&payload).map_err(|e| e.to_string())?;
        ensure(
            m.round_trips() == 2,
            format!("message {i}: {} round trips", m.round_trips()),
        )?;
        ensure(
            m.payload == payload && m.seq == i as u64 + 1,
            format!("message {i} damaged"),
        )?;
    }
    let t0 = Instant::now();
    let s = ff_bench_real(&FfRealConfig {
        iterations: 1_000_000,
        ..FfRealConfig::default()
    })
    .map_err(|e| e.to_string())?;
    ensure(
        s.messages == 1_000_000 && s.lost == 0 && s.out_of_order == 0 && s.corrupted == 0,
        format!("{s:?}"),
    )?;
    let l = s.latency;
    ensure(
        l.p50 <= l.p95 && l.p95 <= l.p99 && l.p99 <= l.p100,
        "percentiles out of order",
    )?;
    Ok(format!(
        "sim 2 round trips x 1000; real 10^6 lossless in {:.2?}, p50 {} p95 {} p99 {} p100 {} ns",
        t0.elapsed(),
        l.p50,
        l.p95,
        l.p99,
        l.p100
    ))
}

fn c11_bloom() -> Check {
    let cfg = Config::default();
    let params = cfg.bloom();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut off = BloomOffload::new(&cfg, Transport::EciPio, 256, 1).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut batch = vec![0u8; 250 * params.element_size];
    for _ in 0..40 {
        rng.fill_bytes(&mut batch);
        let (_, hashes) = off.run_batch(&batch).map_err(|e| e.to_string())?;
        for (i, e) in batch.chunks_exact(params.element_size).enumerate() {
            let want = bloom_hashes(e, &params).map_err(|e| e.to_string())?;
            ensure(
                hashes[i * params.k..(i + 1) * params.k] == want[..],
                "device hash mismatch",
            )?;
            checked += 1;
        }
    }
    ensure(checked == 10_000, format!("checked {checked}"))?;
    let c = bloom_crossover(&cfg, Transport::EciPio).map_err(|e| e.to_string())?;
    let b = c.batch.ok_or("no crossover")?;
    ensure(
        c.points
            .iter()
            .filter(|p| p.0 >= b)
            .all(|&(_, cpu, dev)| dev < cpu),
        "device slower after the crossover",
    )?;
    Ok(format!("10000 elements exact; crossover at batch {b}"))
}

fn digest_dir(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        let bytes = fs::read(&p).map_err(|e| e.to_string())?;
        v.push((
            p.file_name().unwrap().to_string_lossy().into_owned(),
            hex::encode(Sha256::digest(bytes)),
        ));
    }
    v.sort();
    Ok(v)
}

fn c12_determinism() -> Check {
    let benches: [&[&str]; 5] = [
        &["bench", "invoke", "--iters", "20"],
        &["bench", "nic", "--iters", "200"],
        &[
            "--jitter",
            "on",
            "--set",
            "link.reorder=true",
            "bench",
            "nic",
            "--iters",
            "200",
            "--sizes",
            "64,9600",
        ],
        &["bench", "offload", "--iters", "2"],
        &["bench", "ffwd", "--sim-only", "--sim-messages", "200"],
    ];
    let mut files = 0;
    for args in benches {
        let mut digests = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut full = vec!["--seed", "7", "--csv", dir.path().to_str().unwrap()];
            full.extend_from_slice(args);
            let out = Command::new(env!("CARGO_BIN_EXE_cohpio"))
                .args(&full)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), format!("{args:?} exited nonzero"))?;
            digests.push(digest_dir(dir.path())?);
        }
        ensure(
            digests[0] == digests[1],
            format!("{args:?} differs between runs"),
        )?;
        ensure(
            digests[0].len() == 2,
            format!("{args:?} wrote {} files", digests[0].len()),
        )?;
        files += digests[0].len();
    }
    Ok(format!("{files} CSV files identical across reruns"))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("calibrated invocation latency", c1_invoke_latency),
        ("message-count exactness", c2_message_counts),
        ("exhaustive verification", c3_exhaustive),
        ("SWMR property suite", c4_swmr_suite),
        ("throughput peak and shape", c5_throughput),
        ("PCIe PIO asymmetry", c6_pio_asymmetry),
        ("DMA flatness", c7_dma_flatness),
        ("tail elimination", c8_tails),
        ("NIC calibration", c9_nic_rx),
        ("FastForward", c10_ffwd),
        ("Bloom offload", c11_bloom),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = f();
        let took = t0.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{took:.2?}]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
