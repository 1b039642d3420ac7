use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use cohpio::baselines::{DmaMode, DmaParams, PcieParams};
use cohpio::config::Config;
use cohpio::device::ComputeFunction;
use cohpio::machine::SimParams;
use cohpio::matrix::{run_matrix, series, write_csv};
use cohpio::stats::percentiles;
use cohpio::workloads::offload::{BloomOffload, FilterChain};
use cohpio::workloads::{
    bloom_crossover, bloom_hashes, run_experiment, BloomParams, ExperimentSpec, InvokeTransport,
    OffloadParams, Transport, Workload,
};

/// Straightforward reference: each lane multiplies by `2^s + 1` (the same
/// as shift-and-add) and xors in the byte.
fn oracle_hashes(element: &[u8]) -> Vec<u64> {
    const SHIFTS: [u32; 8] = [5, 6, 7, 9, 10, 11, 13, 14];
    let mix = |mut x: u64| {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    };
    (0..8)
        .map(|i| {
            let mult = (1u128 << SHIFTS[i]) + 1;
            let mut s = u128::from(mix(0x5EED + i as u64) | 1);
            for &b in element {
                s = ((s * mult) & u128::from(u64::MAX)) ^ u128::from(b);
            }
            s as u64
        })
        .collect()
}

#[test]
fn bloom_golden_values() {
    let p = BloomParams::default();
    let zeros = bloom_hashes(&[0; 128], &p).unwrap();
    assert_eq!(
        zeros,
        [
            0xd384_ba04_7f16_f9b5,
            0x47c9_d2c1_0fa8_b513,
            0xbcc6_0746_3ecc_b1cb,
            0x5cbe_b166_e8ac_700d,
            0x1fc1_b664_8d21_853f,
            0xbbb3_622b_006d_80df,
            0xdcda_eb56_0d0f_e509,
            0x4b81_20bd_3ffa_acaf,
        ]
    );
    let ramp: Vec<u8> = (0..128).collect();
    assert_eq!(bloom_hashes(&ramp, &p).unwrap()[0], 0xf3a8_e52d_3240_c9b5);
    assert_eq!(
        bloom_hashes(&[0xff; 128], &p).unwrap()[7],
        0xf97c_4339_3a0a_acaf
    );
}

#[test]
fn bloom_matches_the_reference_on_random_elements() {
    let p = BloomParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut e = [0u8; 128];
    for _ in 0..2000 {
        rng.fill_bytes(&mut e);
        assert_eq!(bloom_hashes(&e, &p).unwrap(), oracle_hashes(&e));
    }
}

#[test]
fn one_byte_change_moves_every_lane() {
    let p = BloomParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut differ, mut lanes) = (0u64, 0u64);
    for _ in 0..10_000 {
        let mut a = [0u8; 128];
        rng.fill_bytes(&mut a);
        let mut b = a;
        let i = rng.random_range(0..128);
        b[i] ^= rng.random_range(1..=255u8);
        let (ha, hb) = (bloom_hashes(&a, &p).unwrap(), bloom_hashes(&b, &p).unwrap());
        differ += ha.iter().zip(&hb).filter(|(x, y)| x != y).count() as u64;
        lanes += 8;
    }
    assert!(differ as f64 / lanes as f64 >= 0.999, "{differ}/{lanes}");
}

#[test]
fn device_hashes_equal_reference_on_every_transport() {
    let cfg = Config::default();
    let p = cfg.bloom();
    for t in Transport::COMPARED {
        let mut off = BloomOffload::new(&cfg, t, 256, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch = vec![0u8; 200 * 128];
        let mut n = 0;
        while n < 10_000 {
            rng.fill_bytes(&mut batch);
            let (_, hashes) = off.run_batch(&batch).unwrap();
            for (i, e) in batch.chunks_exact(128).enumerate() {
                assert_eq!(hashes[i * p.k..(i + 1) * p.k], oracle_hashes(e)[..], "{t}");
            }
            n += 200;
        }
    }
}

#[test]
fn small_batches_are_dominated_by_streaming() {
    let cfg = Config::default();
    let fixed = cfg.offload().stream_fixed_ns;
    for t in [Transport::Cpu, Transport::EciPio, Transport::PciePio] {
        let mut off = BloomOffload::new(&cfg, t, 1, 0).unwrap();
        let (ns, _) = off.run_batch(&[7; 128]).unwrap();
        assert!((ns as f64) < 1.25 * fixed, "{t}: {ns}");
    }
}

#[test]
fn bloom_crossover_is_finite_and_stable() {
    let cfg = Config::default();
    let c = bloom_crossover(&cfg, Transport::EciPio).unwrap();
    let b = c.batch.expect("finite crossover");
    assert!(b <= 16);
    for &(batch, cpu, dev) in &c.points {
        assert_eq!(dev < cpu, batch >= b, "batch {batch}");
    }
    // The long-run slopes are the per-element costs.
    let (b1, c1, d1) = c.points[c.points.len() - 2];
    let (b2, c2, d2) = c.points[c.points.len() - 1];
    let per = |x1: u64, x2: u64| (x2 - x1) as f64 / (b2 - b1) as f64;
    assert!((per(c1, c2) - 2600.0).abs() < 1.0);
    assert!(
        per(d1, d2) > 1700.0 && per(d1, d2) < 1800.0,
        "{}",
        per(d1, d2)
    );
}

#[test]
fn filter_chain_only_eci_beats_the_cpu() {
    let cfg = Config::default();
    for size in (7..=16).map(|p| 1usize << p) {
        let batch = vec![1u8; size];
        let lat = |t| {
            FilterChain::new(&cfg, t, size, 0)
                .unwrap()
                .run_batch(&batch)
                .unwrap()
        };
        let cpu = lat(Transport::Cpu);
        assert!(lat(Transport::EciPio) < cpu, "{size}");
        assert!(lat(Transport::PciePio) > cpu, "{size}");
        assert!(lat(Transport::PcieDma(DmaMode::Polled)) > cpu, "{size}");
        assert!(lat(Transport::EciPio) < lat(Transport::PciePio));
        assert!(lat(Transport::EciPio) < lat(Transport::PcieDma(DmaMode::Polled)));
    }
}

#[test]
fn filter_chain_cpu_model() {
    let cfg = Config::default();
    let o = OffloadParams::default();
    let got = FilterChain::new(&cfg, Transport::Cpu, 1024, 0)
        .unwrap()
        .run_batch(&[0; 1024])
        .unwrap();
    let want =
        o.stream_fixed_ns + o.filters as f64 * (o.filter_cpu_ns + o.filter_cpu_per_word_ns * 128.0);
    assert_eq!(got, want as u64);
}

fn spec(workload: Workload, transport: Transport, size: usize, iters: usize) -> ExperimentSpec {
    ExperimentSpec {
        workload,
        transport,
        size,
        iters,
        seed: 0,
    }
}

#[test]
fn nic_latency_is_monotone_in_size() {
    let cfg = Config::default();
    for w in [Workload::NicRx, Workload::NicTx] {
        for t in Transport::COMPARED {
            let mut last = 0;
            for size in (64..=9600).step_by(256).chain([9600]) {
                let r = run_experiment(&cfg, &spec(w, t, size, 2)).unwrap();
                assert!(r.summary.p50 >= last, "{} {t} at {size}", w.name());
                last = r.summary.p50;
            }
        }
    }
}

#[test]
fn eci_nic_is_deterministic_and_tail_free() {
    let cfg = Config::default();
    for w in [Workload::NicRx, Workload::NicTx] {
        for size in [64, 1536, 9600] {
            let a = run_experiment(&cfg, &spec(w, Transport::EciPio, size, 300)).unwrap();
            let b = run_experiment(&cfg, &spec(w, Transport::EciPio, size, 300)).unwrap();
            assert_eq!(a, b);
            let s = a.summary;
            assert!(s.p50 == s.p95 && s.p95 == s.p99 && s.p99 == s.p100);
        }
    }
}

#[test]
fn nic_rx_calibration_points() {
    let cfg = Config::default();
    let eci = |size| {
        run_experiment(&cfg, &spec(Workload::NicRx, Transport::EciPio, size, 1))
            .unwrap()
            .summary
            .p50
    };
    // Fixed part plus one per-line cost for each additional line.
    assert_eq!(eci(64), 1050);
    assert_eq!(eci(1536), 1050 + 11 * 519);
    assert_eq!(eci(9600), 1050 + 74 * 519);
    for (size, table) in [(64, 1050.0), (1536, 7240.0), (9600, 39430.0)] {
        assert!((eci(size) as f64 / table - 1.0).abs() < 0.15);
    }
    let pio = run_experiment(&cfg, &spec(Workload::NicRx, Transport::PciePio, 1536, 1)).unwrap();
    assert_eq!(pio.summary.p50, 96 * 750);
    assert!((pio.summary.p50 as f64 / 72_890.0 - 1.0).abs() < 0.02);
}

#[test]
fn transports_agree_on_response_bytes() {
    let cfg = Config::default();
    let f = |r: &[u8]| -> Vec<u8> {
        r.iter()
            .enumerate()
            .map(|(i, b)| b.rotate_left(i as u32 % 8))
            .collect()
    };
    let compute = || ComputeFunction::new("rot", f).with_latency(100, 0.1);
    let mut ts: Vec<InvokeTransport> = [
        Transport::EciPio,
        Transport::PciePio,
        Transport::PcieDma(DmaMode::Polled),
        Transport::PcieDma(DmaMode::Irq),
    ]
    .into_iter()
    .map(|t| InvokeTransport::new(&cfg, t, 4096, compute(), 1).unwrap())
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let mut req = vec![0u8; rng.random_range(1..=4096)];
        rng.fill_bytes(&mut req);
        let want = f(&req);
        for t in ts.iter_mut() {
            assert_eq!(t.invoke(&req).unwrap().1, want);
        }
    }
}

#[test]
fn invoke_throughput_shape() {
    let cfg = Config::default();
    let specs: Vec<ExperimentSpec> = (7..=16)
        .map(|p| spec(Workload::Invoke, Transport::EciPio, 1 << p, 2))
        .collect();
    let r = run_matrix(&cfg, &specs).unwrap();
    let t: Vec<f64> = r.iter().map(|x| x.throughput_bytes_per_s).collect();
    assert!(t[..9].windows(2).all(|w| w[1] > w[0]));
    assert!(t[9] < t[8]);
    let gib = t[8] / f64::from(1u32 << 30);
    assert!((gib / 2.19 - 1.0).abs() < 0.02, "{gib}");
    // Throughput is bytes over mean latency.
    assert!((t[0] - 128.0 / (r[0].summary.mean / 1e9)).abs() < 1e-6 * t[0]);
}

#[test]
fn percentiles_match_a_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d: LogNormal<f64> = LogNormal::new(8.0, 1.2).unwrap();
    let samples: Vec<u64> = (0..10_000)
        .map(|_| d.sample(&mut rng).round() as u64)
        .collect();
    let s = percentiles(&samples).unwrap();
    let mut sorted = samples.clone();
    sorted.sort();
    let at = |p: usize| sorted[(p * sorted.len()).div_ceil(100) - 1];
    assert_eq!(
        (s.p50, s.p95, s.p99, s.p100),
        (at(50), at(95), at(99), at(100))
    );
    assert_eq!(s.n, 10_000);
    let mean = samples.iter().sum::<u64>() as f64 / 1e4;
    assert!((s.mean - mean).abs() < 1e-6);
}

proptest! {
    #[test]
    fn percentiles_are_ordered(v in prop::collection::vec(any::<u32>(), 1..500)) {
        let v: Vec<u64> = v.into_iter().map(u64::from).collect();
        let s = percentiles(&v).unwrap();
        prop_assert!(s.p50 <= s.p95 && s.p95 <= s.p99 && s.p99 <= s.p100);
        prop_assert_eq!(s.p100, *v.iter().max().unwrap());
        prop_assert!(v.contains(&s.p50));
    }
}

#[test]
fn defaults_are_the_calibrated_values() {
    let cfg = Config::default();
    assert_eq!(cfg.sim_params(), SimParams::default());
    assert_eq!(cfg.pcie(), PcieParams::default());
    assert_eq!(cfg.dma(), DmaParams::default());
    assert_eq!(cfg.bloom(), BloomParams::default());
    assert_eq!(cfg.offload(), OffloadParams::default());
}

#[test]
fn config_layers_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(
        &path,
        "seed = 4\n[link]\none_way_ns = 200\n[dma]\njitter = true\n",
    )
    .unwrap();
    let cfg = Config::load(Some(&path), &["link.one_way_ns=300".into()]).unwrap();
    assert_eq!(cfg.seed(), 4);
    assert_eq!(cfg.u64("link.one_way_ns"), 300);
    assert!(cfg.dma().jitter.is_some());
    let r = run_experiment(&cfg, &spec(Workload::Invoke, Transport::EciPio, 128, 1)).unwrap();
    assert_eq!(r.summary.p50, 1500);

    let err = Config::load(None, &["foo=1".into()]).unwrap_err();
    assert!(err.to_string().contains("foo"));
    let err = Config::load(None, &["dir.proc_ns=-3".into()]).unwrap_err();
    assert!(err.to_string().contains("dir.proc_ns"));
    assert!(Config::load(None, &["seed".into()]).is_err());
}

#[test]
fn csv_files_are_reproducible() {
    let cfg = Config::load(None, &["dma.jitter=true".into(), "sim.jitter=true".into()]).unwrap();
    let specs: Vec<ExperimentSpec> = [Workload::NicRx, Workload::Invoke]
        .iter()
        .flat_map(|&w| Transport::COMPARED.map(|t| spec(w, t, 1536, 50)))
        .collect();
    let write = || {
        let dir = tempfile::tempdir().unwrap();
        let r = run_matrix(&cfg, &specs).unwrap();
        let (raw, summary) = write_csv(dir.path(), "x", &series(&r)).unwrap();
        (std::fs::read(raw).unwrap(), std::fs::read(summary).unwrap())
    };
    let (a, b) = (write(), write());
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a.0).unwrap().lines().count(), 1 + 6 * 50);
}
