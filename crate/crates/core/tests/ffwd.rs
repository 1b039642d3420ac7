use cohpio::config::Config;
use cohpio::ffwd::real::available_cores;
use cohpio::ffwd::{ff_bench_real, FfRealConfig, FfSim, FfSimConfig};
use cohpio::machine::SimParams;
use cohpio::Error;

fn payload(i: usize, len: usize) -> Vec<u8> {
    (0..len).map(|j| (i * 31 + j * 7) as u8).collect()
}

#[test]
fn thousand_sim_messages_take_two_round_trips_each() {
    let mut sim = FfSim::from_config(&Config::default(), 0);
    let len = sim.max_payload();
    for i in 0..1000 {
        let p = payload(i, len);
        let m = sim.send(&p).unwrap();
        assert_eq!(m.seq, i as u64 + 1);
        assert_eq!(m.payload, p);
        assert_eq!(m.round_trips(), 2, "message {i}");
        assert_eq!(m.one_way_traversals, 4);
    }
}

#[test]
fn correctness_does_not_depend_on_timing() {
    for gap in [0u64, 300, 2000] {
        for poll in [0u64, 100, 5000] {
            let mut sim = FfSim::new(
                SimParams {
                    seed: gap ^ poll,
                    jitter: true,
                    reorder: true,
                    check_swmr: true,
                    ..SimParams::default()
                },
                FfSimConfig {
                    sender_gap_ns: gap,
                    poll_interval_ns: poll,
                },
            );
            let len = sim.max_payload();
            for i in 0..30 {
                let p = payload(i, len);
                let m = sim.send(&p).unwrap();
                assert_eq!(m.payload, p, "gap {gap} poll {poll}");
                assert!(m.round_trips() >= 2);
                if gap >= 2000 && poll == 0 {
                    assert!(
                        m.round_trips() >= 3,
                        "slow sender, {} round trips",
                        m.round_trips()
                    );
                }
            }
        }
    }
}

#[test]
fn sim_rejects_oversized_payloads() {
    let mut sim = FfSim::from_config(&Config::default(), 0);
    let too_big = vec![0; sim.max_payload() + 1];
    assert!(matches!(
        sim.send(&too_big),
        Err(Error::PayloadTooLarge { .. })
    ));
}

#[test]
fn real_threads_move_a_million_messages_losslessly() {
    let s = ff_bench_real(&FfRealConfig::default()).unwrap();
    assert_eq!(s.messages, 1_000_000);
    assert_eq!((s.lost, s.out_of_order, s.corrupted), (0, 0, 0));
    let l = s.latency;
    assert!(l.p50 <= l.p95 && l.p95 <= l.p99 && l.p99 <= l.p100);
    assert_eq!(l.n, 1_000_000);
}

#[test]
fn real_rejects_bad_arguments() {
    let zero = FfRealConfig {
        iterations: 0,
        ..FfRealConfig::default()
    };
    assert!(ff_bench_real(&zero).is_err());
    let big = FfRealConfig {
        payload: 4096,
        iterations: 1,
        ..FfRealConfig::default()
    };
    assert!(matches!(
        ff_bench_real(&big),
        Err(Error::PayloadTooLarge { .. })
    ));
}

#[test]
fn same_core_and_cross_core_placements() {
    if available_cores() < 2 {
        eprintln!("skipped: needs at least two cores");
        return;
    }
    let run = |pin| {
        ff_bench_real(&FfRealConfig {
            iterations: 100_000,
            payload: 64,
            pin: Some(pin),
        })
        .unwrap()
    };
    let same = run((0, 0));
    let cross = run((0, 1));
    for s in [&same, &cross] {
        assert_eq!((s.lost, s.out_of_order, s.corrupted), (0, 0, 0));
    }
    // Which is faster depends on the scheduler and cache topology; report it.
    eprintln!(
        "median half round trip: same core {} ns, cross core {} ns",
        same.latency.p50, cross.latency.p50
    );
}
