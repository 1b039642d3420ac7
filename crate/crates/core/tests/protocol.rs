use cohpio::device::{ComputeFunction, Variant};
use cohpio::machine::{Machine, SimParams};
use cohpio::world::Topology;
use cohpio::Error;

fn machine(p: SimParams) -> Machine {
    Machine::new(p, Topology::CpuDevice)
}

fn bidi(m: &mut Machine, n: usize, compute: ComputeFunction) -> usize {
    m.open_channel(Variant::Bidirectional, n, compute).unwrap()
}

/// Independent latency formula for a single-line invoke: two round trips,
/// each two link crossings plus one directory visit. The shared return adds
/// an upgrade round trip and a fixed residual.
fn invoke_oracle(one_way: u64, proc_ns: u64, exclusive: bool, residual: u64) -> u64 {
    let round_trip = 2 * one_way + proc_ns;
    if exclusive {
        2 * round_trip
    } else {
        3 * round_trip + residual
    }
}

#[test]
fn invoke_latency_tracks_link_and_directory_costs() {
    for (one_way, proc_ns) in [(150, 150), (300, 150), (100, 50), (500, 0)] {
        for exclusive in [true, false] {
            let mut p = SimParams {
                one_way_ns: one_way,
                ..SimParams::default()
            };
            p.dir.proc_ns = proc_ns;
            p.device.exclusive_return = exclusive;
            let residual = p.dir.upgrade_extra_ns;
            let mut m = machine(p);
            let ch = bidi(&mut m, 1, ComputeFunction::echo());
            let t = m.invoke(ch, &[1, 2, 3]).unwrap();
            assert_eq!(
                t.latency_ns,
                invoke_oracle(one_way, proc_ns, exclusive, residual),
                "one_way={one_way} proc={proc_ns} exclusive={exclusive}"
            );
        }
    }
}

#[test]
fn one_way_300_gives_1500() {
    let p = SimParams {
        one_way_ns: 300,
        ..SimParams::default()
    };
    let mut m = machine(p);
    let ch = bidi(&mut m, 1, ComputeFunction::echo());
    assert_eq!(m.invoke(ch, b"ping").unwrap().latency_ns, 1500);
}

#[test]
fn message_counts_hold_every_iteration() {
    for (exclusive, want) in [(true, 4), (false, 6)] {
        let mut p = SimParams::default();
        p.device.exclusive_return = exclusive;
        let mut m = machine(p);
        let ch = bidi(&mut m, 1, ComputeFunction::echo());
        for i in 0..1000u32 {
            let t = m.invoke(ch, &i.to_be_bytes()).unwrap();
            assert_eq!(t.messages, want, "iteration {i}");
            assert_eq!(t.one_way_traversals, want);
            assert_eq!(t.retries, 0);
        }
        m.check_quiescent().unwrap();
    }
}

#[test]
fn compute_delays_beyond_the_timeout_are_survived() {
    let timeout = SimParams::default().cpu.timeout_ns;
    for factor in [1u64, 3, 10] {
        let mut m = machine(SimParams::default());
        let compute = ComputeFunction::new("rev", |r: &[u8]| r.iter().rev().copied().collect())
            .with_latency(factor * timeout, 0.0);
        let ch = bidi(&mut m, 2, compute);
        let req: Vec<u8> = (0..200).map(|i| i as u8).collect();
        let t = m.invoke(ch, &req).unwrap();
        let want: Vec<u8> = req.iter().rev().copied().collect();
        assert_eq!(t.data, want, "factor {factor}");
        assert!(t.latency_ns >= factor * timeout);
        assert!(
            t.retries >= factor,
            "factor {factor}: {} retries",
            t.retries
        );
        m.check_quiescent().unwrap();
    }
}

#[test]
fn without_the_guard_a_long_compute_is_a_machine_check() {
    let mut p = SimParams::default();
    p.device.retry_after_ns = 2 * p.cpu.timeout_ns;
    let mut m = machine(p);
    let compute = ComputeFunction::echo().with_latency(p.cpu.timeout_ns * 3 / 2, 0.0);
    let ch = bidi(&mut m, 1, compute);
    let err = m.invoke(ch, b"slow").unwrap_err();
    assert!(matches!(err, Error::MachineCheck { .. }), "{err}");
}

#[test]
fn reversed_prefetch_order_is_equivalent() {
    for n in [1usize, 3, 16] {
        let mut a = machine(SimParams::default());
        let mut b = machine(SimParams::default());
        let (ca, cb) = (
            bidi(&mut a, n, ComputeFunction::echo()),
            bidi(&mut b, n, ComputeFunction::echo()),
        );
        let req: Vec<u8> = (0..n * 128).map(|i| (i * 13) as u8).collect();
        for _ in 0..3 {
            let x = a.invoke_ordered(ca, &req, false).unwrap();
            let y = b.invoke_ordered(cb, &req, true).unwrap();
            assert_eq!(x.data, req);
            assert_eq!(y.data, req);
            assert_eq!(x.messages, y.messages, "n={n}");
        }
        b.check_quiescent().unwrap();
    }
}

fn traced_run(seed: u64) -> String {
    let p = SimParams {
        seed,
        jitter: true,
        reorder: true,
        check_swmr: true,
        ..SimParams::default()
    };
    let mut m = machine(p);
    m.keep_trace(true);
    let ch = bidi(&mut m, 4, ComputeFunction::echo().with_latency(500, 0.5));
    for i in 0..20usize {
        let req = vec![i as u8; 1 + i * 23];
        assert_eq!(m.invoke(ch, &req).unwrap().data, req);
    }
    assert!(!m.trace_lines().is_empty());
    m.trace_hash()
}

#[test]
fn trace_hash_is_deterministic_per_seed() {
    assert_eq!(traced_run(5), traced_run(5));
    assert_ne!(traced_run(5), traced_run(6));
}

#[test]
fn hazardous_layout_stalls_without_the_guard() {
    let mut p = SimParams::default();
    p.dir.tad_count = 1;
    p.dir.tad_capacity = 1;
    // Stop long before the guard would fire.
    p.run_limit_ns = 1_000_000;
    let mut m = machine(p);
    let ch = bidi(&mut m, 1, ComputeFunction::echo());
    assert!(m.hazard(ch));
    assert!(matches!(m.invoke(ch, b"x"), Err(Error::Stalled(_))));
}

#[test]
fn hazardous_layout_recovers_through_the_guard() {
    let mut p = SimParams::default();
    p.dir.tad_count = 1;
    p.dir.tad_capacity = 1;
    let mut m = machine(p);
    let ch = bidi(&mut m, 1, ComputeFunction::echo());
    let t = m.invoke(ch, b"x").unwrap();
    assert_eq!(t.data, b"x");
    assert!(t.retries >= 1);
}

#[test]
fn default_layout_is_not_hazardous() {
    let mut m = machine(SimParams::default());
    for n in [1usize, 2, 63, 64, 65, 128, 256] {
        let ch = bidi(&mut m, n, ComputeFunction::echo());
        assert!(!m.hazard(ch), "n={n}");
    }
}

#[test]
fn oversized_group_is_rejected() {
    let mut p = SimParams::default();
    p.dir.tad_count = 2;
    p.dir.tad_capacity = 2;
    let mut m = machine(p);
    // Both halves of the group fit only if 2n <= slots; beyond n > slots
    // even one half cannot be admitted.
    let ch = m
        .open_channel(Variant::Bidirectional, 3, ComputeFunction::echo())
        .unwrap();
    assert!(m.hazard(ch));
    let err = m
        .open_channel(Variant::Bidirectional, 5, ComputeFunction::echo())
        .unwrap_err();
    assert!(matches!(err, Error::GroupTooLarge { .. }), "{err}");
}

#[test]
fn payload_larger_than_group_is_rejected() {
    let mut m = machine(SimParams::default());
    let ch = bidi(&mut m, 1, ComputeFunction::echo());
    assert!(matches!(
        m.invoke(ch, &[0; 129]),
        Err(Error::PayloadTooLarge { .. })
    ));
    assert!(matches!(m.send(ch, &[0; 8]), Err(Error::WrongVariant(_))));
}
