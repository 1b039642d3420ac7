//! Exhaustive enumeration of protocol interleavings for small configurations.
//!
//! Time is abstracted away: any in-flight message at the head of its
//! per-line link queue may be delivered next, any pending local event may
//! fire, and a held request may be answered with RetryLater while the retry
//! budget lasts. Every reachable state is checked for SWMR; terminal states
//! are checked for the quiescent swap, directory agreement and payload
//! integrity.

use std::collections::{BTreeMap, HashSet, VecDeque};

use crate::coherence::{
    CacheLineState, CpuOp, Effect, Effects, Envelope, Grant, LineAddr, LocalEvent, NodeId, TimerKey,
};
use crate::device::{ComputeFunction, Variant};
use crate::error::{Error, Result};
use crate::machine::{Machine, SimParams};
use crate::world::{Topology, World};

type LinkKey = (NodeId, NodeId, u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    world: World,
    links: BTreeMap<LinkKey, VecDeque<Envelope>>,
    locals: Vec<(NodeId, LocalEvent)>,
    retries_left: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreConfig {
    pub exclusive_return: bool,
    /// Line-pair group size.
    pub n: usize,
    /// Back-to-back invocations in one program.
    pub invocations: usize,
    pub tad_count: u16,
    pub tad_capacity: usize,
    /// How many guard expirations the explorer may inject.
    pub retries: u32,
    pub max_states: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            exclusive_return: true,
            n: 1,
            invocations: 1,
            tad_count: 64,
            tad_capacity: 16,
            retries: 1,
            max_states: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub states: usize,
    pub terminal: usize,
    pub stuck: usize,
    pub swmr_violations: usize,
    pub swap_violations: usize,
    pub agreement_violations: usize,
    pub payload_violations: usize,
    /// A human-readable description of the first problem found.
    pub first_problem: Option<String>,
    pub hazard: bool,
}

impl ExploreReport {
    pub fn violations(&self) -> usize {
        self.swmr_violations
            + self.swap_violations
            + self.agreement_violations
            + self.payload_violations
    }

    fn note(&mut self, what: String) {
        if self.first_problem.is_none() {
            self.first_problem = Some(what);
        }
    }
}

fn params(cfg: &ExploreConfig) -> SimParams {
    let mut p = SimParams {
        one_way_ns: 0,
        ..SimParams::default()
    };
    p.dir.proc_ns = 0;
    p.dir.upgrade_extra_ns = 0;
    p.cpu.issue_interval_ns = 0;
    p.cpu.thrash_interval_ns = 0;
    p.dir.tad_count = cfg.tad_count;
    p.dir.tad_capacity = cfg.tad_capacity;
    p.device.exclusive_return = cfg.exclusive_return;
    p
}

fn push_effects(state: &mut State, fx: Effects) {
    for e in fx {
        match e {
            Effect::Send { env, .. } => {
                let key = (env.src, env.dst, env.msg.line.index);
                state.links.entry(key).or_default().push_back(env);
            }
            Effect::Local { node, ev, .. } => {
                state.locals.push((node, ev));
                state.locals.sort();
            }
            Effect::Arm { .. } | Effect::Disarm(_) | Effect::Completed { .. } => {}
        }
    }
}

fn successors(state: &State) -> Vec<Result<State>> {
    let mut out = Vec::new();
    for key in state.links.keys() {
        let mut next = state.clone();
        let q = next.links.get_mut(key).expect("present");
        let env = q.pop_front().expect("non-empty queue");
        if q.is_empty() {
            next.links.remove(key);
        }
        let mut fx = Vec::new();
        out.push(next.world.handle_message(0, env, &mut fx).map(|_| {
            push_effects(&mut next, fx);
            next
        }));
    }
    let mut seen_local = HashSet::new();
    for (i, ev) in state.locals.iter().enumerate() {
        if !seen_local.insert(*ev) {
            continue;
        }
        let mut next = state.clone();
        let (node, lev) = next.locals.remove(i);
        let mut fx = Vec::new();
        out.push(next.world.handle_local(0, node, lev, &mut fx).map(|_| {
            push_effects(&mut next, fx);
            next
        }));
    }
    if state.retries_left > 0 {
        for txn in state.world.device.deferred_txns() {
            let mut next = state.clone();
            next.retries_left -= 1;
            let mut fx = Vec::new();
            out.push(
                next.world
                    .fire_timer(0, TimerKey::Guard { txn }, &mut fx)
                    .map(|_| {
                        push_effects(&mut next, fx);
                        next
                    }),
            );
        }
    }
    out
}

/// Enumerate every interleaving of `cfg.invocations` echo invocations over a
/// fresh bidirectional channel.
pub fn explore(cfg: &ExploreConfig) -> Result<ExploreReport> {
    let mut m = Machine::new(params(cfg), Topology::CpuDevice);
    let ch = m.open_channel(Variant::Bidirectional, cfg.n, ComputeFunction::echo())?;
    let line_size = m.line_size();
    let mut report = ExploreReport {
        hazard: m.hazard(ch),
        ..Default::default()
    };
    let c = &m.world.device.channels[ch];
    let (mut data_lines, mut req_lines) = (c.data_lines(), c.request_lines());
    let initial_a = c.request_lines();
    let initial_b = c.data_lines();
    let mut ops = Vec::new();
    let mut expected = Vec::new();
    for inv in 0..cfg.invocations {
        let payload: Vec<u8> = (0..cfg.n * line_size)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(inv as u8 + 1))
            .collect();
        ops.push(CpuOp::BeginEpoch);
        for (j, line) in data_lines.iter().enumerate() {
            ops.push(CpuOp::Store {
                line: *line,
                offset: 0,
                bytes: payload[j * line_size..(j + 1) * line_size].to_vec(),
            });
        }
        ops.push(CpuOp::Barrier);
        for line in &req_lines {
            ops.push(CpuOp::Prefetch {
                line: *line,
                want: Grant::Shared,
            });
        }
        ops.push(CpuOp::AwaitLines {
            lines: req_lines.clone(),
        });
        if !cfg.exclusive_return {
            ops.push(CpuOp::Own {
                lines: req_lines.clone(),
            });
        }
        expected.push((req_lines.clone(), payload));
        std::mem::swap(&mut data_lines, &mut req_lines);
    }
    let final_payload = expected.last().map(|(l, p)| (l.clone(), p.clone()));
    m.world.device.channels[ch].request_len = cfg.n * line_size;

    let mut fx = Vec::new();
    m.world.cpu_mut(NodeId::CPU0).load_program(ops);
    m.world.cpu_mut(NodeId::CPU0).step(0, &mut fx);
    let mut start = State {
        world: m.world.clone(),
        links: BTreeMap::new(),
        locals: Vec::new(),
        retries_left: cfg.retries,
    };
    push_effects(&mut start, fx);

    let all_lines: Vec<LineAddr> = initial_a.iter().chain(&initial_b).copied().collect();
    let mut seen: HashSet<State> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(start.clone());
    queue.push_back(start);
    while let Some(state) = queue.pop_front() {
        report.states += 1;
        if report.states > cfg.max_states {
            return Err(Error::InvalidArgument(format!(
                "state space exceeds {} states",
                cfg.max_states
            )));
        }
        for line in &all_lines {
            if let Err(e) = state.world.check_swmr(line) {
                report.swmr_violations += 1;
                report.note(e.to_string());
            }
        }
        let next = successors(&state);
        if next.is_empty() {
            if state.world.is_done() && state.links.is_empty() && state.locals.is_empty() {
                report.terminal += 1;
                check_terminal(
                    &state,
                    cfg,
                    &initial_a,
                    &initial_b,
                    &final_payload,
                    &mut report,
                );
            } else {
                report.stuck += 1;
                report.note(format!(
                    "stuck with {} messages in flight and cpu done={}",
                    state.links.values().map(VecDeque::len).sum::<usize>(),
                    state.world.cpu(NodeId::CPU0).is_done()
                ));
            }
            continue;
        }
        for s in next {
            let s = s?;
            if seen.insert(s.clone()) {
                queue.push_back(s);
            }
        }
    }
    Ok(report)
}

fn check_terminal(
    state: &State,
    cfg: &ExploreConfig,
    initial_a: &[LineAddr],
    initial_b: &[LineAddr],
    final_payload: &Option<(Vec<LineAddr>, Vec<u8>)>,
    report: &mut ExploreReport,
) {
    let cpu = state.world.cpu(NodeId::CPU0);
    // after an odd number of epochs the roles of the groups are swapped
    let (held, released) = if cfg.invocations % 2 == 1 {
        (initial_a, initial_b)
    } else {
        (initial_b, initial_a)
    };
    let swapped = held.iter().all(|l| cpu.cache.state(l).is_writable())
        && released
            .iter()
            .all(|l| cpu.cache.state(l) == CacheLineState::Invalid);
    if !swapped {
        report.swap_violations += 1;
        report.note("terminal state does not mirror the initial line pair".into());
    }
    if let Err(e) = state.world.check_agreement() {
        report.agreement_violations += 1;
        report.note(e.to_string());
    }
    if let Some((lines, payload)) = final_payload {
        let got: Vec<u8> = lines
            .iter()
            .flat_map(|l| {
                cpu.cache
                    .data(l)
                    .map(|d| d.as_bytes().to_vec())
                    .unwrap_or_default()
            })
            .collect();
        if &got != payload {
            report.payload_violations += 1;
            report.note("response bytes differ from the echoed request".into());
        }
    }
}

/// One named configuration of the verification suite and its expectation.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub config: ExploreConfig,
    /// The configuration is expected to contain a stuck state.
    pub expect_stuck: bool,
}

pub fn verification_suite() -> Vec<SuiteCase> {
    let base = ExploreConfig::default();
    vec![
        SuiteCase {
            name: "bidirectional n=1 exclusive return",
            config: base,
            expect_stuck: false,
        },
        SuiteCase {
            name: "bidirectional n=1 shared return",
            config: ExploreConfig {
                exclusive_return: false,
                ..base
            },
            expect_stuck: false,
        },
        SuiteCase {
            name: "bidirectional n=2",
            config: ExploreConfig { n: 2, ..base },
            expect_stuck: false,
        },
        SuiteCase {
            name: "bidirectional n=1 two invocations",
            config: ExploreConfig {
                invocations: 2,
                ..base
            },
            expect_stuck: false,
        },
        SuiteCase {
            name: "shared return three invocations two retries",
            config: ExploreConfig {
                exclusive_return: false,
                invocations: 3,
                retries: 2,
                ..base
            },
            expect_stuck: false,
        },
        SuiteCase {
            name: "single unit capacity 1 hazard",
            config: ExploreConfig {
                tad_count: 1,
                tad_capacity: 1,
                retries: 0,
                ..base
            },
            expect_stuck: true,
        },
    ]
}

/// Whether a suite case behaved as expected.
pub fn case_passes(case: &SuiteCase, report: &ExploreReport) -> bool {
    if report.violations() > 0 {
        return false;
    }
    if case.expect_stuck {
        report.stuck >= 1
    } else {
        report.stuck == 0 && report.terminal >= 1
    }
}
