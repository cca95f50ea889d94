//! In-process lockstep fabric for `H` simulated hosts.
//!
//! Host bodies run between barriers through [`HostGroup::run_hosts`]; data
//! crosses hosts only through the collectives, which always deliver in
//! host-index order. Every collective advances the round counter and
//! appends a [`CommRecord`] whose volume is the largest number of f32
//! elements any single host received in that call.

use std::fmt;

use serde::Serialize;

use crate::compressor::CompressedBlock;
use crate::error::{contract, ApbError, Result};
use crate::tensor::{Matrix, PartialAttention};

/// Anything that can cross the fabric, measured in f32 elements.
pub trait Payload {
    fn elements(&self) -> usize;
}

impl Payload for Matrix {
    fn elements(&self) -> usize {
        self.len()
    }
}

impl Payload for PartialAttention {
    fn elements(&self) -> usize {
        self.out.len() + self.lse.len()
    }
}

impl Payload for CompressedBlock {
    fn elements(&self) -> usize {
        self.k.iter().chain(&self.v).map(Matrix::len).sum()
    }
}

impl<T: Payload> Payload for Vec<T> {
    fn elements(&self) -> usize {
        self.iter().map(Payload::elements).sum()
    }
}

impl<A: Payload, B: Payload> Payload for (A, B) {
    fn elements(&self) -> usize {
        self.0.elements() + self.1.elements()
    }
}

/// Order in which host bodies execute between barriers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Forward,
    Reverse,
    /// One OS thread per host.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    Gather,
    BroadcastGather,
    AllToAll,
    RingPass,
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl CollectiveKind {
    fn name(&self) -> &'static str {
        match self {
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::Gather => "gather",
            CollectiveKind::BroadcastGather => "broadcast_gather",
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::RingPass => "ring_pass",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommRecord {
    pub round: u64,
    pub kind: CollectiveKind,
    /// Elements each host put on the wire, counting one copy per receiver.
    pub sent: Vec<usize>,
    pub received: Vec<usize>,
    pub volume: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CommTrace {
    pub records: Vec<CommRecord>,
}

impl CommTrace {
    pub fn volume(&self) -> u64 {
        self.records.iter().map(|r| r.volume).sum()
    }

    pub fn volume_of(&self, kind: CollectiveKind) -> u64 {
        self.records.iter().filter(|r| r.kind == kind).map(|r| r.volume).sum()
    }

    pub fn calls(&self, kind: CollectiveKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    /// Every record sent exactly as many elements as it delivered.
    pub fn is_conserved(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.sent.iter().sum::<usize>() == r.received.iter().sum::<usize>())
    }
}

#[derive(Debug)]
pub struct HostGroup {
    hosts: usize,
    round: u64,
    schedule: Schedule,
    trace: CommTrace,
}

impl HostGroup {
    pub fn new(hosts: usize, schedule: Schedule) -> Result<Self> {
        if hosts == 0 {
            return Err(contract("a host group needs at least one host"));
        }
        Ok(Self {
            hosts,
            round: 0,
            schedule,
            trace: CommTrace::default(),
        })
    }

    pub fn hosts(&self) -> usize {
        self.hosts
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn trace(&self) -> &CommTrace {
        &self.trace
    }

    pub fn into_trace(self) -> CommTrace {
        self.trace
    }

    /// Run one body per host (0-based index) against its private state.
    /// Results and the first error come back in host-index order no matter
    /// how bodies were scheduled.
    pub fn run_hosts<S, T, F>(&self, states: &mut [S], body: F) -> Result<Vec<T>>
    where
        S: Send,
        T: Send,
        F: Fn(usize, &mut S) -> Result<T> + Sync,
    {
        if states.len() != self.hosts {
            return Err(self.missing("run_hosts", states.len()));
        }
        let mut results: Vec<Option<Result<T>>> = (0..self.hosts).map(|_| None).collect();
        match self.schedule {
            Schedule::Forward => {
                for (i, s) in states.iter_mut().enumerate() {
                    results[i] = Some(body(i, s));
                }
            }
            Schedule::Reverse => {
                for (i, s) in states.iter_mut().enumerate().rev() {
                    results[i] = Some(body(i, s));
                }
            }
            Schedule::Parallel => {
                let body = &body;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = states
                        .iter_mut()
                        .enumerate()
                        .map(|(i, s)| scope.spawn(move || body(i, s)))
                        .collect();
                    for (i, h) in handles.into_iter().enumerate() {
                        results[i] = Some(h.join().expect("host body panicked"));
                    }
                });
            }
        }
        results.into_iter().map(|r| r.expect("every host ran")).collect()
    }

    fn missing(&self, kind: &'static str, got: usize) -> ApbError {
        ApbError::Deadlock {
            round: self.round,
            kind,
            expected: self.hosts,
            got,
        }
    }

    fn check(&self, kind: CollectiveKind, got: usize) -> Result<()> {
        if got != self.hosts {
            return Err(self.missing(kind.name(), got));
        }
        Ok(())
    }

    fn record(&mut self, kind: CollectiveKind, sent: Vec<usize>, received: Vec<usize>) {
        let volume = received.iter().copied().max().unwrap_or(0) as u64;
        self.trace.records.push(CommRecord {
            round: self.round,
            kind,
            sent,
            received,
            volume,
        });
        self.round += 1;
    }

    /// Every host receives all payloads in host-index order.
    pub fn all_gather<T: Payload + Clone>(&mut self, payloads: Vec<T>) -> Result<Vec<Vec<T>>> {
        self.check(CollectiveKind::AllGather, payloads.len())?;
        let sizes: Vec<usize> = payloads.iter().map(Payload::elements).collect();
        let total: usize = sizes.iter().sum();
        self.record(
            CollectiveKind::AllGather,
            sizes.iter().map(|s| s * self.hosts).collect(),
            vec![total; self.hosts],
        );
        Ok(vec![payloads; self.hosts])
    }

    /// Root (0-based) receives all payloads in host-index order.
    pub fn gather<T: Payload>(&mut self, root: usize, payloads: Vec<T>) -> Result<Vec<T>> {
        self.check(CollectiveKind::Gather, payloads.len())?;
        if root >= self.hosts {
            return Err(contract(format!("gather root {root} out of range")));
        }
        let sizes: Vec<usize> = payloads.iter().map(Payload::elements).collect();
        let mut received = vec![0; self.hosts];
        received[root] = sizes.iter().sum();
        self.record(CollectiveKind::Gather, sizes, received);
        Ok(payloads)
    }

    /// Gather delivered to every host, so that replicated work after the
    /// gather sees identical inputs everywhere.
    pub fn broadcast_gather<T: Payload + Clone>(&mut self, payloads: Vec<T>) -> Result<Vec<Vec<T>>> {
        self.check(CollectiveKind::BroadcastGather, payloads.len())?;
        let sizes: Vec<usize> = payloads.iter().map(Payload::elements).collect();
        let total: usize = sizes.iter().sum();
        self.record(
            CollectiveKind::BroadcastGather,
            sizes.iter().map(|s| s * self.hosts).collect(),
            vec![total; self.hosts],
        );
        Ok(vec![payloads; self.hosts])
    }

    /// `payloads[i][j]` goes from host `i` to host `j`; host `j` receives
    /// `[payloads[0][j], payloads[1][j], ...]`.
    pub fn all_to_all<T: Payload>(&mut self, payloads: Vec<Vec<T>>) -> Result<Vec<Vec<T>>> {
        self.check(CollectiveKind::AllToAll, payloads.len())?;
        if let Some(row) = payloads.iter().find(|row| row.len() != self.hosts) {
            return Err(contract(format!(
                "all_to_all: a host supplied {} payloads for {} hosts",
                row.len(),
                self.hosts
            )));
        }
        let sent = payloads.iter().map(|row| row.elements()).collect();
        let mut inbound: Vec<Vec<T>> = (0..self.hosts).map(|_| Vec::with_capacity(self.hosts)).collect();
        for row in payloads {
            for (j, p) in row.into_iter().enumerate() {
                inbound[j].push(p);
            }
        }
        let received = inbound.iter().map(|v| v.elements()).collect();
        self.record(CollectiveKind::AllToAll, sent, received);
        Ok(inbound)
    }

    /// Host `h` receives what host `h−1 (mod H)` holds at ring step `step`.
    pub fn ring_pass<T: Payload>(&mut self, payloads: Vec<T>, step: usize) -> Result<Vec<T>> {
        self.check(CollectiveKind::RingPass, payloads.len())?;
        if step >= self.hosts {
            return Err(contract(format!("ring step {step} >= host count {}", self.hosts)));
        }
        let sent: Vec<usize> = payloads.iter().map(Payload::elements).collect();
        let mut shifted = payloads;
        shifted.rotate_right(1);
        let received = shifted.iter().map(Payload::elements).collect();
        self.record(CollectiveKind::RingPass, sent, received);
        Ok(shifted)
    }
}
