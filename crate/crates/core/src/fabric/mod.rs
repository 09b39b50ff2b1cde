//! Simulated devices with disjoint memories.
//!
//! A [`Fabric`] owns `n` worker states. A [`WorkerProgram`] runs once per
//! worker per [`Fabric::run`]; it sees only its own state and talks to other
//! workers through [`Endpoint::send`] / [`Endpoint::recv`], which deliver FIFO
//! per `(src, dst, tag)` and charge the [`CommLedger`].
//!
//! Two schedulers execute the same programs: a single-threaded cooperative
//! round-robin executor and one OS thread per worker. Programs only interact
//! through FIFO queues, so both produce identical results and ledgers. A
//! `recv` that can never be satisfied (every live worker blocked on an empty
//! queue) fails with a [`FabricError::Deadlock`] listing the wait edges.

mod collectives;
mod ledger;
mod meter;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll, Waker};

use thiserror::Error;

pub use ledger::{CommLedger, LinkStats};
pub use meter::{MemoryMeter, Residency, meter_assert};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkerId(pub usize);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "worker {}", self.0)
    }
}

/// Message label; FIFO order holds per `(src, dst, tag)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag {
    pub name: &'static str,
    pub index: u32,
}

impl Tag {
    pub const fn new(name: &'static str, index: u32) -> Self {
        Self { name, index }
    }
}

impl From<&'static str> for Tag {
    fn from(name: &'static str) -> Self {
        Tag::new(name, 0)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.name, self.index)
    }
}

/// 6 GiB, the memory of the modelled device.
pub const DEFAULT_MEMORY_CAPACITY: u64 = 6 * 1024 * 1024 * 1024;
/// Bytes charged per transmitted scalar.
pub const DEFAULT_WIRE_ELEMENT_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceSpec {
    pub memory_capacity: u64,
    pub wire_element_size: u64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self {
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
            wire_element_size: DEFAULT_WIRE_ELEMENT_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduling {
    /// All workers on the calling thread, polled round-robin in index order.
    #[default]
    Cooperative,
    /// One OS thread per worker.
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaitEdge {
    pub worker: WorkerId,
    pub waiting_on: WorkerId,
    pub tag: Tag,
}

impl fmt::Display for WaitEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} waits on {} ({})", self.worker, self.waiting_on, self.tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("a fabric needs at least one worker")]
    NoWorkers,
    #[error("invalid device spec: {0}")]
    InvalidSpec(String),
    #[error("{worker} addressed nonexistent or self peer {peer}")]
    BadPeer { worker: WorkerId, peer: usize },
    #[error("{worker} is not a member of the group")]
    NotInGroup { worker: WorkerId },
    #[error("deadlock: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Deadlock(Vec<WaitEdge>),
    #[error("{count} message(s) left undelivered after the run")]
    Undelivered { count: usize },
    #[error("{worker} needs {resident} bytes, capacity is {capacity} (over by {})", resident - capacity)]
    CapacityBreach {
        worker: WorkerId,
        resident: u64,
        capacity: u64,
    },
    #[error("{worker} panicked")]
    Panicked { worker: WorkerId },
}

type QueueKey = (usize, usize, Tag);

struct State {
    queues: HashMap<QueueKey, VecDeque<Tensor>>,
    ledger: CommLedger,
    meter: MemoryMeter,
    waiting: Vec<Option<(usize, Tag)>>,
    wakers: Vec<Option<Waker>>,
    done: Vec<bool>,
    deadlock: Option<Vec<WaitEdge>>,
}

impl State {
    fn queue_empty(&self, key: &QueueKey) -> bool {
        self.queues.get(key).is_none_or(VecDeque::is_empty)
    }

    fn runnable(&self, w: usize) -> bool {
        if self.done[w] {
            return false;
        }
        match self.waiting[w] {
            None => true,
            Some((src, tag)) => self.deadlock.is_some() || !self.queue_empty(&(src, w, tag)),
        }
    }

    /// Declare deadlock when every live worker waits on an empty queue.
    fn detect_deadlock(&mut self) -> bool {
        if self.deadlock.is_some() {
            return true;
        }
        let n = self.done.len();
        let mut edges = Vec::new();
        for w in (0..n).filter(|&w| !self.done[w]) {
            match self.waiting[w] {
                Some((src, tag)) if self.queue_empty(&(src, w, tag)) => edges.push(WaitEdge {
                    worker: WorkerId(w),
                    waiting_on: WorkerId(src),
                    tag,
                }),
                _ => return false,
            }
        }
        if edges.is_empty() {
            return false;
        }
        self.deadlock = Some(edges);
        for waker in self.wakers.iter_mut().filter_map(Option::take) {
            waker.wake();
        }
        true
    }
}

struct Shared {
    workers: usize,
    spec: DeviceSpec,
    state: Mutex<State>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        // A panicking worker poisons the lock; the state stays consistent
        // because every critical section is panic-free.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn finish(&self, w: usize) {
        let mut st = self.lock();
        st.done[w] = true;
        st.waiting[w] = None;
        st.detect_deadlock();
    }
}

/// A worker's handle onto the fabric.
#[derive(Clone)]
pub struct Endpoint {
    shared: Arc<Shared>,
    id: WorkerId,
}

impl Endpoint {
    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn size(&self) -> usize {
        self.shared.workers
    }

    pub fn device(&self) -> DeviceSpec {
        self.shared.spec
    }

    fn check_peer(&self, peer: WorkerId) -> Result<(), FabricError> {
        if peer.0 >= self.shared.workers || peer == self.id {
            return Err(FabricError::BadPeer {
                worker: self.id,
                peer: peer.0,
            });
        }
        Ok(())
    }

    /// Non-blocking send. The payload travels at full precision; the ledger
    /// charges `elements x wire_element_size` bytes.
    pub fn send(&self, dst: WorkerId, tag: impl Into<Tag>, t: Tensor) -> Result<(), FabricError> {
        self.check_peer(dst)?;
        let tag = tag.into();
        let bytes = t.len() as u64 * self.shared.spec.wire_element_size;
        let waker = {
            let mut st = self.shared.lock();
            st.queues
                .entry((self.id.0, dst.0, tag))
                .or_default()
                .push_back(t);
            st.ledger.record(self.id.0, dst.0, bytes);
            if st.waiting[dst.0] == Some((self.id.0, tag)) {
                st.wakers[dst.0].take()
            } else {
                None
            }
        };
        if let Some(w) = waker {
            w.wake();
        }
        Ok(())
    }

    /// Receive the oldest message from `src` with `tag`.
    pub fn recv(&self, src: WorkerId, tag: impl Into<Tag>) -> Recv<'_> {
        Recv {
            ep: self,
            src,
            tag: tag.into(),
        }
    }

    /// Account `bytes` of resident memory, failing if capacity is exceeded.
    pub fn reserve(&self, bytes: u64) -> Result<(), FabricError> {
        self.shared.lock().meter.reserve(self.id, bytes)
    }

    pub fn release(&self, bytes: u64) {
        self.shared.lock().meter.release(self.id, bytes);
    }
}

pub struct Recv<'a> {
    ep: &'a Endpoint,
    src: WorkerId,
    tag: Tag,
}

impl Future for Recv<'_> {
    type Output = Result<Tensor, FabricError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let me = self.ep.id.0;
        if let Err(e) = self.ep.check_peer(self.src) {
            return Poll::Ready(Err(e));
        }
        let key = (self.src.0, me, self.tag);
        let mut st = self.ep.shared.lock();
        if let Some(t) = st.queues.get_mut(&key).and_then(VecDeque::pop_front) {
            st.waiting[me] = None;
            return Poll::Ready(Ok(t));
        }
        if let Some(edges) = &st.deadlock {
            return Poll::Ready(Err(FabricError::Deadlock(edges.clone())));
        }
        st.waiting[me] = Some((self.src.0, self.tag));
        st.wakers[me] = Some(cx.waker().clone());
        if st.detect_deadlock() {
            let edges = st.deadlock.clone().unwrap_or_default();
            return Poll::Ready(Err(FabricError::Deadlock(edges)));
        }
        Poll::Pending
    }
}

/// Code executed by every worker of a fabric for one run.
#[allow(async_fn_in_trait)]
pub trait WorkerProgram<S>: Sync {
    type Output: Send;

    async fn run(&self, ep: &Endpoint, state: &mut S) -> crate::Result<Self::Output>;
}

/// Adapter running a stateless async closure as a [`WorkerProgram`].
pub struct FnProgram<F>(pub F);

impl<S, F, Fut, T> WorkerProgram<S> for FnProgram<F>
where
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = crate::Result<T>>,
    T: Send,
{
    type Output = T;

    async fn run(&self, ep: &Endpoint, _state: &mut S) -> crate::Result<T> {
        (self.0)(ep.clone()).await
    }
}

pub struct Fabric<S> {
    shared: Arc<Shared>,
    states: Vec<S>,
    scheduling: Scheduling,
}

struct FinishGuard<'a> {
    shared: &'a Shared,
    worker: usize,
}

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        self.shared.finish(self.worker);
    }
}

type LocalFuture<'a, T> = Pin<Box<dyn Future<Output = crate::Result<T>> + 'a>>;

impl<S: Send> Fabric<S> {
    pub fn spawn(
        workers: usize,
        spec: DeviceSpec,
        scheduling: Scheduling,
        init: impl FnMut(WorkerId) -> S,
    ) -> Result<Self, FabricError> {
        if workers == 0 {
            return Err(FabricError::NoWorkers);
        }
        if spec.memory_capacity == 0 || spec.wire_element_size == 0 {
            return Err(FabricError::InvalidSpec(format!("{spec:?}")));
        }
        let state = State {
            queues: HashMap::new(),
            ledger: CommLedger::new(workers),
            meter: MemoryMeter::new(workers, spec.memory_capacity),
            waiting: vec![None; workers],
            wakers: vec![None; workers],
            done: vec![false; workers],
            deadlock: None,
        };
        Ok(Self {
            shared: Arc::new(Shared {
                workers,
                spec,
                state: Mutex::new(state),
            }),
            states: (0..workers).map(WorkerId).map(init).collect(),
            scheduling,
        })
    }

    pub fn size(&self) -> usize {
        self.shared.workers
    }

    pub fn device(&self) -> DeviceSpec {
        self.shared.spec
    }

    pub fn scheduling(&self) -> Scheduling {
        self.scheduling
    }

    /// Cumulative ledger since the fabric was spawned.
    pub fn ledger(&self) -> CommLedger {
        self.shared.lock().ledger.clone()
    }

    pub fn meter(&self) -> MemoryMeter {
        self.shared.lock().meter.clone()
    }

    /// Host-side view of one worker's state.
    pub fn state(&self, worker: WorkerId) -> &S {
        &self.states[worker.0]
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    /// Host-side mutable access, for loading or inspecting a single worker.
    pub fn state_mut(&mut self, worker: WorkerId) -> &mut S {
        &mut self.states[worker.0]
    }

    /// Run `program` on every worker; returns the outputs in worker order.
    pub fn run<P: WorkerProgram<S>>(&mut self, program: &P) -> crate::Result<Vec<P::Output>> {
        {
            let mut st = self.shared.lock();
            st.done.iter_mut().for_each(|d| *d = false);
            st.waiting.iter_mut().for_each(|w| *w = None);
            st.deadlock = None;
        }
        let endpoints: Vec<Endpoint> = (0..self.size())
            .map(|i| Endpoint {
                shared: Arc::clone(&self.shared),
                id: WorkerId(i),
            })
            .collect();
        let results = match self.scheduling {
            Scheduling::Cooperative => run_cooperative(&self.shared, &endpoints, &mut self.states, program),
            Scheduling::Threaded => run_threaded(&self.shared, &endpoints, &mut self.states, program),
        };
        let undelivered: usize = self.shared.lock().queues.values().map(VecDeque::len).sum();
        self.shared.lock().queues.clear();
        // Report a root cause ahead of the deadlocks it induces in peers.
        let mut outputs = Vec::with_capacity(results.len());
        let mut first_deadlock = None;
        for r in results {
            match r {
                Ok(v) => outputs.push(v),
                Err(crate::Error::Fabric(FabricError::Deadlock(e))) => {
                    first_deadlock.get_or_insert(FabricError::Deadlock(e));
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(d) = first_deadlock {
            return Err(d.into());
        }
        if undelivered > 0 {
            return Err(FabricError::Undelivered { count: undelivered }.into());
        }
        Ok(outputs)
    }

    /// Run a stateless async closure on every worker.
    pub fn run_fn<F, Fut, T>(&mut self, f: F) -> crate::Result<Vec<T>>
    where
        F: Fn(Endpoint) -> Fut + Sync,
        Fut: Future<Output = crate::Result<T>>,
        T: Send,
    {
        self.run(&FnProgram(f))
    }
}

fn run_cooperative<S, P: WorkerProgram<S>>(
    shared: &Shared,
    endpoints: &[Endpoint],
    states: &mut [S],
    program: &P,
) -> Vec<crate::Result<P::Output>> {
    let n = endpoints.len();
    let mut futures: Vec<LocalFuture<'_, P::Output>> = endpoints
        .iter()
        .zip(states.iter_mut())
        .map(|(ep, st)| Box::pin(program.run(ep, st)) as LocalFuture<'_, P::Output>)
        .collect();
    let mut results: Vec<Option<crate::Result<P::Output>>> = (0..n).map(|_| None).collect();
    let mut cx = Context::from_waker(Waker::noop());
    let mut remaining = n;
    while remaining > 0 {
        let mut polled = false;
        for w in 0..n {
            if results[w].is_some() || !shared.lock().runnable(w) {
                continue;
            }
            polled = true;
            if let Poll::Ready(r) = futures[w].as_mut().poll(&mut cx) {
                results[w] = Some(r);
                remaining -= 1;
                shared.finish(w);
            }
        }
        if !polled {
            // Unreachable while deadlock detection holds; fail loudly rather than spin.
            let edges = shared.lock().deadlock.clone().unwrap_or_default();
            for r in results.iter_mut().filter(|r| r.is_none()) {
                *r = Some(Err(FabricError::Deadlock(edges.clone()).into()));
            }
            break;
        }
    }
    results.into_iter().map(|r| r.expect("every worker resolved")).collect()
}

fn run_threaded<S: Send, P: WorkerProgram<S>>(
    shared: &Shared,
    endpoints: &[Endpoint],
    states: &mut [S],
    program: &P,
) -> Vec<crate::Result<P::Output>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .iter()
            .zip(states.iter_mut())
            .map(|(ep, st)| {
                scope.spawn(move || {
                    let _guard = FinishGuard {
                        shared,
                        worker: ep.id.0,
                    };
                    futures::executor::block_on(program.run(ep, st))
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(w, h)| {
                h.join().unwrap_or_else(|_| {
                    Err(FabricError::Panicked {
                        worker: WorkerId(w),
                    }
                    .into())
                })
            })
            .collect()
    })
}
