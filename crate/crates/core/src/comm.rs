//! Virtual 4D device grid and in-process collectives.
//!
//! Each rank runs on its own thread. A collective is a rendezvous on a
//! per-(axis, group) slot: members post their contribution, the last one to
//! arrive combines them in ascending axis-coordinate order and charges the
//! byte counters, and every member then collects the shared result. Posting
//! never blocks, so collectives on orthogonal groups can be in flight at the
//! same time.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::scalar::{Scalar, BF16_BYTES};

// reshard lives next to ShardedTensor in pmm

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    D,
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::D, Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::D => "D",
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct RankCoord {
    pub d: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl RankCoord {
    pub fn get(&self, axis: Axis) -> usize {
        match axis {
            Axis::D => self.d,
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn with(mut self, axis: Axis, v: usize) -> Self {
        match axis {
            Axis::D => self.d = v,
            Axis::X => self.x = v,
            Axis::Y => self.y = v,
            Axis::Z => self.z = v,
        }
        self
    }
}

/// Ranks that differ only in one axis coordinate, sorted by that coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub axis: Axis,
    pub members: Vec<usize>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Lowest member rank; identifies the group along its axis.
    pub fn id(&self) -> usize {
        self.members[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DeviceGrid {
    dims: [usize; 4],
}

impl DeviceGrid {
    pub fn new(g_d: usize, g_x: usize, g_y: usize, g_z: usize) -> Result<Self> {
        let dims = [g_d, g_x, g_y, g_z];
        if dims.contains(&0) {
            return Err(Error::input(format!("grid dims must be >= 1, got {g_d}x{g_x}x{g_y}x{g_z}")));
        }
        Ok(Self { dims })
    }

    pub fn single() -> Self {
        Self { dims: [1; 4] }
    }

    pub fn dim(&self, axis: Axis) -> usize {
        self.dims[axis.index()]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    /// Ranks in one data-parallel replica.
    pub fn pmm_size(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn rank(&self, c: RankCoord) -> usize {
        let [_, gx, gy, gz] = self.dims;
        ((c.d * gx + c.x) * gy + c.y) * gz + c.z
    }

    pub fn coord(&self, rank: usize) -> RankCoord {
        let [_, gx, gy, gz] = self.dims;
        let z = rank % gz;
        let y = (rank / gz) % gy;
        let x = (rank / (gz * gy)) % gx;
        let d = rank / (gz * gy * gx);
        RankCoord { d, x, y, z }
    }

    pub fn group(&self, rank: usize, axis: Axis) -> Group {
        let c = self.coord(rank);
        let members = (0..self.dim(axis)).map(|i| self.rank(c.with(axis, i))).collect();
        Group { axis, members }
    }

    /// Every group along `axis`, ordered by id.
    pub fn groups(&self, axis: Axis) -> Vec<Group> {
        let mut out: Vec<Group> = (0..self.size())
            .filter(|&r| self.coord(r).get(axis) == 0)
            .map(|r| self.group(r, axis))
            .collect();
        out.sort_by_key(Group::id);
        out
    }
}

impl fmt::Display for DeviceGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [d, x, y, z] = self.dims;
        write!(f, "{d}x{x}x{y}x{z}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum Precision {
    #[default]
    Fp32,
    /// Payload contributions rounded to bfloat16 before summation.
    Bf16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Phase {
    Sampling,
    #[default]
    Forward,
    Backward,
    DpSync,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
}

/// Bytes charged per collective are `wire_bytes * num / den`, where
/// `wire_bytes` is the ring-equivalent volume summed over members.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accounting {
    pub num: u64,
    pub den: u64,
}

impl Default for Accounting {
    fn default() -> Self {
        Self { num: 1, den: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatKey {
    pub step: u64,
    /// Replica the bytes belong to; `None` for D-axis traffic.
    pub dp_group: Option<usize>,
    pub axis: Axis,
    pub phase: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StatVal {
    pub bytes: u64,
    pub calls: u64,
}

/// Cumulative communication counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    entries: BTreeMap<StatKey, StatVal>,
}

impl CommStats {
    fn charge(&mut self, key: StatKey, bytes: u64) {
        let e = self.entries.entry(key).or_default();
        e.bytes += bytes;
        e.calls += 1;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&StatKey, &StatVal)> {
        self.entries.iter()
    }

    pub fn bytes_where(&self, f: impl Fn(&StatKey) -> bool) -> u64 {
        self.entries.iter().filter(|(k, _)| f(k)).map(|(_, v)| v.bytes).sum()
    }

    pub fn calls_where(&self, f: impl Fn(&StatKey) -> bool) -> u64 {
        self.entries.iter().filter(|(k, _)| f(k)).map(|(_, v)| v.calls).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_where(|_| true)
    }

    pub fn axis_bytes(&self, axis: Axis) -> u64 {
        self.bytes_where(|k| k.axis == axis)
    }

    pub fn phase_bytes(&self, phase: Phase) -> u64 {
        self.bytes_where(|k| k.phase == phase)
    }

    /// Counters accumulated since `earlier`.
    pub fn delta(&self, earlier: &CommStats) -> CommStats {
        let mut out = CommStats::default();
        for (k, v) in &self.entries {
            let before = earlier.entries.get(k).copied().unwrap_or_default();
            if v.calls > before.calls {
                out.entries.insert(
                    *k,
                    StatVal {
                        bytes: v.bytes - before.bytes,
                        calls: v.calls - before.calls,
                    },
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FabricConfig {
    pub timeout: Duration,
    pub accounting: Accounting,
    /// Worker threads allowed to compute at once; `None` means one per rank.
    pub threads: Option<usize>,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            accounting: Accounting::default(),
            threads: None,
        }
    }
}

/// Counting semaphore multiplexing rank workers onto fewer threads.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) {
        let mut free = lock(&self.free);
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
    }

    pub fn release(&self) {
        *lock(&self.free) += 1;
        self.cv.notify_one();
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

type Payload = Box<dyn Any + Send>;
type Shared = Arc<dyn Any + Send + Sync>;
type Combine = Box<dyn FnOnce(Vec<Payload>) -> Result<(Shared, u64)> + Send>;

struct Round {
    parts: Vec<Option<Payload>>,
    arrived: usize,
}

struct Done {
    result: std::result::Result<Shared, String>,
    readers: usize,
}

#[derive(Default)]
struct SlotState {
    pending: HashMap<u64, Round>,
    done: HashMap<u64, Done>,
}

struct Slot {
    state: Mutex<SlotState>,
    cv: Condvar,
}

/// Shared state of all ranks in one run.
pub struct Fabric {
    grid: DeviceGrid,
    config: FabricConfig,
    slots: HashMap<(Axis, usize), Slot>,
    stats: Mutex<CommStats>,
    limiter: Limiter,
    failed: AtomicBool,
}

impl Fabric {
    pub fn new(grid: DeviceGrid, config: FabricConfig) -> Arc<Self> {
        let mut slots = HashMap::new();
        for axis in Axis::ALL {
            for g in grid.groups(axis) {
                if g.size() > 1 {
                    slots.insert(
                        (axis, g.id()),
                        Slot {
                            state: Mutex::new(SlotState::default()),
                            cv: Condvar::new(),
                        },
                    );
                }
            }
        }
        let permits = config.threads.unwrap_or(grid.size());
        Arc::new(Self {
            grid,
            limiter: Limiter::new(permits),
            config,
            slots,
            stats: Mutex::new(CommStats::default()),
            failed: AtomicBool::new(false),
        })
    }

    pub fn grid(&self) -> DeviceGrid {
        self.grid
    }

    pub fn stats(&self) -> CommStats {
        lock(&self.stats).clone()
    }

    pub fn limiter(&self) -> &Limiter {
        &self.limiter
    }

    fn abort(&self) {
        self.failed.store(true, Ordering::SeqCst);
        for slot in self.slots.values() {
            let _g = lock(&slot.state);
            slot.cv.notify_all();
        }
    }

    /// Run `body` once per rank, each on its own thread, and return the
    /// per-rank results in rank order. If any rank fails the others are
    /// released from their collectives and the first root-cause error wins.
    pub fn run<R, F>(self: &Arc<Self>, body: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&Communicator) -> Result<R> + Sync,
    {
        let body = &body;
        let results: Vec<Result<R>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.grid.size())
                .map(|rank| {
                    let fabric = Arc::clone(self);
                    s.spawn(move || {
                        let comm = Communicator::new(fabric, rank);
                        comm.fabric.limiter.acquire();
                        let out = body(&comm);
                        comm.fabric.limiter.release();
                        if out.is_err() {
                            comm.fabric.abort();
                        }
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::contract("rank worker panicked")))
                })
                .collect()
        });
        let mut root = None;
        let mut peer = None;
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(v) => out.push(v),
                Err(Error::Contract(m)) if m == PEER_FAILED => {
                    peer.get_or_insert(Error::contract(m));
                }
                Err(e) => {
                    root.get_or_insert(e);
                }
            }
        }
        match root.or(peer) {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

const PEER_FAILED: &str = "a peer rank failed";

/// Handle for a posted collective.
#[must_use = "a posted collective must be waited on"]
pub struct Pending<R> {
    axis: Axis,
    group: usize,
    round: u64,
    local: Option<R>,
}

/// One rank's view of the fabric.
pub struct Communicator {
    fabric: Arc<Fabric>,
    rank: usize,
    coord: RankCoord,
    rounds: Mutex<[u64; 4]>,
    phase: Mutex<Phase>,
    step: Mutex<u64>,
}

impl Communicator {
    fn new(fabric: Arc<Fabric>, rank: usize) -> Self {
        let coord = fabric.grid.coord(rank);
        Self {
            fabric,
            rank,
            coord,
            rounds: Mutex::new([0; 4]),
            phase: Mutex::new(Phase::Forward),
            step: Mutex::new(0),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn coord(&self) -> RankCoord {
        self.coord
    }

    pub fn grid(&self) -> DeviceGrid {
        self.fabric.grid
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub fn group(&self, axis: Axis) -> Group {
        self.fabric.grid.group(self.rank, axis)
    }

    pub fn group_size(&self, axis: Axis) -> usize {
        self.fabric.grid.dim(axis)
    }

    pub fn set_phase(&self, phase: Phase) {
        *lock(&self.phase) = phase;
    }

    pub fn phase(&self) -> Phase {
        *lock(&self.phase)
    }

    pub fn set_step(&self, step: u64) {
        *lock(&self.step) = step;
    }

    pub fn step(&self) -> u64 {
        *lock(&self.step)
    }

    pub fn stats(&self) -> CommStats {
        self.fabric.stats()
    }

    /// Release this rank's compute permit while blocked on something other
    /// than a collective (e.g. a prefetch handoff).
    pub fn blocking<R>(&self, f: impl FnOnce() -> R) -> R {
        self.fabric.limiter.release();
        let out = f();
        self.fabric.limiter.acquire();
        out
    }

    fn key(&self, axis: Axis) -> StatKey {
        StatKey {
            step: self.step(),
            dp_group: (axis != Axis::D).then_some(self.coord.d),
            axis,
            phase: self.phase(),
        }
    }

    /// Post a generic collective. `combine` receives the members'
    /// contributions in axis-coordinate order and returns the shared result
    /// plus the wire bytes to charge; only the last arriving member's
    /// closure runs.
    fn post_raw<R: Send + Sync + 'static>(
        &self,
        axis: Axis,
        contribution: Payload,
        singleton: impl FnOnce(Payload) -> R,
        combine: Combine,
    ) -> Result<Pending<R>> {
        let key = self.key(axis);
        let group = self.group(axis);
        if group.size() == 1 {
            lock(&self.fabric.stats).charge(key, 0);
            return Ok(Pending {
                axis,
                group: group.id(),
                round: 0,
                local: Some(singleton(contribution)),
            });
        }
        let round = {
            let mut r = lock(&self.rounds);
            let v = r[axis.index()];
            r[axis.index()] += 1;
            v
        };
        let slot = &self.fabric.slots[&(axis, group.id())];
        let mut st = lock(&slot.state);
        let g = group.size();
        let pos = self.coord.get(axis);
        let entry = st.pending.entry(round).or_insert_with(|| Round {
            parts: (0..g).map(|_| None).collect(),
            arrived: 0,
        });
        if entry.parts[pos].is_some() {
            return Err(Error::contract(format!("rank {} posted twice on {axis}", self.rank)));
        }
        entry.parts[pos] = Some(contribution);
        entry.arrived += 1;
        if entry.arrived == g {
            let round_state = st.pending.remove(&round).expect("round present");
            let parts: Vec<Payload> = round_state.parts.into_iter().map(|p| p.expect("arrived")).collect();
            let result = match combine(parts) {
                Ok((shared, wire)) => {
                    let acc = self.fabric.config.accounting;
                    lock(&self.fabric.stats).charge(key, wire * acc.num / acc.den);
                    Ok(shared)
                }
                Err(e) => Err(e.to_string()),
            };
            st.done.insert(round, Done { result, readers: g });
            slot.cv.notify_all();
        }
        Ok(Pending {
            axis,
            group: group.id(),
            round,
            local: None,
        })
    }

    fn wait_raw<R: Clone + Send + Sync + 'static>(&self, p: Pending<R>) -> Result<R> {
        if let Some(v) = p.local {
            return Ok(v);
        }
        let slot = &self.fabric.slots[&(p.axis, p.group)];
        let deadline = Instant::now() + self.fabric.config.timeout;
        let mut st = lock(&slot.state);
        let mut released = false;
        let outcome = loop {
            if let Some(done) = st.done.get_mut(&p.round) {
                done.readers -= 1;
                let res = done.result.clone();
                if done.readers == 0 {
                    st.done.remove(&p.round);
                }
                break res.map_err(Error::Contract).and_then(|shared| {
                    shared
                        .downcast_ref::<R>()
                        .cloned()
                        .ok_or_else(|| Error::contract("collective result type mismatch"))
                });
            }
            if self.fabric.failed.load(Ordering::SeqCst) {
                break Err(Error::contract(PEER_FAILED));
            }
            let now = Instant::now();
            if now >= deadline {
                break Err(Error::Timeout {
                    axis: p.axis.to_string(),
                    secs: self.fabric.config.timeout.as_secs_f64(),
                });
            }
            if !released {
                self.fabric.limiter.release();
                released = true;
            }
            st = slot
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        };
        drop(st);
        if released {
            self.fabric.limiter.acquire();
        }
        outcome
    }

    /// Start an all-reduce of `buf` over the `axis` group.
    pub fn post_all_reduce<T: Scalar>(
        &self,
        axis: Axis,
        buf: Vec<T>,
        op: ReduceOp,
        precision: Precision,
    ) -> Result<Pending<Arc<Vec<T>>>> {
        let g = self.group_size(axis);
        let combine: Combine = Box::new(move |parts: Vec<Payload>| {
            let parts: Vec<Vec<T>> = parts
                .into_iter()
                .map(|p| *p.downcast::<Vec<T>>().expect("payload type"))
                .collect();
            let len = parts[0].len();
            if parts.iter().any(|p| p.len() != len) {
                let lens: Vec<usize> = parts.iter().map(Vec::len).collect();
                return Err(Error::contract(format!("all-reduce length mismatch {lens:?}")));
            }
            let round = |v: T| match precision {
                Precision::Bf16 => v.bf16_roundtrip(),
                Precision::Fp32 => v,
            };
            let mut acc: Vec<T> = parts[0].iter().map(|&v| round(v)).collect();
            for p in &parts[1..] {
                for (a, &v) in acc.iter_mut().zip(p) {
                    let v = round(v);
                    *a = match op {
                        ReduceOp::Sum => *a + v,
                        ReduceOp::Max => a.max(v),
                    };
                }
            }
            let elem = match precision {
                Precision::Bf16 => BF16_BYTES,
                Precision::Fp32 => T::BYTES,
            };
            let wire = len as u64 * elem * (g as u64 - 1);
            Ok((Arc::new(Arc::new(acc)) as Shared, wire))
        });
        self.post_raw(axis, Box::new(buf), |p| Arc::new(*p.downcast::<Vec<T>>().expect("payload type")), combine)
    }

    pub fn wait<R: Clone + Send + Sync + 'static>(&self, p: Pending<R>) -> Result<R> {
        self.wait_raw(p)
    }

    /// Blocking all-reduce in place.
    pub fn all_reduce<T: Scalar>(
        &self,
        axis: Axis,
        buf: &mut [T],
        op: ReduceOp,
        precision: Precision,
    ) -> Result<()> {
        let p = self.post_all_reduce(axis, buf.to_vec(), op, precision)?;
        let out = self.wait(p)?;
        buf.copy_from_slice(&out);
        Ok(())
    }

    /// Start an all-gather; the result holds every member's shard in axis order.
    pub fn post_all_gather<T: Scalar>(&self, axis: Axis, shard: Vec<T>) -> Result<Pending<Arc<Vec<Vec<T>>>>> {
        let combine: Combine = Box::new(move |parts: Vec<Payload>| {
            let parts: Vec<Vec<T>> = parts
                .into_iter()
                .map(|p| *p.downcast::<Vec<T>>().expect("payload type"))
                .collect();
            let total: u64 = parts.iter().map(|p| p.len() as u64).sum();
            // every member receives everything but its own shard
            let wire = parts.iter().map(|p| total - p.len() as u64).sum::<u64>() * T::BYTES;
            Ok((Arc::new(Arc::new(parts)) as Shared, wire))
        });
        self.post_raw(axis, Box::new(shard), |p| Arc::new(vec![*p.downcast::<Vec<T>>().expect("payload type")]), combine)
    }

    /// Per-member shards in axis order.
    pub fn all_gather_parts<T: Scalar>(&self, axis: Axis, shard: Vec<T>) -> Result<Vec<Vec<T>>> {
        let p = self.post_all_gather(axis, shard)?;
        Ok(self.wait(p)?.as_ref().clone())
    }

    /// Concatenation of all members' shards in axis order.
    pub fn all_gather<T: Scalar>(&self, axis: Axis, shard: Vec<T>) -> Result<Vec<T>> {
        Ok(self.all_gather_parts(axis, shard)?.concat())
    }
}

/// Run `body` on a fresh fabric for `grid`.
pub fn run_grid<R, F>(grid: DeviceGrid, config: FabricConfig, body: F) -> Result<(Vec<R>, CommStats)>
where
    R: Send,
    F: Fn(&Communicator) -> Result<R> + Sync,
{
    let fabric = Fabric::new(grid, config);
    let out = fabric.run(body)?;
    Ok((out, fabric.stats()))
}
