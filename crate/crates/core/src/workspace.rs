//! Page-pool workspace allocator and load-profile provisioning.
//!
//! The pool is a ledger over `page_count` abstract pages of `page_size`
//! bytes. Blocks are contiguous runs placed first-fit at the lowest page
//! index. Callers that cannot be served queue in strict FIFO order.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkspaceError {
    #[error("request for {requested} pages can never fit a pool of {capacity}")]
    Infeasible { requested: usize, capacity: usize },

    #[error("request for zero pages")]
    ZeroPages,

    #[error("timed out waiting for {requested} pages")]
    Timeout { requested: usize },

    #[error("block {0} is not held")]
    UnknownBlock(u64),

    #[error("empty load profile")]
    EmptyProfile,

    #[error("invalid workspace parameter: {0}")]
    InvalidParameter(String),

    #[error("profile line {line}: {message}")]
    ProfileParse { line: usize, message: String },
}

pub type WsResult<T> = std::result::Result<T, WorkspaceError>;

/// A held contiguous run of pages `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHandle {
    id: u64,
    start: usize,
    len: usize,
}

impl BlockHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolStats {
    pub page_size: usize,
    pub page_count: usize,
    pub pages_in_use: usize,
    pub held_blocks: usize,
    pub allocations: u64,
    pub releases: u64,
    pub wait_events: u64,
    pub timeouts: u64,
    pub peak_pages_in_use: usize,
    pub waiting: usize,
}

#[derive(Debug)]
struct State {
    occupied: Vec<bool>,
    held: BTreeMap<u64, (usize, usize)>,
    queue: VecDeque<u64>,
    next_ticket: u64,
    next_block: u64,
    stats: PoolStats,
}

impl State {
    fn first_fit(&self, len: usize) -> Option<usize> {
        let mut run = 0;
        for (i, &o) in self.occupied.iter().enumerate() {
            if o {
                run = 0;
            } else {
                run += 1;
                if run == len {
                    return Some(i + 1 - len);
                }
            }
        }
        None
    }

    fn take(&mut self, start: usize, len: usize) -> BlockHandle {
        self.occupied[start..start + len]
            .iter_mut()
            .for_each(|o| *o = true);
        let id = self.next_block;
        self.next_block += 1;
        self.held.insert(id, (start, len));
        let s = &mut self.stats;
        s.allocations += 1;
        s.pages_in_use += len;
        s.held_blocks += 1;
        s.peak_pages_in_use = s.peak_pages_in_use.max(s.pages_in_use);
        BlockHandle { id, start, len }
    }
}

#[derive(Debug)]
pub struct WorkspacePool {
    page_size: usize,
    page_count: usize,
    state: Mutex<State>,
    freed: Condvar,
}

impl WorkspacePool {
    pub fn new(page_size: usize, page_count: usize) -> WsResult<Self> {
        if page_size == 0 {
            return Err(WorkspaceError::InvalidParameter(
                "page_size must be positive".into(),
            ));
        }
        Ok(Self {
            page_size,
            page_count,
            state: Mutex::new(State {
                occupied: vec![false; page_count],
                held: BTreeMap::new(),
                queue: VecDeque::new(),
                next_ticket: 0,
                next_block: 0,
                stats: PoolStats {
                    page_size,
                    page_count,
                    ..PoolStats::default()
                },
            }),
            freed: Condvar::new(),
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_count(&self) -> usize {
        self.page_count
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check(&self, pages: usize) -> WsResult<()> {
        if pages == 0 {
            return Err(WorkspaceError::ZeroPages);
        }
        if pages > self.page_count {
            return Err(WorkspaceError::Infeasible {
                requested: pages,
                capacity: self.page_count,
            });
        }
        Ok(())
    }

    /// Blocks until `pages` contiguous pages are granted or `deadline`
    /// passes. `None` waits indefinitely.
    pub fn allocate(&self, pages: usize, deadline: Option<Instant>) -> WsResult<BlockHandle> {
        self.check(pages)?;
        let mut st = self.lock();
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.queue.push_back(ticket);
        let mut waited = false;
        loop {
            if st.queue.front() == Some(&ticket) {
                if let Some(start) = st.first_fit(pages) {
                    st.queue.pop_front();
                    st.stats.waiting = st.queue.len();
                    let h = st.take(start, pages);
                    // The next head may fit as well.
                    self.freed.notify_all();
                    return Ok(h);
                }
            }
            if !waited {
                waited = true;
                st.stats.wait_events += 1;
            }
            st.stats.waiting = st.queue.len();
            st = match deadline {
                None => self.freed.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        st.queue.retain(|&t| t != ticket);
                        st.stats.waiting = st.queue.len();
                        st.stats.timeouts += 1;
                        self.freed.notify_all();
                        return Err(WorkspaceError::Timeout { requested: pages });
                    }
                    self.freed
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    pub fn allocate_within(&self, pages: usize, timeout: Duration) -> WsResult<BlockHandle> {
        self.allocate(pages, Some(Instant::now() + timeout))
    }

    /// Non-blocking: grants only when nobody is queued and a run fits.
    pub fn try_allocate(&self, pages: usize) -> WsResult<Option<BlockHandle>> {
        self.check(pages)?;
        let mut st = self.lock();
        if !st.queue.is_empty() {
            return Ok(None);
        }
        Ok(st.first_fit(pages).map(|start| st.take(start, pages)))
    }

    pub fn release(&self, block: BlockHandle) -> WsResult<()> {
        let mut st = self.lock();
        match st.held.get(&block.id) {
            Some(&(start, len)) if start == block.start && len == block.len => {}
            _ => return Err(WorkspaceError::UnknownBlock(block.id)),
        }
        st.held.remove(&block.id);
        st.occupied[block.start..block.end()]
            .iter_mut()
            .for_each(|o| *o = false);
        st.stats.releases += 1;
        st.stats.pages_in_use -= block.len;
        st.stats.held_blocks -= 1;
        drop(st);
        self.freed.notify_all();
        Ok(())
    }

    pub fn stats(&self) -> PoolStats {
        self.lock().stats
    }

    /// Currently held blocks in id order.
    pub fn held_blocks(&self) -> Vec<BlockHandle> {
        self.lock()
            .held
            .iter()
            .map(|(&id, &(start, len))| BlockHandle { id, start, len })
            .collect()
    }
}

/// Layer widths and element size used to turn `N_act` into bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkspaceDims {
    pub d_in: usize,
    pub d_out: usize,
    pub elem_bytes: usize,
    pub page_size: usize,
}

impl WorkspaceDims {
    pub fn required_pages(&self, n_act: usize) -> usize {
        required_pages(
            n_act,
            self.d_in,
            self.d_out,
            self.elem_bytes,
            self.page_size,
        )
    }
}

/// `ceil(n_act · (d_in + d_out) · elem_bytes / page_size)`
pub fn required_pages(
    n_act: usize,
    d_in: usize,
    d_out: usize,
    elem_bytes: usize,
    page_size: usize,
) -> usize {
    let bytes = n_act as u128 * (d_in + d_out) as u128 * elem_bytes as u128;
    bytes.div_ceil(page_size as u128) as usize
}

/// Observed `N_act` per batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadProfile {
    samples: Vec<usize>,
}

impl LoadProfile {
    pub fn new(samples: Vec<usize>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn push(&mut self, n_act: usize) {
        self.samples.push(n_act);
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nearest-rank quantile: the smallest sample with at least `q·n`
    /// samples at or below it.
    pub fn quantile(&self, q: f64) -> WsResult<usize> {
        if self.samples.is_empty() {
            return Err(WorkspaceError::EmptyProfile);
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(WorkspaceError::InvalidParameter(format!(
                "quantile {q} outside (0, 1]"
            )));
        }
        let mut sorted = self.samples.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        // Tolerance absorbs products such as 0.99 * 100 = 99.00000000000001.
        let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        Ok(sorted[rank - 1])
    }

    pub fn parse(text: &str) -> WsResult<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            samples.push(line.parse().map_err(|_| WorkspaceError::ProfileParse {
                line: i + 1,
                message: format!("`{line}` is not a non-negative integer"),
            })?);
        }
        Ok(Self { samples })
    }

    pub fn to_text(&self) -> String {
        self.samples.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provision {
    pub quantile: f64,
    pub n_act: usize,
    pub pages_per_batch: usize,
    pub concurrency: usize,
    /// A recommendation for the pool size, not a guarantee against waits.
    pub recommended_pages: usize,
}

/// `c · required_pages(quantile_q(N_act))`
pub fn provision(
    profile: &LoadProfile,
    q: f64,
    dims: WorkspaceDims,
    concurrency: usize,
) -> WsResult<Provision> {
    if concurrency == 0 {
        return Err(WorkspaceError::InvalidParameter(
            "concurrency must be positive".into(),
        ));
    }
    if dims.page_size == 0 {
        return Err(WorkspaceError::InvalidParameter(
            "page_size must be positive".into(),
        ));
    }
    let n_act = profile.quantile(q)?;
    let pages = dims.required_pages(n_act);
    Ok(Provision {
        quantile: q,
        n_act,
        pages_per_batch: pages,
        concurrency,
        recommended_pages: pages * concurrency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReplayReport {
    pub batches: usize,
    pub wait_events: u64,
    /// Batches whose request exceeds the whole pool.
    pub infeasible: usize,
    pub peak_pages_in_use: usize,
}

/// Replays `samples` against a fresh pool of `page_count` pages with
/// `concurrency` workers, as a deterministic event simulation.
///
/// Batches run in waves of `concurrency`. Every worker of a wave requests
/// its block at time zero, in worker order; a batch holds its block for a
/// time proportional to its `N_act`, and completions are processed in
/// (finish time, worker) order. Requests that cannot be served join the
/// pool's FIFO order and count one wait each. A wave ends once all of its
/// batches have completed.
pub fn replay(
    samples: &[usize],
    page_count: usize,
    concurrency: usize,
    dims: WorkspaceDims,
) -> WsResult<ReplayReport> {
    if concurrency == 0 {
        return Err(WorkspaceError::InvalidParameter(
            "concurrency must be positive".into(),
        ));
    }
    let pool = WorkspacePool::new(dims.page_size, page_count)?;
    let mut report = ReplayReport::default();
    for wave in samples.chunks(concurrency) {
        let mut running: Vec<(usize, usize, BlockHandle)> = Vec::new();
        let mut queue: VecDeque<(usize, usize, usize)> = VecDeque::new();
        for (worker, &n_act) in wave.iter().enumerate() {
            report.batches += 1;
            let pages = dims.required_pages(n_act);
            if pages == 0 {
                continue;
            }
            if pages > page_count {
                report.infeasible += 1;
                continue;
            }
            let granted = if queue.is_empty() {
                pool.try_allocate(pages)?
            } else {
                None
            };
            match granted {
                Some(h) => running.push((n_act, worker, h)),
                None => {
                    report.wait_events += 1;
                    queue.push_back((worker, pages, n_act));
                }
            }
        }
        while !running.is_empty() {
            let next = (0..running.len())
                .min_by_key(|&i| (running[i].0, running[i].1))
                .expect("non-empty");
            let (now, _, h) = running.swap_remove(next);
            pool.release(h)?;
            while let Some(&(worker, pages, n_act)) = queue.front() {
                match pool.try_allocate(pages)? {
                    Some(h) => {
                        queue.pop_front();
                        running.push((now + n_act, worker, h));
                    }
                    None => break,
                }
            }
        }
        debug_assert!(
            queue.is_empty(),
            "an empty pool serves every feasible request"
        );
    }
    report.peak_pages_in_use = pool.stats().peak_pages_in_use;
    Ok(report)
}
