//! Runs a column kernel over every column of the state with a configurable
//! worker count and scheduling policy, recording per-worker busy time.
//!
//! The output buffer is bitwise identical for every (policy, worker count)
//! pair: each column writes only its own cells, and the kernel is a pure
//! function of the column input. Only the timings differ.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ModelState, SourceBuffer};
use crate::microphysics::ColumnSources;

/// Assignment of columns to workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SchedulePolicy {
    /// Contiguous ranges precomputed up front, sizes differing by at most one.
    Static,
    /// Workers grab fixed-size chunks from a shared cursor.
    Dynamic {
        #[serde(default = "default_chunk")]
        chunk: usize,
    },
    /// Grab sizes shrink geometrically with the remaining work, down to a floor.
    Guided {
        #[serde(default = "default_min_chunk")]
        min_chunk: usize,
    },
}

fn default_chunk() -> usize {
    16
}

fn default_min_chunk() -> usize {
    1
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        SchedulePolicy::Guided {
            min_chunk: default_min_chunk(),
        }
    }
}

impl SchedulePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulePolicy::Static => "static",
            SchedulePolicy::Dynamic { .. } => "dynamic",
            SchedulePolicy::Guided { .. } => "guided",
        }
    }

    /// Parse a CLI-style policy name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "static" => Ok(SchedulePolicy::Static),
            "dynamic" => Ok(SchedulePolicy::Dynamic {
                chunk: default_chunk(),
            }),
            "guided" => Ok(SchedulePolicy::Guided {
                min_chunk: default_min_chunk(),
            }),
            other => Err(Error::invalid_argument(format!(
                "unknown policy `{}` (expected static|dynamic|guided)",
                other
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SchedulePolicy::Dynamic { chunk } if chunk < 1 => {
                Err(Error::invalid_argument("dynamic chunk must be >= 1"))
            }
            SchedulePolicy::Guided { min_chunk } if min_chunk < 1 => {
                Err(Error::invalid_argument("guided min_chunk must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for SchedulePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WorkerTiming {
    pub worker_id: usize,
    /// Seconds spent inside kernel calls (grab overhead excluded).
    pub busy_time: f64,
    pub columns_processed: usize,
    pub grabs: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ImbalanceReport {
    pub wall_time: f64,
    pub max_busy: f64,
    pub mean_busy: f64,
    /// max_busy / mean_busy; 1.0 iff all busy times are equal.
    pub imbalance_factor: f64,
}

/// Partition `[0, n_items)` into `n_workers` contiguous ranges whose sizes
/// differ by at most one.
pub fn plan_static(n_items: usize, n_workers: usize) -> Result<Vec<Range<usize>>> {
    if n_workers == 0 {
        return Err(Error::invalid_argument("n_workers must be >= 1"));
    }
    let base = n_items / n_workers;
    let extra = n_items % n_workers;
    let mut ranges = Vec::with_capacity(n_workers);
    let mut start = 0;
    for w in 0..n_workers {
        let len = base + usize::from(w < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(ranges)
}

/// Summarise per-worker busy times against the wall time.
pub fn imbalance(timings: &[WorkerTiming], wall: f64) -> Result<ImbalanceReport> {
    if timings.is_empty() {
        return Err(Error::invalid_argument("no worker timings supplied"));
    }
    let max_busy = timings.iter().map(|t| t.busy_time).fold(0.0, f64::max);
    let mean_busy = timings.iter().map(|t| t.busy_time).sum::<f64>() / timings.len() as f64;
    let imbalance_factor = if mean_busy > 0.0 { max_busy / mean_busy } else { 1.0 };
    Ok(ImbalanceReport {
        wall_time: wall,
        max_busy,
        mean_busy,
        imbalance_factor,
    })
}

/// Raw column-granular writer into a shared `SourceBuffer`.
///
/// Safety contract: every column index is written by at most one worker, and
/// all writes land in that column's disjoint cell range, so concurrent use
/// never aliases.
struct ColumnSink {
    q: Vec<*mut f64>,
    theta: *mut f64,
    nz: usize,
}

unsafe impl Send for ColumnSink {}
unsafe impl Sync for ColumnSink {}

impl ColumnSink {
    fn new(buffer: &mut SourceBuffer, nz: usize) -> Self {
        ColumnSink {
            q: buffer
                .q
                .iter_mut()
                .map(|f| f.values_mut().as_mut_ptr())
                .collect(),
            theta: buffer.theta.values_mut().as_mut_ptr(),
            nz,
        }
    }

    /// Safety: `col` must be owned exclusively by the calling worker and
    /// `src` must carry exactly `self.q.len()` profiles of length `nz`.
    unsafe fn write(&self, col: usize, src: &ColumnSources) {
        let off = col * self.nz;
        for (f, ptr) in self.q.iter().enumerate() {
            std::ptr::copy_nonoverlapping(src.q_tend[f].as_ptr(), ptr.add(off), self.nz);
        }
        std::ptr::copy_nonoverlapping(src.theta_tend.as_ptr(), self.theta.add(off), self.nz);
    }
}

struct WorkerState<'a> {
    sink: &'a ColumnSink,
    abort: &'a AtomicBool,
    failure: &'a Mutex<Option<Error>>,
    n_fields: usize,
    busy: f64,
    columns: usize,
    grabs: usize,
}

impl<'a> WorkerState<'a> {
    fn run_span<K>(&mut self, state: &ModelState, kernel: &K, span: Range<usize>) -> bool
    where
        K: Fn(&ModelState, usize) -> Result<ColumnSources> + Sync,
    {
        for col in span {
            if self.abort.load(Ordering::Relaxed) {
                return false;
            }
            let t0 = Instant::now();
            let out = kernel(state, col);
            self.busy += t0.elapsed().as_secs_f64();
            match out {
                Ok(src) => {
                    if src.q_tend.len() != self.n_fields {
                        self.fail(
                            col,
                            Error::ExtentMismatch(format!(
                                "kernel wrote {} fields, roster has {}",
                                src.q_tend.len(),
                                self.n_fields
                            )),
                        );
                        return false;
                    }
                    // Safety: the scheduling loop hands out each column once.
                    unsafe { self.sink.write(col, &src) };
                    self.columns += 1;
                }
                Err(e) => {
                    self.fail(col, e);
                    return false;
                }
            }
        }
        true
    }

    fn fail(&self, column: usize, source: Error) {
        let mut slot = self.failure.lock().unwrap();
        if slot.is_none() {
            *slot = Some(Error::KernelFailed {
                column,
                source: Box::new(source),
            });
        }
        self.abort.store(true, Ordering::Relaxed);
    }
}

/// Run `kernel` over every column exactly once and collect the tendencies
/// into a fresh `SourceBuffer` tagged with `component_index`.
pub fn execute<K>(
    state: &ModelState,
    component_index: usize,
    kernel: K,
    policy: &SchedulePolicy,
    n_workers: usize,
) -> Result<(SourceBuffer, Vec<WorkerTiming>)>
where
    K: Fn(&ModelState, usize) -> Result<ColumnSources> + Sync,
{
    if n_workers == 0 {
        return Err(Error::invalid_argument("n_workers must be >= 1"));
    }
    policy.validate()?;

    let n = state.grid.columns();
    let nz = state.grid.nz;
    let n_fields = state.config.len();
    let mut buffer = SourceBuffer::zeros(state, component_index);
    let sink = ColumnSink::new(&mut buffer, nz);
    let abort = AtomicBool::new(false);
    let failure = Mutex::new(None);
    let cursor = AtomicUsize::new(0);
    let static_ranges = plan_static(n, n_workers)?;

    let timings: Vec<WorkerTiming> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(n_workers);
        for worker_id in 0..n_workers {
            let kernel = &kernel;
            let sink = &sink;
            let abort = &abort;
            let failure = &failure;
            let cursor = &cursor;
            let range = static_ranges[worker_id].clone();
            let policy = *policy;
            handles.push(scope.spawn(move || {
                let mut ws = WorkerState {
                    sink,
                    abort,
                    failure,
                    n_fields,
                    busy: 0.0,
                    columns: 0,
                    grabs: 0,
                };
                match policy {
                    SchedulePolicy::Static => {
                        ws.grabs = 1;
                        ws.run_span(state, kernel, range);
                    }
                    SchedulePolicy::Dynamic { chunk } => loop {
                        if ws.abort.load(Ordering::Relaxed) {
                            break;
                        }
                        let start = cursor.fetch_add(chunk, Ordering::Relaxed);
                        if start >= n {
                            break;
                        }
                        ws.grabs += 1;
                        if !ws.run_span(state, kernel, start..(start + chunk).min(n)) {
                            break;
                        }
                    },
                    SchedulePolicy::Guided { min_chunk } => loop {
                        if ws.abort.load(Ordering::Relaxed) {
                            break;
                        }
                        let start = cursor.load(Ordering::Relaxed);
                        if start >= n {
                            break;
                        }
                        let size = ((n - start) / (2 * n_workers)).max(min_chunk);
                        if cursor
                            .compare_exchange(
                                start,
                                start + size,
                                Ordering::Relaxed,
                                Ordering::Relaxed,
                            )
                            .is_err()
                        {
                            continue;
                        }
                        ws.grabs += 1;
                        if !ws.run_span(state, kernel, start..(start + size).min(n)) {
                            break;
                        }
                    },
                }
                WorkerTiming {
                    worker_id,
                    busy_time: ws.busy,
                    columns_processed: ws.columns,
                    grabs: ws.grabs,
                }
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }
    Ok((buffer, timings))
}
