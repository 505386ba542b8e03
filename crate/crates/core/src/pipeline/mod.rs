//! Multi-worker frame pipeline.
//!
//! Stages are connected by single-slot buffers. Each idle worker picks the
//! most mature runnable stage: the highest-numbered stage that is not busy,
//! has a frame waiting in its input slot and an empty output slot. The
//! source in front of stage 0 always has a frame ready until it runs dry,
//! and the sink behind the last stage always accepts one. Because a stage
//! runs at most one frame at a time and every slot holds one frame, frames
//! leave in the order they entered.

mod frames;

pub use frames::{build_pipeline, Frame, FrameSink, FrameSource, PipelineOptions};

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};
use std::{fmt, thread};

use serde::Serialize;

use crate::error::{Error, Result};

type WorkFn<P> = Box<dyn FnMut(P) -> Result<P> + Send>;
type SourceFn<P> = Box<dyn FnMut(u64) -> Result<Option<P>> + Send>;
type SinkFn<P> = Box<dyn FnMut(u64, P) -> Result<()> + Send>;

pub struct Stage<P> {
    pub label: String,
    work: WorkFn<P>,
}

impl<P> Stage<P> {
    pub fn new(label: impl Into<String>, work: impl FnMut(P) -> Result<P> + Send + 'static) -> Self {
        Self {
            label: label.into(),
            work: Box::new(work),
        }
    }
}

impl<P> fmt::Debug for Stage<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stage").field("label", &self.label).finish()
    }
}

/// Busy flags and slot occupancy, without the frames themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduler {
    busy: Vec<bool>,
    /// `filled[i]` is the slot between stage `i` and stage `i + 1`.
    filled: Vec<bool>,
    source_open: bool,
}

impl Scheduler {
    pub fn new(stages: usize) -> Self {
        assert!(stages > 0, "a pipeline needs at least one stage");
        Self {
            busy: vec![false; stages],
            filled: vec![false; stages - 1],
            source_open: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.busy.len()
    }

    pub fn input_pending(&self, stage: usize) -> bool {
        if stage == 0 {
            self.source_open
        } else {
            self.filled[stage - 1]
        }
    }

    pub fn output_free(&self, stage: usize) -> bool {
        stage + 1 == self.stages() || !self.filled[stage]
    }

    pub fn is_busy(&self, stage: usize) -> bool {
        self.busy[stage]
    }

    pub fn set_busy(&mut self, stage: usize, busy: bool) {
        self.busy[stage] = busy;
    }

    /// Marks the slot in front of `stage` (stage > 0) as holding a frame.
    pub fn set_input_pending(&mut self, stage: usize, pending: bool) {
        self.filled[stage - 1] = pending;
    }

    pub fn close_source(&mut self) {
        self.source_open = false;
    }

    pub fn source_open(&self) -> bool {
        self.source_open
    }

    /// The most mature runnable stage, if any.
    pub fn select_job(&self) -> Option<usize> {
        (0..self.stages())
            .rev()
            .find(|&s| !self.busy[s] && self.input_pending(s) && self.output_free(s))
    }

    fn idle(&self) -> bool {
        !self.busy.iter().any(|b| *b) && !self.filled.iter().any(|f| *f)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageStats {
    pub label: String,
    pub frames: u64,
    pub total: Duration,
    pub max: Duration,
}

impl StageStats {
    pub fn mean(&self) -> Duration {
        if self.frames == 0 {
            Duration::ZERO
        } else {
            self.total / self.frames as u32
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub workers: usize,
    pub stages: Vec<StageStats>,
    /// Sequence numbers in the order the sink received them.
    pub emitted: Vec<u64>,
    /// Source-to-sink time of each emitted frame.
    pub latencies: Vec<Duration>,
    /// Time since the start of the run at which each frame left.
    pub departures: Vec<Duration>,
    pub wall: Duration,
    /// Largest number of frames ever held by one slot.
    pub peak_buffer_occupancy: usize,
    /// Largest number of simultaneous executions of any one stage.
    pub peak_stage_concurrency: usize,
}

impl RunReport {
    pub fn in_order(&self) -> bool {
        self.emitted.iter().enumerate().all(|(i, s)| *s == i as u64)
    }

    /// Mean gap between departures, ignoring the first `skip` frames.
    pub fn mean_inter_departure(&self, skip: usize) -> Option<Duration> {
        let d = self.departures.get(skip..)?;
        if d.len() < 2 {
            return None;
        }
        Some((d[d.len() - 1] - d[0]) / (d.len() - 1) as u32)
    }

    pub fn bench_table(&self) -> BenchTable {
        let rows: Vec<BenchRow> = self
            .stages
            .iter()
            .filter(|_| !self.emitted.is_empty())
            .map(|s| BenchRow {
                label: s.label.clone(),
                mean_ms: ms(s.mean()),
                max_ms: ms(s.max),
                frames: s.frames,
            })
            .collect();
        BenchTable {
            total_mean_ms: rows.iter().map(|r| r.mean_ms).sum(),
            rows,
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub label: String,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub frames: u64,
}

/// Per-stage wall times, with a total row equal to the sum of the means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub total_mean_ms: f64,
}

impl BenchTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10} {:>10} {:>8}", "Stage", "mean [ms]", "max [ms]", "frames")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:>10.3} {:>10.3} {:>8}", r.label, r.mean_ms, r.max_ms, r.frames)?;
        }
        write!(f, "{:<28} {:>10.3}", "Total", self.total_mean_ms)
    }
}

struct Token<P> {
    seq: u64,
    born: Instant,
    payload: P,
}

struct Shared<P> {
    sched: Scheduler,
    slots: Vec<Option<Token<P>>>,
    next_seq: u64,
    in_flight: u64,
    failure: Option<Error>,
    stats: Vec<StageStats>,
    emitted: Vec<u64>,
    latencies: Vec<Duration>,
    departures: Vec<Duration>,
    peak_occupancy: usize,
}

impl<P> Shared<P> {
    fn finished(&self) -> bool {
        self.failure.is_some() || (!self.sched.source_open() && self.in_flight == 0 && self.sched.idle())
    }
}

fn failure(stage: &str, seq: u64, e: Error) -> Error {
    match e {
        e @ Error::StageFailed { .. } => e,
        e => Error::StageFailed {
            stage: stage.to_string(),
            seq,
            msg: e.to_string(),
        },
    }
}

fn guarded<T>(stage: &str, seq: u64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r.map_err(|e| failure(stage, seq, e)),
        Err(_) => Err(Error::StageFailed {
            stage: stage.to_string(),
            seq,
            msg: "stage panicked".into(),
        }),
    }
}

/// Stages plus the frame source and sink.
pub struct PipelineState<P> {
    stages: Vec<Stage<P>>,
    source: SourceFn<P>,
    sink: SinkFn<P>,
}

impl<P: Send> fmt::Debug for PipelineState<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PipelineState").field("stages", &self.labels()).finish()
    }
}

impl<P: Send> PipelineState<P> {
    /// `source(seq)` yields frame `seq` or `None` when exhausted; `sink`
    /// receives finished frames.
    pub fn new(
        stages: Vec<Stage<P>>,
        source: impl FnMut(u64) -> Result<Option<P>> + Send + 'static,
        sink: impl FnMut(u64, P) -> Result<()> + Send + 'static,
    ) -> Self {
        assert!(!stages.is_empty(), "a pipeline needs at least one stage");
        Self {
            stages,
            source: Box::new(source),
            sink: Box::new(sink),
        }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.label.as_str()).collect()
    }

    /// Processes frames with `workers` threads until the source runs dry or
    /// `frame_limit` frames have left the sink.
    pub fn run(&mut self, workers: usize, frame_limit: Option<u64>) -> Result<RunReport> {
        if workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let n = self.stages.len();
        let labels: Vec<String> = self.stages.iter().map(|s| s.label.clone()).collect();
        let mut sched = Scheduler::new(n);
        if frame_limit == Some(0) {
            sched.close_source();
        }
        let shared = Mutex::new(Shared {
            sched,
            slots: (0..n - 1).map(|_| None).collect(),
            next_seq: 0,
            in_flight: 0,
            failure: None,
            stats: labels
                .iter()
                .map(|l| StageStats {
                    label: l.clone(),
                    ..Default::default()
                })
                .collect(),
            emitted: Vec::new(),
            latencies: Vec::new(),
            departures: Vec::new(),
            peak_occupancy: 0,
        });
        let cv = Condvar::new();
        let works: Vec<Mutex<&mut WorkFn<P>>> = self.stages.iter_mut().map(|s| Mutex::new(&mut s.work)).collect();
        let active: Vec<AtomicUsize> = (0..n).map(|_| AtomicUsize::new(0)).collect();
        let peak_active = AtomicUsize::new(0);
        let source = Mutex::new(&mut self.source);
        let sink = Mutex::new(&mut self.sink);
        let start = Instant::now();

        let worker = || {
            let mut guard = shared.lock().unwrap();
            loop {
                if guard.finished() {
                    cv.notify_all();
                    return;
                }
                let Some(id) = guard.sched.select_job() else {
                    guard = cv.wait(guard).unwrap();
                    continue;
                };
                guard.sched.set_busy(id, true);
                let input = if id == 0 {
                    let seq = guard.next_seq;
                    guard.next_seq += 1;
                    if frame_limit == Some(guard.next_seq) {
                        guard.sched.close_source();
                    }
                    Err(seq)
                } else {
                    guard.sched.set_input_pending(id, false);
                    Ok(guard.slots[id - 1].take().expect("pending slot holds a frame"))
                };
                drop(guard);
                cv.notify_all();

                let label = &labels[id];
                let result = match input {
                    Err(seq) => {
                        let pulled = guarded("source", seq, || (source.lock().unwrap())(seq));
                        match pulled {
                            Ok(Some(payload)) => {
                                let tok = Token {
                                    seq,
                                    born: Instant::now(),
                                    payload,
                                };
                                Some(execute(&works[id], &active[id], &peak_active, label, tok))
                            }
                            Ok(None) => None,
                            Err(e) => Some((Err(e), Duration::ZERO)),
                        }
                    }
                    Ok(tok) => Some(execute(&works[id], &active[id], &peak_active, label, tok)),
                };

                // the last stage hands its frame to the sink while still busy
                let result = match result {
                    Some((Ok(tok), dur)) if id + 1 == n => {
                        let (seq, born) = (tok.seq, tok.born);
                        let r = guarded("sink", seq, || (sink.lock().unwrap())(seq, tok.payload));
                        let now = Instant::now();
                        Some((r.map(|_| Err((seq, now - born, now - start))), dur))
                    }
                    Some((r, dur)) => Some((r.map(Ok), dur)),
                    None => None,
                };

                guard = shared.lock().unwrap();
                guard.sched.set_busy(id, false);
                match result {
                    None => guard.sched.close_source(),
                    Some((r, dur)) => {
                        if id == 0 {
                            guard.in_flight += 1;
                        }
                        let st = &mut guard.stats[id];
                        st.frames += 1;
                        st.total += dur;
                        st.max = st.max.max(dur);
                        match r {
                            Err(e) => {
                                if guard.failure.is_none() {
                                    guard.failure = Some(e);
                                }
                                guard.sched.close_source();
                            }
                            Ok(Ok(tok)) => {
                                let occupancy = 1 + guard.slots[id].is_some() as usize;
                                guard.peak_occupancy = guard.peak_occupancy.max(occupancy);
                                guard.slots[id] = Some(tok);
                                guard.sched.set_input_pending(id + 1, true);
                            }
                            Ok(Err((s, latency, departure))) => {
                                guard.in_flight -= 1;
                                guard.emitted.push(s);
                                guard.latencies.push(latency);
                                guard.departures.push(departure);
                            }
                        }
                    }
                }
                cv.notify_all();
            }
        };

        thread::scope(|s| {
            for i in 0..workers {
                thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn_scoped(s, worker)
                    .expect("spawn worker");
            }
        });

        let shared = shared.into_inner().unwrap();
        if let Some(e) = shared.failure {
            return Err(e);
        }
        Ok(RunReport {
            workers,
            stages: shared.stats,
            emitted: shared.emitted,
            latencies: shared.latencies,
            departures: shared.departures,
            wall: start.elapsed(),
            peak_buffer_occupancy: shared.peak_occupancy,
            peak_stage_concurrency: peak_active.load(Ordering::SeqCst),
        })
    }
}

fn execute<P>(
    work: &Mutex<&mut WorkFn<P>>,
    active: &AtomicUsize,
    peak: &AtomicUsize,
    label: &str,
    tok: Token<P>,
) -> (Result<Token<P>>, Duration) {
    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
    peak.fetch_max(now, Ordering::SeqCst);
    let t0 = Instant::now();
    let Token { seq, born, payload } = tok;
    let r = guarded(label, seq, || (work.lock().unwrap())(payload));
    let dur = t0.elapsed();
    active.fetch_sub(1, Ordering::SeqCst);
    (r.map(|payload| Token { seq, born, payload }), dur)
}

/// Runs `frames` frames and tabulates per-stage wall times.
pub fn bench_stages<P: Send>(state: &mut PipelineState<P>, workers: usize, frames: u64) -> Result<BenchTable> {
    Ok(state.run(workers, Some(frames))?.bench_table())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn select_job_examples() {
        let mut s = Scheduler::new(7);
        assert_eq!(s.select_job(), Some(0));
        s.set_input_pending(2, true);
        s.set_input_pending(5, true);
        assert_eq!(s.select_job(), Some(5));
        s.set_input_pending(6, true);
        assert_eq!(s.select_job(), Some(6));
        s.set_busy(6, true);
        assert_eq!(s.select_job(), Some(2));
        s.set_busy(2, true);
        s.set_busy(0, true);
        assert_eq!(s.select_job(), None);
    }

    #[test]
    fn sink_stage_is_always_free() {
        let mut s = Scheduler::new(1);
        assert_eq!(s.select_job(), Some(0));
        s.close_source();
        assert_eq!(s.select_job(), None);
    }

    fn counting(stages: usize, latencies: Vec<Vec<u64>>) -> (PipelineState<u64>, Arc<Mutex<Vec<u64>>>) {
        let out = Arc::new(Mutex::new(Vec::new()));
        let sink_out = out.clone();
        let stages = (0..stages)
            .map(|i| {
                let lat = latencies[i].clone();
                Stage::new(format!("s{i}"), move |x: u64| {
                    let us = lat[x as usize % lat.len()];
                    if us > 0 {
                        thread::sleep(Duration::from_micros(us));
                    }
                    Ok(x)
                })
            })
            .collect();
        let state = PipelineState::new(
            stages,
            |seq| Ok(Some(seq)),
            move |seq, x| {
                assert_eq!(seq, x);
                sink_out.lock().unwrap().push(x);
                Ok(())
            },
        );
        (state, out)
    }

    #[test]
    fn frames_leave_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for workers in [1, 2, 4, 8] {
            let lat = (0..6).map(|_| (0..7).map(|_| rng.gen_range(0..200)).collect()).collect();
            let (mut p, out) = counting(6, lat);
            let r = p.run(workers, Some(60)).unwrap();
            assert!(r.in_order());
            assert_eq!(*out.lock().unwrap(), (0..60).collect::<Vec<_>>());
            assert_eq!(r.peak_buffer_occupancy, 1);
            assert_eq!(r.peak_stage_concurrency, 1);
            assert!(r.stages.iter().all(|s| s.frames == 60));
        }
    }

    #[test]
    fn source_exhaustion_ends_the_run() {
        let stages = vec![Stage::new("double", |x: u32| Ok(x * 2))];
        let got = Arc::new(Mutex::new(Vec::new()));
        let g = got.clone();
        let mut p = PipelineState::new(
            stages,
            |seq| Ok((seq < 5).then_some(seq as u32)),
            move |_, x| {
                g.lock().unwrap().push(x);
                Ok(())
            },
        );
        let r = p.run(3, None).unwrap();
        assert_eq!(r.emitted, [0, 1, 2, 3, 4]);
        assert_eq!(*got.lock().unwrap(), [0, 2, 4, 6, 8]);
    }

    #[test]
    fn failing_stage_poisons_the_run() {
        let stages = vec![
            Stage::new("ok", Ok),
            Stage::new("bad", |x: u64| {
                if x == 7 {
                    Err(Error::Config("boom".into()))
                } else {
                    Ok(x)
                }
            }),
            Stage::new("panics", |x: u64| {
                assert!(x < 100);
                Ok(x)
            }),
        ];
        let mut p = PipelineState::new(stages, |seq| Ok(Some(seq)), |_, _| Ok(()));
        match p.run(4, Some(50)) {
            Err(Error::StageFailed { stage, seq, .. }) => {
                assert_eq!(stage, "bad");
                assert_eq!(seq, 7);
            }
            other => panic!("unexpected {other:?}"),
        }

        let stages = vec![Stage::new("panics", |x: u64| {
            assert!(x < 3);
            Ok(x)
        })];
        let mut p = PipelineState::new(stages, |seq| Ok(Some(seq)), |_, _| Ok(()));
        assert!(matches!(p.run(2, Some(10)), Err(Error::StageFailed { seq: 3, .. })));
    }

    #[test]
    fn zero_frames_give_an_empty_table() {
        let (mut p, _) = counting(3, vec![vec![0]; 3]);
        let t = bench_stages(&mut p, 2, 0).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.total_mean_ms, 0.0);
    }

    #[test]
    fn bench_reports_known_latencies() {
        let (mut p, _) = counting(3, vec![vec![2000], vec![4000], vec![6000]]);
        let t = bench_stages(&mut p, 1, 10).unwrap();
        assert_eq!(t.rows.len(), 3);
        for (row, want) in t.rows.iter().zip([2.0, 4.0, 6.0]) {
            assert!(row.mean_ms >= want && row.mean_ms < want + 1.5, "{row:?}");
        }
        let sum: f64 = t.rows.iter().map(|r| r.mean_ms).sum();
        assert!((t.total_mean_ms - sum).abs() < 1e-9);
        let text = t.to_string();
        assert!(text.lines().last().unwrap().starts_with("Total"));
        assert!(t.to_json().contains("\"mean_ms\""));
    }
}
