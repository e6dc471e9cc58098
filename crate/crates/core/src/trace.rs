//! Generation trace: an append-only event log and the metrics derived from it.
//!
//! On disk a trace is JSON lines. Every line carries the schema version `v`,
//! a sequence number `seq` (0, 1, 2, ...) and a `kind` tag. Queue positions
//! in events are 1-based.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SchedulerConfig;
use crate::error::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "seed")]
    Seed,
    #[serde(rename = "init")]
    Init,
    #[serde(rename = "fifo")]
    Fifo,
    #[serde(rename = "stage1")]
    Stage1,
    #[serde(rename = "stage2")]
    Stage2,
    #[serde(rename = "search")]
    Search,
    #[serde(rename = "stage2-only")]
    Stage2Only,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Seed => "seed",
            Phase::Init => "init",
            Phase::Fifo => "fifo",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Search => "search",
            Phase::Stage2Only => "stage2-only",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    RunStart {
        config: SchedulerConfig,
    },
    RunEnd {
        frames: usize,
    },
    /// Start of one outer-loop iteration; `queue_len` is the resident length.
    Iteration {
        phase: Phase,
        iteration: usize,
        queue_len: usize,
    },
    /// One denoiser call.
    Window {
        phase: Phase,
        iteration: usize,
        pass: usize,
        start: usize,
        width: usize,
        span: usize,
        local_span: usize,
        guided: bool,
        guidance_indices: Vec<usize>,
        prompt: usize,
        committed: usize,
        queue_len: usize,
    },
    /// End of one infer pass over a queue.
    Pass {
        phase: Phase,
        iteration: usize,
        pass: usize,
        calls: usize,
        queue_len: usize,
    },
    Enqueue {
        phase: Phase,
        iteration: usize,
        frame_index: usize,
        level: usize,
    },
    Dequeue {
        phase: Phase,
        iteration: usize,
        frame_index: usize,
        level: usize,
    },
    /// A self-reflection check; `previous` is `C⁰` before the check.
    Eval {
        iteration: usize,
        position: usize,
        score: f64,
        previous: Option<f64>,
        triggered: bool,
    },
    Search {
        iteration: usize,
        search: usize,
        rounds: usize,
        incumbent: f64,
        scores: Vec<f64>,
    },
    Correct {
        iteration: usize,
        search: usize,
        candidate: usize,
        previous: f64,
        score: f64,
    },
}

#[derive(Serialize)]
struct RecordOut<'a> {
    v: u32,
    seq: usize,
    #[serde(flatten)]
    event: &'a Event,
}

#[derive(Deserialize)]
struct RecordIn {
    v: u32,
    seq: usize,
    #[serde(flatten)]
    event: Event,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    events: Vec<Event>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (seq, event) in self.events.iter().enumerate() {
            let line = serde_json::to_string(&RecordOut {
                v: TRACE_VERSION,
                seq,
                event,
            })
            .expect("trace events always serialize");
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut events = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordIn = serde_json::from_str(&line)
                .map_err(|e| Error::Integrity(format!("line {}: {e}", n + 1)))?;
            if rec.v != TRACE_VERSION {
                return Err(Error::Integrity(format!(
                    "line {}: schema version {} (expected {TRACE_VERSION})",
                    n + 1,
                    rec.v
                )));
            }
            if rec.seq != events.len() {
                return Err(Error::Integrity(format!(
                    "line {}: sequence number {} (expected {})",
                    n + 1,
                    rec.seq,
                    events.len()
                )));
            }
            events.push(rec.event);
        }
        Ok(Self { events })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(file)).map_err(|e| match e {
            Error::Stream(io) => Error::io(path, io),
            other => other,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub calls: usize,
    pub passes: usize,
    pub max_span: usize,
    pub max_local_span: usize,
    pub max_width: usize,
    pub max_queue_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub phases: BTreeMap<Phase, PhaseStats>,
    pub total_calls: usize,
    pub max_width: usize,
    /// Largest resident Stage-1 queue, measured at iteration start.
    pub peak_resident_len: usize,
    /// Largest queue a Stage-1 pass ran over (resident plus the fresh group).
    pub peak_pass_len: usize,
    pub n_all: usize,
    pub n_eval: usize,
    pub n_corr: usize,
    pub r_corr: Option<f64>,
    pub r_succ: Option<f64>,
    pub reflection_extra_passes: usize,
    pub dequeues: usize,
    pub enqueues: usize,
}

impl Metrics {
    pub fn phase(&self, phase: Phase) -> PhaseStats {
        self.phases.get(&phase).cloned().unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics always serialize")
    }
}

/// Recomputes every metric from the events alone. Fails on a trace that does
/// not open with `run_start` and close with `run_end`, or whose pass records
/// disagree with the windows they summarize.
pub fn summarize(trace: &Trace) -> Result<Metrics> {
    let events = trace.events();
    match events.first() {
        Some(Event::RunStart { .. }) => {}
        _ => return Err(Error::Integrity("trace does not begin with run_start".into())),
    }
    let frames = match events.last() {
        Some(Event::RunEnd { frames }) if events.len() > 1 => *frames,
        _ => return Err(Error::Integrity("trace is truncated: no run_end".into())),
    };

    let mut phases: BTreeMap<Phase, PhaseStats> = BTreeMap::new();
    let mut m = Metrics {
        frames,
        phases: BTreeMap::new(),
        total_calls: 0,
        max_width: 0,
        peak_resident_len: 0,
        peak_pass_len: 0,
        n_all: 0,
        n_eval: 0,
        n_corr: 0,
        r_corr: None,
        r_succ: None,
        reflection_extra_passes: 0,
        dequeues: 0,
        enqueues: 0,
    };
    let mut open_calls = 0usize;
    for (seq, event) in events.iter().enumerate() {
        match event {
            Event::RunStart { .. } if seq != 0 => {
                return Err(Error::Integrity(format!("second run_start at seq {seq}")))
            }
            Event::RunEnd { .. } if seq + 1 != events.len() => {
                return Err(Error::Integrity(format!("run_end before the end at seq {seq}")))
            }
            Event::Iteration { phase, queue_len, .. } => {
                if *phase == Phase::Stage1 {
                    m.peak_resident_len = m.peak_resident_len.max(*queue_len);
                }
            }
            Event::Window {
                phase,
                width,
                span,
                local_span,
                queue_len,
                ..
            } => {
                let s = phases.entry(*phase).or_default();
                s.calls += 1;
                s.max_span = s.max_span.max(*span);
                s.max_local_span = s.max_local_span.max(*local_span);
                s.max_width = s.max_width.max(*width);
                s.max_queue_len = s.max_queue_len.max(*queue_len);
                m.total_calls += 1;
                m.max_width = m.max_width.max(*width);
                if *phase == Phase::Stage1 {
                    m.peak_pass_len = m.peak_pass_len.max(*queue_len);
                }
                open_calls += 1;
            }
            Event::Pass { phase, calls, .. } => {
                if *calls != open_calls {
                    return Err(Error::Integrity(format!(
                        "pass at seq {seq} reports {calls} calls but {open_calls} windows were logged"
                    )));
                }
                open_calls = 0;
                phases.entry(*phase).or_default().passes += 1;
                if *phase == Phase::Search {
                    m.reflection_extra_passes += 1;
                }
            }
            Event::Enqueue { .. } => m.enqueues += 1,
            Event::Dequeue { .. } => m.dequeues += 1,
            Event::Eval { .. } => m.n_all += 1,
            Event::Search { .. } => m.n_eval += 1,
            Event::Correct { .. } => m.n_corr += 1,
            Event::RunStart { .. } | Event::RunEnd { .. } => {}
        }
    }
    if open_calls != 0 {
        return Err(Error::Integrity(format!(
            "{open_calls} windows logged after the last pass"
        )));
    }
    m.phases = phases;
    let (r_corr, r_succ) = rates(m.n_all, m.n_eval, m.n_corr);
    m.r_corr = r_corr;
    m.r_succ = r_succ;
    Ok(m)
}

/// `(n_corr / n_all, n_corr / n_eval)`, each `None` when its denominator is 0.
pub(crate) fn rates(n_all: usize, n_eval: usize, n_corr: usize) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(n_corr, n_all), ratio(n_corr, n_eval))
}
