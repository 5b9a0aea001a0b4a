//! Background thread copying the logs of every pod labeled `rfm=<id>` into
//! the run's output file.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::client::{ClientError, KubeClient, LogCursor};
use super::RunIdentifier;
use crate::sched::Clock;

/// Prefix of lines the worker writes itself rather than copying from a pod.
pub const ANNOTATION_PREFIX: &str = "[kubebench]";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogStats {
    pub lines: usize,
    pub pods: Vec<String>,
    pub annotations: usize,
}

pub struct LogWorker {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<LogStats>,
}

impl LogWorker {
    /// Asks the worker to make one last pass over every pod and exit.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    /// Waits for the worker to exit on its own, which it does once every pod
    /// it knows about is terminal and fully drained.
    pub fn join(self) -> LogStats {
        self.handle.join().unwrap_or_else(|_| {
            log::error!("log worker panicked");
            LogStats::default()
        })
    }

    pub fn stop_and_join(self) -> LogStats {
        self.stop();
        self.join()
    }
}

pub struct LogWorkerConfig {
    pub namespace: String,
    pub id: RunIdentifier,
    /// Pods that must have finished before the worker exits on its own.
    pub expected_pods: u32,
    pub poll_interval: Duration,
}

#[derive(Default)]
struct PodStream {
    cursor: LogCursor,
    partial: String,
    done: bool,
    fetch_failed: bool,
}

pub fn run_log_worker(
    client: KubeClient,
    config: LogWorkerConfig,
    sink: Box<dyn Write + Send>,
    clock: Arc<dyn Clock>,
) -> LogWorker {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = std::thread::Builder::new()
        .name(format!("logs-{}", config.id))
        .spawn(move || worker_loop(&client, &config, sink, clock.as_ref(), &flag))
        .expect("failed to spawn log worker thread");
    LogWorker { stop, handle }
}

struct Sink {
    out: BufWriter<Box<dyn Write + Send>>,
    stats: LogStats,
}

impl Sink {
    fn line(&mut self, prefix: Option<&str>, text: &str) {
        let res = match prefix {
            Some(p) => writeln!(self.out, "[{p}] {text}"),
            None => writeln!(self.out, "{text}"),
        };
        if let Err(e) = res {
            log::error!("cannot write job output: {e}");
        }
        self.stats.lines += 1;
    }

    fn annotate(&mut self, text: &str) {
        let _ = writeln!(self.out, "{ANNOTATION_PREFIX} {text}");
        self.stats.annotations += 1;
    }
}

fn worker_loop(
    client: &KubeClient,
    config: &LogWorkerConfig,
    sink: Box<dyn Write + Send>,
    clock: &dyn Clock,
    stop: &AtomicBool,
) -> LogStats {
    let selector = config.id.selector();
    let mut pods: BTreeMap<String, PodStream> = BTreeMap::new();
    let mut sink = Sink { out: BufWriter::new(sink), stats: LogStats::default() };
    loop {
        let stopping = stop.load(Ordering::SeqCst);
        let listing = match client.list_pods(&config.namespace, &selector) {
            Ok(list) => list,
            Err(e) => {
                log::warn!("listing pods for {selector} failed: {e}");
                Vec::new()
            }
        };
        let mut terminal_now = BTreeMap::new();
        for pod in &listing {
            pods.entry(pod.name.clone()).or_default();
            terminal_now.insert(pod.name.clone(), pod.phase.is_terminal());
        }
        let prefixed = pods.len() > 1;
        for (name, stream) in pods.iter_mut().filter(|(_, s)| !s.done) {
            let prefix = prefixed.then_some(name.as_str());
            match client.get_pod_logs(&config.namespace, name, stream.cursor) {
                Ok(chunk) => {
                    stream.cursor = chunk.cursor;
                    stream.partial.push_str(&chunk.text);
                    while let Some(pos) = stream.partial.find('\n') {
                        let line: String = stream.partial.drain(..=pos).collect();
                        sink.line(prefix, line.trim_end_matches(['\n', '\r']));
                    }
                    // Logs read after the pod was seen terminal are complete.
                    if terminal_now.get(name).copied().unwrap_or(false) {
                        flush_partial(&mut sink, prefix, stream);
                        stream.done = true;
                    }
                }
                Err(ClientError::NotFound(_)) => {
                    flush_partial(&mut sink, prefix, stream);
                    sink.annotate(&format!("pod {name} disappeared before its logs were fully read"));
                    stream.done = true;
                }
                Err(e) => {
                    if !stream.fetch_failed {
                        sink.annotate(&format!("fetching logs of pod {name} failed: {e}"));
                        stream.fetch_failed = true;
                    }
                }
            }
        }
        let _ = sink.out.flush();
        if stopping {
            for (name, stream) in pods.iter_mut() {
                flush_partial(&mut sink, prefixed.then_some(name.as_str()), stream);
            }
            break;
        }
        let finished = pods.values().filter(|s| s.done).count();
        if !pods.is_empty() && finished == pods.len() && finished >= config.expected_pods as usize {
            break;
        }
        clock.sleep(config.poll_interval);
    }
    let _ = sink.out.flush();
    sink.stats.pods = pods.into_keys().collect();
    sink.stats
}

fn flush_partial(sink: &mut Sink, prefix: Option<&str>, stream: &mut PodStream) {
    if !stream.partial.is_empty() {
        let rest = std::mem::take(&mut stream.partial);
        sink.line(prefix, rest.trim_end_matches('\r'));
    }
}
