//! Real-process backend over loopback sockets.
//!
//! A pool of worker processes (the same binary, `worker` subcommand) connects
//! back to the backend's listener. Each in-flight invocation owns one worker:
//! the payload goes out as a length-prefixed frame, the response comes back
//! the same way, and an attempt that misses its deadline gets its process
//! killed and is reported as a timeout. This backend validates the payload
//! protocol and retry path against real processes; it makes no timing claims.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime};

use crate::monitor::ExecutionTrace;
use crate::payload::{Payload, WorkerResponse};
use crate::platform::wire::{read_frame, write_frame};
use crate::platform::{Backend, Completion, InvocationId, InvocationOutcome};
use crate::storage::{DataSourceConfig, DirStore, ObjectStore, SimulatedSource};
use crate::worker::{run_worker, WorkerEnv, ENV_SAMPLING_MS, ENV_SCRATCH_DIR, ENV_TOKEN_PATH};

pub struct LocalBackendOptions {
    /// Command line of the worker process; the connect address is appended.
    pub worker_cmd: Vec<String>,
    /// Maximum pooled worker processes (the concurrency limit).
    pub max_workers: usize,
    pub store_root: PathBuf,
    pub scratch_root: PathBuf,
    pub source: DataSourceConfig,
    pub sampling_ms: u64,
    /// Kill limit applied when a submit carries no explicit deadline.
    pub default_timeout_ms: u64,
}

struct Job {
    id: u64,
    bytes: Vec<u8>,
    timeout_ms: u64,
}

#[derive(Default)]
struct JobQueue {
    queue: Mutex<VecDeque<Job>>,
    ready: Condvar,
    closed: AtomicBool,
}

impl JobQueue {
    fn push(&self, job: Job) {
        self.queue.lock().unwrap().push_back(job);
        self.ready.notify_one();
    }

    fn pop(&self) -> Option<Job> {
        let mut q = self.queue.lock().unwrap();
        loop {
            if let Some(job) = q.pop_front() {
                return Some(job);
            }
            if self.closed.load(Ordering::Relaxed) {
                return None;
            }
            q = self.ready.wait(q).unwrap();
        }
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Relaxed);
        self.ready.notify_all();
    }
}

pub struct LocalBackend {
    jobs: Arc<JobQueue>,
    completions_rx: mpsc::Receiver<Completion>,
    completions_tx: mpsc::Sender<Completion>,
    buffered: VecDeque<Completion>,
    in_flight: usize,
    next_id: u64,
    threads: Vec<std::thread::JoinHandle<()>>,
    children: Vec<Arc<Mutex<Option<Child>>>>,
    idle: Arc<AtomicUsize>,
    shared: Arc<WorkerShared>,
    store: Arc<DirStore>,
    opts_max_workers: usize,
    default_timeout_ms: u64,
}

/// State shared by all worker-owner threads.
struct WorkerShared {
    listener: TcpListener,
    addr: SocketAddr,
    pair_lock: Mutex<()>,
    worker_cmd: Vec<String>,
    scratch_root: PathBuf,
    store_root: PathBuf,
    source_config: PathBuf,
    sampling_ms: u64,
}

impl LocalBackend {
    pub fn new(opts: LocalBackendOptions) -> std::io::Result<Self> {
        assert!(opts.max_workers >= 1, "local backend needs at least one worker");
        assert!(!opts.worker_cmd.is_empty(), "worker command must not be empty");
        std::fs::create_dir_all(&opts.scratch_root)?;
        let store = Arc::new(DirStore::new(&opts.store_root)?);
        let source_config = opts.scratch_root.join("source_config.json");
        std::fs::write(&source_config, serde_json::to_vec_pretty(&opts.source)?)?;

        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;

        let (tx, rx) = mpsc::channel();
        Ok(Self {
            jobs: Arc::new(JobQueue::default()),
            completions_rx: rx,
            completions_tx: tx,
            buffered: VecDeque::new(),
            in_flight: 0,
            next_id: 0,
            threads: Vec::new(),
            children: Vec::new(),
            idle: Arc::new(AtomicUsize::new(0)),
            shared: Arc::new(WorkerShared {
                listener,
                addr,
                pair_lock: Mutex::new(()),
                worker_cmd: opts.worker_cmd,
                scratch_root: opts.scratch_root,
                store_root: opts.store_root,
                source_config,
                sampling_ms: opts.sampling_ms,
            }),
            store,
            opts_max_workers: opts.max_workers,
            default_timeout_ms: opts.default_timeout_ms,
        })
    }

    fn spawn_owner_thread(&mut self) {
        let index = self.threads.len();
        let jobs = Arc::clone(&self.jobs);
        let tx = self.completions_tx.clone();
        let idle = Arc::clone(&self.idle);
        let shared = Arc::clone(&self.shared);
        let child_slot = Arc::new(Mutex::new(None));
        self.children.push(Arc::clone(&child_slot));
        let handle = std::thread::spawn(move || {
            worker_owner_loop(index, jobs, tx, idle, shared, child_slot);
        });
        self.threads.push(handle);
    }

    fn ensure_capacity(&mut self) {
        if self.idle.load(Ordering::Relaxed) == 0 && self.threads.len() < self.opts_max_workers {
            self.spawn_owner_thread();
        }
    }

    fn recv_completion(&mut self) -> Option<Completion> {
        if let Some(c) = self.buffered.pop_front() {
            return Some(c);
        }
        if self.in_flight == 0 {
            return None;
        }
        let c = self.completions_rx.recv().expect("worker threads alive");
        self.in_flight -= 1;
        Some(c)
    }
}

impl Backend for LocalBackend {
    fn warm_pool(&mut self, k: u32) {
        let n = (k as usize).min(self.opts_max_workers);
        if n == 0 {
            return;
        }
        let mut waiting = BTreeSet::new();
        for i in 0..n {
            while self.threads.len() < (i + 1).min(self.opts_max_workers) {
                self.spawn_owner_thread();
            }
            let id = self.submit(Payload::warmup("warmup", i as u32).encode(), None);
            waiting.insert(id);
        }
        while !waiting.is_empty() {
            let Some(c) = self.recv_completion() else { break };
            if !waiting.remove(&c.id) {
                self.buffered.push_back(c);
            }
        }
    }

    fn submit(&mut self, payload: Vec<u8>, deadline_ms: Option<u64>) -> InvocationId {
        let id = self.next_id;
        self.next_id += 1;
        let timeout_ms = deadline_ms.map_or(self.default_timeout_ms, |d| d.min(self.default_timeout_ms));
        self.ensure_capacity();
        self.jobs.push(Job { id, bytes: payload, timeout_ms });
        self.in_flight += 1;
        InvocationId(id)
    }

    fn next_completion(&mut self) -> Option<Completion> {
        self.recv_completion()
    }

    fn store(&self) -> Arc<dyn ObjectStore> {
        Arc::clone(&self.store) as Arc<dyn ObjectStore>
    }

    fn invoke_sync(&mut self, payload: Vec<u8>, deadline_ms: Option<u64>) -> InvocationOutcome {
        let id = self.submit(payload, deadline_ms);
        let mut stash = Vec::new();
        let mut found = None;
        while let Some(c) = self.recv_completion() {
            if c.id == id {
                found = Some(c.outcome);
                break;
            }
            stash.push(c);
        }
        for c in stash.into_iter().rev() {
            self.buffered.push_front(c);
        }
        found.expect("submitted invocation completes")
    }
}

impl Drop for LocalBackend {
    fn drop(&mut self) {
        self.jobs.close();
        for slot in &self.children {
            if let Some(mut child) = slot.lock().unwrap().take() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn worker_owner_loop(
    index: usize,
    jobs: Arc<JobQueue>,
    tx: mpsc::Sender<Completion>,
    idle: Arc<AtomicUsize>,
    shared: Arc<WorkerShared>,
    child_slot: Arc<Mutex<Option<Child>>>,
) {
    let mut stream: Option<TcpStream> = None;
    loop {
        idle.fetch_add(1, Ordering::Relaxed);
        let job = jobs.pop();
        idle.fetch_sub(1, Ordering::Relaxed);
        let Some(job) = job else { break };

        let outcome = serve_job(index, &job, &mut stream, &shared, &child_slot);
        if tx.send(Completion { id: InvocationId(job.id), outcome }).is_err() {
            break;
        }
    }
    if let Some(mut child) = child_slot.lock().unwrap().take() {
        let _ = child.kill();
        let _ = child.wait();
    }
}

fn serve_job(
    index: usize,
    job: &Job,
    stream: &mut Option<TcpStream>,
    shared: &WorkerShared,
    child_slot: &Arc<Mutex<Option<Child>>>,
) -> InvocationOutcome {
    let started_epoch_us = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .unwrap_or_default()
        .as_micros() as u64;

    let kill_worker = |stream: &mut Option<TcpStream>| {
        *stream = None;
        if let Some(mut child) = child_slot.lock().unwrap().take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    };

    if stream.is_none() {
        match spawn_and_pair(index, shared, child_slot) {
            Ok(s) => *stream = Some(s),
            Err(e) => {
                return InvocationOutcome::Transport { message: format!("spawn failed: {e}") }
            }
        }
    }
    let s = stream.as_mut().unwrap();

    if let Err(e) = write_frame(&mut *s, &job.bytes) {
        kill_worker(stream);
        return InvocationOutcome::Transport { message: format!("send failed: {e}") };
    }

    let deadline = Instant::now() + Duration::from_millis(job.timeout_ms);
    match read_frame_deadline(s, deadline) {
        Ok(bytes) => match WorkerResponse::decode(&bytes) {
            Ok(resp) => InvocationOutcome::Response(resp),
            Err(e) => {
                kill_worker(stream);
                InvocationOutcome::Transport { message: format!("bad response frame: {e}") }
            }
        },
        Err(ReadError::Deadline) => {
            kill_worker(stream);
            let (partition, attempt) = Payload::decode(&job.bytes)
                .map(|p| (p.range.partition_id, p.attempt))
                .unwrap_or((0, 0));
            let trace = ExecutionTrace {
                partition_id: partition,
                attempt,
                start_us: started_epoch_us,
                end_us: started_epoch_us + job.timeout_ms * 1_000,
                cold: false,
                killed: true,
                samples: Vec::new(),
                phases: Vec::new(),
            };
            InvocationOutcome::Timeout { trace }
        }
        Err(ReadError::Io(e)) => {
            kill_worker(stream);
            InvocationOutcome::Transport { message: format!("receive failed: {e}") }
        }
    }
}

fn spawn_and_pair(
    index: usize,
    shared: &WorkerShared,
    child_slot: &Arc<Mutex<Option<Child>>>,
) -> std::io::Result<TcpStream> {
    // Spawn-then-accept is serialized so each owner pairs with the process
    // it spawned.
    let _guard = shared.pair_lock.lock().unwrap();

    let worker_dir = shared.scratch_root.join(format!("worker-{index}"));
    std::fs::create_dir_all(&worker_dir)?;
    let mut cmd = Command::new(&shared.worker_cmd[0]);
    cmd.args(&shared.worker_cmd[1..])
        .arg("--connect")
        .arg(shared.addr.to_string())
        .arg("--store-root")
        .arg(&shared.store_root)
        .arg("--source-config")
        .arg(&shared.source_config)
        .env(ENV_TOKEN_PATH, worker_dir.join("token"))
        .env(ENV_SCRATCH_DIR, worker_dir.join("scratch"))
        .env(ENV_SAMPLING_MS, shared.sampling_ms.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null());
    let mut child = cmd.spawn()?;

    let deadline = Instant::now() + Duration::from_secs(10);
    let stream = loop {
        match shared.listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if let Ok(Some(status)) = child.try_wait() {
                    return Err(std::io::Error::other(format!("worker exited at startup: {status}")));
                }
                if Instant::now() > deadline {
                    let _ = child.kill();
                    return Err(std::io::Error::other("worker did not connect in time"));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    };
    stream.set_nodelay(true)?;
    *child_slot.lock().unwrap() = Some(child);
    Ok(stream)
}

enum ReadError {
    Deadline,
    Io(std::io::Error),
}

/// Read one frame, giving up at `deadline`.
fn read_frame_deadline(stream: &mut TcpStream, deadline: Instant) -> Result<Vec<u8>, ReadError> {
    let mut read_exact = |buf: &mut [u8]| -> Result<(), ReadError> {
        let mut filled = 0;
        while filled < buf.len() {
            let now = Instant::now();
            if now >= deadline {
                return Err(ReadError::Deadline);
            }
            stream
                .set_read_timeout(Some(deadline - now))
                .map_err(ReadError::Io)?;
            match stream.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(ReadError::Io(std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "worker closed the connection",
                    )))
                }
                Ok(n) => filled += n,
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    return Err(ReadError::Deadline)
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(ReadError::Io(e)),
            }
        }
        Ok(())
    };

    let mut len_bytes = [0u8; 4];
    read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    if len > crate::platform::wire::MAX_FRAME_SIZE {
        return Err(ReadError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "oversized frame",
        )));
    }
    let mut body = vec![0u8; len];
    read_exact(&mut body)?;
    Ok(body)
}

// ---------------------------------------------------------------------------
// Worker process entrypoint
// ---------------------------------------------------------------------------

pub struct WorkerProcessOptions {
    pub connect: String,
    pub store_root: PathBuf,
    pub source_config: PathBuf,
}

/// Main loop of a pooled worker process: connect back to the backend and
/// serve framed payloads until the socket closes.
pub fn run_worker_process(opts: WorkerProcessOptions) -> std::io::Result<()> {
    let token_path = std::env::var(ENV_TOKEN_PATH)
        .map(PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir().join("faasmr-token"));
    let scratch_dir = std::env::var(ENV_SCRATCH_DIR)
        .map(PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir().join("faasmr-scratch"));
    let sampling_ms: u64 = std::env::var(ENV_SAMPLING_MS)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1_000);
    std::fs::create_dir_all(&scratch_dir)?;

    let source_cfg: DataSourceConfig =
        serde_json::from_slice(&std::fs::read(&opts.source_config)?).map_err(std::io::Error::other)?;
    let env = WorkerEnv {
        token_path,
        scratch_dir,
        store: Arc::new(DirStore::new(&opts.store_root)?),
        source: Arc::new(SimulatedSource::new(source_cfg)),
        sampling_us: sampling_ms * 1_000,
        manifest_root: Some(opts.store_root.clone()),
    };

    let mut stream = TcpStream::connect(&opts.connect)?;
    stream.set_nodelay(true)?;
    loop {
        let request = match read_frame(&mut stream) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let response = run_worker(&request, &env);
        let mut out = stream.try_clone()?;
        write_frame(&mut out, &response.encode())?;
        out.flush()?;
    }
}
