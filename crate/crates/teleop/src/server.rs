//! TCP service running a closed loop in real time.
//!
//! One thread owns the [`ClosedLoop`] and is the only writer of simulation
//! state. Connections get a reader thread (commands in) and a writer thread
//! (frames out). Commands reach the simulation thread over a channel and are
//! drained between plant steps; frames reach writers through a bounded
//! per-client queue that drops its oldest entry when full, so a slow client
//! never holds up the loop.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use nalgebra::Vector2;
use netgov::scenario::{builtin, ClosedLoop, Feasibility, ScenarioConfig, SimError};
use thiserror::Error;

use crate::wire::{decode_command, encode_frame, ConstraintLine, OperatorCommand, ServerFrame, StateSnapshot};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    pub snapshot_hz: f64,
    /// Frames buffered per client before the oldest is dropped.
    pub queue_capacity: usize,
    /// Upper bound on plant steps per loop iteration, so commands and
    /// snapshots stay responsive when the machine cannot keep up.
    pub max_steps_per_tick: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            speed: 1.0,
            snapshot_hz: 30.0,
            queue_capacity: 64,
            max_steps_per_tick: 2000,
        }
    }
}

enum Outgoing {
    Snapshot(Arc<StateSnapshot>),
    Frame(ServerFrame),
}

struct ClientQueue {
    items: Mutex<VecDeque<Outgoing>>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
    closed: AtomicBool,
}

impl ClientQueue {
    fn new(capacity: usize) -> Self {
        ClientQueue {
            items: Mutex::new(VecDeque::with_capacity(capacity)),
            ready: Condvar::new(),
            capacity: capacity.max(1),
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        }
    }

    fn push(&self, item: Outgoing) {
        let mut q = self.items.lock().unwrap();
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(item);
        self.ready.notify_one();
    }

    fn pop(&self, shutdown: &AtomicBool) -> Option<Outgoing> {
        let mut q = self.items.lock().unwrap();
        loop {
            if let Some(item) = q.pop_front() {
                return Some(item);
            }
            if shutdown.load(Ordering::Relaxed) || self.closed.load(Ordering::Relaxed) {
                return None;
            }
            q = self.ready.wait_timeout(q, Duration::from_millis(50)).unwrap().0;
        }
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Relaxed);
        self.ready.notify_all();
    }
}

type Clients = Arc<Mutex<HashMap<u64, Arc<ClientQueue>>>>;

enum Inbound {
    Command { client: u64, command: OperatorCommand },
}

/// Catalog of scenarios reachable through `load_scenario`.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: HashMap<String, ScenarioConfig>,
}

impl Catalog {
    /// The scenarios shipped with the repository.
    pub fn builtin() -> Self {
        let mut c = Catalog::default();
        for name in builtin::names() {
            let cfg = builtin::load(name)
                .expect("listed builtin exists")
                .expect("builtin scenarios are valid");
            c.insert(cfg);
        }
        c
    }

    pub fn insert(&mut self, config: ScenarioConfig) {
        self.entries.insert(config.name.clone(), config);
    }

    pub fn get(&self, name: &str) -> Option<&ScenarioConfig> {
        self.entries.get(name)
    }
}

/// Build the snapshot of the loop's current state.
pub fn snapshot_of(sim: &ClosedLoop, seq: u64, paused: bool) -> StateSnapshot {
    let n = sim.topology().n();
    let state = sim.plant_state();
    let positions: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let p = state.position(i);
            [p[0], p[1]]
        })
        .collect();
    let margins = if sim.scene().is_empty() {
        Vec::new()
    } else {
        (0..n)
            .map(|i| {
                let p = state.position(i);
                sim.scene().iter().map(|h| h.margin(&p)).fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let applied = sim.applied_reference();
    let raw = sim.raw_reference();
    StateSnapshot {
        seq,
        scenario: sim.config().name.clone(),
        time: sim.time(),
        step: sim.step_index(),
        n,
        leaders: sim.topology().leaders().to_vec(),
        positions,
        m_estimates: sim.m_estimates().iter().map(|m| [m[0], m[1]]).collect(),
        applied_reference: [applied[0], applied[1]],
        raw_reference: [raw[0], raw[1]],
        constraints: sim
            .scene()
            .iter()
            .map(|h| ConstraintLine {
                normal: h.normal,
                offset: h.offset,
            })
            .collect(),
        margins,
        feasible: sim.feasibility() == Feasibility::Ok,
        paused,
        dropped: 0,
    }
}

/// Handle to a running service. Dropping it shuts the service down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    clients: Clients,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Per-client drop counters, keyed by connection id.
    pub fn dropped_frames(&self) -> HashMap<u64, u64> {
        self.clients
            .lock()
            .unwrap()
            .iter()
            .map(|(id, q)| (*id, q.dropped.load(Ordering::Relaxed)))
            .collect()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Block until the service stops (it only stops through [`shutdown`](Self::shutdown)).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for q in self.clients.lock().unwrap().values() {
            q.close();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind `addr` and start serving `config`. Port 0 picks a free port.
pub fn serve(config: ScenarioConfig, addr: &str, options: ServeOptions, catalog: Catalog) -> Result<ServerHandle, ServeError> {
    let sim = ClosedLoop::new(config)?;
    let listener = TcpListener::bind(addr).map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr().map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    listener.set_nonblocking(true).map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let clients: Clients = Arc::new(Mutex::new(HashMap::new()));
    let (tx, rx) = mpsc::channel();

    let sim_thread = {
        let shutdown = shutdown.clone();
        let clients = clients.clone();
        let options = options.clone();
        thread::Builder::new()
            .name("netgov-sim".into())
            .spawn(move || simulation_loop(sim, rx, clients, shutdown, options, catalog))
            .expect("spawn simulation thread")
    };
    let accept_thread = {
        let shutdown = shutdown.clone();
        let clients = clients.clone();
        let capacity = options.queue_capacity;
        thread::Builder::new()
            .name("netgov-accept".into())
            .spawn(move || accept_loop(listener, tx, clients, shutdown, capacity))
            .expect("spawn accept thread")
    };
    log::info!("teleop service listening on {local}");
    Ok(ServerHandle {
        addr: local,
        shutdown,
        clients,
        threads: vec![sim_thread, accept_thread],
    })
}

fn broadcast(clients: &Clients, frame: &Arc<StateSnapshot>) {
    for q in clients.lock().unwrap().values() {
        q.push(Outgoing::Snapshot(frame.clone()));
    }
}

fn reply(clients: &Clients, client: u64, frame: ServerFrame) {
    if let Some(q) = clients.lock().unwrap().get(&client) {
        q.push(Outgoing::Frame(frame));
    }
}

fn simulation_loop(
    mut sim: ClosedLoop,
    commands: Receiver<Inbound>,
    clients: Clients,
    shutdown: Arc<AtomicBool>,
    options: ServeOptions,
    catalog: Catalog,
) {
    let dt = sim.config().plant.dt;
    let period = Duration::from_secs_f64(1.0 / options.snapshot_hz);
    let mut speed = options.speed;
    let mut paused = false;
    let mut seq = 0u64;
    // pacing anchor: wall instant and the sim time at that instant
    let mut anchor = (Instant::now(), sim.time());
    let mut next_snapshot = Instant::now();
    let mut halted = false;

    while !shutdown.load(Ordering::Relaxed) {
        while let Ok(Inbound::Command { client, command }) = commands.try_recv() {
            let kind = command.kind();
            let result: Result<(), String> = match command {
                OperatorCommand::SetReference { r } => {
                    sim.set_reference(Vector2::new(r[0], r[1]));
                    Ok(())
                }
                OperatorCommand::Pause => {
                    paused = true;
                    Ok(())
                }
                OperatorCommand::Resume => {
                    paused = false;
                    anchor = (Instant::now(), sim.time());
                    Ok(())
                }
                OperatorCommand::Reset => sim.reset().map_err(|e| e.to_string()),
                OperatorCommand::LoadScenario { scenario } => match catalog.get(&scenario) {
                    Some(cfg) => ClosedLoop::new(cfg.clone()).map(|s| sim = s).map_err(|e| e.to_string()),
                    None => Err(format!("unknown scenario '{scenario}'")),
                },
                OperatorCommand::SetSpeed { speed: s } => {
                    speed = s;
                    anchor = (Instant::now(), sim.time());
                    Ok(())
                }
            };
            if matches!(kind, "reset" | "load_scenario") {
                halted = false;
                anchor = (Instant::now(), sim.time());
            }
            let frame = match result {
                Ok(()) => ServerFrame::Ack {
                    command: kind.to_string(),
                },
                Err(message) => ServerFrame::Error { message },
            };
            reply(&clients, client, frame);
        }

        if !paused && !halted {
            let target = anchor.1 + anchor.0.elapsed().as_secs_f64() * speed;
            let mut budget = options.max_steps_per_tick;
            while sim.time() + 0.5 * dt <= target && budget > 0 {
                if let Err(e) = sim.step() {
                    log::error!("simulation halted: {e}");
                    halted = true;
                    broadcast_error(&clients, &e.to_string());
                    break;
                }
                budget -= 1;
            }
            if budget == 0 {
                // falling behind: re-anchor instead of accumulating debt
                anchor = (Instant::now(), sim.time());
            }
        }

        let now = Instant::now();
        if now >= next_snapshot {
            seq += 1;
            broadcast(&clients, &Arc::new(snapshot_of(&sim, seq, paused || halted)));
            next_snapshot += period;
            if next_snapshot < now {
                next_snapshot = now + period;
            }
        }
        let wait = next_snapshot.saturating_duration_since(Instant::now()).min(Duration::from_millis(2));
        thread::sleep(wait);
    }
}

fn broadcast_error(clients: &Clients, message: &str) {
    for q in clients.lock().unwrap().values() {
        q.push(Outgoing::Frame(ServerFrame::Error {
            message: message.to_string(),
        }));
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, clients: Clients, shutdown: Arc<AtomicBool>, capacity: usize) {
    let mut next_id = 0u64;
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::Relaxed) {
        workers.retain(|w: &JoinHandle<()>| !w.is_finished());
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let id = next_id;
                next_id += 1;
                log::info!("client {id} connected from {peer}");
                let queue = Arc::new(ClientQueue::new(capacity));
                clients.lock().unwrap().insert(id, queue.clone());
                match stream.try_clone() {
                    Ok(read_half) => {
                        let (tx, clients2, shutdown2) = (tx.clone(), clients.clone(), shutdown.clone());
                        workers.push(thread::spawn(move || reader(id, read_half, tx, clients2, shutdown2)));
                        let (clients3, shutdown3) = (clients.clone(), shutdown.clone());
                        workers.push(thread::spawn(move || writer(id, stream, queue, clients3, shutdown3)));
                    }
                    Err(e) => {
                        log::warn!("client {id}: {e}");
                        clients.lock().unwrap().remove(&id);
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn reader(id: u64, stream: TcpStream, tx: Sender<Inbound>, clients: Clients, shutdown: Arc<AtomicBool>) {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    while !shutdown.load(Ordering::Relaxed) {
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => break,
            Ok(_) if line.last() != Some(&b'\n') => {}
            Ok(_) => {
                let text = String::from_utf8_lossy(&line);
                if !text.trim().is_empty() {
                    match decode_command(&text) {
                        Ok(command) => {
                            if tx.send(Inbound::Command { client: id, command }).is_err() {
                                break;
                            }
                        }
                        Err(e) => reply(&clients, id, ServerFrame::Error { message: e.to_string() }),
                    }
                }
                line.clear();
            }
            // timeout: keep the partial line and poll the shutdown flag
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    if let Some(q) = clients.lock().unwrap().remove(&id) {
        q.close();
    }
    log::info!("client {id} disconnected");
}

/// Write all of `buf`, retrying on timeouts until shutdown.
fn write_frame(stream: &mut TcpStream, buf: &[u8], shutdown: &AtomicBool) -> bool {
    let mut off = 0;
    while off < buf.len() {
        match stream.write(&buf[off..]) {
            Ok(0) => return false,
            Ok(k) => off += k,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if shutdown.load(Ordering::Relaxed) {
                    return false;
                }
            }
            Err(_) => return false,
        }
    }
    true
}

fn writer(id: u64, mut stream: TcpStream, queue: Arc<ClientQueue>, clients: Clients, shutdown: Arc<AtomicBool>) {
    let _ = stream.set_write_timeout(Some(Duration::from_millis(100)));
    while let Some(item) = queue.pop(&shutdown) {
        let mut line = match item {
            Outgoing::Snapshot(s) => {
                let mut s = (*s).clone();
                s.dropped = queue.dropped.load(Ordering::Relaxed);
                encode_frame(&ServerFrame::Snapshot(s))
            }
            Outgoing::Frame(f) => encode_frame(&f),
        };
        line.push('\n');
        if !write_frame(&mut stream, line.as_bytes(), &shutdown) {
            break;
        }
    }
    if let Some(q) = clients.lock().unwrap().remove(&id) {
        q.close();
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
}
