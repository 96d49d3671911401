//! Datagram timing server and client.
//!
//! Per request the server runs the measurement window:
//!
//! 1. zero the 40-byte response
//! 2. take the start timestamp
//! 3. drop requests shorter than 16 bytes
//! 4. echo the 16-byte nonce
//! 5. copy the packet tail into the work area
//! 6. encrypt the nonce
//! 7. append the scrambled zero (encryption of the zero block)
//! 8. take the end timestamp
//!
//! Timestamps are the low 32 bits of a cycle counter, little-endian, at
//! offsets 32 and 36. The counter is either the hardware one or a simulated
//! one that advances by the cycle model's count for the request.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::aes::{encrypt_ttable, expand_key, Block, Key128, RoundKeySchedule, TTableSet};
use crate::attack::{
    AttackError, PacketBatch, PacketGenerator, TimingOracle, TimingSample, MAX_PACKET_LEN, MIN_PACKET_LEN,
};
use crate::micro_ir::{decompose_encryption, Interpreter};
use crate::scheduler::{schedule_program, verify_gaps, Schedule, ScheduleError};
use crate::timing_sim::{CacheConfig, CacheModel, CompiledSchedule, LatencyModel, SimError};

pub const RESPONSE_LEN: usize = 40;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("no response from {target} after {attempts} attempt(s)")]
    Unreachable { target: SocketAddr, attempts: usize },
    #[error("schedule at depth {depth} fails gap verification (min gap {min_gap:?})")]
    GapVerification { depth: usize, min_gap: Option<usize> },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("malformed response of {0} bytes")]
    MalformedResponse(usize),
    #[error("packet length {0} outside {MIN_PACKET_LEN}..={MAX_PACKET_LEN}")]
    PacketLen(usize),
    #[error("cannot resolve address `{0}`")]
    Address(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerMode {
    Unprotected,
    Protected { depth: usize },
}

impl ServerMode {
    /// The instruction layout this mode runs: the plain program, or the
    /// interleaved one after its load-use gaps have been verified.
    pub fn schedule(&self) -> Result<Schedule, ServiceError> {
        let program = decompose_encryption();
        match *self {
            ServerMode::Unprotected => Ok(Schedule::linear(&program)?),
            ServerMode::Protected { depth } => {
                let s = schedule_program(&program, depth)?;
                let report = verify_gaps(&s, depth);
                if !report.passed {
                    return Err(ServiceError::GapVerification { depth, min_gap: report.min_load_use_gap });
                }
                Ok(s)
            }
        }
    }
}

/// Cycle counts the simulator assigns to requests for one server.
pub struct SimulatedTiming {
    ks: RoundKeySchedule,
    compiled: CompiledSchedule,
    cache: CacheModel,
    lm: LatencyModel,
    offset: u64,
}

impl SimulatedTiming {
    pub fn new(
        key: &Key128,
        mode: ServerMode,
        lm: LatencyModel,
        cache: &CacheConfig,
        offset: u64,
    ) -> Result<Self, ServiceError> {
        let schedule = mode.schedule()?;
        Ok(SimulatedTiming {
            ks: expand_key(key),
            compiled: CompiledSchedule::new(&schedule),
            cache: CacheModel::new(cache)?,
            lm,
            offset,
        })
    }

    /// Cycles for the request's encryption of its first 16 bytes.
    pub fn cycles(&self, packet: &[u8]) -> u64 {
        self.cycles_with(packet, &mut Vec::new())
    }

    pub fn cycles_with(&self, packet: &[u8], scratch: &mut Vec<bool>) -> u64 {
        let pt = Block(packet[..16].try_into().expect("packet shorter than 16 bytes"));
        self.cache.fill_pattern(&pt, &self.ks, TTableSet::shared(), scratch);
        let cycles = self.compiled.simulate_misses(scratch, &self.lm).expect("one outcome per lookup");
        self.offset + cycles.0
    }
}

pub enum TimingMode {
    /// Hardware cycle counter.
    Real,
    Simulated {
        lm: LatencyModel,
        cache: CacheConfig,
        offset: u64,
    },
}

pub struct ServerConfig {
    pub key: Key128,
    pub mode: ServerMode,
    pub bind: SocketAddr,
    pub timing: TimingMode,
}

enum Encryptor {
    Table,
    Scheduled(Interpreter),
}

enum Clock {
    Real,
    Simulated { timing: Box<SimulatedTiming>, counter: u32 },
}

#[inline]
fn cycle_counter() -> u32 {
    #[cfg(target_arch = "x86_64")]
    {
        #[allow(unused_unsafe)]
        // SAFETY: rdtsc has no preconditions on x86_64.
        unsafe {
            core::arch::x86_64::_rdtsc() as u32
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        use std::sync::OnceLock;
        use std::time::Instant;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u32
    }
}

/// The per-request measurement window, independent of the socket.
pub struct RequestHandler {
    ks: RoundKeySchedule,
    scrambled_zero: [u8; 16],
    encryptor: Encryptor,
    clock: Clock,
    workarea: Box<[u8; MAX_PACKET_LEN]>,
}

impl RequestHandler {
    pub fn new(key: &Key128, mode: ServerMode, timing: TimingMode) -> Result<Self, ServiceError> {
        let ks = expand_key(key);
        let scrambled_zero = encrypt_ttable(&Block::default(), &ks, TTableSet::shared()).0;
        let encryptor = match mode {
            ServerMode::Unprotected => Encryptor::Table,
            ServerMode::Protected { .. } => {
                Encryptor::Scheduled(Interpreter::new(&mode.schedule()?.flatten()).map_err(ScheduleError::from)?)
            }
        };
        let clock = match timing {
            TimingMode::Real => Clock::Real,
            TimingMode::Simulated { lm, cache, offset } => Clock::Simulated {
                timing: Box::new(SimulatedTiming::new(key, mode, lm, &cache, offset)?),
                counter: 0xffff_f000,
            },
        };
        Ok(RequestHandler { ks, scrambled_zero, encryptor, clock, workarea: Box::new([0; MAX_PACKET_LEN]) })
    }

    /// Sets the simulated counter; no effect with the hardware clock.
    pub fn set_counter(&mut self, value: u32) {
        if let Clock::Simulated { counter, .. } = &mut self.clock {
            *counter = value;
        }
    }

    pub fn scrambled_zero(&self) -> [u8; 16] {
        self.scrambled_zero
    }

    pub fn handle(&mut self, input: &[u8]) -> Option<[u8; RESPONSE_LEN]> {
        let mut out = [0u8; RESPONSE_LEN];
        let start = match &self.clock {
            Clock::Real => cycle_counter(),
            Clock::Simulated { counter, .. } => *counter,
        };
        out[32..36].copy_from_slice(&start.to_le_bytes());
        if input.len() < MIN_PACKET_LEN || input.len() > MAX_PACKET_LEN {
            return None;
        }
        out[..16].copy_from_slice(&input[..16]);
        self.workarea[16..input.len()].copy_from_slice(&input[16..]);
        let pt = Block(input[..16].try_into().unwrap());
        let ct = match &self.encryptor {
            Encryptor::Table => encrypt_ttable(&pt, &self.ks, TTableSet::shared()),
            Encryptor::Scheduled(interp) => interp.run(&pt, &self.ks, TTableSet::shared()).expect("verified program"),
        };
        self.workarea[..16].copy_from_slice(&ct.0);
        out[16..32].copy_from_slice(&self.scrambled_zero);
        let end = match &mut self.clock {
            Clock::Real => cycle_counter(),
            Clock::Simulated { timing, counter } => {
                let end = counter.wrapping_add(timing.cycles(input) as u32);
                // The next request starts a little later.
                *counter = end.wrapping_add(1000);
                end
            }
        };
        out[36..40].copy_from_slice(&end.to_le_bytes());
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResponsePacket {
    pub echo: [u8; 16],
    pub scrambled_zero: [u8; 16],
    pub start: u32,
    pub end: u32,
}

impl ResponsePacket {
    pub fn parse(bytes: &[u8]) -> Result<Self, ServiceError> {
        if bytes.len() != RESPONSE_LEN {
            return Err(ServiceError::MalformedResponse(bytes.len()));
        }
        Ok(ResponsePacket {
            echo: bytes[..16].try_into().unwrap(),
            scrambled_zero: bytes[16..32].try_into().unwrap(),
            start: u32::from_le_bytes(bytes[32..36].try_into().unwrap()),
            end: u32::from_le_bytes(bytes[36..40].try_into().unwrap()),
        })
    }

    pub fn to_bytes(&self) -> [u8; RESPONSE_LEN] {
        let mut out = [0u8; RESPONSE_LEN];
        out[..16].copy_from_slice(&self.echo);
        out[16..32].copy_from_slice(&self.scrambled_zero);
        out[32..36].copy_from_slice(&self.start.to_le_bytes());
        out[36..40].copy_from_slice(&self.end.to_le_bytes());
        out
    }

    /// Elapsed cycles, modulo 2^32.
    pub fn cycles(&self) -> u32 {
        self.end.wrapping_sub(self.start)
    }
}

pub struct Server {
    socket: UdpSocket,
    handler: RequestHandler,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(cfg: ServerConfig) -> Result<Self, ServiceError> {
        let handler = RequestHandler::new(&cfg.key, cfg.mode, cfg.timing)?;
        let socket = UdpSocket::bind(cfg.bind)?;
        socket.set_read_timeout(Some(Duration::from_millis(100)))?;
        Ok(Server { socket, handler, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServiceError> {
        Ok(self.socket.local_addr()?)
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Handles requests one at a time until the stop flag is raised.
    pub fn serve(mut self) -> Result<(), ServiceError> {
        let mut buf = [0u8; 2048];
        while !self.stop.load(Ordering::Relaxed) {
            let (len, peer) = match self.socket.recv_from(&mut buf) {
                Ok(x) => x,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
                // A client that went away can surface as a reset on some platforms.
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => continue,
                Err(e) => return Err(e.into()),
            };
            if let Some(response) = self.handler.handle(&buf[..len]) {
                if let Err(e) = self.socket.send_to(&response, peer) {
                    log::warn!("send to {peer} failed: {e}");
                }
            }
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<RunningServer, ServiceError> {
        let addr = self.local_addr()?;
        let stop = self.stop_flag();
        let thread = std::thread::spawn(move || self.serve());
        Ok(RunningServer { addr, stop, thread: Some(thread) })
    }
}

/// A server running on a background thread; stopped on drop.
pub struct RunningServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<(), ServiceError>>>,
}

impl RunningServer {
    pub fn stop(mut self) -> Result<(), ServiceError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), ServiceError> {
        self.stop.store(true, Ordering::Relaxed);
        match self.thread.take() {
            Some(t) => t.join().expect("server thread panicked"),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

pub fn resolve(addr: &str) -> Result<SocketAddr, ServiceError> {
    addr.to_socket_addrs()
        .map_err(|_| ServiceError::Address(addr.to_string()))?
        .next()
        .ok_or_else(|| ServiceError::Address(addr.to_string()))
}

pub struct Client {
    socket: UdpSocket,
    target: SocketAddr,
}

impl Client {
    pub fn connect(target: SocketAddr, timeout: Duration) -> Result<Self, ServiceError> {
        let bind: SocketAddr = if target.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().unwrap();
        let socket = UdpSocket::bind(bind)?;
        socket.connect(target)?;
        socket.set_read_timeout(Some(timeout))?;
        Ok(Client { socket, target })
    }

    pub fn target(&self) -> SocketAddr {
        self.target
    }

    /// Sends one request and waits for the response echoing its nonce.
    /// `Ok(None)` on timeout; stale responses to earlier requests are skipped.
    pub fn request(&self, packet: &[u8]) -> Result<Option<ResponsePacket>, ServiceError> {
        self.socket.send(packet)?;
        let mut buf = [0u8; 64];
        loop {
            match self.socket.recv(&mut buf) {
                Ok(len) => {
                    let Ok(resp) = ResponsePacket::parse(&buf[..len]) else { continue };
                    if resp.echo[..] == packet[..16] {
                        return Ok(Some(resp));
                    }
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(None),
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                    return Err(ServiceError::Unreachable { target: self.target, attempts: 1 })
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Collection {
    pub samples: Vec<TimingSample>,
    pub lost: u64,
}

impl Collection {
    pub fn loss_rate(&self) -> f64 {
        let sent = self.samples.len() as u64 + self.lost;
        if sent == 0 {
            0.0
        } else {
            self.lost as f64 / sent as f64
        }
    }

    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "nonce_hex,cycles")?;
        for s in &self.samples {
            writeln!(w, "{},{}", hex::encode(s.nonce), s.cycles)?;
        }
        Ok(())
    }
}

/// Sends `n_packets` randomized requests and records `(nonce, end - start)`.
/// Timed-out requests are skipped and counted as lost.
pub fn collect(client: &Client, n_packets: usize, packet_len: usize, seed: u64) -> Result<Collection, ServiceError> {
    if !(MIN_PACKET_LEN..=MAX_PACKET_LEN).contains(&packet_len) {
        return Err(ServiceError::PacketLen(packet_len));
    }
    let mut generator = PacketGenerator::new(seed, packet_len);
    let mut packet = vec![0u8; packet_len];
    let mut out = Collection { samples: Vec::with_capacity(n_packets), lost: 0 };
    for _ in 0..n_packets {
        generator.next_into(&mut packet);
        match client.request(&packet)? {
            Some(resp) => out.samples.push(TimingSample { nonce: resp.echo, cycles: resp.cycles() as u64 }),
            None => out.lost += 1,
        }
    }
    if out.samples.is_empty() && n_packets > 0 {
        return Err(ServiceError::Unreachable { target: client.target(), attempts: n_packets });
    }
    Ok(out)
}

/// Times packets against a remote server, resending a packet up to
/// `retries` more times before giving up.
pub struct NetworkOracle {
    client: Client,
    retries: usize,
}

impl NetworkOracle {
    pub fn new(client: Client, retries: usize) -> Self {
        NetworkOracle { client, retries }
    }
}

impl TimingOracle for NetworkOracle {
    fn measure(&mut self, batch: &PacketBatch) -> Result<Vec<u64>, AttackError> {
        let mut out = Vec::with_capacity(batch.len());
        for packet in batch.iter() {
            let mut attempts = 0;
            let resp = loop {
                attempts += 1;
                if let Some(r) = self.client.request(packet)? {
                    break r;
                }
                if attempts > self.retries {
                    return Err(ServiceError::Unreachable { target: self.client.target(), attempts }.into());
                }
            };
            out.push(resp.cycles() as u64);
        }
        Ok(out)
    }
}
