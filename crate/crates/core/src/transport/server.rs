//! Relay server: one receive loop, fan-out inline on the receive path.

use std::collections::HashMap;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, info};

use super::packet::{parse_header, write_packet, SignalType, HEADER_LEN, MAX_DATAGRAM};
use super::{control_id, tune_socket, TransportError};
use crate::clock;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub max_clients: usize,
    pub client_timeout_us: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            max_clients: 64,
            client_timeout_us: 5_000_000,
        }
    }
}

/// Monotone counters, readable while the server runs.
#[derive(Debug, Default)]
pub struct ServerStats {
    pub received: AtomicU64,
    pub relayed: AtomicU64,
    pub dropped_stale: AtomicU64,
    pub dropped_corrupt: AtomicU64,
    pub dropped_unknown: AtomicU64,
    pub joins: AtomicU64,
    pub evictions: AtomicU64,
    pub live_clients: AtomicU64,
    pub cpu_us: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct ServerStatsSnapshot {
    pub received: u64,
    pub relayed: u64,
    pub dropped_stale: u64,
    pub dropped_corrupt: u64,
    pub dropped_unknown: u64,
    pub joins: u64,
    pub evictions: u64,
    pub live_clients: u64,
    pub cpu_us: u64,
}

impl ServerStats {
    pub fn snapshot(&self) -> ServerStatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ServerStatsSnapshot {
            received: g(&self.received),
            relayed: g(&self.relayed),
            dropped_stale: g(&self.dropped_stale),
            dropped_corrupt: g(&self.dropped_corrupt),
            dropped_unknown: g(&self.dropped_unknown),
            joins: g(&self.joins),
            evictions: g(&self.evictions),
            live_clients: g(&self.live_clients),
            cpu_us: g(&self.cpu_us),
        }
    }
}

struct Peer {
    addr: SocketAddr,
    user_id: u16,
    last_heard_us: u64,
    seq: HashMap<SignalType, u32>,
}

// Owned by the receive loop alone.
struct Registry {
    peers: Vec<Peer>,
    by_addr: HashMap<SocketAddr, usize>,
    next_id: u16,
}

impl Registry {
    fn new() -> Self {
        Registry {
            peers: Vec::new(),
            by_addr: HashMap::new(),
            next_id: 1,
        }
    }

    fn reindex(&mut self) {
        self.by_addr = self.peers.iter().enumerate().map(|(i, p)| (p.addr, i)).collect();
    }

    // Ids climb monotonically (skipping live ones) so a departed id is not
    // handed out again while receivers still hold its sequence state.
    fn allocate_id(&mut self) -> u16 {
        loop {
            let id = self.next_id;
            self.next_id = if self.next_id >= u16::MAX - 1 { 1 } else { self.next_id + 1 };
            if !self.peers.iter().any(|p| p.user_id == id) {
                return id;
            }
        }
    }
}

pub struct Server {
    socket: UdpSocket,
    config: ServerConfig,
    stats: Arc<ServerStats>,
}

impl Server {
    pub fn bind(config: ServerConfig) -> Result<Server, TransportError> {
        if config.max_clients < 2 {
            return Err(TransportError::InvalidConfig(format!(
                "max_clients must be at least 2, got {}",
                config.max_clients
            )));
        }
        let socket = UdpSocket::bind(config.bind).map_err(|source| TransportError::Bind {
            addr: config.bind.to_string(),
            source,
        })?;
        tune_socket(&socket, 4 << 20);
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        Ok(Server {
            socket,
            config,
            stats: Arc::new(ServerStats::default()),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.socket.local_addr().expect("bound socket has an address")
    }

    pub fn stats(&self) -> Arc<ServerStats> {
        self.stats.clone()
    }

    /// Runs the relay loop until `stop` is set. Per-packet problems are
    /// counted, never fatal.
    pub fn run(&self, stop: &AtomicBool) -> Result<(), TransportError> {
        info!("relay listening on {}", self.local_addr());
        let mut reg = Registry::new();
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        let mut ctl = [0u8; HEADER_LEN + 2];
        let mut control_seq = 0u32;
        let mut next_sweep = clock::now_us() + 100_000;
        while !stop.load(Ordering::Relaxed) {
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    self.stats.received.fetch_add(1, Ordering::Relaxed);
                    self.handle(&mut reg, &buf[..n], from, &mut ctl, &mut control_seq);
                }
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                // ICMP port-unreachable from a vanished client surfaces here on some platforms.
                Err(e) => debug!("recv error: {e}"),
            }
            let now = clock::now_us();
            if now >= next_sweep {
                self.evict_silent(&mut reg, now, &mut ctl, &mut control_seq);
                self.stats.cpu_us.store(clock::thread_cpu_us(), Ordering::Relaxed);
                next_sweep = now + 100_000;
            }
        }
        self.stats.cpu_us.store(clock::thread_cpu_us(), Ordering::Relaxed);
        Ok(())
    }

    /// Binds and runs the relay on its own thread.
    pub fn spawn(config: ServerConfig) -> Result<ServerHandle, TransportError> {
        let server = Server::bind(config)?;
        let addr = server.local_addr();
        let stats = server.stats();
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("relay".into())
            .spawn(move || server.run(&stop_flag))?;
        Ok(ServerHandle {
            addr,
            stats,
            stop,
            thread: Some(thread),
        })
    }

    fn send_control(&self, to: SocketAddr, user_id: u16, id: u16, ctl: &mut [u8], control_seq: &mut u32) {
        *control_seq = control_seq.wrapping_add(1);
        let n = write_packet(
            ctl,
            SignalType::Control,
            user_id,
            *control_seq,
            clock::now_us(),
            &id.to_le_bytes(),
        )
        .expect("control payload fits");
        let _ = self.socket.send_to(&ctl[..n], to);
    }

    fn handle(&self, reg: &mut Registry, bytes: &[u8], from: SocketAddr, ctl: &mut [u8], control_seq: &mut u32) {
        let header = match parse_header(bytes) {
            Ok(h) => h,
            Err(_) => {
                self.stats.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
                return;
            }
        };
        let now = clock::now_us();
        let known = reg.by_addr.get(&from).copied();

        if header.signal_type == SignalType::Control {
            let payload = &bytes[HEADER_LEN..];
            if payload.is_empty() {
                // JOIN, or a keepalive from a client we already know.
                let id = match known {
                    Some(i) => {
                        reg.peers[i].last_heard_us = now;
                        reg.peers[i].user_id
                    }
                    None => {
                        if reg.peers.len() >= self.config.max_clients {
                            debug!("join from {from} refused: relay full");
                            return;
                        }
                        let id = reg.allocate_id();
                        reg.peers.push(Peer {
                            addr: from,
                            user_id: id,
                            last_heard_us: now,
                            seq: HashMap::new(),
                        });
                        reg.reindex();
                        self.stats.joins.fetch_add(1, Ordering::Relaxed);
                        self.stats.live_clients.store(reg.peers.len() as u64, Ordering::Relaxed);
                        info!("client {from} joined as {id}");
                        id
                    }
                };
                self.send_control(from, id, id, ctl, control_seq);
            } else if let (Some(i), Some(id)) = (known, control_id(payload)) {
                if reg.peers[i].user_id == id {
                    self.remove(reg, i, ctl, control_seq);
                }
            } else {
                self.stats.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
            }
            return;
        }

        let Some(i) = known else {
            self.stats.dropped_unknown.fetch_add(1, Ordering::Relaxed);
            return;
        };
        let peer = &mut reg.peers[i];
        if peer.user_id != header.user_id {
            self.stats.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
            return;
        }
        peer.last_heard_us = now;
        match peer.seq.get(&header.signal_type) {
            Some(&last) if header.seq <= last => {
                self.stats.dropped_stale.fetch_add(1, Ordering::Relaxed);
                return;
            }
            _ => {
                peer.seq.insert(header.signal_type, header.seq);
            }
        }
        for (j, other) in reg.peers.iter().enumerate() {
            if j != i && self.socket.send_to(bytes, other.addr).is_ok() {
                self.stats.relayed.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    fn remove(&self, reg: &mut Registry, index: usize, ctl: &mut [u8], control_seq: &mut u32) {
        let gone = reg.peers.remove(index);
        reg.reindex();
        self.stats.live_clients.store(reg.peers.len() as u64, Ordering::Relaxed);
        info!("client {} ({}) left", gone.user_id, gone.addr);
        for p in &reg.peers {
            self.send_control(p.addr, gone.user_id, gone.user_id, ctl, control_seq);
        }
    }

    fn evict_silent(&self, reg: &mut Registry, now: u64, ctl: &mut [u8], control_seq: &mut u32) {
        while let Some(i) = reg
            .peers
            .iter()
            .position(|p| now.saturating_sub(p.last_heard_us) > self.config.client_timeout_us)
        {
            self.stats.evictions.fetch_add(1, Ordering::Relaxed);
            self.remove(reg, i, ctl, control_seq);
        }
    }
}

/// A relay running on a background thread. Stops on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    stats: Arc<ServerStats>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<(), TransportError>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStatsSnapshot {
        self.stats.snapshot()
    }

    pub fn stop(mut self) -> ServerStatsSnapshot {
        self.shutdown();
        self.stats.snapshot()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
