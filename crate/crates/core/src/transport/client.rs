//! Relay client: the network side of a session, seen locally as producers.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};

use super::packet::{parse_packet, write_packet, SignalPacket, SignalType, MAX_DATAGRAM};
use super::{control_id, tune_socket, TransportError};
use crate::clock;
use crate::router::{Origin, ProducerHandle, Router, SignalDescriptor};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub join_attempts: u32,
    pub join_wait: Duration,
    /// A JOIN is re-sent as keepalive when nothing was sent for this long.
    pub keepalive: Duration,
    /// Ring capacity of every stream the client registers.
    pub ring_capacity: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            join_attempts: 3,
            join_wait: Duration::from_millis(200),
            keepalive: Duration::from_millis(1000),
            ring_capacity: 64,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    sent: AtomicU64,
    received: AtomicU64,
    dropped_stale: AtomicU64,
    dropped_corrupt: AtomicU64,
    send_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub sent: u64,
    pub received: u64,
    pub dropped_stale: u64,
    pub dropped_corrupt: u64,
    pub send_errors: u64,
}

#[derive(Debug, Clone, Default)]
struct PeerState {
    seq: HashMap<SignalType, u32>,
    last_heard_us: u64,
}

/// Snapshot of a session as seen by the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub user_id: u16,
    /// Highest sequence accepted from each peer (over all signal types).
    pub peer_seq: BTreeMap<u16, u32>,
    pub last_heard_us: BTreeMap<u16, u64>,
    pub stats: SessionStats,
}

struct Shared {
    user_id: u16,
    counters: Counters,
    peers: Mutex<HashMap<u16, PeerState>>,
    last_sent_us: AtomicU64,
    stop: AtomicBool,
}

pub struct Client {
    socket: UdpSocket,
    server: SocketAddr,
    router: Router,
    shared: Arc<Shared>,
    seq: u32,
    local: HashMap<SignalType, ProducerHandle>,
    ring_capacity: usize,
    buf: Vec<u8>,
    receiver: Option<JoinHandle<()>>,
}

fn bind_for(server: SocketAddr) -> std::io::Result<UdpSocket> {
    let local: SocketAddr = if server.ip().is_loopback() {
        if server.is_ipv4() {
            ([127, 0, 0, 1], 0).into()
        } else {
            "[::1]:0".parse().unwrap()
        }
    } else if server.is_ipv4() {
        ([0, 0, 0, 0], 0).into()
    } else {
        "[::]:0".parse().unwrap()
    };
    UdpSocket::bind(local)
}

impl Client {
    pub fn connect(server: SocketAddr, router: Router) -> Result<Client, TransportError> {
        Self::connect_with(server, router, ClientConfig::default())
    }

    /// Sends JOIN and waits for the assigned id, retrying
    /// `config.join_attempts` times. Relayed packets then appear in `router`
    /// as `(type, peer_id, Network)` streams.
    pub fn connect_with(server: SocketAddr, router: Router, config: ClientConfig) -> Result<Client, TransportError> {
        let socket = bind_for(server)?;
        tune_socket(&socket, 1 << 20);
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        let mut join = [0u8; super::packet::HEADER_LEN];
        let mut user_id = None;
        'attempts: for attempt in 0..config.join_attempts {
            let n = write_packet(&mut join, SignalType::Control, 0, attempt, clock::now_us(), &[])?;
            socket.send_to(&join[..n], server)?;
            let deadline = clock::now_us() + config.join_wait.as_micros() as u64;
            loop {
                let now = clock::now_us();
                if now >= deadline {
                    break;
                }
                socket.set_read_timeout(Some(Duration::from_micros(deadline - now)))?;
                match socket.recv_from(&mut buf) {
                    Ok((n, from)) if from == server => {
                        if let Ok(p) = parse_packet(&buf[..n]) {
                            if p.signal_type == SignalType::Control {
                                if let Some(id) = control_id(&p.payload) {
                                    if id == p.user_id {
                                        user_id = Some(id);
                                        break 'attempts;
                                    }
                                }
                            }
                        }
                    }
                    Ok(_) => {}
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                        break
                    }
                    // Connection refused from a dead port: keep waiting out the attempt.
                    Err(e) => {
                        debug!("join attempt {attempt}: {e}");
                        std::thread::sleep(Duration::from_micros(deadline.saturating_sub(clock::now_us())));
                        break;
                    }
                }
            }
        }
        let user_id = user_id.ok_or_else(|| TransportError::ConnectTimeout(server.to_string()))?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;

        let shared = Arc::new(Shared {
            user_id,
            counters: Counters::default(),
            peers: Mutex::new(HashMap::new()),
            last_sent_us: AtomicU64::new(clock::now_us()),
            stop: AtomicBool::new(false),
        });
        let rx = Receiver {
            socket: socket.try_clone()?,
            server,
            router: router.clone(),
            shared: shared.clone(),
            producers: HashMap::new(),
            ring_capacity: config.ring_capacity,
            keepalive_us: config.keepalive.as_micros() as u64,
        };
        let receiver = std::thread::Builder::new()
            .name(format!("client-{user_id}-rx"))
            .spawn(move || rx.run())?;
        Ok(Client {
            socket,
            server,
            router,
            shared,
            seq: 0,
            local: HashMap::new(),
            ring_capacity: config.ring_capacity,
            buf,
            receiver: Some(receiver),
        })
    }

    pub fn user_id(&self) -> u16 {
        self.shared.user_id
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn server(&self) -> SocketAddr {
        self.server
    }

    /// Sends `payload` to the relay right away and publishes the same packet
    /// to the local router as `(type, self, Local)`. Returns the sequence
    /// number used.
    pub fn send(&mut self, payload: &[u8], signal_type: SignalType) -> Result<u32, TransportError> {
        self.send_at(payload, signal_type, clock::now_us())
    }

    /// [`Client::send`] with an explicit send timestamp.
    pub fn send_at(&mut self, payload: &[u8], signal_type: SignalType, send_timestamp_us: u64) -> Result<u32, TransportError> {
        if signal_type == SignalType::Control {
            return Err(TransportError::InvalidSignalType(signal_type));
        }
        self.seq += 1;
        let seq = self.seq;
        let user_id = self.shared.user_id;
        let n = write_packet(&mut self.buf, signal_type, user_id, seq, send_timestamp_us, payload)?;
        let sent = self.socket.send_to(&self.buf[..n], self.server);
        self.shared.last_sent_us.store(clock::now_us(), Ordering::Relaxed);

        let producer = match self.local.entry(signal_type) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                let desc = SignalDescriptor::new(signal_type, user_id, Origin::Local);
                v.insert(self.router.register_producer(desc, self.ring_capacity)?)
            }
        };
        producer.publish(&SignalPacket::new(signal_type, user_id, seq, send_timestamp_us, payload.to_vec()))?;

        match sent {
            Ok(_) => {
                self.shared.counters.sent.fetch_add(1, Ordering::Relaxed);
                Ok(seq)
            }
            Err(e) => {
                self.shared.counters.send_errors.fetch_add(1, Ordering::Relaxed);
                Err(TransportError::Io(e))
            }
        }
    }

    pub fn stats(&self) -> SessionStats {
        let c = &self.shared.counters;
        SessionStats {
            sent: c.sent.load(Ordering::Relaxed),
            received: c.received.load(Ordering::Relaxed),
            dropped_stale: c.dropped_stale.load(Ordering::Relaxed),
            dropped_corrupt: c.dropped_corrupt.load(Ordering::Relaxed),
            send_errors: c.send_errors.load(Ordering::Relaxed),
        }
    }

    pub fn session(&self) -> SessionState {
        let peers = self.shared.peers.lock().unwrap_or_else(|e| e.into_inner());
        SessionState {
            user_id: self.shared.user_id,
            peer_seq: peers
                .iter()
                .filter_map(|(id, p)| p.seq.values().max().map(|s| (*id, *s)))
                .collect(),
            last_heard_us: peers.iter().map(|(id, p)| (*id, p.last_heard_us)).collect(),
            stats: self.stats(),
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        // Stop the receiver first so no keepalive JOIN can follow the LEAVE.
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.receiver.take() {
            let _ = t.join();
        }
        let id = self.shared.user_id;
        if let Ok(n) = write_packet(&mut self.buf, SignalType::Control, id, 0, clock::now_us(), &id.to_le_bytes()) {
            let _ = self.socket.send_to(&self.buf[..n], self.server);
        }
    }
}

struct Receiver {
    socket: UdpSocket,
    server: SocketAddr,
    router: Router,
    shared: Arc<Shared>,
    producers: HashMap<(SignalType, u16), ProducerHandle>,
    ring_capacity: usize,
    keepalive_us: u64,
}

impl Receiver {
    fn run(mut self) {
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        let mut join = [0u8; super::packet::HEADER_LEN];
        let mut keepalive_seq = 0u32;
        while !self.shared.stop.load(Ordering::Relaxed) {
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) if from == self.server => self.handle(&buf[..n]),
                Ok(_) => {}
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => {
                    debug!("client recv: {e}");
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
            let now = clock::now_us();
            if now.saturating_sub(self.shared.last_sent_us.load(Ordering::Relaxed)) > self.keepalive_us {
                keepalive_seq += 1;
                if let Ok(n) = write_packet(&mut join, SignalType::Control, self.shared.user_id, keepalive_seq, now, &[]) {
                    let _ = self.socket.send_to(&join[..n], self.server);
                }
                self.shared.last_sent_us.store(now, Ordering::Relaxed);
            }
        }
    }

    fn handle(&mut self, bytes: &[u8]) {
        let c = &self.shared.counters;
        let packet = match parse_packet(bytes) {
            Ok(p) => p,
            Err(_) => {
                c.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
                return;
            }
        };
        if packet.signal_type == SignalType::Control {
            match control_id(&packet.payload) {
                // Duplicate JOIN-ACK (retries and keepalives).
                Some(id) if id == self.shared.user_id => {}
                Some(id) => {
                    debug!("peer {id} left");
                    self.producers.retain(|(_, user), _| *user != id);
                    self.shared.peers.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
                }
                None => {
                    c.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
                }
            }
            return;
        }
        if packet.user_id == self.shared.user_id {
            c.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
            return;
        }
        {
            let mut peers = self.shared.peers.lock().unwrap_or_else(|e| e.into_inner());
            let peer = peers.entry(packet.user_id).or_default();
            peer.last_heard_us = clock::now_us();
            match peer.seq.get(&packet.signal_type) {
                Some(&last) if packet.seq <= last => {
                    c.dropped_stale.fetch_add(1, Ordering::Relaxed);
                    return;
                }
                _ => {
                    peer.seq.insert(packet.signal_type, packet.seq);
                }
            }
        }
        c.received.fetch_add(1, Ordering::Relaxed);
        let key = (packet.signal_type, packet.user_id);
        if !self.producers.contains_key(&key) {
            let desc = SignalDescriptor::new(packet.signal_type, packet.user_id, Origin::Network);
            match self.router.register_producer(desc, self.ring_capacity) {
                Ok(p) => {
                    self.producers.insert(key, p);
                }
                Err(e) => {
                    warn!("cannot register {desc}: {e}");
                    return;
                }
            }
        }
        if let Some(p) = self.producers.get_mut(&key) {
            let _ = p.publish(&packet);
        }
    }
}
