//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What the proxy does to each datagram it forwards.
#[derive(Debug, Clone, Copy)]
pub struct Impairment {
    pub loss: f64,
    pub duplicate: f64,
    /// Chance a packet is held back and sent after its successor.
    pub reorder: f64,
    /// Control packets (JOIN, ACK, LEAVE) pass untouched so sessions form.
    pub spare_control: bool,
}

impl Impairment {
    pub const CLEAN: Impairment = Impairment {
        loss: 0.0,
        duplicate: 0.0,
        reorder: 0.0,
        spare_control: true,
    };
}

#[derive(Debug, Default)]
pub struct ProxyCounters {
    pub forwarded: AtomicU64,
    pub dropped: AtomicU64,
    pub duplicated: AtomicU64,
    pub reordered: AtomicU64,
}

/// A UDP middlebox for one client: the client talks to `addr()`, the proxy
/// talks to the server from its own socket, impairing both directions.
pub struct LossyProxy {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    pub counters: Arc<ProxyCounters>,
}

const CONTROL_TYPE: u8 = dancegraph::SignalType::Control as u8;

impl LossyProxy {
    pub fn start(server: SocketAddr, imp: Impairment, seed: u64) -> LossyProxy {
        let front = UdpSocket::bind("127.0.0.1:0").unwrap();
        let back = UdpSocket::bind("127.0.0.1:0").unwrap();
        for s in [&front, &back] {
            s.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        }
        let addr = front.local_addr().unwrap();
        let client: Arc<Mutex<Option<SocketAddr>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let counters = Arc::new(ProxyCounters::default());

        let upstream = {
            let (rx, tx) = (front.try_clone().unwrap(), back.try_clone().unwrap());
            let (client, stop, counters) = (client.clone(), stop.clone(), counters.clone());
            std::thread::spawn(move || {
                pump(&rx, &stop, &counters, imp, ChaCha8Rng::seed_from_u64(seed), |from| {
                    *client.lock().unwrap() = Some(from);
                    Some(server)
                }, &tx)
            })
        };
        let downstream = {
            let (client, stop, counters) = (client.clone(), stop.clone(), counters.clone());
            std::thread::spawn(move || {
                pump(&back, &stop, &counters, imp, ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), |from| {
                    if from == server { *client.lock().unwrap() } else { None }
                }, &front)
            })
        };
        LossyProxy {
            addr,
            stop,
            threads: vec![upstream, downstream],
            counters,
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for LossyProxy {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn pump(
    rx: &UdpSocket,
    stop: &AtomicBool,
    counters: &ProxyCounters,
    imp: Impairment,
    mut rng: ChaCha8Rng,
    mut route: impl FnMut(SocketAddr) -> Option<SocketAddr>,
    tx: &UdpSocket,
) {
    let mut buf = vec![0u8; 2048];
    let mut held: Option<(Vec<u8>, SocketAddr)> = None;
    while !stop.load(Ordering::Relaxed) {
        let (n, from) = match rx.recv_from(&mut buf) {
            Ok(x) => x,
            Err(_) => {
                // Idle: release anything held back.
                if let Some((p, to)) = held.take() {
                    let _ = tx.send_to(&p, to);
                }
                continue;
            }
        };
        let Some(to) = route(from) else { continue };
        let bytes = &buf[..n];
        if imp.spare_control && n > 3 && bytes[3] == CONTROL_TYPE {
            let _ = tx.send_to(bytes, to);
            continue;
        }
        if rng.random_bool(imp.loss) {
            counters.dropped.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        let copies = if rng.random_bool(imp.duplicate) {
            counters.duplicated.fetch_add(1, Ordering::Relaxed);
            2
        } else {
            1
        };
        if held.is_none() && rng.random_bool(imp.reorder) {
            counters.reordered.fetch_add(1, Ordering::Relaxed);
            held = Some((bytes.to_vec(), to));
            continue;
        }
        for _ in 0..copies {
            let _ = tx.send_to(bytes, to);
            counters.forwarded.fetch_add(1, Ordering::Relaxed);
        }
        if let Some((p, to)) = held.take() {
            let _ = tx.send_to(&p, to);
            counters.forwarded.fetch_add(1, Ordering::Relaxed);
        }
    }
}
