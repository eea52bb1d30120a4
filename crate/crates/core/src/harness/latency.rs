//! Latency probes, reports and the three bench scenarios.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::time::Duration;

use serde::Serialize;

use super::recording::Recording;
use super::{synth, HarnessError};
use crate::clock;
use crate::codec::{encode_frame, BoundsTable, ComponentBounds, EncoderStats};
use crate::model::Skeleton;
use crate::router::{ConsumerHandle, ConsumerMode, Origin, Poll, Router, SignalDescriptor, SignalSelector};
use crate::transport::{Client, ClientConfig, Server, ServerConfig, ServerHandle, ServerStatsSnapshot, SignalPacket, SignalType};

pub const PRODUCE_TO_CONSUME: &str = "produce_to_consume";

/// Stage marks of one packet, in pipeline order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LatencyProbe {
    pub t_produce: Option<u64>,
    pub t_enqueue_net: Option<u64>,
    pub t_server_in: Option<u64>,
    pub t_server_out: Option<u64>,
    pub t_client_in: Option<u64>,
    pub t_consume: Option<u64>,
}

impl LatencyProbe {
    pub fn produced_consumed(t_produce: u64, t_consume: u64) -> Self {
        LatencyProbe {
            t_produce: Some(t_produce),
            t_consume: Some(t_consume),
            ..Default::default()
        }
    }

    pub fn marks(&self) -> [Option<u64>; 6] {
        [
            self.t_produce,
            self.t_enqueue_net,
            self.t_server_in,
            self.t_server_out,
            self.t_client_in,
            self.t_consume,
        ]
    }

    /// Present marks never decrease along the pipeline.
    pub fn is_monotone(&self) -> bool {
        let present: Vec<u64> = self.marks().into_iter().flatten().collect();
        present.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn end_to_end_us(&self) -> Option<i64> {
        Some(self.t_consume? as i64 - self.t_produce? as i64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageStats {
    pub count: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl StageStats {
    pub fn from_samples(samples: &mut [u64]) -> Self {
        samples.sort_unstable();
        StageStats {
            count: samples.len() as u64,
            p50_us: percentile(samples, 50.0),
            p95_us: percentile(samples, 95.0),
            p99_us: percentile(samples, 99.0),
            max_us: samples.last().copied().unwrap_or(0),
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.p50_us <= self.p95_us && self.p95_us <= self.p99_us && self.p99_us <= self.max_us
    }
}

/// Accumulates end-to-end deltas from probes.
#[derive(Debug, Default, Clone)]
pub struct LatencyCollector {
    samples: Vec<u64>,
    negative: u64,
}

impl LatencyCollector {
    pub fn record(&mut self, probe: &LatencyProbe) {
        match probe.end_to_end_us() {
            Some(d) if d >= 0 => self.samples.push(d as u64),
            Some(_) => self.negative += 1,
            None => {}
        }
    }

    pub fn merge(&mut self, other: LatencyCollector) {
        self.samples.extend(other.samples);
        self.negative += other.negative;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowReport {
    pub name: String,
    pub sent: u64,
    /// Deliveries expected by all receivers together.
    pub expected: u64,
    pub received: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LocalDirect,
    LoopbackRelay,
    Swarm,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::LocalDirect => "local_direct",
            Scenario::LoopbackRelay => "loopback_relay",
            Scenario::Swarm => "swarm",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Scenario::LocalDirect, Scenario::LoopbackRelay, Scenario::Swarm]
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| HarnessError::Format(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub scenario: Scenario,
    pub duration_s: f64,
    pub stages: BTreeMap<String, StageStats>,
    pub flows: Vec<FlowReport>,
    /// Packets lost to consumer ring overwrite.
    pub router_gaps: u64,
    /// Probes whose consume mark preceded the produce mark.
    pub negative_deltas: u64,
    pub server: Option<ServerStatsSnapshot>,
    /// CPU time of the producing and consuming threads.
    pub harness_cpu_us: u64,
}

impl LatencyReport {
    pub fn end_to_end(&self) -> StageStats {
        self.stages.get(PRODUCE_TO_CONSUME).copied().unwrap_or_default()
    }

    pub fn delivery_ratio(&self) -> f64 {
        let expected: u64 = self.flows.iter().map(|f| f.expected).sum();
        let received: u64 = self.flows.iter().map(|f| f.received).sum();
        if expected == 0 {
            return 1.0;
        }
        received as f64 / expected as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let s = self.end_to_end();
        let mut out = format!(
            "{}: {} packets over {:.1} s\n  produce->consume p50 {} us  p95 {} us  p99 {} us  max {} us\n  delivery {:.4}%  router gaps {}",
            self.scenario,
            s.count,
            self.duration_s,
            s.p50_us,
            s.p95_us,
            s.p99_us,
            s.max_us,
            100.0 * self.delivery_ratio(),
            self.router_gaps
        );
        if let Some(sv) = &self.server {
            out.push_str(&format!(
                "\n  server: received {} relayed {} stale {} corrupt {} cpu {:.3} s",
                sv.received,
                sv.relayed,
                sv.dropped_stale,
                sv.dropped_corrupt,
                sv.cpu_us as f64 * 1e-6
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchParams {
    pub duration_s: f64,
    pub fps: f64,
    /// Dancers in the swarm scenario.
    pub clients: usize,
    pub ring_capacity: usize,
    /// Use a relay already running here instead of starting one in-process.
    pub server: Option<SocketAddr>,
    /// Motion to send; a synthetic dance when absent.
    pub recording: Option<Recording>,
    /// Quantization table; uniform (-1, 1) at 16 bits when absent.
    pub table: Option<BoundsTable>,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            duration_s: 10.0,
            fps: 30.0,
            clients: 30,
            ring_capacity: 64,
            server: None,
            recording: None,
            table: None,
        }
    }
}

/// Encoded payloads to cycle through.
fn payloads(params: &BenchParams) -> Result<Vec<Vec<u8>>, HarnessError> {
    let rec = match &params.recording {
        Some(r) => r.clone(),
        None => synth::dance(10.0, 30.0, 120.0, 11)?,
    };
    let table = match &params.table {
        Some(t) => t.clone(),
        None => BoundsTable::uniform(&Skeleton::with_joint_count(rec.joint_count())?, ComponentBounds::FULL, 16)?,
    };
    let mut stats = EncoderStats::default();
    let out = rec
        .frames
        .iter()
        .map(|f| encode_frame(f, &table, &mut stats).map(|e| e.to_bytes()))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(HarnessError::Format("bench recording has no frames".into()));
    }
    Ok(out)
}

pub fn run_latency_experiment(scenario: Scenario, params: &BenchParams) -> Result<LatencyReport, HarnessError> {
    if !(params.duration_s > 0.0 && params.fps > 0.0) {
        return Err(HarnessError::Format("duration and fps must be positive".into()));
    }
    match scenario {
        Scenario::LocalDirect => local_direct(params),
        Scenario::LoopbackRelay => loopback_relay(params),
        Scenario::Swarm => swarm(params),
    }
}

fn frame_count(params: &BenchParams) -> u64 {
    (params.duration_s * params.fps).round() as u64
}

/// Polls until `done` is set and one more poll comes back empty.
fn consume_loop(
    consumer: &mut ConsumerHandle,
    done: &AtomicBool,
    mut on_packet: impl FnMut(&SignalPacket, u64),
) -> u64 {
    let mut poll = Poll::default();
    let mut gaps = 0;
    loop {
        let finishing = done.load(Ordering::Acquire);
        consumer.poll_into(64, &mut poll);
        gaps += poll.gap;
        let now = clock::now_us();
        for p in &poll.packets {
            on_packet(p, now);
        }
        if poll.packets.is_empty() {
            if finishing {
                return gaps;
            }
            std::thread::sleep(Duration::from_micros(100));
        }
    }
}

fn local_direct(params: &BenchParams) -> Result<LatencyReport, HarnessError> {
    let payloads = payloads(params)?;
    let router = Router::new();
    let desc = SignalDescriptor::new(SignalType::Pose, 1, Origin::Local);
    let mut consumer = router.subscribe(SignalSelector::exact(desc), ConsumerMode::Every);
    let mut producer = router.register_producer(desc, params.ring_capacity)?;
    let done = Arc::new(AtomicBool::new(false));
    let done_rx = done.clone();
    let rx = std::thread::spawn(move || {
        let mut lat = LatencyCollector::default();
        let mut received = 0u64;
        let gaps = consume_loop(&mut consumer, &done_rx, |p, now| {
            lat.record(&LatencyProbe::produced_consumed(p.send_timestamp_us, now));
            received += 1;
        });
        (lat, received, gaps, clock::thread_cpu_us())
    });
    let interval = 1e6 / params.fps;
    let start = clock::now_us();
    let cpu0 = clock::thread_cpu_us();
    let n = frame_count(params);
    for k in 0..n {
        clock::sleep_until_us(start + (k as f64 * interval) as u64);
        let payload = payloads[k as usize % payloads.len()].clone();
        producer.publish(&SignalPacket::new(SignalType::Pose, 1, k as u32 + 1, clock::now_us(), payload))?;
    }
    let cpu = clock::thread_cpu_us() - cpu0;
    done.store(true, Ordering::Release);
    let (mut lat, received, gaps, rx_cpu) = rx.join().map_err(|_| HarnessError::Thread)?;
    Ok(LatencyReport {
        scenario: Scenario::LocalDirect,
        duration_s: params.duration_s,
        stages: BTreeMap::from([(PRODUCE_TO_CONSUME.to_string(), StageStats::from_samples(&mut lat.samples))]),
        flows: vec![FlowReport {
            name: desc.to_string(),
            sent: n,
            expected: n,
            received,
            dropped: n.saturating_sub(received),
        }],
        router_gaps: gaps,
        negative_deltas: lat.negative,
        server: None,
        harness_cpu_us: cpu + rx_cpu,
    })
}

enum Relay {
    External(SocketAddr),
    Local(ServerHandle),
}

impl Relay {
    fn start(params: &BenchParams, max_clients: usize) -> Result<Relay, HarnessError> {
        Ok(match params.server {
            Some(a) => Relay::External(a),
            None => Relay::Local(Server::spawn(ServerConfig {
                max_clients: max_clients.max(2),
                ..Default::default()
            })?),
        })
    }

    fn addr(&self) -> SocketAddr {
        match self {
            Relay::External(a) => *a,
            Relay::Local(h) => h.addr(),
        }
    }

    fn finish(self) -> Option<ServerStatsSnapshot> {
        match self {
            Relay::External(_) => None,
            Relay::Local(h) => Some(h.stop()),
        }
    }
}

fn client_config(params: &BenchParams) -> ClientConfig {
    ClientConfig {
        ring_capacity: params.ring_capacity,
        ..Default::default()
    }
}

fn loopback_relay(params: &BenchParams) -> Result<LatencyReport, HarnessError> {
    let payloads = payloads(params)?;
    let relay = Relay::start(params, 8)?;
    let rx_router = Router::new();
    let mut consumer = rx_router.subscribe("pose:any:network".parse()?, ConsumerMode::Every);
    let receiver = Client::connect_with(relay.addr(), rx_router, client_config(params))?;
    let mut sender = Client::connect_with(relay.addr(), Router::new(), client_config(params))?;
    let sender_id = sender.user_id();
    let done = Arc::new(AtomicBool::new(false));
    let done_rx = done.clone();
    let rx = std::thread::spawn(move || {
        let mut lat = LatencyCollector::default();
        let mut received = 0u64;
        let gaps = consume_loop(&mut consumer, &done_rx, |p, now| {
            if p.user_id == sender_id {
                lat.record(&LatencyProbe::produced_consumed(p.send_timestamp_us, now));
                received += 1;
            }
        });
        (lat, received, gaps, clock::thread_cpu_us())
    });
    let interval = 1e6 / params.fps;
    let n = frame_count(params);
    let start = clock::now_us();
    let cpu0 = clock::thread_cpu_us();
    for k in 0..n {
        clock::sleep_until_us(start + (k as f64 * interval) as u64);
        sender.send_at(&payloads[k as usize % payloads.len()], SignalType::Pose, clock::now_us())?;
    }
    let cpu = clock::thread_cpu_us() - cpu0;
    // Let in-flight datagrams land before the receiver stops.
    std::thread::sleep(Duration::from_millis(300));
    done.store(true, Ordering::Release);
    let (mut lat, received, gaps, rx_cpu) = rx.join().map_err(|_| HarnessError::Thread)?;
    let sent = sender.stats().sent;
    drop(sender);
    drop(receiver);
    Ok(LatencyReport {
        scenario: Scenario::LoopbackRelay,
        duration_s: params.duration_s,
        stages: BTreeMap::from([(PRODUCE_TO_CONSUME.to_string(), StageStats::from_samples(&mut lat.samples))]),
        flows: vec![FlowReport {
            name: format!("user {sender_id}"),
            sent,
            expected: sent,
            received,
            dropped: sent.saturating_sub(received),
        }],
        router_gaps: gaps,
        negative_deltas: lat.negative,
        server: relay.finish(),
        harness_cpu_us: cpu + rx_cpu,
    })
}

struct DancerResult {
    user_id: u16,
    sent: u64,
    received: HashMap<u16, u64>,
    latency: LatencyCollector,
    gaps: u64,
    cpu_us: u64,
}

fn swarm(params: &BenchParams) -> Result<LatencyReport, HarnessError> {
    if params.clients < 2 {
        return Err(HarnessError::Format("swarm needs at least two clients".into()));
    }
    let payloads = Arc::new(payloads(params)?);
    let relay = Relay::start(params, params.clients + 2)?;
    let addr = relay.addr();
    let n = params.clients;
    let connected = Arc::new(Barrier::new(n));
    let finished = Arc::new(Barrier::new(n));
    let drained = Arc::new(Barrier::new(n));
    let frames = frame_count(params);
    let interval = 1e6 / params.fps;
    let mut threads = Vec::with_capacity(n);
    for d in 0..n {
        let (payloads, connected, finished, drained) = (payloads.clone(), connected.clone(), finished.clone(), drained.clone());
        let config = client_config(params);
        let t = std::thread::Builder::new()
            .name(format!("dancer-{d}"))
            .spawn(move || -> Result<DancerResult, HarnessError> {
                let router = Router::new();
                let mut consumer = router.subscribe("pose:any:network".parse()?, ConsumerMode::Every);
                let connect = Client::connect_with(addr, router, config);
                // Every thread must reach the barriers even if its connect failed.
                connected.wait();
                let mut client = match connect {
                    Ok(c) => c,
                    Err(e) => {
                        finished.wait();
                        drained.wait();
                        return Err(e.into());
                    }
                };
                let cpu0 = clock::thread_cpu_us();
                let mut result = DancerResult {
                    user_id: client.user_id(),
                    sent: 0,
                    received: HashMap::new(),
                    latency: LatencyCollector::default(),
                    gaps: 0,
                    cpu_us: 0,
                };
                let mut poll = Poll::default();
                let mut absorb = |consumer: &mut ConsumerHandle, result: &mut DancerResult| {
                    consumer.poll_into(usize::MAX, &mut poll);
                    result.gaps += poll.gap;
                    let now = clock::now_us();
                    for p in &poll.packets {
                        *result.received.entry(p.user_id).or_default() += 1;
                        result.latency.record(&LatencyProbe::produced_consumed(p.send_timestamp_us, now));
                    }
                    poll.packets.len()
                };
                // Stagger dancers across one frame interval.
                let start = clock::now_us() + 100_000 + (d as f64 * interval / n as f64) as u64;
                for k in 0..frames {
                    let deadline = start + (k as f64 * interval) as u64;
                    loop {
                        absorb(&mut consumer, &mut result);
                        let now = clock::now_us();
                        if now >= deadline {
                            break;
                        }
                        std::thread::sleep(Duration::from_micros((deadline - now).min(5_000)));
                    }
                    if client
                        .send_at(&payloads[(k as usize + d) % payloads.len()], SignalType::Pose, clock::now_us())
                        .is_ok()
                    {
                        result.sent += 1;
                    }
                }
                finished.wait();
                let drain_until = clock::now_us() + 500_000;
                while clock::now_us() < drain_until {
                    if absorb(&mut consumer, &mut result) == 0 {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                }
                result.cpu_us = clock::thread_cpu_us() - cpu0;
                drained.wait();
                Ok(result)
            })?;
        threads.push(t);
    }
    let mut results = Vec::with_capacity(n);
    let mut first_err = None;
    for t in threads {
        match t.join().map_err(|_| HarnessError::Thread)? {
            Ok(r) => results.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let server = relay.finish();
    if let Some(e) = first_err {
        return Err(e);
    }
    let mut latency = LatencyCollector::default();
    let mut flows = Vec::with_capacity(n);
    for r in &results {
        let received: u64 = results.iter().filter_map(|o| o.received.get(&r.user_id)).sum();
        let expected = r.sent * (n as u64 - 1);
        flows.push(FlowReport {
            name: format!("user {}", r.user_id),
            sent: r.sent,
            expected,
            received,
            dropped: expected.saturating_sub(received),
        });
    }
    let router_gaps = results.iter().map(|r| r.gaps).sum();
    let harness_cpu_us = results.iter().map(|r| r.cpu_us).sum();
    for r in results {
        latency.merge(r.latency);
    }
    Ok(LatencyReport {
        scenario: Scenario::Swarm,
        duration_s: params.duration_s,
        stages: BTreeMap::from([(PRODUCE_TO_CONSUME.to_string(), StageStats::from_samples(&mut latency.samples))]),
        flows,
        router_gaps,
        negative_deltas: latency.negative,
        server,
        harness_cpu_us,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&v, 100.0), 100);
        assert_eq!(percentile(&[7], 95.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
        let mut w = vec![5, 1, 9, 3];
        let s = StageStats::from_samples(&mut w);
        assert_eq!((s.count, s.p50_us, s.p95_us, s.max_us), (4, 3, 9, 9));
        assert!(s.is_monotone());
    }

    #[test]
    fn probe_order() {
        let mut p = LatencyProbe::produced_consumed(10, 40);
        assert!(p.is_monotone());
        assert_eq!(p.end_to_end_us(), Some(30));
        p.t_server_in = Some(50);
        assert!(!p.is_monotone());
        let mut c = LatencyCollector::default();
        c.record(&LatencyProbe::produced_consumed(50, 40));
        assert_eq!((c.len(), c.negative), (0, 1));
    }

    #[test]
    fn scenario_names() {
        for s in [Scenario::LocalDirect, Scenario::LoopbackRelay, Scenario::Swarm] {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("wan".parse::<Scenario>().is_err());
    }

    #[test]
    fn local_direct_short_run() {
        let params = BenchParams { duration_s: 0.5, ..Default::default() };
        let r = run_latency_experiment(Scenario::LocalDirect, &params).unwrap();
        assert_eq!(r.flows[0].sent, 15);
        assert_eq!(r.flows[0].received, 15);
        assert_eq!(r.router_gaps, 0);
        assert!(r.end_to_end().is_monotone());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["scenario"], "local_direct");
        assert_eq!(json["stages"]["produce_to_consume"]["count"], 15);
        for k in ["p50_us", "p95_us", "p99_us", "max_us"] {
            assert!(json["stages"]["produce_to_consume"][k].is_u64());
        }
    }

    #[test]
    fn relay_short_run() {
        let params = BenchParams { duration_s: 0.5, ..Default::default() };
        let r = run_latency_experiment(Scenario::LoopbackRelay, &params).unwrap();
        assert_eq!(r.flows[0].sent, 15);
        assert_eq!(r.flows[0].received, 15);
        assert!(r.server.unwrap().relayed >= 15);
    }

    #[test]
    fn swarm_short_run() {
        let params = BenchParams { duration_s: 0.5, clients: 4, ..Default::default() };
        let r = run_latency_experiment(Scenario::Swarm, &params).unwrap();
        assert_eq!(r.flows.len(), 4);
        for f in &r.flows {
            assert_eq!(f.sent, 15);
            assert_eq!(f.expected, 45);
        }
        assert_eq!(r.delivery_ratio(), 1.0);
        assert_eq!(r.router_gaps, 0);
    }
}
