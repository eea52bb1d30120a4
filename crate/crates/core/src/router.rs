//! In-process signal manager.
//!
//! Producers own a stream each and publish into a preallocated ring; any
//! number of consumers pull from it at their own pace. A slow consumer never
//! blocks the producer: the ring overwrites its oldest slot and the consumer
//! is told how many packets it lost.
//!
//! Every slot is a small seqlock built from atomics. Publishing copies the
//! packet into the slot once and never allocates; a reader copies the slot
//! out and re-checks the slot stamp, retrying or reporting a loss if the
//! producer lapped it mid-copy.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, Weak};

use thiserror::Error;

use crate::transport::packet::{SignalPacket, SignalType, MAX_PAYLOAD};

pub const MIN_CAPACITY: usize = 2;
pub const MAX_CAPACITY: usize = 4096;

const WRITING: u64 = 1 << 63;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouterError {
    #[error("stream {0} already has a producer")]
    Conflict(SignalDescriptor),
    #[error("capacity {0} is not a power of two in [{MIN_CAPACITY}, {MAX_CAPACITY}]")]
    InvalidCapacity(usize),
    #[error("slot payload limit {0} outside [1, {MAX_PAYLOAD}]")]
    InvalidSlotSize(usize),
    #[error("sequence {got} does not follow {last}")]
    Ordering { last: u32, got: u32 },
    #[error("payload of {len} bytes exceeds the stream's slot size {limit}")]
    PayloadTooLarge { len: usize, limit: usize },
    #[error("bad selector {0:?}")]
    BadSelector(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Local,
    Network,
}

/// Identifies one stream inside a router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignalDescriptor {
    pub signal_type: SignalType,
    pub user_id: u16,
    pub origin: Origin,
}

impl SignalDescriptor {
    pub fn new(signal_type: SignalType, user_id: u16, origin: Origin) -> Self {
        SignalDescriptor {
            signal_type,
            user_id,
            origin,
        }
    }
}

impl fmt::Display for SignalDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let origin = match self.origin {
            Origin::Local => "local",
            Origin::Network => "network",
        };
        write!(f, "{}:{}:{}", self.signal_type.name(), self.user_id, origin)
    }
}

/// Descriptor pattern; `None` matches any user or origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalSelector {
    pub signal_type: SignalType,
    pub user_id: Option<u16>,
    pub origin: Option<Origin>,
}

impl SignalSelector {
    pub fn exact(desc: SignalDescriptor) -> Self {
        SignalSelector {
            signal_type: desc.signal_type,
            user_id: Some(desc.user_id),
            origin: Some(desc.origin),
        }
    }

    pub fn matches(&self, d: &SignalDescriptor) -> bool {
        self.signal_type == d.signal_type
            && self.user_id.is_none_or(|u| u == d.user_id)
            && self.origin.is_none_or(|o| o == d.origin)
    }
}

/// Parses `type:user:origin`, e.g. `pose:any:network` or `pose:3:local`.
impl FromStr for SignalSelector {
    type Err = RouterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RouterError::BadSelector(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let signal_type = SignalType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(parts[0]))
            .ok_or_else(bad)?;
        let user_id = match parts[1] {
            "any" | "*" => None,
            u => Some(u.parse().map_err(|_| bad())?),
        };
        let origin = match parts[2].to_ascii_lowercase().as_str() {
            "any" | "*" => None,
            "local" => Some(Origin::Local),
            "network" => Some(Origin::Network),
            _ => return Err(bad()),
        };
        Ok(SignalSelector {
            signal_type,
            user_id,
            origin,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerMode {
    /// Every packet, in order; losses to ring overwrite are reported.
    Every,
    /// Only the newest unread packet of each stream.
    LatestWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub published: u64,
    pub consumers: usize,
    pub rejected: u64,
}

struct Stream {
    desc: SignalDescriptor,
    mask: u64,
    words_per_slot: usize,
    slot_bytes: usize,
    stamps: Box<[AtomicU64]>,
    // Per slot: [seq | len << 32 | type << 48, user_id, send_timestamp_us].
    headers: Box<[[AtomicU64; 3]]>,
    payload: Box<[AtomicU64]>,
    head: AtomicU64,
    consumers: AtomicUsize,
    rejected: AtomicU64,
    closed: AtomicBool,
    metadata: Mutex<Vec<u8>>,
}

enum SlotRead {
    Packet(SignalPacket),
    /// The slot already holds a later packet.
    Overwritten,
    /// The producer is mid-write on this exact index.
    Busy,
}

impl Stream {
    fn new(desc: SignalDescriptor, capacity: usize, slot_bytes: usize) -> Self {
        let words_per_slot = slot_bytes.div_ceil(8);
        let atomics = |n: usize| (0..n).map(|_| AtomicU64::new(0)).collect::<Box<[_]>>();
        Stream {
            desc,
            mask: capacity as u64 - 1,
            words_per_slot,
            slot_bytes,
            stamps: atomics(capacity),
            headers: (0..capacity)
                .map(|_| [AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0)])
                .collect(),
            payload: atomics(capacity * words_per_slot),
            head: AtomicU64::new(0),
            consumers: AtomicUsize::new(0),
            rejected: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            metadata: Mutex::new(Vec::new()),
        }
    }

    fn capacity(&self) -> u64 {
        self.mask + 1
    }

    // Single writer per stream.
    fn write(&self, p: &SignalPacket) {
        let index = self.head.load(Ordering::Relaxed);
        let slot = (index & self.mask) as usize;
        let stamp = &self.stamps[slot];
        stamp.store(WRITING | (index + 1), Ordering::Relaxed);
        fence(Ordering::Release);

        let h = &self.headers[slot];
        h[0].store(
            p.seq as u64 | (p.payload.len() as u64) << 32 | (p.signal_type as u64) << 48,
            Ordering::Relaxed,
        );
        h[1].store(p.user_id as u64, Ordering::Relaxed);
        h[2].store(p.send_timestamp_us, Ordering::Relaxed);
        let words = &self.payload[slot * self.words_per_slot..(slot + 1) * self.words_per_slot];
        let mut chunks = p.payload.chunks_exact(8);
        for (w, c) in words.iter().zip(&mut chunks) {
            w.store(u64::from_le_bytes(c.try_into().unwrap()), Ordering::Relaxed);
        }
        let rem = chunks.remainder();
        if !rem.is_empty() {
            let mut last = [0u8; 8];
            last[..rem.len()].copy_from_slice(rem);
            words[p.payload.len() / 8].store(u64::from_le_bytes(last), Ordering::Relaxed);
        }

        stamp.store(index + 1, Ordering::Release);
        self.head.store(index + 1, Ordering::Release);
    }

    fn read(&self, index: u64) -> SlotRead {
        let slot = (index & self.mask) as usize;
        let stamp = &self.stamps[slot];
        let s1 = stamp.load(Ordering::Acquire);
        if s1 != index + 1 {
            return if s1 & !WRITING > index + 1 {
                SlotRead::Overwritten
            } else {
                SlotRead::Busy
            };
        }
        let h = &self.headers[slot];
        let meta = h[0].load(Ordering::Relaxed);
        let user = h[1].load(Ordering::Relaxed);
        let ts = h[2].load(Ordering::Relaxed);
        let len = ((meta >> 32) & 0xFFFF) as usize;
        let len = len.min(self.slot_bytes);
        let words = &self.payload[slot * self.words_per_slot..(slot + 1) * self.words_per_slot];
        let mut payload = Vec::with_capacity(len);
        for w in &words[..len.div_ceil(8)] {
            payload.extend_from_slice(&w.load(Ordering::Relaxed).to_le_bytes());
        }
        payload.truncate(len);
        fence(Ordering::Acquire);
        if stamp.load(Ordering::Relaxed) != s1 {
            return SlotRead::Overwritten;
        }
        let signal_type = SignalType::from_u8((meta >> 48) as u8).unwrap_or(self.desc.signal_type);
        SlotRead::Packet(SignalPacket {
            signal_type,
            user_id: user as u16,
            seq: meta as u32,
            send_timestamp_us: ts,
            payload,
        })
    }
}

struct Subscription {
    id: u64,
    selector: SignalSelector,
    shared: Arc<SubscriptionShared>,
}

#[derive(Default)]
struct SubscriptionShared {
    // Streams attached since the consumer last polled, with their start index.
    pending: Mutex<Vec<(Arc<Stream>, u64)>>,
    has_pending: AtomicBool,
}

#[derive(Default)]
struct RegistryState {
    streams: HashMap<SignalDescriptor, Arc<Stream>>,
    subscriptions: Vec<Subscription>,
    next_subscription: u64,
}

#[derive(Default)]
struct Registry {
    state: Mutex<RegistryState>,
}

impl Registry {
    fn lock(&self) -> MutexGuard<'_, RegistryState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Connects producer streams to consumers. Cheap to clone; clones share
/// the same registry.
#[derive(Clone, Default)]
pub struct Router {
    registry: Arc<Registry>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates the stream for `desc` with a ring of `capacity` slots sized
    /// for the largest datagram payload.
    pub fn register_producer(&self, desc: SignalDescriptor, capacity: usize) -> Result<ProducerHandle, RouterError> {
        self.register_producer_sized(desc, capacity, MAX_PAYLOAD)
    }

    /// Like [`Router::register_producer`] with a smaller per-slot payload
    /// limit, for streams whose packets are known to be small.
    pub fn register_producer_sized(
        &self,
        desc: SignalDescriptor,
        capacity: usize,
        max_payload: usize,
    ) -> Result<ProducerHandle, RouterError> {
        if !capacity.is_power_of_two() || !(MIN_CAPACITY..=MAX_CAPACITY).contains(&capacity) {
            return Err(RouterError::InvalidCapacity(capacity));
        }
        if max_payload == 0 || max_payload > MAX_PAYLOAD {
            return Err(RouterError::InvalidSlotSize(max_payload));
        }
        let mut st = self.registry.lock();
        if st.streams.contains_key(&desc) {
            return Err(RouterError::Conflict(desc));
        }
        let stream = Arc::new(Stream::new(desc, capacity, max_payload));
        for sub in st.subscriptions.iter().filter(|s| s.selector.matches(&desc)) {
            stream.consumers.fetch_add(1, Ordering::Relaxed);
            sub.shared
                .pending
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push((stream.clone(), 0));
            sub.shared.has_pending.store(true, Ordering::Release);
        }
        st.streams.insert(desc, stream.clone());
        Ok(ProducerHandle {
            stream,
            registry: Arc::downgrade(&self.registry),
            last_seq: None,
        })
    }

    /// Attaches a consumer to every current stream matching `selector` and
    /// to every matching stream registered later. Only packets published
    /// after this call are delivered from already-existing streams.
    pub fn subscribe(&self, selector: SignalSelector, mode: ConsumerMode) -> ConsumerHandle {
        let mut st = self.registry.lock();
        let id = st.next_subscription;
        st.next_subscription += 1;
        let shared = Arc::new(SubscriptionShared::default());
        let mut cursors = Vec::new();
        let mut matching: Vec<_> = st
            .streams
            .values()
            .filter(|s| selector.matches(&s.desc))
            .cloned()
            .collect();
        matching.sort_by_key(|s| s.desc);
        for stream in matching {
            stream.consumers.fetch_add(1, Ordering::Relaxed);
            let start = stream.head.load(Ordering::Acquire);
            cursors.push(Cursor::new(stream, start));
        }
        st.subscriptions.push(Subscription {
            id,
            selector,
            shared: shared.clone(),
        });
        ConsumerHandle {
            id,
            mode,
            shared,
            cursors,
            registry: Arc::downgrade(&self.registry),
            rotate: 0,
        }
    }

    pub fn streams(&self) -> Vec<SignalDescriptor> {
        let mut v: Vec<_> = self.registry.lock().streams.keys().copied().collect();
        v.sort();
        v
    }

    pub fn stream_stats(&self, desc: &SignalDescriptor) -> Option<StreamStats> {
        let st = self.registry.lock();
        st.streams.get(desc).map(|s| StreamStats {
            published: s.head.load(Ordering::Acquire),
            consumers: s.consumers.load(Ordering::Relaxed),
            rejected: s.rejected.load(Ordering::Relaxed),
        })
    }

    /// Opaque per-stream metadata set by the producer.
    pub fn metadata(&self, desc: &SignalDescriptor) -> Option<Vec<u8>> {
        let st = self.registry.lock();
        st.streams
            .get(desc)
            .map(|s| s.metadata.lock().unwrap_or_else(|e| e.into_inner()).clone())
    }
}

/// Exclusive publish rights on one stream. Dropping it removes the stream
/// from the router; consumers keep whatever is still buffered.
pub struct ProducerHandle {
    stream: Arc<Stream>,
    registry: Weak<Registry>,
    last_seq: Option<u32>,
}

impl ProducerHandle {
    pub fn descriptor(&self) -> SignalDescriptor {
        self.stream.desc
    }

    /// Copies `packet` into the ring and returns how many consumers are
    /// attached. Sequence numbers must strictly increase; anything else is
    /// dropped and counted.
    pub fn publish(&mut self, packet: &SignalPacket) -> Result<usize, RouterError> {
        if let Some(last) = self.last_seq {
            if packet.seq <= last {
                self.stream.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(RouterError::Ordering { last, got: packet.seq });
            }
        }
        if packet.payload.len() > self.stream.slot_bytes {
            self.stream.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(RouterError::PayloadTooLarge {
                len: packet.payload.len(),
                limit: self.stream.slot_bytes,
            });
        }
        self.stream.write(packet);
        self.last_seq = Some(packet.seq);
        Ok(self.stream.consumers.load(Ordering::Relaxed))
    }

    pub fn published(&self) -> u64 {
        self.stream.head.load(Ordering::Relaxed)
    }

    pub fn rejected(&self) -> u64 {
        self.stream.rejected.load(Ordering::Relaxed)
    }

    pub fn set_metadata(&self, blob: Vec<u8>) {
        *self.stream.metadata.lock().unwrap_or_else(|e| e.into_inner()) = blob;
    }
}

impl Drop for ProducerHandle {
    fn drop(&mut self) {
        self.stream.closed.store(true, Ordering::Release);
        if let Some(reg) = self.registry.upgrade() {
            let mut st = reg.lock();
            if st
                .streams
                .get(&self.stream.desc)
                .is_some_and(|s| Arc::ptr_eq(s, &self.stream))
            {
                st.streams.remove(&self.stream.desc);
            }
        }
    }
}

struct Cursor {
    stream: Arc<Stream>,
    next: u64,
    last_read_seq: Option<u32>,
}

impl Cursor {
    fn new(stream: Arc<Stream>, next: u64) -> Self {
        Cursor {
            stream,
            next,
            last_read_seq: None,
        }
    }

    fn read_every(&mut self, budget: usize, out: &mut Vec<SignalPacket>) -> u64 {
        let cap = self.stream.capacity();
        let mut lost = 0;
        let mut taken = 0;
        while taken < budget {
            let head = self.stream.head.load(Ordering::Acquire);
            if self.next >= head {
                break;
            }
            if head - self.next > cap {
                let skip = head - cap - self.next;
                lost += skip;
                self.next += skip;
            }
            match self.stream.read(self.next) {
                SlotRead::Packet(p) => {
                    self.last_read_seq = Some(p.seq);
                    out.push(p);
                    self.next += 1;
                    taken += 1;
                }
                SlotRead::Overwritten => {
                    lost += 1;
                    self.next += 1;
                }
                SlotRead::Busy => std::hint::spin_loop(),
            }
        }
        lost
    }

    fn read_latest(&mut self, out: &mut Vec<SignalPacket>) {
        loop {
            let head = self.stream.head.load(Ordering::Acquire);
            if head == 0 || head - 1 < self.next {
                return;
            }
            if let SlotRead::Packet(p) = self.stream.read(head - 1) {
                self.last_read_seq = Some(p.seq);
                self.next = head;
                out.push(p);
                return;
            }
            std::hint::spin_loop();
        }
    }

    fn drained_and_closed(&self) -> bool {
        self.stream.closed.load(Ordering::Acquire) && self.next >= self.stream.head.load(Ordering::Acquire)
    }
}

/// Result of one [`ConsumerHandle::poll`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Poll {
    pub packets: Vec<SignalPacket>,
    /// Packets lost to ring overwrite since the previous poll.
    pub gap: u64,
}

/// A subscription's read side. Use from one activity at a time.
pub struct ConsumerHandle {
    id: u64,
    mode: ConsumerMode,
    shared: Arc<SubscriptionShared>,
    cursors: Vec<Cursor>,
    registry: Weak<Registry>,
    rotate: usize,
}

impl ConsumerHandle {
    pub fn mode(&self) -> ConsumerMode {
        self.mode
    }

    fn absorb_pending(&mut self) {
        if self.shared.has_pending.swap(false, Ordering::Acquire) {
            let mut pending = self.shared.pending.lock().unwrap_or_else(|e| e.into_inner());
            for (stream, start) in pending.drain(..) {
                self.cursors.push(Cursor::new(stream, start));
            }
        }
    }

    /// Every mode: up to `max` packets in publish order per stream, streams
    /// visited round-robin. LatestWins: at most the newest unread packet of
    /// each attached stream (and never more than `max` in total).
    pub fn poll(&mut self, max: usize) -> Poll {
        let mut out = Poll::default();
        self.poll_into(max, &mut out);
        out
    }

    /// [`ConsumerHandle::poll`] into a caller-owned buffer; `out` is cleared first.
    pub fn poll_into(&mut self, max: usize, out: &mut Poll) {
        out.packets.clear();
        out.gap = 0;
        let max = max.max(1);
        self.absorb_pending();
        let n = self.cursors.len();
        if n == 0 {
            return;
        }
        let start = self.rotate % n;
        self.rotate = self.rotate.wrapping_add(1);
        for k in 0..n {
            let remaining = max - out.packets.len();
            if remaining == 0 {
                break;
            }
            let c = &mut self.cursors[(start + k) % n];
            match self.mode {
                ConsumerMode::Every => out.gap += c.read_every(remaining, &mut out.packets),
                ConsumerMode::LatestWins => c.read_latest(&mut out.packets),
            }
        }
        let before = self.cursors.len();
        self.cursors.retain(|c| !c.drained_and_closed());
        if self.cursors.len() != before {
            self.rotate = 0;
        }
    }

    /// Streams this consumer is currently attached to.
    pub fn attached_streams(&mut self) -> Vec<SignalDescriptor> {
        self.absorb_pending();
        let mut v: Vec<_> = self.cursors.iter().map(|c| c.stream.desc).collect();
        v.sort();
        v
    }

    /// Sequence number of the last packet read from `desc`, if any.
    pub fn last_read_seq(&self, desc: &SignalDescriptor) -> Option<u32> {
        self.cursors
            .iter()
            .find(|c| c.stream.desc == *desc)
            .and_then(|c| c.last_read_seq)
    }
}

impl Drop for ConsumerHandle {
    fn drop(&mut self) {
        for c in &self.cursors {
            c.stream.consumers.fetch_sub(1, Ordering::Relaxed);
        }
        if let Some(reg) = self.registry.upgrade() {
            let mut st = reg.lock();
            st.subscriptions.retain(|s| s.id != self.id);
        }
        // Attachments that raced with the drop.
        let pending = self.shared.pending.lock().unwrap_or_else(|e| e.into_inner());
        for (s, _) in pending.iter() {
            s.consumers.fetch_sub(1, Ordering::Relaxed);
        }
    }
}
