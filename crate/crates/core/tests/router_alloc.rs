//! Publishing into a registered stream must not touch the heap.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use dancegraph::router::{ConsumerMode, Origin, Router, SignalDescriptor, SignalSelector};
use dancegraph::transport::SignalType;
use dancegraph::SignalPacket;

struct Counting;

thread_local! {
    static ARMED: Cell<bool> = const { Cell::new(false) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

fn note() {
    // try_with: the allocator can run during thread-local teardown.
    let _ = ARMED.try_with(|a| {
        if a.get() {
            let _ = COUNT.try_with(|c| c.set(c.get() + 1));
        }
    });
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note();
        unsafe { System.alloc(layout) }
    }
    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note();
        unsafe { System.alloc_zeroed(layout) }
    }
    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note();
        unsafe { System.realloc(ptr, layout, new_size) }
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn counted<R>(f: impl FnOnce() -> R) -> (R, u64) {
    COUNT.with(|c| c.set(0));
    ARMED.with(|a| a.set(true));
    let r = f();
    ARMED.with(|a| a.set(false));
    (r, COUNT.with(|c| c.get()))
}

#[test]
fn publish_after_registration_does_not_allocate() {
    let router = Router::new();
    let desc = SignalDescriptor::new(SignalType::Pose, 7, Origin::Local);
    let mut producer = router.register_producer(desc, 64).unwrap();
    let mut every = router.subscribe(SignalSelector::exact(desc), ConsumerMode::Every);
    let mut latest = router.subscribe(SignalSelector::exact(desc), ConsumerMode::LatestWins);

    let mut packets: Vec<SignalPacket> = (1..=1000u32)
        .map(|seq| SignalPacket::new(SignalType::Pose, 7, seq, seq as u64 * 33_333, vec![seq as u8; 224]))
        .collect();
    // A stale packet exercises the rejection path too.
    packets.push(SignalPacket::new(SignalType::Pose, 7, 5, 0, vec![0; 8]));

    let (results, allocs) = counted(|| {
        let mut ok = 0u32;
        let mut err = 0u32;
        for p in &packets {
            match producer.publish(p) {
                Ok(_) => ok += 1,
                Err(_) => err += 1,
            }
        }
        (ok, err)
    });
    assert_eq!(results, (1000, 1));
    assert_eq!(allocs, 0, "publish allocated {allocs} times");

    // The counter itself works.
    let (_, n) = counted(|| std::hint::black_box(vec![1u8; 16]));
    assert!(n >= 1);

    let got = every.poll(2000);
    assert_eq!(got.packets.len(), 64);
    assert_eq!(got.gap, 1000 - 64);
    assert_eq!(latest.poll(10).packets[0].seq, 1000);
}
