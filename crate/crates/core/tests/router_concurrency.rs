use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;

use dancegraph::router::{ConsumerMode, Origin, Router, SignalDescriptor, SignalSelector};
use dancegraph::{SignalPacket, SignalType};
use proptest::prelude::*;

fn packet(user: u16, seq: u32) -> SignalPacket {
    let mut payload = seq.to_le_bytes().to_vec();
    payload.extend_from_slice(&[user as u8; 20]);
    SignalPacket::new(SignalType::Pose, user, seq, seq as u64, payload)
}

// Consumers that keep up must see everything, in order, and all see the same thing.
#[test]
fn fan_out_equality_under_capacity() {
    const N: u32 = 10_000;
    const CAP: usize = 64;
    let router = Router::new();
    let desc = SignalDescriptor::new(SignalType::Pose, 1, Origin::Local);
    let mut producer = router.register_producer(desc, CAP).unwrap();
    let consumers: Vec<_> = (0..3)
        .map(|_| router.subscribe(SignalSelector::exact(desc), ConsumerMode::Every))
        .collect();

    // Flow control: the producer stays less than a ring ahead of the slowest reader.
    let progress: Arc<Vec<std::sync::atomic::AtomicU32>> =
        Arc::new((0..3).map(|_| std::sync::atomic::AtomicU32::new(0)).collect());
    let start = Arc::new(Barrier::new(4));
    let mut threads = Vec::new();
    for (i, mut c) in consumers.into_iter().enumerate() {
        let progress = progress.clone();
        let start = start.clone();
        threads.push(thread::spawn(move || {
            start.wait();
            let mut seen = Vec::with_capacity(N as usize);
            let mut gaps = 0;
            while seen.len() < N as usize {
                let p = c.poll(16);
                gaps += p.gap;
                for pk in p.packets {
                    assert_eq!(&pk.payload[..4], &pk.seq.to_le_bytes());
                    seen.push(pk.seq);
                }
                progress[i].store(seen.len() as u32, Ordering::Release);
                if seen.is_empty() {
                    thread::yield_now();
                }
            }
            (seen, gaps)
        }));
    }
    start.wait();
    for seq in 1..=N {
        loop {
            let slowest = progress.iter().map(|p| p.load(Ordering::Acquire)).min().unwrap();
            if seq - 1 - slowest < (CAP as u32) / 2 {
                break;
            }
            thread::yield_now();
        }
        producer.publish(&packet(1, seq)).unwrap();
    }
    let results: Vec<_> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    let expected: Vec<u32> = (1..=N).collect();
    for (seen, gaps) in &results {
        assert_eq!(*gaps, 0);
        assert_eq!(seen, &expected);
    }
}

// A producer that never waits: readers may lose packets to overwrite, but what
// they get is intact, strictly increasing and accounted for.
#[test]
fn overrun_is_accounted_and_ordered() {
    const N: u32 = 10_000;
    let router = Router::new();
    let descs: Vec<_> = (1..=3).map(|u| SignalDescriptor::new(SignalType::Pose, u, Origin::Network)).collect();
    let any = SignalSelector {
        signal_type: SignalType::Pose,
        user_id: None,
        origin: None,
    };
    let consumers: Vec<_> = (0..3).map(|_| router.subscribe(any, ConsumerMode::Every)).collect();
    let done = Arc::new(AtomicBool::new(false));
    let producers: Vec<_> = descs
        .iter()
        .map(|d| {
            let mut p = router.register_producer(*d, 64).unwrap();
            let user = d.user_id;
            thread::spawn(move || {
                for seq in 1..=N {
                    p.publish(&packet(user, seq)).unwrap();
                }
                p
            })
        })
        .collect();
    let readers: Vec<_> = consumers
        .into_iter()
        .map(|mut c| {
            let done = done.clone();
            thread::spawn(move || {
                let mut last = [0u32; 4];
                let mut got = 0u64;
                let mut gaps = 0u64;
                loop {
                    let finished = done.load(Ordering::Acquire);
                    let p = c.poll(256);
                    gaps += p.gap;
                    for pk in &p.packets {
                        let u = pk.user_id as usize;
                        assert!(pk.seq > last[u], "user {u}: {} after {}", pk.seq, last[u]);
                        assert_eq!(&pk.payload[..4], &pk.seq.to_le_bytes());
                        assert!(pk.payload[4..].iter().all(|&b| b == u as u8));
                        last[u] = pk.seq;
                        got += 1;
                    }
                    if finished && p.packets.is_empty() {
                        return (got, gaps, last);
                    }
                }
            })
        })
        .collect();
    let kept: Vec<_> = producers.into_iter().map(|t| t.join().unwrap()).collect();
    done.store(true, Ordering::Release);
    for r in readers {
        let (got, gaps, last) = r.join().unwrap();
        assert_eq!(got + gaps, 3 * N as u64, "every packet is read or counted lost");
        assert_eq!(&last[1..], &[N, N, N]);
    }
    drop(kept);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // LatestWins never goes backwards and, once the producer is idle, always
    // returns the newest packet.
    #[test]
    fn latest_wins_staleness(bursts in prop::collection::vec(0usize..40, 1..30)) {
        let router = Router::new();
        let desc = SignalDescriptor::new(SignalType::Pose, 2, Origin::Local);
        let mut producer = router.register_producer(desc, 16).unwrap();
        let mut latest = router.subscribe(SignalSelector::exact(desc), ConsumerMode::LatestWins);
        let mut seq = 0u32;
        let mut last_read = 0u32;
        for burst in bursts {
            for _ in 0..burst {
                seq += 1;
                producer.publish(&packet(2, seq)).unwrap();
            }
            let p = latest.poll(8);
            prop_assert!(p.packets.len() <= 1);
            match p.packets.first() {
                Some(pk) => {
                    prop_assert_eq!(pk.seq, seq);
                    prop_assert!(pk.seq > last_read);
                    last_read = pk.seq;
                }
                None => prop_assert_eq!(last_read, seq),
            }
        }
    }
}
