mod common;

use std::sync::{mpsc, Arc, Barrier};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smes_core::workspace::{
    provision, replay, LoadProfile, WorkspaceDims, WorkspaceError, WorkspacePool,
};

fn wait_for_waiters(pool: &WorkspacePool, n: usize) {
    for _ in 0..2000 {
        if pool.stats().waiting == n {
            return;
        }
        thread::sleep(Duration::from_millis(1));
    }
    panic!("expected {n} waiters, have {}", pool.stats().waiting);
}

#[test]
fn first_fit_after_held_prefix() {
    let pool = WorkspacePool::new(4096, 10).unwrap();
    let a = pool.try_allocate(4).unwrap().unwrap();
    assert_eq!((a.start(), a.end()), (0, 4));
    let b = pool.try_allocate(3).unwrap().unwrap();
    assert_eq!((b.start(), b.end()), (4, 7));
    pool.release(a).unwrap();
    let c = pool.try_allocate(2).unwrap().unwrap();
    assert_eq!(c.start(), 0);
}

#[test]
fn waiter_succeeds_after_release() {
    let pool = Arc::new(WorkspacePool::new(4096, 10).unwrap());
    let held = pool.try_allocate(9).unwrap().unwrap();
    let p = Arc::clone(&pool);
    let waiter = thread::spawn(move || p.allocate(3, None).unwrap());
    wait_for_waiters(&pool, 1);
    pool.release(held).unwrap();
    let got = waiter.join().unwrap();
    assert_eq!((got.start(), got.len()), (0, 3));
    assert_eq!(pool.stats().wait_events, 1);
}

#[test]
fn releases_serve_waiters_in_fifo_order() {
    let pool = Arc::new(WorkspacePool::new(4096, 10).unwrap());
    let full = pool.try_allocate(10).unwrap().unwrap();
    let (tx, rx) = mpsc::channel();
    let mut handles = Vec::new();
    for i in 0..3 {
        let p = Arc::clone(&pool);
        let tx = tx.clone();
        handles.push(thread::spawn(move || {
            let b = p.allocate(6, None).unwrap();
            tx.send((i, b)).unwrap();
        }));
        wait_for_waiters(&pool, i + 1);
    }
    pool.release(full).unwrap();
    let (first, b1) = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(first, 0);
    // Only one 6-page block fits; the others keep waiting.
    assert!(rx.recv_timeout(Duration::from_millis(50)).is_err());
    assert_eq!(pool.stats().waiting, 2);
    pool.release(b1).unwrap();
    let (second, b2) = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(second, 1);
    pool.release(b2).unwrap();
    let (third, b3) = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(third, 2);
    pool.release(b3).unwrap();
    for h in handles {
        h.join().unwrap();
    }
    let s = pool.stats();
    assert_eq!(
        (s.allocations, s.releases, s.held_blocks, s.pages_in_use),
        (4, 4, 0, 0)
    );
}

#[test]
fn double_release_leaves_ledger_unchanged() {
    let pool = WorkspacePool::new(4096, 8).unwrap();
    let a = pool.try_allocate(2).unwrap().unwrap();
    let b = pool.try_allocate(3).unwrap().unwrap();
    pool.release(a).unwrap();
    let before = (pool.stats(), pool.held_blocks());
    assert_eq!(pool.release(a), Err(WorkspaceError::UnknownBlock(a.id())));
    assert_eq!((pool.stats(), pool.held_blocks()), before);
    pool.release(b).unwrap();
}

#[test]
fn concurrent_stress() {
    for seed in 0..4 {
        common::stress(seed, 16, 4_000, 64);
    }
}

#[test]
fn threaded_wave_replay_never_waits_at_full_provision() {
    let dims = WorkspaceDims {
        d_in: 16,
        d_out: 8,
        elem_bytes: 8,
        page_size: 4096,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<usize> = (0..400)
        .map(|_| {
            if rng.gen_bool(0.1) {
                rng.gen_range(1000..3000)
            } else {
                rng.gen_range(50..500)
            }
        })
        .collect();
    let c = 6;
    let p = provision(&LoadProfile::new(samples.clone()), 1.0, dims, c).unwrap();
    assert_eq!(
        replay(&samples, p.recommended_pages, c, dims)
            .unwrap()
            .wait_events,
        0
    );

    let pool = Arc::new(WorkspacePool::new(dims.page_size, p.recommended_pages).unwrap());
    let barrier = Arc::new(Barrier::new(c));
    let samples = Arc::new(samples);
    let threads: Vec<_> = (0..c)
        .map(|w| {
            let (pool, barrier, samples) = (
                Arc::clone(&pool),
                Arc::clone(&barrier),
                Arc::clone(&samples),
            );
            thread::spawn(move || {
                for wave in samples.chunks(c) {
                    barrier.wait();
                    if let Some(&n) = wave.get(w) {
                        let b = pool.allocate(dims.required_pages(n), None).unwrap();
                        thread::yield_now();
                        pool.release(b).unwrap();
                    }
                    barrier.wait();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(pool.stats().wait_events, 0);
}
