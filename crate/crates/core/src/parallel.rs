//! Order-preserving parallel map over independent jobs.
//!
//! Results are collected by job index, so the output is identical to the
//! sequential run regardless of scheduling. Jobs must not share mutable
//! state; each derives its own RNG stream from its index.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `f(i)` for `i in 0..n` on up to `max_threads` worker threads and
/// returns the results in index order.
pub fn parallel_map<T, F>(n: usize, max_threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let hw = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1);
    let threads = max_threads.max(1).min(hw).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("worker completed every job"))
        .collect()
}
