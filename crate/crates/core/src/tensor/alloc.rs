use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Byte-exact high-water mark of live tensor storage.
///
/// Each thread owns one instance (see [`global`]). A buffer keeps a handle to
/// the tracker that counted it, so freeing on another thread stays balanced.
#[derive(Debug, Default)]
pub struct AllocTracker {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl AllocTracker {
    pub const fn new() -> Self {
        Self {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn alloc(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn free(&self, bytes: usize) {
        let prev = self.current.fetch_sub(bytes, Ordering::SeqCst);
        debug_assert!(prev >= bytes, "tracker underflow");
    }

    /// Restart the high-water mark from the current live size.
    pub fn reset(&self) {
        let now = self.current.load(Ordering::SeqCst);
        self.peak.store(now, Ordering::SeqCst);
        // An allocation racing the store may have raised `current` past `now`.
        self.peak
            .fetch_max(self.current.load(Ordering::SeqCst), Ordering::SeqCst);
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

thread_local! {
    static GLOBAL: Arc<AllocTracker> = Arc::new(AllocTracker::new());
    static SCORES: Arc<AllocTracker> = Arc::new(AllocTracker::new());
    static IN_SCORE_SCOPE: Cell<bool> = const { Cell::new(false) };
}

/// This thread's tracker for buffers created inside [`score_scope`]:
/// attention score and weight matrices. They are counted by [`global`] too.
pub fn score_tracker() -> Arc<AllocTracker> {
    SCORES.with(Arc::clone)
}

/// Run `f` with every tensor buffer it creates on this thread tagged as an
/// attention score buffer.
pub fn score_scope<R>(f: impl FnOnce() -> R) -> R {
    let prev = IN_SCORE_SCOPE.with(|c| c.replace(true));
    let out = f();
    IN_SCORE_SCOPE.with(|c| c.set(prev));
    out
}

pub(crate) fn in_score_scope() -> bool {
    IN_SCORE_SCOPE.with(|c| c.get())
}

/// The tracker this thread's [`Tensor`](super::Tensor) buffers report to.
pub fn global() -> Arc<AllocTracker> {
    GLOBAL.with(Arc::clone)
}

/// Reset this thread's high-water marks, both general and score.
pub fn tracker_reset() {
    GLOBAL.with(|t| t.reset());
    SCORES.with(|t| t.reset());
}

pub fn tracker_peak() -> usize {
    GLOBAL.with(|t| t.peak())
}

pub fn tracker_current() -> usize {
    GLOBAL.with(|t| t.current())
}

#[cfg(test)]
mod scope_tests {
    use super::*;

    #[test]
    fn scope_flag_is_restored() {
        assert!(!in_score_scope());
        score_scope(|| {
            assert!(in_score_scope());
            score_scope(|| assert!(in_score_scope()));
            assert!(in_score_scope());
        });
        assert!(!in_score_scope());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_pins_peak_to_current() {
        let t = AllocTracker::new();
        t.alloc(100);
        t.alloc(50);
        t.free(50);
        assert_eq!(t.peak(), 150);
        assert_eq!(t.current(), 100);
        t.reset();
        assert_eq!(t.peak(), t.current());
    }

    #[test]
    fn peak_is_monotone_between_resets() {
        let t = AllocTracker::new();
        let mut last = 0;
        for step in 0..50usize {
            if step % 3 == 0 {
                t.alloc(step * 7 + 1);
            } else if t.current() > 10 {
                t.free(5);
            }
            assert!(t.peak() >= last);
            assert!(t.peak() >= t.current());
            last = t.peak();
        }
    }

    #[test]
    fn concurrent_allocations_balance() {
        let t = std::sync::Arc::new(AllocTracker::new());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let t = t.clone();
                std::thread::spawn(move || {
                    for _ in 0..1000 {
                        t.alloc(16);
                        t.free(16);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(t.current(), 0);
        assert!(t.peak() >= 16 && t.peak() <= 64);
    }
}
