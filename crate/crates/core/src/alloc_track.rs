//! Allocation tracking for memory-contract tests and benchmarks.
//!
//! Install [`TrackingAllocator`] as the global allocator of a binary, then
//! wrap the code of interest in [`track_max_allocation`]. Only allocations
//! made on the calling thread are recorded.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

pub struct TrackingAllocator;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static MAX_BYTES: Cell<usize> = const { Cell::new(0) };
    static INSTALLED: Cell<bool> = const { Cell::new(false) };
}

fn record(size: usize) {
    let _ = ACTIVE.try_with(|a| {
        if a.get() {
            let _ = MAX_BYTES.try_with(|m| m.set(m.get().max(size)));
        }
    });
    let _ = INSTALLED.try_with(|i| i.set(true));
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        record(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        record(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        record(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

/// Whether [`TrackingAllocator`] is the global allocator of this process.
pub fn is_installed() -> bool {
    drop(Vec::<u8>::with_capacity(1));
    INSTALLED.with(|i| i.get())
}

/// Runs `f` and returns its result with the largest single allocation (in
/// bytes) it made on this thread. Always 0 without the tracking allocator.
pub fn track_max_allocation<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let was = ACTIVE.with(|a| a.replace(true));
    let prev = MAX_BYTES.with(|m| m.replace(0));
    let out = f();
    let peak = MAX_BYTES.with(|m| m.get());
    ACTIVE.with(|a| a.set(was));
    MAX_BYTES.with(|m| m.set(prev.max(peak)));
    (out, peak)
}
