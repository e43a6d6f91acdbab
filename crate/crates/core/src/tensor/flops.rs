//! Multiply-add instrumentation.
//!
//! Contraction kernels (matrix products, depthwise convolutions, FFTs) add
//! their multiply-add count to a thread-local counter during forward
//! evaluation. Elementwise work is not counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Multiply-adds charged for one complex transform of length `n`.
pub fn fft_cost(n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    let log = usize::BITS - (n - 1).leading_zeros();
    (n as u64) * u64::from(log)
}
