//! Multiply counting for instrumented executions.
//!
//! While a counting scope is active on the current thread, convolutions and
//! fully connected maps run through serial reference kernels that tally
//! every multiply they perform, padded taps included.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn is_counting() -> bool {
    ACTIVE.with(Cell::get)
}

pub(crate) fn tally(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Runs `f` with multiply counting enabled and returns its result along with
/// the number of multiplies executed by instrumented kernels.
pub fn count_multiplies<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let before = MACS.with(|m| m.replace(0));
    let out = f();
    let counted = MACS.with(|m| m.replace(before));
    ACTIVE.with(|a| a.set(was_active));
    (out, counted)
}
