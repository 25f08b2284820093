//! Thread-local operation counters.
//!
//! Every matrix product recorded on a tape adds its multiply-accumulate count
//! to `matmul_macs`, convolutions add to `conv_macs`, and all other kernels
//! add their output element count to `unmodeled`. Closed-form cost formulas
//! cover only the first bucket.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub matmul_macs: u64,
    pub conv_macs: u64,
    pub unmodeled: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { matmul_macs: 0, conv_macs: 0, unmodeled: 0 }) };
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub(crate) fn add_matmul(macs: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.matmul_macs += macs as u64;
        c.set(v);
    });
}

pub(crate) fn add_conv(macs: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.conv_macs += macs as u64;
        c.set(v);
    });
}

pub(crate) fn add_unmodeled(elems: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.unmodeled += elems as u64;
        c.set(v);
    });
}
