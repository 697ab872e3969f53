//! Per-thread multiplication tallies.
//!
//! Kernels add to these counters once per call (rows x cols for an MVM, the
//! vector length for element-wise products), so instrumentation costs a
//! handful of cell updates per timestep.

use std::cell::Cell;
use std::ops::Sub;

use serde::Serialize;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// Float multiplies performed inside matrix-vector kernels.
    pub mvm_float_mults: u64,
    /// Integer multiplies performed inside matrix-vector kernels.
    pub mvm_int_mults: u64,
    /// Float multiplies outside the MVM kernels (normalization, gating,
    /// Q7 conversion and rescaling).
    pub elementwise_float_mults: u64,
}

impl OpCounts {
    pub fn float_mults(&self) -> u64 {
        self.mvm_float_mults + self.elementwise_float_mults
    }

    pub fn int_mults(&self) -> u64 {
        self.mvm_int_mults
    }
}

impl Sub for OpCounts {
    type Output = OpCounts;

    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            mvm_float_mults: self.mvm_float_mults - rhs.mvm_float_mults,
            mvm_int_mults: self.mvm_int_mults - rhs.mvm_int_mults,
            elementwise_float_mults: self.elementwise_float_mults - rhs.elementwise_float_mults,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const {
        Cell::new(OpCounts { mvm_float_mults: 0, mvm_int_mults: 0, elementwise_float_mults: 0 })
    };
}

#[inline]
fn update(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

#[inline]
pub(crate) fn add_mvm_float(n: usize) {
    update(|c| c.mvm_float_mults += n as u64);
}

#[inline]
pub(crate) fn add_mvm_int(n: usize) {
    update(|c| c.mvm_int_mults += n as u64);
}

#[inline]
pub(crate) fn add_elementwise(n: usize) {
    update(|c| c.elementwise_float_mults += n as u64);
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(Cell::get)
}

/// Runs `f` and returns the multiplications it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_isolates_region() {
        add_mvm_float(7);
        let ((), counts) = measure(|| {
            add_mvm_int(3);
            add_elementwise(2);
        });
        assert_eq!(counts, OpCounts { mvm_float_mults: 0, mvm_int_mults: 3, elementwise_float_mults: 2 });
        assert_eq!(counts.float_mults(), 2);
    }
}
