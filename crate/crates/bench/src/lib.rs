//! Fixed workloads shared by the benchmarks.

use specguard_core::corpus::{fuzz, inject, litmus};
use specguard_core::Program;

pub fn litmus_programs() -> Vec<(String, Program)> {
    litmus().into_iter().map(|l| (l.name.to_string(), l.program())).collect()
}

pub fn fuzz_programs(n: u64) -> Vec<Program> {
    (0..n).map(|s| fuzz::generate(s).program).collect()
}

/// A benign program with `k` gadgets mixed in.
pub fn injected(k: usize) -> Program {
    inject(k, 7).program
}
