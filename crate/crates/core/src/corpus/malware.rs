//! Meltdown proof of concept and Prime+Probe samples for a 16:4:64 cache.

use crate::ir::{parse_program, Program};
use crate::meltdown::CacheGeometry;

pub const MELTDOWN_POC: &str = "\
region kernel @0xffff0000 size 4096 protected
region probe @0x100000 size 1048576
e:
  load k, [kernel + 16]
  binop shl k, k, 12
  load z, [probe + k*1]
  halt
";

pub fn geometry() -> CacheGeometry {
    CacheGeometry::new(16, 4, 64).expect("valid geometry")
}

/// `primes` loads filling set 0, a kernel read feeding an eviction-set
/// access, then four timed probes at `probe_offset` within each way.
fn prime_probe_source(primes: usize, probe_offset: u64) -> String {
    let mut s = String::from(
        "region ev @0x80000 size 8192\nregion kernel @0xffff0000 size 4096 protected\ne:\n",
    );
    for i in 0..primes {
        s.push_str(&format!("  load p{i}, [ev + {}]\n", i * 1024));
    }
    s.push_str("  load s, [kernel + 8]\n  binop and s, s, 3\n  binop mul o, s, 1024\n  load v, [ev + o*1]\n");
    s.push_str("  time t0\n");
    for i in 0..4u64 {
        s.push_str(&format!("  load q{i}, [ev + {}]\n  time t{}\n", i * 1024 + probe_offset, i + 1));
    }
    s.push_str("  halt\n");
    s
}

pub fn meltdown_poc() -> Program {
    parse_program(MELTDOWN_POC).expect("sample parses")
}

/// Full prime of every way, unauthorized read, full timed probe.
pub fn prime_probe() -> Program {
    parse_program(&prime_probe_source(4, 0)).expect("sample parses")
}

/// One way short of a full prime.
pub fn prime_probe_short() -> Program {
    parse_program(&prime_probe_source(3, 0)).expect("sample parses")
}

/// Probes on set 1 while the prime fills set 0.
pub fn prime_probe_disjoint() -> Program {
    parse_program(&prime_probe_source(4, 64)).expect("sample parses")
}
