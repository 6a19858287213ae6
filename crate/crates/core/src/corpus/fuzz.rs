//! Seeded random programs for differential and property checks.
//!
//! Generated programs are forward-only (no loops), stay within the size
//! limits below and call `fread` at least once. Every array1 index is either
//! masked into bounds or guarded by a bound check on a source-derived
//! register, so committed runs never touch the secret that sits right after
//! array1. Secret bytes can only be observed transiently.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{parse_program, Program};
use crate::sim::SimInput;

pub const MAX_INSTS: usize = 100;
pub const MAX_BRANCHES: usize = 8;
pub const SOURCE: &str = "fread";
/// Source values provided per input; programs make fewer calls.
const VALUES_PER_INPUT: usize = 8;

pub const HEADER: &str = "\
region array1 @0x1000 size 16
region secret @0x1010 size 16
region array2 @0x10000 size 131072
region pub @0x30000 size 256
";

#[derive(Clone, Debug)]
pub struct FuzzProgram {
    pub seed: u64,
    pub source: String,
    pub program: Program,
    pub inputs: Vec<SimInput>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    /// Derived from a source call.
    Tainted,
    /// Untainted, below 16.
    Small,
    /// A loaded byte.
    Byte,
    /// Untainted, any value.
    Any,
}

struct Gen {
    rng: ChaCha8Rng,
    lines: Vec<String>,
    insts: usize,
    branches: usize,
    calls: usize,
    next_reg: usize,
    next_label: usize,
    /// In-scope registers; arms push and pop their own.
    scope: Vec<(String, Class)>,
}

impl Gen {
    fn reg(&mut self, class: Class) -> String {
        let r = format!("r{}", self.next_reg);
        self.next_reg += 1;
        self.scope.push((r.clone(), class));
        r
    }

    fn label(&mut self) -> String {
        self.next_label += 1;
        format!("L{}", self.next_label)
    }

    fn emit(&mut self, s: String) {
        self.insts += 1;
        self.lines.push(format!("  {s}"));
    }

    fn open(&mut self, l: &str) {
        self.lines.push(format!("{l}:"));
    }

    fn pick(&mut self, pred: impl Fn(Class) -> bool) -> Option<String> {
        let c: Vec<&String> = self.scope.iter().filter(|(_, k)| pred(*k)).map(|(r, _)| r).collect();
        c.choose(&mut self.rng).map(|r| (*r).clone())
    }

    fn any(&mut self) -> String {
        self.pick(|_| true).expect("a source register is always in scope")
    }

    fn room(&self, n: usize) -> bool {
        // keep space for enclosing jumps and the final halt
        self.insts + n + 4 <= MAX_INSTS
    }

    fn source(&mut self) {
        let r = self.reg(Class::Tainted);
        self.calls += 1;
        self.emit(format!("call {SOURCE} -> {r}"));
    }

    fn arith(&mut self) {
        let a = self.any();
        let (op, rhs) = match self.rng.gen_range(0..6) {
            0 => ("add", self.any()),
            1 => ("sub", self.any()),
            2 => ("xor", self.any()),
            3 => ("add", self.rng.gen_range(0..16u64).to_string()),
            4 => ("and", self.rng.gen_range(0..16u64).to_string()),
            _ => ("shl", self.rng.gen_range(0..4u64).to_string()),
        };
        let tainted = |g: &Gen, r: &str| g.scope.iter().any(|(n, k)| n == r && *k == Class::Tainted);
        let class = if tainted(self, &a) || tainted(self, &rhs) {
            Class::Tainted
        } else if op == "and" {
            Class::Small
        } else {
            Class::Any
        };
        let d = self.reg(class);
        self.emit(format!("binop {op} {d}, {a}, {rhs}"));
    }

    fn constant(&mut self) {
        let v = self.rng.gen_range(0..16u64);
        let d = self.reg(Class::Small);
        self.emit(format!("unop mov {d}, {v}"));
    }

    fn masked(&mut self) -> String {
        let r = self.any();
        let t = self.reg(Class::Small);
        self.emit(format!("binop and {t}, {r}, 15"));
        t
    }

    fn masked_load(&mut self) {
        let t = self.masked();
        let region = if self.rng.gen_bool(0.5) { "array1" } else { "pub" };
        let b = self.reg(Class::Byte);
        self.emit(format!("load {b}, [{region} + {t}*1]"));
    }

    fn masked_store(&mut self) {
        let t = self.masked();
        let v = self.any();
        self.emit(format!("store [pub + {t}*1], {v}"));
    }

    fn leak(&mut self) {
        let Some(b) = self.pick(|k| k == Class::Byte) else { return self.masked_load() };
        let k = self.reg(Class::Any);
        self.emit(format!("binop shl {k}, {b}, 9"));
        let w = self.reg(Class::Byte);
        self.emit(format!("load {w}, [array2 + {k}*1]"));
    }

    /// `if (r < 16) { array1[r] ... }` on a source-derived `r`.
    fn guarded(&mut self, depth: usize) {
        let Some(r) = self.pick(|k| k == Class::Tainted) else { return self.source() };
        let c = self.reg(Class::Any);
        let (body, join) = (self.label(), self.label());
        self.emit(format!("binop lt {c}, {r}, 16"));
        self.emit(format!("branch {c}, {body}, {join}"));
        self.branches += 1;
        self.open(&body);
        let mark = self.scope.len();
        if self.rng.gen_bool(0.2) {
            let v = self.any();
            self.emit(format!("store [array1 + {r}*1], {v}"));
        } else {
            let y = self.reg(Class::Byte);
            self.emit(format!("load {y}, [array1 + {r}*1]"));
            if self.rng.gen_bool(0.7) {
                self.leak();
            }
        }
        self.block(depth + 1, 2);
        self.scope.truncate(mark);
        self.emit(format!("jump {join}"));
        self.open(&join);
    }

    fn if_else(&mut self, depth: usize) {
        let (a, b) = (self.any(), self.any());
        let op = ["lt", "eq", "ne", "ge"].choose(&mut self.rng).copied().unwrap_or("lt");
        let c = self.reg(Class::Any);
        let (t, e, j) = (self.label(), self.label(), self.label());
        self.emit(format!("binop {op} {c}, {a}, {b}"));
        self.emit(format!("branch {c}, {t}, {e}"));
        self.branches += 1;
        for arm in [t, e] {
            self.open(&arm);
            let mark = self.scope.len();
            self.block(depth + 1, 3);
            self.scope.truncate(mark);
            self.emit(format!("jump {j}"));
        }
        self.open(&j);
    }

    fn stmt(&mut self, depth: usize) {
        let can_branch = self.branches < MAX_BRANCHES && depth < 3 && self.room(14);
        match self.rng.gen_range(0..100) {
            0..=7 if self.calls < 4 => self.source(),
            0..=24 => self.arith(),
            25..=31 => self.constant(),
            32..=45 => self.masked_load(),
            46..=53 => self.masked_store(),
            54..=63 => self.leak(),
            64..=87 if can_branch => self.guarded(depth),
            88..=99 if can_branch => self.if_else(depth),
            _ => self.arith(),
        }
    }

    fn block(&mut self, depth: usize, max: usize) {
        let n = self.rng.gen_range(0..=max);
        for _ in 0..n {
            if !self.room(14) {
                break;
            }
            self.stmt(depth);
        }
    }
}

fn input_values(rng: &mut ChaCha8Rng) -> Vec<u64> {
    (0..VALUES_PER_INPUT)
        .map(|_| match rng.gen_range(0..3) {
            0 => rng.gen_range(0..16),
            1 => rng.gen_range(16..32),
            _ => rng.gen_range(32..300),
        })
        .collect()
}

/// Initial memory for fuzz programs: array1 and pub hold small bytes.
pub fn base_input() -> SimInput {
    SimInput::default()
        .with_memory("array1", (1..=16).collect())
        .with_memory("pub", (0..=255u8).map(|b| b % 16).collect())
}

/// One program and three inputs for `seed`.
pub fn generate(seed: u64) -> FuzzProgram {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        lines: vec!["entry:".to_string()],
        insts: 0,
        branches: 0,
        calls: 0,
        next_reg: 0,
        next_label: 0,
        scope: Vec::new(),
    };
    g.source();
    while g.room(14) && g.rng.gen_bool(0.93) {
        g.stmt(0);
    }
    g.emit("halt".to_string());
    let source = format!("{HEADER}source {SOURCE}\n{}\n", g.lines.join("\n"));
    let program = parse_program(&source).expect("generated programs parse");
    let inputs =
        (0..3).map(|_| base_input().with_source_values(SOURCE, &input_values(&mut g.rng))).collect();
    FuzzProgram { seed, source, program, inputs }
}

/// `n` programs from consecutive seeds.
pub fn corpus(n: usize, base_seed: u64) -> Vec<FuzzProgram> {
    (0..n as u64).map(|i| generate(base_seed.wrapping_add(i))).collect()
}
