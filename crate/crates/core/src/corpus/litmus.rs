//! The fifteen bounds-check-bypass litmus variants in IR form.
//!
//! Each variant is a template: `$` prefixes registers and labels, `EXIT` is
//! the label control reaches when the gadget is done. A standalone program
//! instantiates it with an empty prefix and a halting exit block; gadget
//! injection uses a unique prefix and the label of the code that follows.

use crate::ir::{parse_program, Program};
use crate::sim::SimInput;

/// array1 is 256 bytes but its logical size (read from `vars`) is 16; the
/// secret sits right after it.
pub const HEADER: &str = "\
region array1 @0x1000 size 256
region secret @0x1100 size 32
region array2 @0x10000 size 131072
region vars @0x40000 size 64
";

pub const ARRAY1_SIZE: u64 = 16;

/// Secret fill bytes compared pairwise by the leakage oracle.
pub const SECRET_PAIRS: [(u8, u8); 8] =
    [(1, 2), (0, 255), (3, 200), (17, 100), (42, 43), (128, 7), (64, 250), (9, 90)];

/// Unreachable filler instructions in v13, so that the inner bound check is
/// more than one default window away from the array access.
pub const V13_PAD: usize = 449;

/// `temp &= array2[<k> * 512]` where the secret byte is already in `<v>`.
fn leak(v: &str) -> String {
    format!(
        "  binop mul $k, {v}, 512
  load $w, [array2 + $k*1]
  load.q $tm, [vars + 8]
  binop and $tm, $tm, $w
  store.q [vars + 8], $tm
"
    )
}

const PROLOGUE: &str = "$e:\n  call fread -> $x\n  load.q $n, [vars]\n";

fn v01() -> String {
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// The leak sits in a separate "function" reached by jumps.
fn v02() -> String {
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n  unop mov $a, $y\n  jump $f\n$f:\n{}  jump EXIT\n",
        leak("$a")
    )
}

/// Like v02, with the callee laid out before the caller's check.
fn v03() -> String {
    format!(
        "$e:\n  jump $m\n$f:\n{}  jump EXIT\n$m:\n  call fread -> $x\n  load.q $n, [vars]\n  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n  unop mov $a, $y\n  jump $f\n",
        leak("$a")
    )
}

fn v04() -> String {
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  binop shl $i, $x, 1\n  load $y, [array1 + $i*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// for (i = x - 1; i >= 0; i--), written as a count-down loop.
fn v05() -> String {
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  unop mov $i, $x\n  jump $h\n$h:\n  binop eq $z, $i, 0\n  branch $z, EXIT, $b\n$b:\n  binop sub $i, $i, 1\n  load $y, [array1 + $i*1]\n{}  jump $h\n",
        leak("$y")
    )
}

fn v06() -> String {
    format!(
        "{PROLOGUE}  binop and $m, $x, 15\n  binop eq $c, $m, $x\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// Leaks when x equals the previous in-bounds x.
fn v07() -> String {
    format!(
        "{PROLOGUE}  load.q $l, [vars + 16]\n  binop eq $c, $x, $l\n  branch $c, $t, $u\n$t:\n  load $y, [array1 + $x*1]\n{}  jump $u\n$u:\n  binop lt $d, $x, $n\n  branch $d, $s, EXIT\n$s:\n  store.q [vars + 16], $x\n  jump EXIT\n",
        leak("$y")
    )
}

/// array1[x < size ? x + 1 : 0]
fn v08() -> String {
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, $f\n$t:\n  binop add $i, $x, 1\n  jump $j\n$f:\n  unop mov $i, 0\n  jump $j\n$j:\n  load $y, [array1 + $i*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// The safety flag arrives separately, through memory.
fn v09() -> String {
    format!(
        "{PROLOGUE}  call fread -> $g\n  store.q [vars + 24], $g\n  load.q $s, [vars + 24]\n  branch $s, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// The secret only steers a nested branch; no secret-indexed address.
fn v10() -> String {
    "$e:\n  call fread -> $x\n  call fread -> $q\n  load.q $n, [vars]\n  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n  binop eq $d, $y, $q\n  branch $d, $h, EXIT\n$h:\n  load $w, [array2]\n  load.q $tm, [vars + 8]\n  binop and $tm, $tm, $w\n  store.q [vars + 8], $tm\n  jump EXIT\n".to_string()
}

/// memcmp(&temp, array2 + array1[x] * 512, 1)
fn v11() -> String {
    "$e:\n  call fread -> $x\n  load.q $n, [vars]\n  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n  binop mul $k, $y, 512\n  load $b, [array2 + $k*1]\n  load $a, [vars + 8]\n  binop sub $r, $a, $b\n  store [vars + 8], $r\n  jump EXIT\n".to_string()
}

fn v12() -> String {
    format!(
        "$e:\n  call fread -> $x\n  call fread -> $z\n  load.q $n, [vars]\n  binop add $i, $x, $z\n  binop lt $c, $i, $n\n  branch $c, $t, EXIT\n$t:\n  load $y, [array1 + $i*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// is_x_safe(x) inlined: the outer branch tests a register that is only
/// control-dependent on x.
fn v13() -> String {
    let pad = "  unop mov $p, 0\n".repeat(V13_PAD);
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $ok, $no\n$ok:\n  unop mov $r, 1\n  jump $j\n$no:\n  unop mov $r, 0\n  jump $j\n$j:\n{pad}  branch $r, $t, EXIT\n$t:\n  load $y, [array1 + $x*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

fn v14() -> String {
    format!(
        "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  binop xor $i, $x, 255\n  load $y, [array1 + $i*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// x is passed by pointer.
fn v15() -> String {
    format!(
        "$e:\n  call fread -> $v\n  store.q [vars + 32], $v\n  load.q $n, [vars]\n  load.q $x, [vars + 32]\n  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n  load.q $x2, [vars + 32]\n  load $y, [array1 + $x2*1]\n{}  jump EXIT\n",
        leak("$y")
    )
}

/// A litmus variant with inputs that exercise it.
#[derive(Clone, Debug)]
pub struct Litmus {
    pub name: &'static str,
    template: String,
    /// One committed-in-bounds input and several out-of-bounds ones.
    pub inputs: Vec<SimInput>,
}

impl Litmus {
    /// The gadget with prefixed names, leaving through `exit`.
    pub fn fragment(&self, prefix: &str, exit: &str) -> String {
        self.template.replace("EXIT", exit).replace('$', prefix)
    }

    pub fn source(&self) -> String {
        format!("{HEADER}{}done:\n  halt\n", self.fragment("", "done"))
    }

    pub fn program(&self) -> Program {
        parse_program(&self.source()).expect("litmus programs parse")
    }
}

/// Initial memory shared by every variant: array1 = 1..=16, size word = 16.
pub fn base_input() -> SimInput {
    let mut vars = vec![0u8; 64];
    vars[..8].copy_from_slice(&ARRAY1_SIZE.to_le_bytes());
    SimInput::default().with_memory("array1", (1..=16).collect()).with_memory("vars", vars)
}

fn inputs(values: &[&[u64]]) -> Vec<SimInput> {
    values.iter().map(|v| base_input().with_source_values("fread", v)).collect()
}

/// All fifteen variants, v01 through v15.
pub fn litmus() -> Vec<Litmus> {
    let oob: &[&[u64]] = &[&[3], &[260], &[270], &[17]];
    let mk = |name, template: String, values: &[&[u64]]| Litmus { name, template, inputs: inputs(values) };
    vec![
        mk("v01", v01(), oob),
        mk("v02", v02(), oob),
        mk("v03", v03(), oob),
        mk("v04", v04(), &[&[3], &[130], &[135]]),
        mk("v05", v05(), &[&[3], &[261], &[271]]),
        mk("v06", v06(), oob),
        mk("v07", v07(), oob),
        mk("v08", v08(), &[&[3], &[259], &[269]]),
        mk("v09", v09(), &[&[3, 1], &[260, 0], &[270, 0]]),
        mk("v10", v10(), &[&[3, 1], &[260, 1], &[260, 7], &[260, 42], &[260, 128], &[260, 9]]),
        mk("v11", v11(), oob),
        mk("v12", v12(), &[&[3, 1], &[250, 10], &[0, 270]]),
        mk("v13", v13(), oob),
        mk("v14", v14(), &[&[3], &[507], &[497]]),
        mk("v15", v15(), oob),
    ]
}

/// v01 with `pad` filler instructions between the bound check and the
/// secret read, so that the branch-to-read distance is `pad + 1`.
pub fn padded_v01(pad: usize) -> Program {
    let fill = "  unop mov $p, 0\n".repeat(pad);
    let l = Litmus {
        name: "v01_padded",
        template: format!(
            "{PROLOGUE}  binop lt $c, $x, $n\n  branch $c, $t, EXIT\n$t:\n{fill}  load $y, [array1 + $x*1]\n{}  jump EXIT\n",
            leak("$y")
        ),
        inputs: Vec::new(),
    };
    l.program()
}
