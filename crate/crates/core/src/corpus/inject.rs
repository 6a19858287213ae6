//! A benign program with litmus gadgets spliced in at random points, for
//! measuring detection recall.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::litmus::{litmus, HEADER as LITMUS_HEADER};
use crate::ir::{parse_program, InstId, Program};

pub const BENIGN_INSTS: usize = 200;

/// A benign chunk is one top-level statement: straight-line arithmetic,
/// masked accesses, or a constant-bound loop. No external calls.
fn benign_chunks(rng: &mut ChaCha8Rng, target: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut insts = 0;
    let mut reg = 0;
    let mut label = 0;
    let fresh = |p: &str, n: &mut usize| {
        *n += 1;
        format!("{p}{n}")
    };
    while insts < target {
        let mut s = String::new();
        match rng.gen_range(0..4) {
            0 => {
                let (a, b) = (fresh("b", &mut reg), fresh("b", &mut reg));
                s += &format!("  unop mov {a}, {}\n  binop add {b}, {a}, {}\n", rng.gen_range(0..16), rng.gen_range(0..16));
                insts += 2;
            }
            1 => {
                let (t, v) = (fresh("b", &mut reg), fresh("b", &mut reg));
                s += &format!("  unop mov {t}, {}\n  binop and {t}, {t}, 255\n  load {v}, [bn + {t}*1]\n", rng.gen_range(0..256));
                insts += 3;
            }
            2 => {
                let (t, v) = (fresh("b", &mut reg), fresh("b", &mut reg));
                s += &format!(
                    "  unop mov {t}, {}\n  unop mov {v}, {}\n  store [bn + {t}*1], {v}\n",
                    rng.gen_range(0..256),
                    rng.gen_range(0..256)
                );
                insts += 3;
            }
            _ => {
                let (i, c, v) = (fresh("b", &mut reg), fresh("b", &mut reg), fresh("b", &mut reg));
                let (h, body, x) = (fresh("B", &mut label), fresh("B", &mut label), fresh("B", &mut label));
                let n = rng.gen_range(2..10);
                s += &format!(
                    "  unop mov {i}, 0\n  jump {h}\n{h}:\n  binop lt {c}, {i}, {n}\n  branch {c}, {body}, {x}\n\
{body}:\n  binop and {v}, {i}, 255\n  load {v}, [bn + {v}*1]\n  binop add {i}, {i}, 1\n  jump {h}\n{x}:\n"
                );
                insts += 8;
            }
        }
        chunks.push(s);
    }
    chunks
}

#[derive(Clone, Debug)]
pub struct Injected {
    pub program: Program,
    /// Litmus variant name of each gadget.
    pub variants: Vec<&'static str>,
    /// Instructions belonging to each gadget.
    pub gadgets: Vec<BTreeSet<InstId>>,
}

/// Splices `k` randomly chosen litmus gadgets into a benign program at
/// random chunk boundaries. Each gadget reads its own input through `fread`.
pub fn inject(k: usize, seed: u64) -> Injected {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks = benign_chunks(&mut rng, BENIGN_INSTS);
    let all = litmus();
    let mut at: Vec<(usize, usize)> =
        (0..k).map(|_| (rng.gen_range(0..=chunks.len()), rng.gen_range(0..all.len()))).collect();
    at.sort_by_key(|&(pos, _)| pos);

    let mut src = format!("{LITMUS_HEADER}region bn @0x60000 size 256\nsource fread\nentry:\n");
    let mut variants = Vec::new();
    let mut next = at.iter().peekable();
    for pos in 0..=chunks.len() {
        while let Some(&&(_, v)) = next.peek().filter(|(p, _)| *p == pos) {
            let g = variants.len();
            let prefix = format!("g{g}_");
            src += &format!("  jump {prefix}e\n");
            src += &all[v].fragment(&prefix, &format!("{prefix}exit"));
            src += &format!("{prefix}exit:\n");
            variants.push(all[v].name);
            next.next();
        }
        if let Some(c) = chunks.get(pos) {
            src += c;
        }
    }
    src += "  halt\n";

    let program = parse_program(&src).expect("injected programs parse");
    let gadgets = (0..variants.len())
        .map(|g| {
            let prefix = format!("g{g}_");
            program
                .blocks
                .iter()
                .filter(|b| b.label.starts_with(&prefix))
                .flat_map(|b| b.insts.iter().map(|i| i.id))
                .collect()
        })
        .collect();
    Injected { program, variants, gadgets }
}
