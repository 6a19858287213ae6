//! Independent oracles for the dependence, taint and detection analyses.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specguard_core::corpus::{fuzz, litmus, SECRET_PAIRS};
use specguard_core::dependence::{Entity, UseRole};
use specguard_core::ir::{BlockId, InstKind, Reg};
use specguard_core::sim::{simulate, EventKind, SimConfig};
use specguard_core::taint::Rule;
use specguard_core::{
    analyze, build_cfg, control_dependence, differential_check, parse_program, repair_program, AnalysisConfig,
    DiffConfig, InstId, Program, TaintMode,
};

/// Random programs whose every block can reach a halt.
fn random_halting_program(rng: &mut ChaCha8Rng) -> Program {
    loop {
        let n = rng.gen_range(2..=20);
        let mut s = String::new();
        for b in 0..n {
            s += &format!("b{b}:\n  unop mov r, {b}\n");
            match rng.gen_range(0..6) {
                0 => s += "  halt\n",
                1 => s += &format!("  jump b{}\n", rng.gen_range(0..n)),
                _ if b + 1 == n => s += "  halt\n",
                2 | 3 => s += &format!("  branch r, b{}, b{}\n", rng.gen_range(0..n), rng.gen_range(0..n)),
                _ => {}
            }
        }
        let p = parse_program(&s).unwrap();
        let cfg = build_cfg(&p).unwrap();
        let all_halt = (0..n).all(|b| reaches_exit(&succs(&cfg), b as usize, None));
        if all_halt {
            return p;
        }
    }
}

/// Block successors; `None` marks the virtual exit after a halt.
fn succs(cfg: &specguard_core::Cfg) -> Vec<Vec<Option<usize>>> {
    (0..cfg.num_blocks())
        .map(|b| {
            let b = BlockId(b as u32);
            let mut v: Vec<Option<usize>> = cfg.successors(b).iter().map(|s| Some(s.index())).collect();
            if matches!(cfg.block_insts(b).last().map(|i| &i.kind), Some(InstKind::Halt)) {
                v.push(None);
            }
            v
        })
        .collect()
}

/// Whether the exit is reachable from `from` without passing `avoid`.
fn reaches_exit(succ: &[Vec<Option<usize>>], from: usize, avoid: Option<usize>) -> bool {
    if Some(from) == avoid {
        return false;
    }
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(b) = stack.pop() {
        for s in &succ[b] {
            match s {
                None => return true,
                Some(s) if Some(*s) != avoid && seen.insert(*s) => stack.push(*s),
                _ => {}
            }
        }
    }
    false
}

#[test]
fn control_dependence_matches_postdominance_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let p = random_halting_program(&mut rng);
        let cfg = build_cfg(&p).unwrap();
        let cdg = control_dependence(&cfg);
        let succ = succs(&cfg);
        let n = cfg.num_blocks();
        // y postdominates x: every path from x to the exit passes y
        let pdom = |y: usize, x: usize| x == y || !reaches_exit(&succ, x, Some(y));
        let mut direct: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for x in 0..n {
            let last = cfg.block_insts(BlockId(x as u32)).last().unwrap();
            if !last.is_branch() {
                continue;
            }
            for s in succ[x].iter().flatten() {
                for y in 0..n {
                    if pdom(y, *s) && !(y != x && pdom(y, x)) {
                        direct[x].insert(y);
                    }
                }
            }
        }
        // y depends on x if it depends on any branch block that depends on x
        let mut closed = direct.clone();
        loop {
            let mut changed = false;
            for x in 0..n {
                let inner: Vec<usize> = closed[x].iter().copied().collect();
                for z in inner {
                    for y in direct[z].clone() {
                        changed |= closed[x].insert(y);
                    }
                }
            }
            if !changed {
                break;
            }
        }
        for x in 0..n {
            let last = cfg.block_insts(BlockId(x as u32)).last().unwrap();
            if !last.is_branch() {
                continue;
            }
            let expected: BTreeSet<InstId> =
                closed[x].iter().flat_map(|y| cfg.block_insts(BlockId(*y as u32)).iter().map(|i| i.id)).collect();
            let got = cdg.dependents(last.id).cloned().unwrap_or_default();
            assert_eq!(got, expected, "branch {} in\n{}", last.id, specguard_core::print_program(&p));
        }
    }
}

/// Register definitions reaching each use, collected by walking every path
/// of an acyclic program.
fn path_reaching_defs(p: &Program) -> BTreeMap<(InstId, Reg), BTreeSet<InstId>> {
    let cfg = build_cfg(p).unwrap();
    let mut out: BTreeMap<(InstId, Reg), BTreeSet<InstId>> = BTreeMap::new();
    let mut stack = vec![(InstId(0), BTreeMap::<Reg, InstId>::new())];
    while let Some((i, mut last)) = stack.pop() {
        let inst = cfg.inst(i);
        for r in inst.use_regs() {
            let e = out.entry((i, r.clone())).or_default();
            if let Some(d) = last.get(r) {
                e.insert(*d);
            }
        }
        if let Some(d) = inst.def_reg() {
            last.insert(d.clone(), i);
        }
        for s in cfg.inst_successors(i) {
            stack.push((s, last.clone()));
        }
    }
    out
}

#[test]
fn register_reaching_definitions_match_path_enumeration() {
    for f in fuzz::corpus(150, 31) {
        let a = analyze(&f.program, &AnalysisConfig::default()).unwrap();
        let oracle = path_reaching_defs(&f.program);
        for ((i, r), defs) in &oracle {
            let got: BTreeSet<InstId> = a.defuse.uses[i]
                .iter()
                .filter(|u| u.entity == Entity::Reg(r.clone()))
                .flat_map(|u| u.defs.iter().copied())
                .collect();
            assert_eq!(&got, defs, "seed {} inst {i} reg {}", f.seed, r.as_str());
        }
    }
}

#[test]
fn committed_addresses_lie_in_resolved_locations() {
    let mut runs: Vec<(Program, Vec<specguard_core::SimInput>)> =
        fuzz::corpus(200, 77).into_iter().map(|f| (f.program, f.inputs)).collect();
    runs.extend(litmus().into_iter().map(|l| (l.program(), l.inputs)));
    for (p, inputs) in runs {
        let a = analyze(&p, &AnalysisConfig::default()).unwrap();
        for input in &inputs {
            let t = simulate(&p, input, &SimConfig::default()).unwrap();
            for e in t.events.iter().filter(|e| e.kind == EventKind::Commit) {
                let Some(acc) = &e.access else { continue };
                let loc = a.defuse.loc(e.inst).unwrap();
                assert!(
                    loc.is_unbounded() || (loc.region == acc.region && loc.offset.contains(acc.offset)),
                    "inst {} touched {acc:?} outside {loc:?}",
                    e.inst
                );
            }
        }
    }
}

#[test]
fn program_dep_taints_a_superset_of_data_only() {
    for f in fuzz::corpus(200, 5) {
        let full = analyze(&f.program, &AnalysisConfig::default()).unwrap();
        let mut c = AnalysisConfig::default();
        c.taint.mode = TaintMode::DataOnly;
        let data = analyze(&f.program, &c).unwrap();
        let a: BTreeSet<_> = full.taint.tainted_insts().collect();
        let b: BTreeSet<_> = data.taint.tainted_insts().collect();
        assert!(b.is_subset(&a), "seed {}", f.seed);
    }
}

#[test]
fn witnesses_replay() {
    let mut programs: Vec<Program> = fuzz::corpus(150, 9).into_iter().map(|f| f.program).collect();
    programs.extend(litmus().iter().map(|l| l.program()));
    for p in programs {
        let a = analyze(&p, &AnalysisConfig::default()).unwrap();
        for i in a.taint.tainted_insts() {
            let w = a.taint.witness(i);
            assert_eq!(w.first().map(|s| s.inst), Some(i));
            let last = w.last().unwrap();
            assert!(matches!(last.rule, Rule::Source | Rule::NonAnalyzable), "witness of {i} ends in {last:?}");
            for pair in w.windows(2) {
                let (step, premise) = (pair[0], pair[1].inst);
                assert!(a.taint.is_inst_tainted(premise));
                let ok = match step.rule {
                    Rule::Implicit => a.cdg.controllers(step.inst).any(|c| c == premise),
                    Rule::Source | Rule::NonAnalyzable => false,
                    // memory taint is per location, not per program point
                    Rule::LoadValue => {
                        let (l, s) = (a.defuse.loc(step.inst).unwrap(), a.defuse.loc(premise).unwrap());
                        a.cfg.inst(premise).is_store()
                            && l.may_alias(a.defuse.width(step.inst).unwrap(), s, a.defuse.width(premise).unwrap())
                    }
                    _ => a.defuse.uses.get(&step.inst).into_iter().flatten().any(|u| u.defs.contains(&premise)),
                };
                assert!(ok, "{step:?} does not follow from {premise}");
            }
        }
    }
}

#[test]
fn litmus_leaks_are_covered_by_detections() {
    for l in litmus() {
        let p = l.program();
        let a = analyze(&p, &AnalysisConfig::default()).unwrap();
        let dc = DiffConfig::new(l.inputs.clone(), "secret", SECRET_PAIRS.to_vec()).with_site_sweep(&p);
        let v = differential_check(&p, &a.spectre, &dc).unwrap();
        assert!(!v.leaks.is_empty(), "{} never leaks", l.name);
        assert!(!v.fail(), "{}: {:?}", l.name, v.uncovered);
    }
}

#[test]
fn v01_simulator_leaks_secret_times_512() {
    let v01 = &litmus()[0];
    let p = v01.program();
    let sim = SimConfig { policy: specguard_core::MispredictPolicy::always(), ..SimConfig::default() };
    let secret = |s: u8| v01.inputs[1].clone().with_memory("secret", vec![s; 32]);
    let t = simulate(&p, &secret(5), &sim).unwrap();
    let lines = t.transient_lines(None);
    assert!(lines.contains(&((0x10000 + 5 * 512) / 64)), "{lines:?}");
    let other = simulate(&p, &secret(6), &sim).unwrap();
    assert!(specguard_core::leaks_secret(&t, &other).unwrap());
}

#[test]
fn repair_preserves_committed_semantics_and_is_idempotent() {
    for f in fuzz::corpus(150, 13) {
        let fixed = repair_program(&f.program, &AnalysisConfig::default()).unwrap();
        assert!(analyze(&fixed.program, &AnalysisConfig::default()).unwrap().spectre.is_empty());
        for input in &f.inputs {
            let a = simulate(&f.program, input, &SimConfig::default()).unwrap();
            let b = simulate(&fixed.program, input, &SimConfig::default()).unwrap();
            assert_eq!(a.registers, b.registers, "seed {}", f.seed);
            assert_eq!(a.memory, b.memory, "seed {}", f.seed);
            let shape = |t: &specguard_core::SpecTrace| -> Vec<_> {
                t.events.iter().filter(|e| e.access.is_some() || e.value.is_some()).map(|e| (e.access.clone(), e.value)).collect()
            };
            assert_eq!(shape(&a), shape(&b), "seed {}", f.seed);
        }
    }
}

#[test]
fn memory_flow_reaches_loads() {
    // every committed load that reads a byte last written by a store has
    // that store among its memory reaching definitions
    for f in fuzz::corpus(150, 21) {
        let a = analyze(&f.program, &AnalysisConfig::default()).unwrap();
        for input in &f.inputs {
            let t = simulate(&f.program, input, &SimConfig::default()).unwrap();
            let mut last_store: BTreeMap<u64, InstId> = BTreeMap::new();
            for e in t.events.iter().filter(|e| e.kind == EventKind::Commit) {
                let Some(acc) = &e.access else { continue };
                if acc.is_store {
                    last_store.insert(acc.addr, e.inst);
                } else if let Some(s) = last_store.get(&acc.addr) {
                    let defs: BTreeSet<InstId> = a.defuse.defs_for(e.inst, UseRole::Memory).collect();
                    assert!(defs.contains(s), "seed {}: load {} misses store {s}", f.seed, e.inst);
                }
            }
        }
    }
}
