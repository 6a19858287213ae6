//! Taint propagation over the CFG, with or without implicit (control
//! dependence) flows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cdg::Cdg;
use crate::cfg::Cfg;
use crate::dependence::{AbstractLoc, DefUse};
use crate::ir::{BlockId, InstId, InstKind, Operand, Program, Reg};

/// Library calls treated as attacker-controlled input by default.
pub const DEFAULT_SOURCES: &[&str] = &["read", "fread", "fgets", "fgetc", "recv", "getenv", "scanf"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaintMode {
    /// Explicit data flow only.
    DataOnly,
    /// Data flow plus implicit flow through control dependence.
    #[default]
    ProgramDep,
}

impl fmt::Display for TaintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaintMode::DataOnly => "data_only",
            TaintMode::ProgramDep => "program_dep",
        })
    }
}

impl FromStr for TaintMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "data_only" => Ok(TaintMode::DataOnly),
            "program_dep" => Ok(TaintMode::ProgramDep),
            _ => Err(format!("unknown taint mode `{s}` (expected data_only or program_dep)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintConfig {
    pub sources: BTreeSet<String>,
    #[serde(default)]
    pub mode: TaintMode,
}

impl Default for TaintConfig {
    fn default() -> Self {
        TaintConfig {
            sources: DEFAULT_SOURCES.iter().map(|s| s.to_string()).collect(),
            mode: TaintMode::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("bad taint configuration: {0}")]
pub struct ConfigError(#[from] toml::de::Error);

impl TaintConfig {
    /// Parses `sources = [..]` and an optional `mode = ".."`.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Adds the program's own `source` declarations.
    pub fn with_program_sources(mut self, p: &Program) -> Self {
        self.sources.extend(p.sources.iter().cloned());
        self
    }
}

/// The rule that tainted an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Source,
    NonAnalyzable,
    Binary,
    Unary,
    LoadValue,
    LoadAddress,
    Store,
    StoreAddress,
    Branch,
    Implicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessStep {
    pub inst: InstId,
    pub rule: Rule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Why {
    pub rule: Rule,
    /// The tainted instruction whose taint satisfied the rule's premise.
    pub premise: Option<InstId>,
}

/// Value taint on a memory location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemTaint {
    pub loc: AbstractLoc,
    pub width: u64,
    pub origin: InstId,
}

type RegTaint = BTreeMap<Reg, InstId>;

#[derive(Clone, Debug)]
pub struct TaintState {
    pub mode: TaintMode,
    insts: BTreeMap<InstId, Why>,
    /// tainted registers before each instruction, mapped to the tainted
    /// instruction that defined them
    regs_before: Vec<RegTaint>,
    mem: Vec<MemTaint>,
    /// loads and stores whose address is tainted
    addr: BTreeSet<InstId>,
    /// branches whose condition is tainted
    cond: BTreeSet<InstId>,
    pub warnings: Vec<String>,
}

impl TaintState {
    fn empty(mode: TaintMode, n: usize) -> Self {
        TaintState {
            mode,
            insts: BTreeMap::new(),
            regs_before: vec![RegTaint::new(); n],
            mem: Vec::new(),
            addr: BTreeSet::new(),
            cond: BTreeSet::new(),
            warnings: Vec::new(),
        }
    }

    /// τ(inst).
    pub fn is_inst_tainted(&self, inst: InstId) -> bool {
        self.insts.contains_key(&inst)
    }

    pub fn why(&self, inst: InstId) -> Option<Why> {
        self.insts.get(&inst).copied()
    }

    /// τ(r) just before `inst`.
    pub fn is_reg_tainted_at(&self, inst: InstId, r: &Reg) -> bool {
        self.regs_before.get(inst.index()).is_some_and(|m| m.contains_key(r))
    }

    pub fn tainted_regs_at(&self, inst: InstId) -> impl Iterator<Item = &Reg> {
        self.regs_before.get(inst.index()).into_iter().flat_map(|m| m.keys())
    }

    /// τ(addr(inst)) for a load or store.
    pub fn is_addr_tainted(&self, inst: InstId) -> bool {
        self.addr.contains(&inst)
    }

    /// Whether the branch condition is tainted.
    pub fn is_cond_tainted(&self, branch: InstId) -> bool {
        self.cond.contains(&branch)
    }

    /// τ(val(loc)) for an access of `width` bytes.
    pub fn is_val_tainted(&self, loc: &AbstractLoc, width: u64) -> bool {
        self.mem_origin(loc, width).is_some()
    }

    fn mem_origin(&self, loc: &AbstractLoc, width: u64) -> Option<InstId> {
        self.mem.iter().find(|m| m.loc.may_alias(m.width, loc, width)).map(|m| m.origin)
    }

    pub fn tainted_insts(&self) -> impl Iterator<Item = InstId> + '_ {
        self.insts.keys().copied()
    }

    pub fn mem_taint(&self) -> &[MemTaint] {
        &self.mem
    }

    /// Chain of rule applications from `inst` back to a taint source.
    pub fn witness(&self, inst: InstId) -> Vec<WitnessStep> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut cur = Some(inst);
        while let Some(i) = cur {
            let Some(why) = self.insts.get(&i) else { break };
            if !seen.insert(i) {
                break;
            }
            out.push(WitnessStep { inst: i, rule: why.rule });
            cur = why.premise;
        }
        out
    }

    /// Witness for the taint of `r` just before `at`.
    pub fn reg_witness(&self, at: InstId, r: &Reg) -> Vec<WitnessStep> {
        self.regs_before
            .get(at.index())
            .and_then(|m| m.get(r))
            .map(|o| self.witness(*o))
            .unwrap_or_default()
    }
}

/// Taints the destination of every call to a configured source.
pub fn seed_taints(p: &Program, cfg: &Cfg, config: &TaintConfig) -> TaintState {
    let mut ts = TaintState::empty(config.mode, cfg.num_insts());
    let mut used = BTreeSet::new();
    for inst in cfg.instructions() {
        if let InstKind::Call { callee, .. } = &inst.kind {
            if config.sources.contains(callee) {
                used.insert(callee.as_str());
                ts.insts.insert(inst.id, Why { rule: Rule::Source, premise: None });
            }
        }
    }
    for s in &p.sources {
        if !used.contains(s.as_str()) {
            ts.warnings.push(format!("taint source `{s}` is never called"));
        }
    }
    ts
}

struct Engine<'a> {
    cfg: &'a Cfg,
    du: &'a DefUse,
    cdg: &'a Cdg,
    sources: &'a BTreeSet<String>,
    ts: TaintState,
}

impl Engine<'_> {
    fn origin(regs: &RegTaint, o: &Operand) -> Option<InstId> {
        o.reg().and_then(|r| regs.get(r).copied())
    }

    fn taint(&mut self, inst: InstId, rule: Rule, premise: Option<InstId>) {
        self.ts.insts.entry(inst).or_insert(Why { rule, premise });
    }

    fn add_mem(&mut self, inst: InstId) {
        let loc = self.du.loc(inst).expect("store has a location").clone();
        let width = self.du.width(inst).unwrap_or(1);
        if !self.ts.mem.iter().any(|m| m.loc == loc && m.width == width) {
            self.ts.mem.push(MemTaint { loc, width, origin: inst });
        }
    }

    /// Controlling branch with a tainted condition, when implicit flow applies.
    fn implicit_premise(&self, inst: InstId) -> Option<InstId> {
        if self.ts.mode != TaintMode::ProgramDep {
            return None;
        }
        self.cdg.controllers(inst).find(|b| self.ts.cond.contains(b))
    }

    fn step(&mut self, id: InstId, regs: &mut RegTaint) {
        let inst = self.cfg.inst(id);
        let implicit = self.implicit_premise(id);
        let mut fired: Option<(Rule, Option<InstId>)> = None;
        match &inst.kind {
            InstKind::Call { callee, .. } => {
                let rule = if self.sources.contains(callee) { Rule::Source } else { Rule::NonAnalyzable };
                fired = Some((rule, None));
            }
            InstKind::Binop { lhs, rhs, .. } => {
                if let Some(o) = Self::origin(regs, lhs).or_else(|| Self::origin(regs, rhs)) {
                    fired = Some((Rule::Binary, Some(o)));
                }
            }
            InstKind::Unop { src, .. } => {
                if let Some(o) = Self::origin(regs, src) {
                    fired = Some((Rule::Unary, Some(o)));
                }
            }
            InstKind::Load { addr, .. } => {
                if let Some(o) = addr.index.as_ref().and_then(|r| regs.get(r)) {
                    self.ts.addr.insert(id);
                    fired = Some((Rule::LoadAddress, Some(*o)));
                } else {
                    let loc = self.du.loc(id).expect("load has a location");
                    let w = self.du.width(id).unwrap_or(1);
                    if let Some(o) = self.ts.mem_origin(loc, w) {
                        fired = Some((Rule::LoadValue, Some(o)));
                    }
                }
            }
            InstKind::Store { addr, src, .. } => {
                if let Some(o) = addr.index.as_ref().and_then(|r| regs.get(r)) {
                    self.ts.addr.insert(id);
                    fired = Some((Rule::StoreAddress, Some(*o)));
                } else if let Some(o) = Self::origin(regs, src) {
                    fired = Some((Rule::Store, Some(o)));
                }
            }
            InstKind::Branch { cond, .. } => {
                if let Some(o) = regs.get(cond) {
                    self.ts.cond.insert(id);
                    fired = Some((Rule::Branch, Some(*o)));
                }
            }
            _ => {}
        }
        if fired.is_none() {
            if let Some(b) = implicit {
                fired = Some((Rule::Implicit, Some(b)));
            }
        }
        if let Some((rule, premise)) = fired {
            self.taint(id, rule, premise);
        }
        let tainted = self.ts.insts.contains_key(&id);
        if inst.is_store() && tainted {
            self.add_mem(id);
        }
        if let Some(d) = inst.def_reg() {
            if tainted {
                regs.insert(d.clone(), id);
            } else {
                regs.remove(d);
            }
        }
    }

    /// Flow-sensitive register taint to a fixpoint; returns block entry states.
    fn pass(&mut self) -> Vec<Option<RegTaint>> {
        let n = self.cfg.num_blocks();
        let mut inb: Vec<Option<RegTaint>> = vec![None; n];
        inb[self.cfg.entry().index()] = Some(RegTaint::new());
        let order = self.cfg.reverse_postorder();
        let mut changed = true;
        while changed {
            changed = false;
            for &b in &order {
                let Some(mut regs) = inb[b.index()].clone() else { continue };
                for inst in self.cfg.block_insts(b) {
                    self.step(inst.id, &mut regs);
                }
                for &s in self.cfg.successors(b) {
                    changed |= join_into(&mut inb[s.index()], &regs);
                }
            }
        }
        inb
    }

    fn record(&mut self, inb: &[Option<RegTaint>]) {
        for (b, st) in inb.iter().enumerate() {
            let Some(mut regs) = st.clone() else { continue };
            for inst in self.cfg.block_insts(BlockId(b as u32)) {
                self.ts.regs_before[inst.id.index()] = regs.clone();
                self.step(inst.id, &mut regs);
            }
        }
    }
}

fn join_into(slot: &mut Option<RegTaint>, regs: &RegTaint) -> bool {
    match slot {
        None => {
            *slot = Some(regs.clone());
            true
        }
        Some(old) => {
            let mut changed = false;
            for (r, o) in regs {
                match old.get_mut(r) {
                    Some(cur) if *cur <= *o => {}
                    Some(cur) => {
                        *cur = *o;
                        changed = true;
                    }
                    None => {
                        old.insert(r.clone(), *o);
                        changed = true;
                    }
                }
            }
            changed
        }
    }
}

/// Least fixpoint of the taint rules starting from `seed`. `sources`
/// decides which calls are sources rather than non-analyzable calls; both
/// taint their result.
pub fn propagate(
    cfg: &Cfg,
    du: &DefUse,
    cdg: &Cdg,
    seed: &TaintState,
    sources: &BTreeSet<String>,
) -> TaintState {
    let mut engine = Engine { cfg, du, cdg, sources, ts: seed.clone() };
    loop {
        let size = |t: &TaintState| (t.insts.len(), t.mem.len(), t.cond.len(), t.addr.len());
        let before = size(&engine.ts);
        let inb = engine.pass();
        if size(&engine.ts) == before {
            engine.record(&inb);
            break;
        }
    }
    engine.ts
}

/// Seeds and propagates in one call.
pub fn analyze_taint(cfg: &Cfg, du: &DefUse, cdg: &Cdg, config: &TaintConfig) -> TaintState {
    let config = config.clone().with_program_sources(cfg.program());
    let seed = seed_taints(cfg.program(), cfg, &config);
    propagate(cfg, du, cdg, &seed, &config.sources)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdg::control_dependence;
    use crate::cfg::build_cfg;
    use crate::dependence::{reaching_definitions, value_set_analysis};
    use crate::ir::parse_program;

    const V01: &str = "region array1 @0x1000 size 16\nregion array2 @0x2000 size 131072\nregion vars @0x40000 size 64\n\
e:\n  call fread -> x\n  load.q n, [vars]\n  binop lt c, x, n\n  branch c, t, d\n\
t:\n  load y, [array1 + x*1]\n  binop mul k, y, 512\n  load w, [array2 + k*1]\n  store [vars + 8], w\n  jump d\nd:\n  halt\n";

    fn run(src: &str, mode: TaintMode) -> (Cfg, TaintState) {
        let g = build_cfg(&parse_program(src).unwrap()).unwrap();
        let vs = value_set_analysis(&g);
        let du = reaching_definitions(&g, &vs);
        let cdg = control_dependence(&g);
        let cfgc = TaintConfig { mode, ..TaintConfig::default() };
        let ts = analyze_taint(&g, &du, &cdg, &cfgc);
        (g, ts)
    }

    #[test]
    fn v01_chain() {
        let (_, ts) = run(V01, TaintMode::DataOnly);
        assert!(ts.is_inst_tainted(InstId(3)));
        assert!(ts.is_cond_tainted(InstId(3)));
        assert!(ts.is_addr_tainted(InstId(4)));
        assert!(ts.is_addr_tainted(InstId(6)));
        assert!(!ts.is_inst_tainted(InstId(1)));
        let w = ts.witness(InstId(6));
        assert_eq!(w.last().unwrap().rule, Rule::Source);
        assert_eq!(w[0].rule, Rule::LoadAddress);
    }

    #[test]
    fn store_taints_value_not_address() {
        let src = "region array3 @0x100 size 16\ne:\n  call recv -> r\n  store [array3 + 5], r\n  \
load a, [array3 + 5]\n  load b, [array3 + 6]\n  halt\n";
        let (g, ts) = run(src, TaintMode::DataOnly);
        let loc = AbstractLoc { region: Some("array3".into()), offset: crate::dependence::Summary::exact(5) };
        assert!(ts.is_val_tainted(&loc, 1));
        assert!(!ts.is_addr_tainted(InstId(1)));
        assert!(ts.is_inst_tainted(InstId(2)));
        assert!(!ts.is_inst_tainted(InstId(3)));
        assert_eq!(g.num_insts(), 5);
    }

    #[test]
    fn implicit_flow_only_in_program_dep() {
        let src = "e:\n  call fread -> x\n  binop lt c, x, 16\n  branch c, a, b\na:\n  unop mov r, 1\n  jump j\n\
b:\n  unop mov r, 0\nj:\n  branch r, u, v\nu:\n  halt\nv:\n  halt\n";
        let (_, dd) = run(src, TaintMode::DataOnly);
        let (_, pd) = run(src, TaintMode::ProgramDep);
        assert!(!dd.is_inst_tainted(InstId(6)));
        assert!(pd.is_inst_tainted(InstId(6)));
        assert!(pd.is_cond_tainted(InstId(6)));
        assert_eq!(pd.why(InstId(3)).unwrap().rule, Rule::Implicit);
        for i in dd.tainted_insts() {
            assert!(pd.is_inst_tainted(i));
        }
    }

    #[test]
    fn empty_sources_seed_nothing() {
        let g = build_cfg(&parse_program(V01).unwrap()).unwrap();
        let cfgc = TaintConfig { sources: BTreeSet::new(), mode: TaintMode::ProgramDep };
        let ts = seed_taints(g.program(), &g, &cfgc);
        assert_eq!(ts.tainted_insts().count(), 0);
    }

    #[test]
    fn two_recv_calls_have_distinct_witnesses() {
        let (_, ts) = run("e:\n  call recv -> a\n  call recv -> b\n  halt\n", TaintMode::DataOnly);
        let wa = ts.reg_witness(InstId(2), &Reg::new("a"));
        let wb = ts.reg_witness(InstId(2), &Reg::new("b"));
        assert_eq!(wa, vec![WitnessStep { inst: InstId(0), rule: Rule::Source }]);
        assert_eq!(wb, vec![WitnessStep { inst: InstId(1), rule: Rule::Source }]);
    }

    #[test]
    fn non_analyzable_call_is_tainted() {
        let (_, ts) = run("e:\n  call strlen -> a\n  halt\n", TaintMode::DataOnly);
        assert_eq!(ts.why(InstId(0)).unwrap().rule, Rule::NonAnalyzable);
    }

    #[test]
    fn rerun_is_identity() {
        let g = build_cfg(&parse_program(V01).unwrap()).unwrap();
        let vs = value_set_analysis(&g);
        let du = reaching_definitions(&g, &vs);
        let cdg = control_dependence(&g);
        let cfgc = TaintConfig::default();
        let ts = analyze_taint(&g, &du, &cdg, &cfgc);
        let again = propagate(&g, &du, &cdg, &ts, &cfgc.sources);
        assert_eq!(ts.insts, again.insts);
        assert_eq!(ts.mem, again.mem);
        assert_eq!(ts.regs_before, again.regs_before);
    }

    #[test]
    fn config_from_toml() {
        let c = TaintConfig::from_toml("sources = [\"recv\"]\nmode = \"data_only\"\n").unwrap();
        assert_eq!(c.mode, TaintMode::DataOnly);
        assert!(c.sources.contains("recv"));
        assert!(TaintConfig::from_toml("mode = 3").is_err());
    }
}
