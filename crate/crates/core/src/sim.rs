//! Concrete execution with a branch misprediction model. Mispredicted
//! branches run the wrong successor transiently for up to SEW instructions;
//! the episode is then squashed and only its cache-line touches remain.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cfg::{build_cfg, Cfg, CfgError};
use crate::ir::{
    BlockId, InstId, InstKind, Instruction, JumpTarget, MemRef, Operand, Program, Reg, Width,
};
use crate::meltdown::CacheGeometry;
use crate::spectre::{Detection, SpecWindow};

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

/// What the predictor guesses at a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// Always guesses the real outcome.
    Correct,
    /// Always guesses the opposite of the real outcome.
    Wrong,
    Taken,
    Fallthrough,
}

impl FromStr for Prediction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correct" => Ok(Prediction::Correct),
            "wrong" => Ok(Prediction::Wrong),
            "taken" => Ok(Prediction::Taken),
            "fallthrough" => Ok(Prediction::Fallthrough),
            _ => Err(format!("unknown prediction `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MispredictPolicy {
    pub default: Prediction,
    pub sites: BTreeMap<InstId, Prediction>,
}

impl MispredictPolicy {
    pub fn always() -> Self {
        MispredictPolicy { default: Prediction::Wrong, sites: BTreeMap::new() }
    }

    pub fn never() -> Self {
        MispredictPolicy { default: Prediction::Correct, sites: BTreeMap::new() }
    }

    /// Mispredicts exactly the given branches.
    pub fn at(branches: impl IntoIterator<Item = InstId>) -> Self {
        MispredictPolicy {
            default: Prediction::Correct,
            sites: branches.into_iter().map(|b| (b, Prediction::Wrong)).collect(),
        }
    }

    pub fn mispredicts(&self, branch: InstId, taken: bool) -> bool {
        match self.sites.get(&branch).copied().unwrap_or(self.default) {
            Prediction::Correct => false,
            Prediction::Wrong => true,
            Prediction::Taken => !taken,
            Prediction::Fallthrough => taken,
        }
    }
}

impl FromStr for MispredictPolicy {
    type Err = String;

    /// `all`, `none`, or comma-separated `SITE:PREDICTION` overrides on top
    /// of a correct predictor.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => return Ok(MispredictPolicy::always()),
            "none" => return Ok(MispredictPolicy::never()),
            _ => {}
        }
        let mut p = MispredictPolicy::never();
        for part in s.split(',') {
            let (site, dir) = part
                .split_once(':')
                .ok_or_else(|| format!("bad misprediction site `{part}` (expected SITE:DIR)"))?;
            let id: u32 = site
                .trim()
                .trim_start_matches('#')
                .parse()
                .map_err(|_| format!("bad instruction id `{site}`"))?;
            p.sites.insert(InstId(id), dir.trim().parse()?);
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub window: SpecWindow,
    pub geometry: CacheGeometry,
    pub policy: MispredictPolicy,
    /// Allow one further misprediction inside a transient episode.
    pub nested: bool,
    pub step_budget: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            window: SpecWindow::default(),
            geometry: CacheGeometry { num_sets: 64, ways: 8, line_size: 64 },
            policy: MispredictPolicy::never(),
            nested: false,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }
}

/// Bytes returned by external calls, per callee, consumed eight at a time,
/// plus initial memory contents and privileged register values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimInput {
    pub sources: BTreeMap<String, Vec<u8>>,
    /// Initial bytes of a region, from its first byte.
    pub memory: BTreeMap<String, Vec<u8>>,
    pub sysregs: BTreeMap<String, u64>,
}

impl SimInput {
    /// Each value becomes one 8-byte little-endian call result of `source`.
    pub fn with_source_values(mut self, source: &str, values: &[u64]) -> Self {
        let bytes = self.sources.entry(source.to_string()).or_default();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn with_memory(mut self, region: &str, bytes: Vec<u8>) -> Self {
        self.memory.insert(region.to_string(), bytes);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Commit,
    Transient,
    Fault,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Access {
    pub region: Option<String>,
    pub offset: u64,
    pub addr: u64,
    pub line: u64,
    pub is_store: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub inst: InstId,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access: Option<Access>,
    /// Position within the transient episode, 0 for committed events.
    pub depth: u32,
    /// Misprediction nesting level, 0 for committed events.
    pub nest: u8,
    /// The branch (or faulting access) that opened the transient episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<InstId>,
    /// Value written to a register or memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecTrace {
    pub program_hash: u64,
    pub events: Vec<Event>,
    pub registers: BTreeMap<String, u64>,
    /// Committed memory bytes that were initialized or written.
    pub memory: BTreeMap<u64, u8>,
    pub faulted: Option<InstId>,
    pub steps: u64,
}

impl SpecTrace {
    pub fn transient(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Transient)
    }

    /// Sorted cache lines touched transiently, optionally only in episodes
    /// opened by `trigger`.
    pub fn transient_lines(&self, trigger: Option<InstId>) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .transient()
            .filter(|e| trigger.is_none() || e.trigger == trigger)
            .filter_map(|e| e.access.as_ref().map(|a| a.line))
            .collect();
        v.sort_unstable();
        v
    }

    /// Committed and faulting events without values.
    pub fn committed_shape(&self) -> Vec<(InstId, EventKind, Option<u64>)> {
        self.events
            .iter()
            .filter(|e| e.kind != EventKind::Transient)
            .map(|e| (e.inst, e.kind, e.access.as_ref().map(|a| a.addr)))
            .collect()
    }

    pub fn triggers(&self) -> BTreeSet<InstId> {
        self.transient().filter_map(|e| e.trigger).collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("step budget of {0} instructions exceeded")]
    StepBudget(u64),
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error("indirect jump at {0} has no annotated targets")]
    NoTargets(InstId),
    #[error("traces come from different programs")]
    Mismatch,
}

pub fn program_hash(p: &Program) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    crate::ir::print_program(p).hash(&mut h);
    h.finish()
}

enum Flow {
    Next,
    Goto(BlockId),
    Halt,
    /// A committed access that is not allowed; execution continues only
    /// transiently.
    Fault,
}

struct Machine<'a> {
    cfg: &'a Cfg,
    config: &'a SimConfig,
    input: &'a SimInput,
    regs: HashMap<Reg, u64>,
    mem: HashMap<u64, u8>,
    /// transient store buffers, innermost last
    overlays: Vec<HashMap<u64, u8>>,
    cursors: HashMap<String, usize>,
    events: Vec<Event>,
    steps: u64,
}

struct Episode {
    trigger: InstId,
    nest: u8,
    depth: u32,
}

impl<'a> Machine<'a> {
    fn reg(&self, r: &Reg) -> u64 {
        self.regs.get(r).copied().unwrap_or(0)
    }

    fn operand(&self, o: &Operand) -> u64 {
        match o {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(v) => *v,
        }
    }

    fn addr(&self, m: &MemRef) -> u64 {
        let base = self.cfg.program().region(&m.region).map_or(0, |r| r.base);
        let idx = m.index.as_ref().map_or(0, |r| self.reg(r));
        base.wrapping_add(m.offset).wrapping_add(idx.wrapping_mul(m.scale))
    }

    fn read_byte(&self, a: u64) -> u8 {
        for o in self.overlays.iter().rev() {
            if let Some(b) = o.get(&a) {
                return *b;
            }
        }
        self.mem.get(&a).copied().unwrap_or(0)
    }

    fn write_byte(&mut self, a: u64, b: u8) {
        match self.overlays.last_mut() {
            Some(o) => {
                o.insert(a, b);
            }
            None => {
                self.mem.insert(a, b);
            }
        }
    }

    fn read(&self, a: u64, w: Width) -> u64 {
        let mut v = 0u64;
        for i in 0..w.bytes() {
            v |= (self.read_byte(a.wrapping_add(i)) as u64) << (8 * i);
        }
        v
    }

    fn write(&mut self, a: u64, w: Width, v: u64) {
        for i in 0..w.bytes() {
            self.write_byte(a.wrapping_add(i), (v >> (8 * i)) as u8);
        }
    }

    fn access(&self, a: u64, is_store: bool) -> Access {
        let region = self.cfg.program().region_at(a);
        Access {
            region: region.map(|r| r.name.clone()),
            offset: region.map_or(a, |r| a - r.base),
            addr: a,
            line: self.config.geometry.line_of(a),
            is_store,
        }
    }

    fn allowed(&self, acc: &Access) -> bool {
        match &acc.region {
            Some(r) => !self.cfg.program().region(r).is_some_and(|r| r.protected),
            None => false,
        }
    }

    fn call(&mut self, callee: &str) -> u64 {
        let bytes = self.input.sources.get(callee).map(Vec::as_slice).unwrap_or(&[]);
        let cur = self.cursors.entry(callee.to_string()).or_insert(0);
        let mut v = 0u64;
        for i in 0..8 {
            v |= (*bytes.get(*cur + i).unwrap_or(&0) as u64) << (8 * i);
        }
        *cur += 8;
        v
    }

    fn label_block(&self, l: &str) -> BlockId {
        self.cfg.program().block_by_label(l).expect("labels resolved by the parser").id
    }

    /// Executes `inst`. Committed faults leave state untouched and report
    /// [`Flow::Fault`]; transient accesses always succeed.
    fn exec(&mut self, inst: &Instruction, ep: Option<&Episode>) -> Result<(Flow, Option<Access>, Option<u64>), SimError> {
        let transient = ep.is_some();
        let mut acc = None;
        let mut val = None;
        let flow = match &inst.kind {
            InstKind::Binop { op, dst, lhs, rhs } => {
                let v = op.eval(self.operand(lhs), self.operand(rhs));
                self.regs.insert(dst.clone(), v);
                val = Some(v);
                Flow::Next
            }
            InstKind::Unop { op, dst, src } => {
                let v = op.eval(self.operand(src));
                self.regs.insert(dst.clone(), v);
                val = Some(v);
                Flow::Next
            }
            InstKind::Load { dst, addr, width } => {
                let a = self.addr(addr);
                let ac = self.access(a, false);
                if !transient && !self.allowed(&ac) {
                    return Ok((Flow::Fault, Some(ac), None));
                }
                let v = self.read(a, *width);
                self.regs.insert(dst.clone(), v);
                acc = Some(ac);
                val = Some(v);
                Flow::Next
            }
            InstKind::Store { addr, src, width } => {
                let a = self.addr(addr);
                let ac = self.access(a, true);
                let writable = self.allowed(&ac)
                    && !ac.region.as_ref().and_then(|r| self.cfg.program().region(r)).is_some_and(|r| r.readonly);
                if !transient && !writable {
                    return Ok((Flow::Fault, Some(ac), None));
                }
                let v = self.operand(src);
                self.write(a, *width, v);
                acc = Some(ac);
                val = Some(v);
                Flow::Next
            }
            InstKind::Branch { cond, taken, fallthrough } => {
                val = Some(self.reg(cond));
                let l = if self.reg(cond) != 0 { taken } else { fallthrough };
                Flow::Goto(self.label_block(l))
            }
            InstKind::Jump(JumpTarget::Direct(l)) => Flow::Goto(self.label_block(l)),
            InstKind::Jump(JumpTarget::Indirect { reg, targets }) => {
                if targets.is_empty() {
                    return Err(SimError::NoTargets(inst.id));
                }
                let k = (self.reg(reg) % targets.len() as u64) as usize;
                Flow::Goto(self.label_block(&targets[k]))
            }
            InstKind::Call { callee, dst } => {
                let v = self.call(callee);
                self.regs.insert(dst.clone(), v);
                val = Some(v);
                Flow::Next
            }
            InstKind::Fence => Flow::Next,
            InstKind::Time { dst } => {
                let v = self.steps + ep.map_or(0, |e| e.depth as u64);
                self.regs.insert(dst.clone(), v);
                val = Some(v);
                Flow::Next
            }
            InstKind::ReadSys { dst, class } => {
                if !transient {
                    return Ok((Flow::Fault, None, None));
                }
                let v = self.input.sysregs.get(class).copied().unwrap_or(0);
                self.regs.insert(dst.clone(), v);
                val = Some(v);
                Flow::Next
            }
            InstKind::Halt => Flow::Halt,
        };
        Ok((flow, acc, val))
    }

    fn next_pc(&self, b: BlockId, pos: usize) -> Option<(BlockId, usize)> {
        if pos + 1 < self.cfg.block_insts(b).len() {
            Some((b, pos + 1))
        } else {
            None
        }
    }

    /// Runs a transient episode from `pc` and squashes it.
    /// Returns the episode depth reached.
    fn transient(&mut self, mut pc: (BlockId, usize), mut ep: Episode) -> Result<u32, SimError> {
        let saved_regs = self.regs.clone();
        let saved_cursors = self.cursors.clone();
        self.overlays.push(HashMap::new());
        let sew = self.config.window.sew;
        while ep.depth < sew {
            let inst = &self.cfg.block_insts(pc.0)[pc.1];
            if inst.is_fence() || matches!(inst.kind, InstKind::Halt) {
                break;
            }
            ep.depth += 1;
            let (flow, acc, val) = self.exec(inst, Some(&ep))?;
            self.events.push(Event {
                inst: inst.id,
                kind: EventKind::Transient,
                access: acc,
                depth: ep.depth,
                nest: ep.nest,
                trigger: Some(ep.trigger),
                value: val,
            });
            let next = match flow {
                Flow::Next => self.next_pc(pc.0, pc.1),
                Flow::Goto(b) => {
                    if inst.is_branch() && self.config.nested && ep.nest < 2 {
                        let taken = self.reg(branch_cond(inst)) != 0;
                        if self.config.policy.mispredicts(inst.id, taken) {
                            let wrong = self.wrong_target(inst, taken);
                            let inner = Episode { trigger: inst.id, nest: ep.nest + 1, depth: ep.depth };
                            let used = self.transient((wrong, 0), inner)?;
                            ep.depth = ep.depth.max(used);
                        }
                    }
                    Some((b, 0))
                }
                Flow::Halt | Flow::Fault => None,
            };
            match next {
                Some(n) => pc = n,
                None => break,
            }
        }
        self.overlays.pop();
        self.regs = saved_regs;
        self.cursors = saved_cursors;
        Ok(ep.depth)
    }

    fn wrong_target(&self, inst: &Instruction, taken: bool) -> BlockId {
        match &inst.kind {
            InstKind::Branch { taken: t, fallthrough: f, .. } => self.label_block(if taken { f } else { t }),
            _ => unreachable!("only branches mispredict"),
        }
    }

    fn run(&mut self) -> Result<Option<InstId>, SimError> {
        let mut pc = (self.cfg.entry(), 0usize);
        loop {
            if self.steps >= self.config.step_budget {
                return Err(SimError::StepBudget(self.config.step_budget));
            }
            self.steps += 1;
            let inst = &self.cfg.block_insts(pc.0)[pc.1];
            if inst.is_branch() {
                let taken = self.reg(branch_cond(inst)) != 0;
                if self.config.policy.mispredicts(inst.id, taken) {
                    let wrong = self.wrong_target(inst, taken);
                    self.transient((wrong, 0), Episode { trigger: inst.id, nest: 1, depth: 0 })?;
                }
            }
            let (flow, acc, val) = self.exec(inst, None)?;
            let kind = if matches!(flow, Flow::Fault) { EventKind::Fault } else { EventKind::Commit };
            self.events.push(Event { inst: inst.id, kind, access: acc, depth: 0, nest: 0, trigger: None, value: val });
            match flow {
                Flow::Next => match self.next_pc(pc.0, pc.1) {
                    Some(n) => pc = n,
                    None => pc = (BlockId(pc.0 .0 + 1), 0),
                },
                Flow::Goto(b) => pc = (b, 0),
                Flow::Halt => return Ok(None),
                Flow::Fault => {
                    // The faulting access and its dependents still run
                    // transiently before the fault is delivered.
                    self.transient(pc, Episode { trigger: inst.id, nest: 1, depth: 0 })?;
                    return Ok(Some(inst.id));
                }
            }
        }
    }
}

fn branch_cond(inst: &Instruction) -> &Reg {
    match &inst.kind {
        InstKind::Branch { cond, .. } => cond,
        _ => unreachable!("not a branch"),
    }
}

/// Runs `p` to completion under `config`.
pub fn simulate(p: &Program, input: &SimInput, config: &SimConfig) -> Result<SpecTrace, SimError> {
    let cfg = build_cfg(p)?;
    simulate_cfg(&cfg, input, config)
}

pub fn simulate_cfg(cfg: &Cfg, input: &SimInput, config: &SimConfig) -> Result<SpecTrace, SimError> {
    let p = cfg.program();
    let mut mem = HashMap::new();
    for (name, bytes) in &input.memory {
        if let Some(r) = p.region(name) {
            for (i, b) in bytes.iter().enumerate().take(r.size as usize) {
                mem.insert(r.base + i as u64, *b);
            }
        }
    }
    let mut m = Machine {
        cfg,
        config,
        input,
        regs: HashMap::new(),
        mem,
        overlays: Vec::new(),
        cursors: HashMap::new(),
        events: Vec::new(),
        steps: 0,
    };
    let faulted = m.run()?;
    Ok(SpecTrace {
        program_hash: program_hash(p),
        events: m.events,
        registers: m.regs.into_iter().map(|(r, v)| (r.0, v)).collect(),
        memory: m.mem.into_iter().collect(),
        faulted,
        steps: m.steps,
    })
}

/// Whether two runs that differ only in secret contents touched different
/// cache lines transiently.
pub fn leaks_secret(a: &SpecTrace, b: &SpecTrace) -> Result<bool, SimError> {
    if a.program_hash != b.program_hash {
        return Err(SimError::Mismatch);
    }
    Ok(a.transient_lines(None) != b.transient_lines(None))
}

/// Inputs and secrets swept by [`differential_check`].
#[derive(Clone, Debug)]
pub struct DiffConfig {
    pub inputs: Vec<SimInput>,
    pub secret_region: String,
    /// Each secret value fills the whole secret region.
    pub secret_pairs: Vec<(u8, u8)>,
    /// Misprediction policies to sweep; empty means always-mispredict only.
    pub policies: Vec<MispredictPolicy>,
    pub sim: SimConfig,
}

impl DiffConfig {
    pub fn new(inputs: Vec<SimInput>, secret_region: &str, secret_pairs: Vec<(u8, u8)>) -> Self {
        DiffConfig {
            inputs,
            secret_region: secret_region.to_string(),
            secret_pairs,
            policies: Vec::new(),
            sim: SimConfig::default(),
        }
    }

    /// Always-mispredict plus one policy per branch mispredicting only it.
    pub fn with_site_sweep(mut self, p: &Program) -> Self {
        self.policies = std::iter::once(MispredictPolicy::always())
            .chain(p.instructions().filter(|i| i.is_branch()).map(|i| MispredictPolicy::at([i.id])))
            .collect();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub branch: InstId,
    pub input: usize,
    pub pair: (u8, u8),
    pub policy: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub leaks: Vec<Leak>,
    /// Leaks at branches no detection is anchored at.
    pub uncovered: Vec<Leak>,
    /// Configurations skipped because the secret changed committed behavior.
    pub skipped: usize,
}

impl Verdict {
    pub fn fail(&self) -> bool {
        !self.uncovered.is_empty()
    }

    pub fn leaking_branches(&self) -> BTreeSet<InstId> {
        self.leaks.iter().map(|l| l.branch).collect()
    }
}

fn with_secret(input: &SimInput, p: &Program, region: &str, s: u8) -> SimInput {
    let size = p.region(region).map_or(0, |r| r.size as usize);
    input.clone().with_memory(region, vec![s; size])
}

/// Sweeps inputs and secret pairs under an always-mispredict policy and
/// attributes each transient line difference to the branch that opened the
/// episode. Fails when a leaking branch anchors no detection.
pub fn differential_check(p: &Program, dets: &[Detection], config: &DiffConfig) -> Result<Verdict, SimError> {
    let cfg = build_cfg(p)?;
    let always = [MispredictPolicy::always()];
    let policies = if config.policies.is_empty() { &always[..] } else { &config.policies[..] };
    let anchored: BTreeSet<InstId> = dets.iter().map(|d| d.tb).collect();
    let mut v = Verdict::default();
    for (pi, policy) in policies.iter().enumerate() {
        let sim = SimConfig { policy: policy.clone(), ..config.sim.clone() };
        for (ii, input) in config.inputs.iter().enumerate() {
            let mut traces: BTreeMap<u8, SpecTrace> = BTreeMap::new();
            for &(a, b) in &config.secret_pairs {
                for s in [a, b] {
                    if !traces.contains_key(&s) {
                        let inp = with_secret(input, cfg.program(), &config.secret_region, s);
                        traces.insert(s, simulate_cfg(&cfg, &inp, &sim)?);
                    }
                }
                let (ta, tb) = (&traces[&a], &traces[&b]);
                if ta.committed_shape() != tb.committed_shape() {
                    v.skipped += 1;
                    continue;
                }
                let triggers: BTreeSet<InstId> = ta.triggers().union(&tb.triggers()).copied().collect();
                for t in triggers {
                    if ta.transient_lines(Some(t)) != tb.transient_lines(Some(t)) {
                        let leak = Leak { branch: t, input: ii, pair: (a, b), policy: pi };
                        if !anchored.contains(&t) {
                            v.uncovered.push(leak.clone());
                        }
                        v.leaks.push(leak);
                    }
                }
            }
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    const GADGET: &str = "\
region array1 @0x1000 size 16
region secret @0x1010 size 16
region array2 @0x10000 size 131072
source fread
entry:
  call fread -> x
  binop lt c, x, 16
  branch c, body, done
body:
  load v, [array1 + x*1]
  binop shl k, v, 9
  load z, [array2 + k*1]
done:
  halt
";

    fn input(x: u64) -> SimInput {
        SimInput::default()
            .with_source_values("fread", &[x])
            .with_memory("array1", (0..16).collect())
            .with_memory("secret", vec![7; 16])
    }

    fn cfg_with(policy: MispredictPolicy) -> SimConfig {
        SimConfig { policy, ..SimConfig::default() }
    }

    #[test]
    fn committed_run_is_plain_execution() {
        let p = parse_program(GADGET).unwrap();
        let t = simulate(&p, &input(3), &SimConfig::default()).unwrap();
        assert_eq!(t.registers["v"], 3);
        assert_eq!(t.registers["k"], 3 << 9);
        assert_eq!(t.transient().count(), 0);
        assert_eq!(t.faulted, None);
    }

    #[test]
    fn squashed_episode_leaves_no_state() {
        let p = parse_program(GADGET).unwrap();
        let plain = simulate(&p, &input(20), &SimConfig::default()).unwrap();
        let spec = simulate(&p, &input(20), &cfg_with(MispredictPolicy::always())).unwrap();
        assert_eq!(plain.registers, spec.registers);
        assert_eq!(plain.memory, spec.memory);
        assert_eq!(plain.committed_shape(), spec.committed_shape());
        // out of bounds by 4 lands in secret
        let t: Vec<_> = spec.transient().collect();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].access.as_ref().unwrap().region.as_deref(), Some("secret"));
        assert_eq!(t[2].access.as_ref().unwrap().addr, 0x10000 + (7 << 9));
        assert!(t.iter().all(|e| e.trigger == Some(InstId(2))));
    }

    #[test]
    fn secret_dependent_lines_leak() {
        let p = parse_program(GADGET).unwrap();
        let c = cfg_with(MispredictPolicy::always());
        let a = simulate(&p, &input(20), &c).unwrap();
        let b = simulate(&p, &input(20).with_memory("secret", vec![9; 16]), &c).unwrap();
        assert!(leaks_secret(&a, &b).unwrap());
        let a = simulate(&p, &input(2), &c).unwrap();
        let b = simulate(&p, &input(2).with_memory("secret", vec![9; 16]), &c).unwrap();
        assert!(!leaks_secret(&a, &b).unwrap());
        let other = simulate(&parse_program("e:\n  halt\n").unwrap(), &SimInput::default(), &c).unwrap();
        assert_eq!(leaks_secret(&a, &other), Err(SimError::Mismatch));
    }

    #[test]
    fn fence_ends_episode() {
        let src = GADGET.replace("body:\n", "body:\n  fence\n");
        let p = parse_program(&src).unwrap();
        let t = simulate(&p, &input(20), &cfg_with(MispredictPolicy::always())).unwrap();
        assert_eq!(t.transient().count(), 0);
    }

    #[test]
    fn window_bounds_episode() {
        let p = parse_program(GADGET).unwrap();
        let c = SimConfig { window: SpecWindow::new(2).unwrap(), ..cfg_with(MispredictPolicy::always()) };
        let t = simulate(&p, &input(20), &c).unwrap();
        assert_eq!(t.transient().count(), 2);
    }

    #[test]
    fn deterministic() {
        let p = parse_program(GADGET).unwrap();
        let c = cfg_with(MispredictPolicy::always());
        assert_eq!(simulate(&p, &input(20), &c).unwrap(), simulate(&p, &input(20), &c).unwrap());
    }

    #[test]
    fn step_budget() {
        let p = parse_program("l:\n  jump l\n").unwrap();
        let c = SimConfig { step_budget: 100, ..SimConfig::default() };
        assert_eq!(simulate(&p, &SimInput::default(), &c), Err(SimError::StepBudget(100)));
    }

    #[test]
    fn protected_read_faults_then_runs_transiently() {
        let src = "\
region kernel @0xffff0000 size 64 protected
region probe @0x100000 size 1048576
e:
  load k, [kernel + 16]
  binop shl k, k, 12
  load z, [probe + k*1]
  halt
";
        let p = parse_program(src).unwrap();
        let inp = SimInput::default().with_memory("kernel", vec![5; 64]);
        let t = simulate(&p, &inp, &SimConfig::default()).unwrap();
        assert_eq!(t.faulted, Some(InstId(0)));
        assert_eq!(t.events[0].kind, EventKind::Fault);
        assert!(!t.registers.contains_key("k"));
        let last = t.transient().last().unwrap();
        assert_eq!(last.access.as_ref().unwrap().addr, 0x100000 + (5 << 12));
    }

    #[test]
    fn policy_syntax() {
        assert_eq!("all".parse::<MispredictPolicy>().unwrap(), MispredictPolicy::always());
        let p: MispredictPolicy = "#3:wrong,5:taken".parse().unwrap();
        assert!(p.mispredicts(InstId(3), true));
        assert!(p.mispredicts(InstId(5), false));
        assert!(!p.mispredicts(InstId(5), true));
        assert!(!p.mispredicts(InstId(4), true));
        assert!("3".parse::<MispredictPolicy>().is_err());
    }

    #[test]
    fn differential_attributes_leak_to_branch() {
        let p = parse_program(GADGET).unwrap();
        let cfg = DiffConfig::new(vec![input(2), input(20)], "secret", vec![(1, 2), (0, 255)]).with_site_sweep(&p);
        let v = differential_check(&p, &[], &cfg).unwrap();
        assert_eq!(v.leaking_branches(), BTreeSet::from([InstId(2)]));
        assert!(v.fail());
        let a = crate::analysis::analyze(&p, &Default::default()).unwrap();
        let v = differential_check(&p, &a.spectre, &cfg).unwrap();
        assert!(!v.fail());
    }
}
