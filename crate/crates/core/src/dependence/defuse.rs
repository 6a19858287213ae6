//! Reaching definitions and def-use chains over registers and memory.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::vsa::{resolve_addr, AbstractLoc, ValueSet};
use crate::cfg::Cfg;
use crate::ir::{BlockId, InstId, InstKind, JumpTarget, Operand, Reg};

/// What an instruction defines or reads.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Entity {
    Reg(Reg),
    Loc(AbstractLoc),
}

/// How a use feeds its instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UseRole {
    /// Operand of an arithmetic instruction.
    Operand,
    /// Index register of a memory operand.
    Address,
    /// Value written by a store.
    Value,
    /// Memory read by a load.
    Memory,
    /// Branch condition or indirect jump target.
    Condition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Use {
    pub entity: Entity,
    pub role: UseRole,
    pub defs: BTreeSet<InstId>,
}

/// Def-use chains.
#[derive(Clone, Debug, Default)]
pub struct DefUse {
    pub defs: BTreeMap<InstId, Entity>,
    pub uses: BTreeMap<InstId, Vec<Use>>,
    /// def site -> instructions using it
    users: BTreeMap<InstId, BTreeSet<InstId>>,
    /// resolved locations and widths of loads and stores
    locs: BTreeMap<InstId, (AbstractLoc, u64)>,
}

#[derive(Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn clear(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
    fn union(&mut self, o: &Bits) -> bool {
        let mut changed = false;
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            let n = *a | *b;
            changed |= n != *a;
            *a = n;
        }
        changed
    }
}

impl DefUse {
    /// Instructions that use a definition made by `def`.
    pub fn users(&self, def: InstId) -> impl Iterator<Item = InstId> + '_ {
        self.users.get(&def).into_iter().flatten().copied()
    }

    pub fn loc(&self, inst: InstId) -> Option<&AbstractLoc> {
        self.locs.get(&inst).map(|(l, _)| l)
    }

    pub fn width(&self, inst: InstId) -> Option<u64> {
        self.locs.get(&inst).map(|(_, w)| *w)
    }

    /// Reaching definitions of `inst`'s uses with the given role.
    pub fn defs_for(&self, inst: InstId, role: UseRole) -> impl Iterator<Item = InstId> + '_ {
        self.uses
            .get(&inst)
            .into_iter()
            .flatten()
            .filter(move |u| u.role == role)
            .flat_map(|u| u.defs.iter().copied())
    }

    /// Every instruction transitively data-dependent on `src`. `src` itself
    /// is included only when it depends on itself through a cycle.
    pub fn forward_closure(&self, src: InstId) -> BTreeSet<InstId> {
        let mut seen = BTreeSet::new();
        let mut q: VecDeque<InstId> = self.users(src).collect();
        while let Some(i) = q.pop_front() {
            if seen.insert(i) {
                q.extend(self.users(i));
            }
        }
        seen
    }

    /// Dep(src, x): whether `inst`'s use in `role` (any role when `None`)
    /// is data-dependent on `src`.
    pub fn dep(&self, src: InstId, inst: InstId, role: Option<UseRole>) -> bool {
        let closure = self.forward_closure(src);
        self.dep_in(src, &closure, inst, role)
    }

    /// As [`DefUse::dep`] with a precomputed closure of `src`.
    pub fn dep_in(
        &self,
        src: InstId,
        closure: &BTreeSet<InstId>,
        inst: InstId,
        role: Option<UseRole>,
    ) -> bool {
        self.uses.get(&inst).into_iter().flatten().any(|u| {
            role.is_none_or(|r| r == u.role)
                && u.defs.iter().any(|d| *d == src || closure.contains(d))
        })
    }
}

fn op(o: &Operand, role: UseRole) -> Option<(&Reg, UseRole)> {
    o.reg().map(|r| (r, role))
}

fn reg_uses(kind: &InstKind) -> Vec<(&Reg, UseRole)> {
    let mut out = Vec::new();
    match kind {
        InstKind::Binop { lhs, rhs, .. } => {
            out.extend(op(lhs, UseRole::Operand));
            out.extend(op(rhs, UseRole::Operand));
        }
        InstKind::Unop { src, .. } => out.extend(op(src, UseRole::Operand)),
        InstKind::Load { addr, .. } => out.extend(addr.index.as_ref().map(|r| (r, UseRole::Address))),
        InstKind::Store { addr, src, .. } => {
            out.extend(addr.index.as_ref().map(|r| (r, UseRole::Address)));
            out.extend(op(src, UseRole::Value));
        }
        InstKind::Branch { cond, .. } => out.push((cond, UseRole::Condition)),
        InstKind::Jump(JumpTarget::Indirect { reg, .. }) => out.push((reg, UseRole::Condition)),
        _ => {}
    }
    out
}

/// Forward may-analysis of reaching definitions. Register definitions kill
/// earlier definitions of the same register; stores are weak updates.
pub fn reaching_definitions(cfg: &Cfg, vs: &ValueSet) -> DefUse {
    let p = cfg.program();
    let mut du = DefUse::default();

    // Def sites are numbered by instruction id.
    let n = cfg.num_insts();
    let mut reg_sites: BTreeMap<Reg, Vec<usize>> = BTreeMap::new();
    let mut store_sites: Vec<InstId> = Vec::new();
    for inst in cfg.instructions() {
        if let Some(loc) = resolve_addr(p, vs, inst) {
            let w = inst.width().map_or(1, |w| w.bytes());
            du.locs.insert(inst.id, (loc, w));
        }
        if let Some(r) = inst.def_reg() {
            du.defs.insert(inst.id, Entity::Reg(r.clone()));
            reg_sites.entry(r.clone()).or_default().push(inst.id.index());
        } else if inst.is_store() {
            du.defs.insert(inst.id, Entity::Loc(du.locs[&inst.id].0.clone()));
            store_sites.push(inst.id);
        }
    }

    let step = |inst: &crate::ir::Instruction, bits: &mut Bits| {
        if let Some(r) = inst.def_reg() {
            for &s in &reg_sites[r] {
                bits.clear(s);
            }
            bits.set(inst.id.index());
        } else if inst.is_store() {
            bits.set(inst.id.index());
        }
    };

    let nb = cfg.num_blocks();
    let mut out: Vec<Bits> = vec![Bits::new(n); nb];
    let mut inb: Vec<Bits> = vec![Bits::new(n); nb];
    let mut work: VecDeque<BlockId> = cfg.reverse_postorder().into_iter().collect();
    let mut queued = vec![true; nb];
    while let Some(b) = work.pop_front() {
        queued[b.index()] = false;
        let mut cur = Bits::new(n);
        for pb in cfg.predecessors(b) {
            cur.union(&out[pb.index()]);
        }
        inb[b.index()] = cur.clone();
        for inst in cfg.block_insts(b) {
            step(inst, &mut cur);
        }
        if cur != out[b.index()] {
            out[b.index()] = cur;
            for s in cfg.successors(b) {
                if !queued[s.index()] {
                    queued[s.index()] = true;
                    work.push_back(*s);
                }
            }
        }
    }

    for b in 0..nb {
        let mut cur = inb[b].clone();
        for inst in cfg.block_insts(BlockId(b as u32)) {
            let mut uses = Vec::new();
            for (r, role) in reg_uses(&inst.kind) {
                let defs: BTreeSet<InstId> = reg_sites
                    .get(r)
                    .into_iter()
                    .flatten()
                    .filter(|s| cur.get(**s))
                    .map(|s| InstId(*s as u32))
                    .collect();
                uses.push(Use { entity: Entity::Reg(r.clone()), role, defs });
            }
            if inst.is_load() {
                let (loc, w) = du.locs[&inst.id].clone();
                let defs: BTreeSet<InstId> = store_sites
                    .iter()
                    .filter(|s| cur.get(s.index()))
                    .filter(|s| {
                        let (sl, sw) = &du.locs[s];
                        sl.may_alias(*sw, &loc, w)
                    })
                    .copied()
                    .collect();
                uses.push(Use { entity: Entity::Loc(loc), role: UseRole::Memory, defs });
            }
            for u in &uses {
                for d in &u.defs {
                    du.users.entry(*d).or_default().insert(inst.id);
                }
            }
            if !uses.is_empty() {
                du.uses.insert(inst.id, uses);
            }
            step(inst, &mut cur);
        }
    }
    du
}
