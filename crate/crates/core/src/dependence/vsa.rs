//! Value-set analysis: per-instruction register summaries and address
//! resolution for memory operands.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cfg::Cfg;
use crate::ir::{BinOp, BlockId, InstId, InstKind, Instruction, MemRef, Operand, Program, Reg, UnOp, Width};

/// Visits of a block after which changing registers are widened to top.
pub const WIDEN_AFTER: u32 = 4;

/// Over-approximation of a 64-bit value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Summary {
    Exact { value: u64 },
    Interval { lo: u64, hi: u64 },
    Top,
}

impl Summary {
    pub fn exact(v: u64) -> Self {
        Summary::Exact { value: v }
    }

    pub fn interval(lo: u64, hi: u64) -> Self {
        if lo == hi {
            Summary::exact(lo)
        } else if lo == 0 && hi == u64::MAX {
            Summary::Top
        } else {
            Summary::Interval { lo, hi }
        }
    }

    /// Inclusive bounds, `None` for top.
    pub fn bounds(self) -> Option<(u64, u64)> {
        match self {
            Summary::Exact { value } => Some((value, value)),
            Summary::Interval { lo, hi } => Some((lo, hi)),
            Summary::Top => None,
        }
    }

    pub fn as_exact(self) -> Option<u64> {
        match self {
            Summary::Exact { value } => Some(value),
            _ => None,
        }
    }

    pub fn contains(self, v: u64) -> bool {
        self.bounds().is_none_or(|(lo, hi)| lo <= v && v <= hi)
    }

    pub fn join(self, other: Summary) -> Summary {
        match (self.bounds(), other.bounds()) {
            (Some((a, b)), Some((c, d))) => Summary::interval(a.min(c), b.max(d)),
            _ => Summary::Top,
        }
    }

    /// `self ⊑ other`.
    pub fn leq(self, other: Summary) -> bool {
        match (self.bounds(), other.bounds()) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some((a, b)), Some((c, d))) => c <= a && b <= d,
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Summary::Exact { value } => write!(f, "{value:#x}"),
            Summary::Interval { lo, hi } => write!(f, "[{lo:#x}, {hi:#x}]"),
            Summary::Top => f.write_str("top"),
        }
    }
}

fn lift2(a: Summary, b: Summary, f: impl Fn(u64, u64, u64, u64) -> Option<(u64, u64)>) -> Summary {
    match (a.bounds(), b.bounds()) {
        (Some((al, ah)), Some((bl, bh))) => match f(al, ah, bl, bh) {
            Some((lo, hi)) => Summary::interval(lo, hi),
            None => Summary::Top,
        },
        _ => Summary::Top,
    }
}

/// Abstract transfer for binary operators. Exact inputs stay exact.
pub fn eval_binop(op: BinOp, a: Summary, b: Summary) -> Summary {
    if let (Some(x), Some(y)) = (a.as_exact(), b.as_exact()) {
        return Summary::exact(op.eval(x, y));
    }
    use BinOp::*;
    match op {
        Add => lift2(a, b, |al, ah, bl, bh| Some((al.checked_add(bl)?, ah.checked_add(bh)?))),
        Sub => lift2(a, b, |al, ah, bl, bh| (al >= bh).then(|| (al - bh, ah - bl))),
        Mul => lift2(a, b, |al, ah, bl, bh| Some((al.checked_mul(bl)?, ah.checked_mul(bh)?))),
        And => {
            // x & y never exceeds either operand.
            let cap = |s: Summary| s.bounds().map(|(_, h)| h);
            match (cap(a), cap(b)) {
                (Some(x), Some(y)) => Summary::interval(0, x.min(y)),
                (Some(x), None) | (None, Some(x)) => Summary::interval(0, x),
                (None, None) => Summary::Top,
            }
        }
        Or | Xor => lift2(a, b, |_, ah, _, bh| {
            let m = ah.max(bh);
            let bits = 64 - m.leading_zeros();
            Some((0, if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 }))
        }),
        Shl => lift2(a, b, |al, ah, bl, bh| {
            if bl != bh || bl >= 64 || ah.leading_zeros() < bl as u32 {
                return None;
            }
            Some((al << bl, ah << bl))
        }),
        Shr => lift2(a, b, |al, ah, bl, bh| {
            if bl >= 64 {
                return Some((0, 0));
            }
            let lo = if bh >= 64 { 0 } else { al >> bh };
            Some((lo, ah >> bl))
        }),
        Lt | Le | Gt | Ge | Eq | Ne => Summary::interval(0, 1),
    }
}

pub fn eval_unop(op: UnOp, a: Summary) -> Summary {
    match (op, a.as_exact()) {
        (UnOp::Mov, _) => a,
        (op, Some(v)) => Summary::exact(op.eval(v)),
        _ => Summary::Top,
    }
}

/// Register summaries at one program point. Absent registers hold zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegState(BTreeMap<Reg, Summary>);

impl RegState {
    pub fn get(&self, r: &Reg) -> Summary {
        self.0.get(r).copied().unwrap_or(Summary::exact(0))
    }

    pub fn set(&mut self, r: Reg, s: Summary) {
        self.0.insert(r, s);
    }

    pub fn operand(&self, o: &Operand) -> Summary {
        match o {
            Operand::Reg(r) => self.get(r),
            Operand::Imm(v) => Summary::exact(*v),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Reg, &Summary)> {
        self.0.iter()
    }

    fn join_with(&mut self, other: &RegState) -> bool {
        let mut changed = false;
        let keys: Vec<Reg> = self.0.keys().chain(other.0.keys()).cloned().collect();
        for k in keys {
            let a = self.get(&k);
            let j = a.join(other.get(&k));
            if j != a {
                changed = true;
            }
            self.0.insert(k, j);
        }
        changed
    }
}

/// Apply one instruction to a register state.
pub fn transfer(inst: &Instruction, st: &mut RegState) {
    match &inst.kind {
        InstKind::Binop { op, dst, lhs, rhs } => {
            let v = eval_binop(*op, st.operand(lhs), st.operand(rhs));
            st.set(dst.clone(), v);
        }
        InstKind::Unop { op, dst, src } => {
            let v = eval_unop(*op, st.operand(src));
            st.set(dst.clone(), v);
        }
        InstKind::Load { dst, width, .. } => {
            let v = match width {
                Width::Byte => Summary::interval(0, 0xff),
                Width::Quad => Summary::Top,
            };
            st.set(dst.clone(), v);
        }
        InstKind::Call { dst, .. } | InstKind::Time { dst } | InstKind::ReadSys { dst, .. } => {
            st.set(dst.clone(), Summary::Top);
        }
        InstKind::Store { .. }
        | InstKind::Branch { .. }
        | InstKind::Jump(_)
        | InstKind::Fence
        | InstKind::Halt => {}
    }
}

/// Register summaries before every instruction.
#[derive(Clone, Debug)]
pub struct ValueSet {
    before: Vec<Option<RegState>>,
    pub warnings: Vec<String>,
}

impl ValueSet {
    /// Summary of `r` just before `inst` executes. Unreachable code reports top.
    pub fn reg_at(&self, inst: InstId, r: &Reg) -> Summary {
        match &self.before[inst.index()] {
            Some(st) => st.get(r),
            None => Summary::Top,
        }
    }

    pub fn state_at(&self, inst: InstId) -> Option<&RegState> {
        self.before[inst.index()].as_ref()
    }

    pub fn is_reachable(&self, inst: InstId) -> bool {
        self.before[inst.index()].is_some()
    }
}

/// Forward interval analysis with widening after [`WIDEN_AFTER`] visits.
pub fn value_set_analysis(cfg: &Cfg) -> ValueSet {
    let n = cfg.num_blocks();
    let mut inb: Vec<Option<RegState>> = vec![None; n];
    let mut visits = vec![0u32; n];
    let mut widened: Vec<String> = Vec::new();
    inb[cfg.entry().index()] = Some(RegState::default());
    let mut work: Vec<BlockId> = vec![cfg.entry()];
    let rpo_index: Vec<usize> = {
        let mut v = vec![usize::MAX; n];
        for (i, b) in cfg.reverse_postorder().iter().enumerate() {
            v[b.index()] = i;
        }
        v
    };

    while let Some(b) = pop_min(&mut work, &rpo_index) {
        let mut st = inb[b.index()].clone().expect("queued block has state");
        for inst in cfg.block_insts(b) {
            transfer(inst, &mut st);
        }
        for &s in cfg.successors(b) {
            let si = s.index();
            match &mut inb[si] {
                None => {
                    inb[si] = Some(st.clone());
                    push_unique(&mut work, s);
                }
                Some(old) => {
                    let before = old.clone();
                    if old.join_with(&st) {
                        visits[si] += 1;
                        if visits[si] > WIDEN_AFTER {
                            let changed: Vec<Reg> = old
                                .iter()
                                .filter(|(r, v)| before.get(r) != **v)
                                .map(|(r, _)| r.clone())
                                .collect();
                            for r in changed {
                                widened.push(format!(
                                    "register `{}` widened to top at block `{}`",
                                    r,
                                    cfg.program().blocks[si].label
                                ));
                                old.set(r, Summary::Top);
                            }
                        }
                        push_unique(&mut work, s);
                    }
                }
            }
        }
    }

    let mut before = vec![None; cfg.num_insts()];
    for b in 0..n {
        if let Some(mut st) = inb[b].clone() {
            for inst in cfg.block_insts(BlockId(b as u32)) {
                before[inst.id.index()] = Some(st.clone());
                transfer(inst, &mut st);
            }
        }
    }
    widened.sort();
    widened.dedup();
    ValueSet { before, warnings: widened }
}

fn push_unique(work: &mut Vec<BlockId>, b: BlockId) {
    if !work.contains(&b) {
        work.push(b);
    }
}

fn pop_min(work: &mut Vec<BlockId>, order: &[usize]) -> Option<BlockId> {
    let (i, _) = work.iter().enumerate().min_by_key(|(_, b)| order[b.index()])?;
    Some(work.swap_remove(i))
}

/// A memory location: a region and an offset summary within it. A missing
/// region means the address could not be attributed to any region.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AbstractLoc {
    pub region: Option<String>,
    pub offset: Summary,
}

impl PartialOrd for Summary {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Summary {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |s: &Summary| match s {
            Summary::Exact { value } => (0, *value, *value),
            Summary::Interval { lo, hi } => (1, *lo, *hi),
            Summary::Top => (2, 0, 0),
        };
        key(self).cmp(&key(other))
    }
}

impl AbstractLoc {
    pub fn unknown() -> Self {
        AbstractLoc { region: None, offset: Summary::Top }
    }

    /// Whether the offset is unbounded, so the access may land anywhere.
    pub fn is_unbounded(&self) -> bool {
        self.region.is_none() || self.offset == Summary::Top
    }

    /// Byte range `[lo, hi]` touched by an access of `width` bytes.
    fn byte_range(&self, width: u64) -> Option<(u64, u64)> {
        self.offset.bounds().map(|(lo, hi)| (lo, hi.saturating_add(width - 1)))
    }

    /// May-alias test for accesses of the given widths. Unbounded locations
    /// alias everything.
    pub fn may_alias(&self, w1: u64, other: &AbstractLoc, w2: u64) -> bool {
        if self.is_unbounded() || other.is_unbounded() {
            return true;
        }
        if self.region != other.region {
            return false;
        }
        match (self.byte_range(w1), other.byte_range(w2)) {
            (Some((a, b)), Some((c, d))) => a <= d && c <= b,
            _ => true,
        }
    }

    /// Whether this location may touch any address inside `region`.
    pub fn may_touch_region(&self, region: &str) -> bool {
        self.is_unbounded() || self.region.as_deref() == Some(region)
    }

    /// Absolute address when exact.
    pub fn exact_addr(&self, p: &Program) -> Option<u64> {
        let r = p.region(self.region.as_deref()?)?;
        Some(r.base + self.offset.as_exact()?)
    }
}

impl fmt::Display for AbstractLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.region {
            Some(r) => write!(f, "({r}, {})", self.offset),
            None => write!(f, "(unknown, {})", self.offset),
        }
    }
}

/// Resolve a memory operand against an index summary.
pub fn resolve_memref(p: &Program, m: &MemRef, index: Option<Summary>) -> AbstractLoc {
    let Some(region) = p.region(&m.region) else {
        return AbstractLoc::unknown();
    };
    let idx = match index {
        None => Summary::exact(0),
        Some(s) => s,
    };
    let Some((lo, hi)) = idx.bounds() else {
        return AbstractLoc { region: Some(region.name.clone()), offset: Summary::Top };
    };
    let scaled = lo
        .checked_mul(m.scale)
        .zip(hi.checked_mul(m.scale))
        .and_then(|(l, h)| Some((l.checked_add(m.offset)?, h.checked_add(m.offset)?)));
    let Some((off_lo, off_hi)) = scaled else {
        return AbstractLoc::unknown();
    };
    if off_hi < region.size {
        return AbstractLoc { region: Some(region.name.clone()), offset: Summary::interval(off_lo, off_hi) };
    }
    let abs = region.base.checked_add(off_lo).zip(region.base.checked_add(off_hi));
    if let Some((a_lo, a_hi)) = abs {
        if let Some(other) = p.region_at(a_lo) {
            if other.contains(a_hi) {
                return AbstractLoc {
                    region: Some(other.name.clone()),
                    offset: Summary::interval(a_lo - other.base, a_hi - other.base),
                };
            }
        }
    }
    AbstractLoc::unknown()
}

/// addr(inst) for a load or store.
pub fn resolve_addr(p: &Program, vs: &ValueSet, inst: &Instruction) -> Option<AbstractLoc> {
    let m = inst.mem_ref()?;
    let idx = m.index.as_ref().map(|r| vs.reg_at(inst.id, r));
    Some(resolve_memref(p, m, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::ir::parse_program;

    fn vs(src: &str) -> (Cfg, ValueSet) {
        let g = build_cfg(&parse_program(src).unwrap()).unwrap();
        let v = value_set_analysis(&g);
        (g, v)
    }

    #[test]
    fn constants_propagate() {
        let (g, v) = vs("region m @0x2000 size 16\ne:\n  unop mov r1, 0\n  load r2, [m + r1*1]\n  halt\n");
        let ld = g.inst(InstId(1));
        assert_eq!(v.reg_at(InstId(1), &Reg::new("r1")), Summary::exact(0));
        let loc = resolve_addr(g.program(), &v, ld).unwrap();
        assert_eq!(loc.exact_addr(g.program()), Some(0x2000));
    }

    #[test]
    fn call_result_is_top() {
        let (_, v) = vs("e:\n  call fread -> x\n  halt\n");
        assert_eq!(v.reg_at(InstId(1), &Reg::new("x")), Summary::Top);
    }

    #[test]
    fn join_of_exacts_is_interval() {
        assert_eq!(Summary::exact(3).join(Summary::exact(9)), Summary::interval(3, 9));
    }

    #[test]
    fn top_index_stays_in_region() {
        let p = parse_program("region array1 @0x1000 size 16\ne:\n  halt\n").unwrap();
        let m = MemRef { region: "array1".into(), offset: 0, index: Some(Reg::new("r")), scale: 1 };
        let loc = resolve_memref(&p, &m, Some(Summary::Top));
        assert_eq!(loc, AbstractLoc { region: Some("array1".into()), offset: Summary::Top });
        let loc = resolve_memref(&p, &m, Some(Summary::exact(3)));
        assert_eq!(loc.offset, Summary::exact(3));
    }

    #[test]
    fn scaled_byte_index() {
        let p = parse_program("region array2 @0x10000 size 131072\ne:\n  halt\n").unwrap();
        let m = MemRef { region: "array2".into(), offset: 0, index: Some(Reg::new("y")), scale: 512 };
        let loc = resolve_memref(&p, &m, Some(Summary::interval(0, 255)));
        assert_eq!(loc.offset, Summary::interval(0, 130560));
    }

    #[test]
    fn escaping_address_is_unknown() {
        let p = parse_program("region a @0x1000 size 16\ne:\n  halt\n").unwrap();
        let m = MemRef { region: "a".into(), offset: 0, index: Some(Reg::new("y")), scale: 64 };
        assert_eq!(resolve_memref(&p, &m, Some(Summary::interval(0, 9))), AbstractLoc::unknown());
    }

    #[test]
    fn loop_counter_widens() {
        let src = "e:\n  unop mov i, 0\nl:\n  binop add i, i, 8\n  binop lt c, i, 64\n  branch c, l, x\nx:\n  halt\n";
        let (_, v) = vs(src);
        let at_exit = v.reg_at(InstId(4), &Reg::new("i"));
        for k in (8..=64).step_by(8) {
            assert!(at_exit.contains(k));
        }
        assert!(!v.warnings.is_empty());
    }
}
