//! Postdominators and control dependence.

use std::collections::{BTreeMap, BTreeSet};

use crate::cfg::Cfg;
use crate::ir::{BlockId, InstId};

/// Postdominator tree over blocks plus a virtual exit node (index `n`).
#[derive(Clone, Debug)]
pub struct PostDominators {
    /// Immediate postdominator per block; the virtual exit maps to itself.
    ipdom: Vec<usize>,
    exit: usize,
}

impl PostDominators {
    pub fn compute(cfg: &Cfg) -> (Self, Vec<String>) {
        let (succ, warnings) = augmented_successors(cfg);
        let n = cfg.num_blocks();
        let exit = n;
        // Postorder of the reverse graph from the virtual exit.
        let mut rsucc: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (b, ss) in succ.iter().enumerate() {
            for &s in ss {
                rsucc[s].push(b);
            }
        }
        let mut order = Vec::with_capacity(n + 1);
        let mut seen = vec![false; n + 1];
        let mut stack = vec![(exit, 0usize)];
        seen[exit] = true;
        while let Some((b, i)) = stack.pop() {
            if i < rsucc[b].len() {
                stack.push((b, i + 1));
                let s = rsucc[b][i];
                if !seen[s] {
                    seen[s] = true;
                    stack.push((s, 0));
                }
            } else {
                order.push(b);
            }
        }
        let mut po_num = vec![usize::MAX; n + 1];
        for (i, b) in order.iter().enumerate() {
            po_num[*b] = i;
        }

        // Cooper, Harvey & Kennedy on the reverse graph.
        const UNDEF: usize = usize::MAX;
        let mut idom = vec![UNDEF; n + 1];
        idom[exit] = exit;
        let mut changed = true;
        while changed {
            changed = false;
            for &b in order.iter().rev() {
                if b == exit {
                    continue;
                }
                // reverse-graph predecessors of b = forward successors of b
                let mut new_idom = UNDEF;
                for &p in &succ[b] {
                    if idom[p] == UNDEF {
                        continue;
                    }
                    new_idom = if new_idom == UNDEF {
                        p
                    } else {
                        intersect(&idom, &po_num, p, new_idom)
                    };
                }
                if new_idom != UNDEF && idom[b] != new_idom {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }
        (PostDominators { ipdom: idom, exit }, warnings)
    }

    pub fn virtual_exit(&self) -> usize {
        self.exit
    }

    /// Immediate postdominator; `None` for the virtual exit.
    pub fn ipdom(&self, b: usize) -> Option<usize> {
        let p = self.ipdom[b];
        (b != self.exit && p != usize::MAX).then_some(p)
    }

    /// Whether `a` postdominates `b` (reflexive).
    pub fn postdominates(&self, a: usize, b: usize) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.ipdom(cur) {
                Some(next) if next != cur => cur = next,
                _ => return false,
            }
        }
    }
}

fn intersect(idom: &[usize], po: &[usize], mut a: usize, mut b: usize) -> usize {
    while a != b {
        while po[a] < po[b] {
            a = idom[a];
        }
        while po[b] < po[a] {
            b = idom[b];
        }
    }
    a
}

/// Forward successors with a virtual exit at index `n`. Blocks without
/// successors flow to the exit; so does every block that cannot otherwise
/// reach it (infinite loops), which is recorded as a warning.
pub fn augmented_successors(cfg: &Cfg) -> (Vec<Vec<usize>>, Vec<String>) {
    let n = cfg.num_blocks();
    let mut succ: Vec<Vec<usize>> = (0..n)
        .map(|b| {
            let mut s: Vec<usize> = cfg.successors(BlockId(b as u32)).iter().map(|x| x.index()).collect();
            s.sort_unstable();
            s.dedup();
            if s.is_empty() {
                s.push(n);
            }
            s
        })
        .collect();
    succ.push(Vec::new());

    let mut reaches = vec![false; n + 1];
    reaches[n] = true;
    let mut changed = true;
    while changed {
        changed = false;
        for b in 0..n {
            if !reaches[b] && succ[b].iter().any(|s| reaches[*s]) {
                reaches[b] = true;
                changed = true;
            }
        }
    }
    let mut warnings = Vec::new();
    for b in 0..n {
        if !reaches[b] {
            succ[b].push(n);
            warnings.push(format!(
                "block `{}` cannot reach program exit; added virtual exit edge",
                cfg.program().blocks[b].label
            ));
        }
    }
    (succ, warnings)
}

/// Control dependence: for each branch instruction, the instructions that
/// are control dependent on it.
#[derive(Clone, Debug, Default)]
pub struct Cdg {
    deps: BTreeMap<InstId, BTreeSet<InstId>>,
    /// instruction -> branches it is control dependent on
    controllers: BTreeMap<InstId, BTreeSet<InstId>>,
    /// block -> blocks control dependent on it
    block_deps: BTreeMap<BlockId, BTreeSet<BlockId>>,
    pub warnings: Vec<String>,
}

impl Cdg {
    /// CDep(branch).
    pub fn dependents(&self, branch: InstId) -> Option<&BTreeSet<InstId>> {
        self.deps.get(&branch)
    }

    /// Branches the instruction is control dependent on.
    pub fn controllers(&self, inst: InstId) -> impl Iterator<Item = InstId> + '_ {
        self.controllers.get(&inst).into_iter().flatten().copied()
    }

    pub fn block_dependents(&self, b: BlockId) -> Option<&BTreeSet<BlockId>> {
        self.block_deps.get(&b)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&InstId, &BTreeSet<InstId>)> {
        self.deps.iter()
    }
}

/// Postdominance-frontier control dependence, closed transitively: an
/// instruction nested under several branches depends on all of them. Only
/// conditional branches produce dependences.
pub fn control_dependence(cfg: &Cfg) -> Cdg {
    let (pdom, warnings) = PostDominators::compute(cfg);
    let mut cdg = Cdg { warnings, ..Cdg::default() };

    let mut direct: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
    for b in 0..cfg.num_blocks() {
        let bid = BlockId(b as u32);
        let last = cfg.block_insts(bid).last().expect("non-empty block");
        if !last.is_branch() {
            continue;
        }
        let stop = pdom.ipdom(b);
        let mut dep_blocks = BTreeSet::new();
        let mut succ: Vec<usize> = cfg.successors(bid).iter().map(|s| s.index()).collect();
        succ.sort_unstable();
        succ.dedup();
        for s in succ {
            let mut runner = s;
            while Some(runner) != stop && runner != pdom.virtual_exit() {
                dep_blocks.insert(BlockId(runner as u32));
                match pdom.ipdom(runner) {
                    Some(next) => runner = next,
                    None => break,
                }
            }
        }
        direct.insert(bid, dep_blocks);
    }

    let mut closed = direct.clone();
    let mut changed = true;
    while changed {
        changed = false;
        let snapshot = closed.clone();
        for deps in closed.values_mut() {
            let extra: Vec<BlockId> = deps
                .iter()
                .filter_map(|d| snapshot.get(d))
                .flatten()
                .copied()
                .filter(|x| !deps.contains(x))
                .collect();
            if !extra.is_empty() {
                deps.extend(extra);
                changed = true;
            }
        }
    }

    for (bid, dep_blocks) in closed {
        let branch = cfg.block_insts(bid).last().expect("non-empty block").id;
        let mut insts = BTreeSet::new();
        for db in &dep_blocks {
            for i in cfg.block_insts(*db) {
                insts.insert(i.id);
                cdg.controllers.entry(i.id).or_default().insert(branch);
            }
        }
        cdg.block_deps.insert(bid, dep_blocks);
        cdg.deps.insert(branch, insts);
    }
    cdg
}
