//! Control flow graph over basic blocks and instruction distances.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::ir::{BlockId, InstId, InstKind, Instruction, IrError, JumpTarget, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Taken,
    Fallthrough,
    Jump,
    Call,
    Return,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: BlockId,
    pub dst: BlockId,
    pub kind: EdgeKind,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CfgError {
    #[error("instruction {inst} jumps to unknown label `{label}`")]
    UnknownLabel { inst: InstId, label: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// The control flow graph of a program. Owns the program it was built from.
#[derive(Clone, Debug)]
pub struct Cfg {
    program: Program,
    edges: Vec<Edge>,
    succs: Vec<Vec<BlockId>>,
    preds: Vec<Vec<BlockId>>,
    /// instruction id -> (block, position within block)
    location: Vec<(BlockId, usize)>,
    warnings: Vec<String>,
}

impl Cfg {
    pub fn build(program: &Program) -> Result<Self, CfgError> {
        build_cfg(program)
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn entry(&self) -> BlockId {
        BlockId(0)
    }

    pub fn num_blocks(&self) -> usize {
        self.program.blocks.len()
    }

    pub fn num_insts(&self) -> usize {
        self.location.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn successors(&self, b: BlockId) -> &[BlockId] {
        &self.succs[b.index()]
    }

    pub fn predecessors(&self, b: BlockId) -> &[BlockId] {
        &self.preds[b.index()]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn block_insts(&self, b: BlockId) -> &[Instruction] {
        &self.program.blocks[b.index()].insts
    }

    pub fn inst(&self, id: InstId) -> &Instruction {
        let (b, pos) = self.location[id.index()];
        &self.program.blocks[b.index()].insts[pos]
    }

    pub fn location(&self, id: InstId) -> (BlockId, usize) {
        self.location[id.index()]
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.program.instructions()
    }

    /// Instruction-level successors: the next instruction in the block, or
    /// the first instruction of each successor block.
    pub fn inst_successors(&self, id: InstId) -> Vec<InstId> {
        let (b, pos) = self.location(id);
        let insts = self.block_insts(b);
        if pos + 1 < insts.len() {
            return vec![insts[pos + 1].id];
        }
        let mut out: Vec<InstId> = self
            .successors(b)
            .iter()
            .map(|s| self.block_insts(*s)[0].id)
            .collect();
        out.dedup();
        out
    }

    /// Blocks in reverse postorder from the entry, followed by unreachable ones.
    pub fn reverse_postorder(&self) -> Vec<BlockId> {
        let n = self.num_blocks();
        let mut seen = vec![false; n];
        let mut post = Vec::with_capacity(n);
        let mut stack: Vec<(BlockId, usize)> = vec![(self.entry(), 0)];
        seen[0] = true;
        while let Some((b, i)) = stack.pop() {
            let succ = self.successors(b);
            if i < succ.len() {
                stack.push((b, i + 1));
                let s = succ[i];
                if !seen[s.index()] {
                    seen[s.index()] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(b);
            }
        }
        post.reverse();
        post.extend((0..n).filter(|i| !seen[*i]).map(|i| BlockId(i as u32)));
        post
    }
}

/// Builds the CFG. Indirect jumps expand to their annotated target set; an
/// indirect jump without annotation gets no edges and a warning.
pub fn build_cfg(program: &Program) -> Result<Cfg, CfgError> {
    if program.blocks.is_empty() {
        return Err(IrError::Empty.into());
    }
    let mut program = program.clone();
    program.renumber();

    let label_of = |label: &str, inst: &Instruction| -> Result<BlockId, CfgError> {
        program
            .block_by_label(label)
            .map(|b| b.id)
            .ok_or_else(|| CfgError::UnknownLabel { inst: inst.id, label: label.to_string() })
    };

    if let Some(b) = program.blocks.iter().find(|b| b.insts.is_empty()) {
        return Err(IrError::FallsOffEnd { label: b.label.clone() }.into());
    }

    let mut edges = Vec::new();
    let mut warnings = Vec::new();
    let nblocks = program.blocks.len();
    for (bi, block) in program.blocks.iter().enumerate() {
        let src = block.id;
        let last = block.insts.last().expect("empty blocks rejected above");
        match &last.kind {
            InstKind::Branch { taken, fallthrough, .. } => {
                edges.push(Edge { src, dst: label_of(taken, last)?, kind: EdgeKind::Taken });
                edges.push(Edge { src, dst: label_of(fallthrough, last)?, kind: EdgeKind::Fallthrough });
            }
            InstKind::Jump(JumpTarget::Direct(l)) => {
                edges.push(Edge { src, dst: label_of(l, last)?, kind: EdgeKind::Jump });
            }
            InstKind::Jump(JumpTarget::Indirect { targets, .. }) => {
                if targets.is_empty() {
                    warnings.push(format!(
                        "indirect jump {} in `{}` has no target annotation; CFG may be incomplete",
                        last.id, block.label
                    ));
                }
                let mut seen = Vec::new();
                for t in targets {
                    let dst = label_of(t, last)?;
                    if !seen.contains(&dst) {
                        seen.push(dst);
                        edges.push(Edge { src, dst, kind: EdgeKind::Jump });
                    }
                }
            }
            InstKind::Halt => {}
            _ => {
                if bi + 1 < nblocks {
                    edges.push(Edge { src, dst: BlockId(bi as u32 + 1), kind: EdgeKind::Fallthrough });
                } else {
                    return Err(IrError::FallsOffEnd { label: block.label.clone() }.into());
                }
            }
        }
    }

    let mut succs = vec![Vec::new(); nblocks];
    let mut preds = vec![Vec::new(); nblocks];
    for e in &edges {
        succs[e.src.index()].push(e.dst);
        preds[e.dst.index()].push(e.src);
    }
    let mut location = Vec::with_capacity(program.num_instructions());
    for b in &program.blocks {
        for (pos, _) in b.insts.iter().enumerate() {
            location.push((b.id, pos));
        }
    }
    Ok(Cfg { program, edges, succs, preds, location, warnings })
}

/// Δ: the minimum number of instructions executed to reach `b` after `a`
/// (counting `b`, not `a`), over all CFG paths. `None` is ∞.
pub fn instruction_distance(cfg: &Cfg, a: InstId, b: InstId) -> Option<u32> {
    distances_from(cfg, a, false)[b.index()]
}

/// Like [`instruction_distance`], but a path may not continue past a fence:
/// the fence ends speculative execution.
pub fn speculative_distance(cfg: &Cfg, a: InstId, b: InstId) -> Option<u32> {
    distances_from(cfg, a, true)[b.index()]
}

/// Single-source distances to every instruction, via Dijkstra over block
/// entry costs. With `cut_at_fence`, fences are only allowed as path
/// endpoints.
pub fn distances_from(cfg: &Cfg, from: InstId, cut_at_fence: bool) -> Vec<Option<u32>> {
    let mut dist: Vec<Option<u32>> = vec![None; cfg.num_insts()];
    dist[from.index()] = Some(0);
    let (start_block, start_pos) = cfg.location(from);

    let first_fence_after = |insts: &[Instruction], pos: usize| -> Option<usize> {
        if !cut_at_fence {
            return None;
        }
        insts.iter().enumerate().skip(pos).find(|(_, i)| i.is_fence()).map(|(j, _)| j)
    };

    // Cost at which each block's first instruction is executed.
    let mut entry: Vec<Option<u32>> = vec![None; cfg.num_blocks()];
    let mut heap = BinaryHeap::new();

    let insts = cfg.block_insts(start_block);
    let stop = first_fence_after(insts, start_pos + 1);
    let reach_end = stop.map_or(insts.len(), |f| f + 1);
    for (q, inst) in insts.iter().enumerate().take(reach_end).skip(start_pos + 1) {
        dist[inst.id.index()] = Some((q - start_pos) as u32);
    }
    if stop.is_none() {
        let cost = (insts.len() - start_pos) as u32;
        for s in cfg.successors(start_block) {
            heap.push(Reverse((cost, s.0)));
        }
    }

    while let Some(Reverse((cost, b))) = heap.pop() {
        let bid = BlockId(b);
        if entry[bid.index()].is_some_and(|c| c <= cost) {
            continue;
        }
        entry[bid.index()] = Some(cost);
        let insts = cfg.block_insts(bid);
        let stop = first_fence_after(insts, 0);
        let reach_end = stop.map_or(insts.len(), |f| f + 1);
        for (q, inst) in insts.iter().enumerate().take(reach_end) {
            let d = cost + q as u32;
            let slot = &mut dist[inst.id.index()];
            if slot.is_none_or(|old| d < old) {
                *slot = Some(d);
            }
        }
        if stop.is_none() {
            let next = cost + insts.len() as u32;
            for s in cfg.successors(bid) {
                if entry[s.index()].is_none_or(|c| next < c) {
                    heap.push(Reverse((next, s.0)));
                }
            }
        }
    }
    dist[from.index()] = Some(0);
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn cfg(src: &str) -> Cfg {
        build_cfg(&parse_program(src).unwrap()).unwrap()
    }

    const V01: &str = "region a1 @0x1000 size 16\nregion a2 @0x2000 size 8192\n\
entry:\n  call fread -> x\n  binop lt c, x, 16\n  branch c, then, done\n\
then:\n  load y, [a1 + x*1]\n  binop mul k, y, 512\n  load v, [a2 + k*1]\n  jump done\n\
done:\n  halt\n";

    #[test]
    fn v01_structure() {
        let g = cfg(V01);
        assert_eq!(g.num_blocks(), 3);
        assert_eq!(g.successors(BlockId(0)).len(), 2);
        assert_eq!(g.successors(BlockId(2)).len(), 0);
    }

    #[test]
    fn straight_line_single_block() {
        let g = cfg("m:\n  unop mov a, 1\n  unop mov b, 2\n  binop add c, a, b\n  unop neg d, c\n  halt\n");
        assert_eq!(g.num_blocks(), 1);
        assert!(g.edges().iter().all(|e| e.kind != EdgeKind::Taken));
        assert!(g.edges().is_empty());
    }

    #[test]
    fn diamond_has_two_merge_predecessors() {
        let g = cfg("e:\n  branch c, l, r\nl:\n  jump m\nr:\n  jump m\nm:\n  halt\n");
        assert_eq!(g.num_blocks(), 4);
        assert_eq!(g.predecessors(BlockId(3)).len(), 2);
    }

    #[test]
    fn unannotated_indirect_jump_warns() {
        let g = cfg("e:\n  jump *r\nx:\n  halt\n");
        assert_eq!(g.warnings().len(), 1);
        assert!(g.successors(BlockId(0)).is_empty());
    }

    #[test]
    fn falling_off_the_end_is_an_error() {
        let p = parse_program("e:\n  unop mov a, 1\n").unwrap();
        assert!(matches!(build_cfg(&p), Err(CfgError::Ir(IrError::FallsOffEnd { .. }))));
    }

    #[test]
    fn adjacent_distance_is_one() {
        let g = cfg(V01);
        assert_eq!(instruction_distance(&g, InstId(0), InstId(1)), Some(1));
    }

    #[test]
    fn unreachable_is_infinite() {
        let g = cfg(V01);
        assert_eq!(instruction_distance(&g, InstId(7), InstId(0)), None);
    }

    #[test]
    fn distance_counts_across_blocks() {
        let g = cfg(V01);
        // branch (2) -> then[0] (3): 1; -> done (7): min(1 via fallthrough, 5)
        assert_eq!(instruction_distance(&g, InstId(2), InstId(3)), Some(1));
        assert_eq!(instruction_distance(&g, InstId(2), InstId(5)), Some(3));
        assert_eq!(instruction_distance(&g, InstId(2), InstId(7)), Some(1));
    }

    #[test]
    fn fence_cuts_speculative_paths() {
        let g = cfg("region a @0 size 4\ne:\n  branch c, t, d\nt:\n  fence\n  load y, [a]\n  halt\nd:\n  halt\n");
        assert_eq!(instruction_distance(&g, InstId(0), InstId(2)), Some(2));
        assert_eq!(speculative_distance(&g, InstId(0), InstId(1)), Some(1));
        assert_eq!(speculative_distance(&g, InstId(0), InstId(2)), None);
    }

    #[test]
    fn loops_take_the_back_edge() {
        let g = cfg("h:\n  unop mov a, 1\n  unop mov b, 2\n  branch c, h, x\nx:\n  halt\n");
        assert_eq!(instruction_distance(&g, InstId(1), InstId(0)), Some(2));
    }
}
