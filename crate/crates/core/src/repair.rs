//! Fence insertion for Spectre victims.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{InstId, InstKind, Instruction, Program};
use crate::spectre::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Before,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub anchor: InstId,
    pub position: Position,
    /// Indices into the detection list the plan was made from.
    pub reasons: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patches: Vec<Patch>,
}

impl PatchPlan {
    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// The opcode every patch inserts.
    pub fn fence_opcode(&self) -> &'static str {
        "fence"
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RepairError {
    #[error("patch anchor {0} does not exist in the program")]
    UnknownAnchor(InstId),
}

/// One fence before each distinct RS or SW.
pub fn plan_fences(dets: &[Detection]) -> PatchPlan {
    let mut by_anchor: BTreeMap<InstId, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_anchor.entry(d.anchor()).or_default().push(i);
    }
    PatchPlan {
        patches: by_anchor
            .into_iter()
            .map(|(anchor, reasons)| Patch { anchor, position: Position::Before, reasons })
            .collect(),
    }
}

/// Inserts the planned fences and renumbers instructions.
pub fn apply_fences(p: &Program, plan: &PatchPlan) -> Result<Program, RepairError> {
    let mut anchors: BTreeMap<InstId, bool> = plan.patches.iter().map(|x| (x.anchor, false)).collect();
    let mut out = p.clone();
    for block in &mut out.blocks {
        let mut insts = Vec::with_capacity(block.insts.len());
        for inst in block.insts.drain(..) {
            if let Some(seen) = anchors.get_mut(&inst.id) {
                *seen = true;
                insts.push(Instruction { id: inst.id, block: inst.block, kind: InstKind::Fence });
            }
            insts.push(inst);
        }
        block.insts = insts;
    }
    if let Some((id, _)) = anchors.iter().find(|(_, seen)| !**seen) {
        return Err(RepairError::UnknownAnchor(*id));
    }
    out.renumber();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, print_program};
    use crate::spectre::DetectionKind;

    fn det(tb: u32, rs: u32) -> Detection {
        Detection {
            kind: DetectionKind::V1Weak,
            tb: InstId(tb),
            rs: Some(InstId(rs)),
            ls: None,
            sw: None,
            deltas: Default::default(),
            witness: Default::default(),
        }
    }

    #[test]
    fn shared_anchor_gets_one_patch() {
        let plan = plan_fences(&[det(1, 5), det(2, 5), det(3, 5)]);
        assert_eq!(plan.patches.len(), 1);
        assert_eq!(plan.patches[0].reasons, vec![0, 1, 2]);
        assert!(plan_fences(&[]).is_empty());
    }

    #[test]
    fn apply_inserts_before_anchor() {
        let p = parse_program("e:\n  unop mov a, 1\n  unop mov b, 2\n  halt\n").unwrap();
        let plan = plan_fences(&[det(0, 1)]);
        let q = apply_fences(&p, &plan).unwrap();
        assert_eq!(print_program(&q), "e:\n  unop mov a, 1\n  fence\n  unop mov b, 2\n  halt\n");
        assert_eq!(q.num_instructions(), 4);
        assert_eq!(print_program(&apply_fences(&p, &PatchPlan::default()).unwrap()), print_program(&p));
        assert_eq!(apply_fences(&p, &plan_fences(&[det(0, 9)])), Err(RepairError::UnknownAnchor(InstId(9))));
    }
}
