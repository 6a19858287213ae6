//! The analyzed intermediate representation.
//!
//! A [`Program`] is a header of memory regions and taint-source declarations
//! followed by labeled basic blocks. Instruction ids are assigned in text
//! order and are unique within a program.

mod parse;
mod print;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::parse_program;
pub use print::print_program;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstId(pub u32);

impl InstId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for InstId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A register name. Registers are untyped 64-bit cells and spring into
/// existence on first use with value zero.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reg(pub String);

impl Reg {
    pub fn new(name: impl Into<String>) -> Self {
        Reg(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionAttr {
    Protected,
    Readonly,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub base: u64,
    pub size: u64,
    pub protected: bool,
    pub readonly: bool,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base.saturating_add(self.size)
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

impl Operand {
    pub fn reg(&self) -> Option<&Reg> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

/// `[region + offset + index*scale]`
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub region: String,
    pub offset: u64,
    pub index: Option<Reg>,
    pub scale: u64,
}

/// Access width in bytes. Memory is byte addressed, little endian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Quad,
}

impl Width {
    pub fn bytes(self) -> u64 {
        match self {
            Width::Byte => 1,
            Width::Quad => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl BinOp {
    pub const ALL: [BinOp; 14] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Eq,
        BinOp::Ne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }

    /// Concrete semantics on wrapping unsigned 64-bit values.
    pub fn eval(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => {
                if b >= 64 {
                    0
                } else {
                    a << b
                }
            }
            BinOp::Shr => {
                if b >= 64 {
                    0
                } else {
                    a >> b
                }
            }
            BinOp::Lt => (a < b) as u64,
            BinOp::Le => (a <= b) as u64,
            BinOp::Gt => (a > b) as u64,
            BinOp::Ge => (a >= b) as u64,
            BinOp::Eq => (a == b) as u64,
            BinOp::Ne => (a != b) as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnOp {
    Mov,
    Neg,
    Not,
}

impl UnOp {
    pub fn name(self) -> &'static str {
        match self {
            UnOp::Mov => "mov",
            UnOp::Neg => "neg",
            UnOp::Not => "not",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mov" => Some(UnOp::Mov),
            "neg" => Some(UnOp::Neg),
            "not" => Some(UnOp::Not),
            _ => None,
        }
    }

    pub fn eval(self, a: u64) -> u64 {
        match self {
            UnOp::Mov => a,
            UnOp::Neg => a.wrapping_neg(),
            UnOp::Not => !a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum JumpTarget {
    Direct(String),
    /// Register-indirect jump. `targets` is the annotated target set; empty
    /// means the target set is unknown.
    Indirect { reg: Reg, targets: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum InstKind {
    Binop { op: BinOp, dst: Reg, lhs: Operand, rhs: Operand },
    Unop { op: UnOp, dst: Reg, src: Operand },
    Load { dst: Reg, addr: MemRef, width: Width },
    Store { addr: MemRef, src: Operand, width: Width },
    /// Jumps to `taken` when `cond` is non-zero, otherwise to `fallthrough`.
    Branch { cond: Reg, taken: String, fallthrough: String },
    Jump(JumpTarget),
    /// Call to an external (non-analyzable) function; the result lands in `dst`.
    Call { callee: String, dst: Reg },
    Fence,
    /// Reads a timestamp counter.
    Time { dst: Reg },
    /// Reads a privileged register class (e.g. `sysreg`, `fpreg`).
    ReadSys { dst: Reg, class: String },
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Binop,
    Unop,
    Load,
    Store,
    Branch,
    Jump,
    Call,
    Fence,
    Time,
    Rdsr,
    Halt,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub id: InstId,
    pub block: BlockId,
    pub kind: InstKind,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match &self.kind {
            InstKind::Binop { .. } => Opcode::Binop,
            InstKind::Unop { .. } => Opcode::Unop,
            InstKind::Load { .. } => Opcode::Load,
            InstKind::Store { .. } => Opcode::Store,
            InstKind::Branch { .. } => Opcode::Branch,
            InstKind::Jump(_) => Opcode::Jump,
            InstKind::Call { .. } => Opcode::Call,
            InstKind::Fence => Opcode::Fence,
            InstKind::Time { .. } => Opcode::Time,
            InstKind::ReadSys { .. } => Opcode::Rdsr,
            InstKind::Halt => Opcode::Halt,
        }
    }

    pub fn is_branch(&self) -> bool {
        matches!(self.kind, InstKind::Branch { .. })
    }

    pub fn is_load(&self) -> bool {
        matches!(self.kind, InstKind::Load { .. })
    }

    pub fn is_store(&self) -> bool {
        matches!(self.kind, InstKind::Store { .. })
    }

    pub fn is_mem(&self) -> bool {
        self.mem_ref().is_some()
    }

    pub fn is_time(&self) -> bool {
        matches!(self.kind, InstKind::Time { .. })
    }

    pub fn is_fence(&self) -> bool {
        matches!(self.kind, InstKind::Fence)
    }

    pub fn is_terminator(&self) -> bool {
        matches!(
            self.kind,
            InstKind::Branch { .. } | InstKind::Jump(_) | InstKind::Halt
        )
    }

    pub fn mem_ref(&self) -> Option<&MemRef> {
        match &self.kind {
            InstKind::Load { addr, .. } | InstKind::Store { addr, .. } => Some(addr),
            _ => None,
        }
    }

    pub fn width(&self) -> Option<Width> {
        match &self.kind {
            InstKind::Load { width, .. } | InstKind::Store { width, .. } => Some(*width),
            _ => None,
        }
    }

    /// Register written by this instruction, if any.
    pub fn def_reg(&self) -> Option<&Reg> {
        match &self.kind {
            InstKind::Binop { dst, .. }
            | InstKind::Unop { dst, .. }
            | InstKind::Load { dst, .. }
            | InstKind::Call { dst, .. }
            | InstKind::Time { dst }
            | InstKind::ReadSys { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Registers read by this instruction, in operand order.
    pub fn use_regs(&self) -> Vec<&Reg> {
        let mut out = Vec::new();
        match &self.kind {
            InstKind::Binop { lhs, rhs, .. } => {
                out.extend(lhs.reg());
                out.extend(rhs.reg());
            }
            InstKind::Unop { src, .. } => out.extend(src.reg()),
            InstKind::Load { addr, .. } => out.extend(addr.index.as_ref()),
            InstKind::Store { addr, src, .. } => {
                out.extend(addr.index.as_ref());
                out.extend(src.reg());
            }
            InstKind::Branch { cond, .. } => out.push(cond),
            InstKind::Jump(JumpTarget::Indirect { reg, .. }) => out.push(reg),
            _ => {}
        }
        out
    }

    /// Labels this instruction may transfer control to.
    pub fn targets(&self) -> Vec<&str> {
        match &self.kind {
            InstKind::Branch { taken, fallthrough, .. } => vec![taken, fallthrough],
            InstKind::Jump(JumpTarget::Direct(l)) => vec![l],
            InstKind::Jump(JumpTarget::Indirect { targets, .. }) => {
                targets.iter().map(String::as_str).collect()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub label: String,
    pub insts: Vec<Instruction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Program {
    pub regions: Vec<Region>,
    pub sources: Vec<String>,
    pub blocks: Vec<Block>,
}

impl Program {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// The region whose address range contains `addr`.
    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    pub fn block_by_label(&self, label: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    pub fn num_instructions(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len()).sum()
    }

    /// Instructions are numbered densely in block order, so the id is a
    /// position in [`Program::instructions`].
    pub fn inst(&self, id: InstId) -> Option<&Instruction> {
        let mut idx = id.index();
        for b in &self.blocks {
            if idx < b.insts.len() {
                return Some(&b.insts[idx]);
            }
            idx -= b.insts.len();
        }
        None
    }

    pub fn protected_regions(&self) -> BTreeSet<&str> {
        self.regions
            .iter()
            .filter(|r| r.protected)
            .map(|r| r.name.as_str())
            .collect()
    }

    /// Reassigns block and instruction ids densely in textual order.
    pub fn renumber(&mut self) {
        let mut next = 0u32;
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            block.id = BlockId(bi as u32);
            for inst in &mut block.insts {
                inst.id = InstId(next);
                inst.block = block.id;
                next += 1;
            }
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { label: String, line: usize },
    #[error("line {line}: undeclared region `{name}`")]
    UndeclaredRegion { name: String, line: usize },
    #[error("regions `{first}` and `{second}` overlap")]
    OverlappingRegions { first: String, second: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { label: String, line: usize },
    #[error("block `{label}` falls off the end of the program")]
    FallsOffEnd { label: String },
    #[error("program has no blocks")]
    Empty,
}
