use std::fmt::{self, Write};

use super::*;

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.region)?;
        if self.offset != 0 {
            write!(f, " + {}", self.offset)?;
        }
        if let Some(idx) = &self.index {
            write!(f, " + {}*{}", idx, self.scale)?;
        }
        f.write_str("]")
    }
}

fn suffix(w: Width) -> &'static str {
    match w {
        Width::Byte => "",
        Width::Quad => ".q",
    }
}

impl fmt::Display for InstKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstKind::Binop { op, dst, lhs, rhs } => {
                write!(f, "binop {} {dst}, {lhs}, {rhs}", op.name())
            }
            InstKind::Unop { op, dst, src } => write!(f, "unop {} {dst}, {src}", op.name()),
            InstKind::Load { dst, addr, width } => write!(f, "load{} {dst}, {addr}", suffix(*width)),
            InstKind::Store { addr, src, width } => {
                write!(f, "store{} {addr}, {src}", suffix(*width))
            }
            InstKind::Branch { cond, taken, fallthrough } => {
                write!(f, "branch {cond}, {taken}, {fallthrough}")
            }
            InstKind::Jump(JumpTarget::Direct(l)) => write!(f, "jump {l}"),
            InstKind::Jump(JumpTarget::Indirect { reg, targets }) => {
                write!(f, "jump *{reg}")?;
                if !targets.is_empty() {
                    write!(f, " targets [{}]", targets.join(", "))?;
                }
                Ok(())
            }
            InstKind::Call { callee, dst } => write!(f, "call {callee} -> {dst}"),
            InstKind::Fence => f.write_str("fence"),
            InstKind::Time { dst } => write!(f, "time {dst}"),
            InstKind::ReadSys { dst, class } => write!(f, "rdsr {dst}, {class}"),
            InstKind::Halt => f.write_str("halt"),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

/// Canonical text: header first, one instruction per line, two-space indent.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for r in &p.regions {
        let _ = write!(out, "region {} @{:#x} size {}", r.name, r.base, r.size);
        if r.protected {
            out.push_str(" protected");
        }
        if r.readonly {
            out.push_str(" readonly");
        }
        out.push('\n');
    }
    for s in &p.sources {
        let _ = writeln!(out, "source {s}");
    }
    if !p.regions.is_empty() || !p.sources.is_empty() {
        out.push('\n');
    }
    for b in &p.blocks {
        let _ = writeln!(out, "{}:", b.label);
        for i in &b.insts {
            let _ = writeln!(out, "  {}", i.kind);
        }
    }
    out
}
