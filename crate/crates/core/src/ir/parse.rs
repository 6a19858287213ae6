use std::collections::{BTreeMap, BTreeSet};

use super::*;

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(u64),
    Punct(&'static str),
}

struct Line<'a> {
    no: usize,
    toks: Vec<(Tok, usize)>,
    pos: usize,
    text: &'a str,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> IrError {
    IrError::Syntax { line, col, msg: msg.into() }
}

fn lex(no: usize, text: &str) -> Result<Vec<(Tok, usize)>, IrError> {
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut out = Vec::new();
    while i < bytes.len() {
        let c = bytes[i];
        let col = i + 1;
        if c == b'#' || c == b';' {
            break;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len()
                && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
            {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), col));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let lit = text[start..i].replace('_', "");
            let parsed = if let Some(hex) = lit.strip_prefix("0x").or_else(|| lit.strip_prefix("0X")) {
                u64::from_str_radix(hex, 16)
            } else {
                lit.parse::<u64>()
            };
            let v = parsed.map_err(|_| syntax(no, col, format!("bad number `{lit}`")))?;
            out.push((Tok::Num(v), col));
            continue;
        }
        if text[i..].starts_with("->") {
            out.push((Tok::Punct("->"), col));
            i += 2;
            continue;
        }
        let p = match c {
            b',' => ",",
            b'[' => "[",
            b']' => "]",
            b'+' => "+",
            b'*' => "*",
            b'@' => "@",
            b':' => ":",
            _ => return Err(syntax(no, col, format!("unexpected character `{}`", c as char))),
        };
        out.push((Tok::Punct(p), col));
        i += 1;
    }
    Ok(out)
}

impl<'a> Line<'a> {
    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|t| t.1)
            .unwrap_or(self.text.trim_end().len() + 1)
    }

    fn err(&self, msg: impl Into<String>) -> IrError {
        syntax(self.no, self.col(), msg)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn ident(&mut self, what: &str) -> Result<String, IrError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn num(&mut self, what: &str) -> Result<u64, IrError> {
        match self.peek() {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn punct(&mut self, p: &'static str) -> Result<(), IrError> {
        if self.peek() == Some(&Tok::Punct(p)) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{p}`")))
        }
    }

    fn eat_punct(&mut self, p: &'static str) -> bool {
        if self.peek() == Some(&Tok::Punct(p)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), IrError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected `{kw}`"))),
        }
    }

    fn finish(&self) -> Result<(), IrError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err("trailing tokens"))
        }
    }

    fn reg(&mut self) -> Result<Reg, IrError> {
        self.ident("register").map(Reg)
    }

    fn operand(&mut self) -> Result<Operand, IrError> {
        match self.peek() {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(Operand::Imm(v))
            }
            Some(Tok::Ident(_)) => self.reg().map(Operand::Reg),
            _ => Err(self.err("expected register or immediate")),
        }
    }

    /// `[region (+ off)? (+ reg (* scale)?)?]`, terms after the region in any order.
    fn memref(&mut self) -> Result<MemRef, IrError> {
        self.punct("[")?;
        let region = self.ident("region name")?;
        let mut offset = 0u64;
        let mut index = None;
        let mut scale = 1u64;
        while self.eat_punct("+") {
            match self.peek() {
                Some(Tok::Num(_)) => {
                    let v = self.num("offset")?;
                    offset = offset
                        .checked_add(v)
                        .ok_or_else(|| self.err("offset overflow"))?;
                }
                Some(Tok::Ident(_)) => {
                    if index.is_some() {
                        return Err(self.err("memory operand has two index registers"));
                    }
                    index = Some(self.reg()?);
                    if self.eat_punct("*") {
                        scale = self.num("scale")?;
                        if scale == 0 {
                            return Err(self.err("scale must be at least 1"));
                        }
                    }
                }
                _ => return Err(self.err("expected offset or index register")),
            }
        }
        self.punct("]")?;
        Ok(MemRef { region, offset, index, scale })
    }

    fn label_list(&mut self) -> Result<Vec<String>, IrError> {
        self.punct("[")?;
        let mut out = Vec::new();
        if self.eat_punct("]") {
            return Ok(out);
        }
        loop {
            out.push(self.ident("label")?);
            if self.eat_punct("]") {
                return Ok(out);
            }
            self.punct(",")?;
        }
    }
}

fn parse_width(mnemonic: &str, base: &str) -> Option<Width> {
    if mnemonic == base {
        Some(Width::Byte)
    } else if mnemonic.strip_prefix(base) == Some(".q") {
        Some(Width::Quad)
    } else {
        None
    }
}

fn parse_inst(l: &mut Line<'_>) -> Result<InstKind, IrError> {
    let mnemonic = l.ident("opcode")?;
    let kind = match mnemonic.as_str() {
        "binop" => {
            let col = l.col();
            let opname = l.ident("binary operator")?;
            let op = BinOp::from_name(&opname)
                .ok_or_else(|| syntax(l.no, col, format!("unknown binary operator `{opname}`")))?;
            let dst = l.reg()?;
            l.punct(",")?;
            let lhs = l.operand()?;
            l.punct(",")?;
            let rhs = l.operand()?;
            InstKind::Binop { op, dst, lhs, rhs }
        }
        "unop" => {
            let col = l.col();
            let opname = l.ident("unary operator")?;
            let op = UnOp::from_name(&opname)
                .ok_or_else(|| syntax(l.no, col, format!("unknown unary operator `{opname}`")))?;
            let dst = l.reg()?;
            l.punct(",")?;
            let src = l.operand()?;
            InstKind::Unop { op, dst, src }
        }
        m if parse_width(m, "load").is_some() => {
            let width = parse_width(m, "load").unwrap();
            let dst = l.reg()?;
            l.punct(",")?;
            let addr = l.memref()?;
            InstKind::Load { dst, addr, width }
        }
        m if parse_width(m, "store").is_some() => {
            let width = parse_width(m, "store").unwrap();
            let addr = l.memref()?;
            l.punct(",")?;
            let src = l.operand()?;
            InstKind::Store { addr, src, width }
        }
        "branch" => {
            let cond = l.reg()?;
            l.punct(",")?;
            let taken = l.ident("label")?;
            l.punct(",")?;
            let fallthrough = l.ident("label")?;
            InstKind::Branch { cond, taken, fallthrough }
        }
        "jump" => {
            if l.eat_punct("*") {
                let reg = l.reg()?;
                let targets = if l.at_end() {
                    Vec::new()
                } else {
                    l.keyword("targets")?;
                    l.label_list()?
                };
                InstKind::Jump(JumpTarget::Indirect { reg, targets })
            } else {
                InstKind::Jump(JumpTarget::Direct(l.ident("label")?))
            }
        }
        "call" => {
            let callee = l.ident("callee")?;
            l.punct("->")?;
            let dst = l.reg()?;
            InstKind::Call { callee, dst }
        }
        "fence" => InstKind::Fence,
        "time" => InstKind::Time { dst: l.reg()? },
        "rdsr" => {
            let dst = l.reg()?;
            l.punct(",")?;
            let class = l.ident("register class")?;
            InstKind::ReadSys { dst, class }
        }
        "halt" => InstKind::Halt,
        other => return Err(syntax(l.no, 1, format!("unknown opcode `{other}`"))),
    };
    l.finish()?;
    Ok(kind)
}

fn parse_region(l: &mut Line<'_>) -> Result<Region, IrError> {
    let name = l.ident("region name")?;
    l.punct("@")?;
    let base = l.num("base address")?;
    l.keyword("size")?;
    let size = l.num("size")?;
    let mut region = Region { name, base, size, protected: false, readonly: false };
    while !l.at_end() {
        match l.ident("region attribute")?.as_str() {
            "protected" => region.protected = true,
            "readonly" => region.readonly = true,
            other => {
                return Err(syntax(l.no, l.col(), format!("unknown region attribute `{other}`")))
            }
        }
    }
    Ok(region)
}

/// Parses the textual IR.
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let mut program = Program::default();
    let mut label_lines: BTreeMap<String, usize> = BTreeMap::new();
    // (label, line of use)
    let mut label_uses: Vec<(String, usize)> = Vec::new();
    let mut mem_uses: Vec<(String, usize)> = Vec::new();
    let mut in_body = false;

    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let toks = lex(no, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut l = Line { no, toks, pos: 0, text: raw };

        // `label:`
        if l.toks.len() >= 2 && matches!(l.toks[0].0, Tok::Ident(_)) && l.toks[1].0 == Tok::Punct(":") {
            let label = l.ident("label")?;
            l.punct(":")?;
            l.finish()?;
            if label_lines.insert(label.clone(), no).is_some() {
                return Err(IrError::DuplicateLabel { label, line: no });
            }
            let id = BlockId(program.blocks.len() as u32);
            program.blocks.push(Block { id, label, insts: Vec::new() });
            in_body = true;
            continue;
        }

        match l.peek() {
            Some(Tok::Ident(kw)) if kw == "region" && !in_body => {
                l.pos += 1;
                let region = parse_region(&mut l)?;
                if program.regions.iter().any(|r| r.name == region.name) {
                    return Err(syntax(no, 1, format!("region `{}` declared twice", region.name)));
                }
                program.regions.push(region);
            }
            Some(Tok::Ident(kw)) if kw == "source" && !in_body => {
                l.pos += 1;
                let name = l.ident("source name")?;
                l.finish()?;
                if !program.sources.contains(&name) {
                    program.sources.push(name);
                }
            }
            _ => {
                let Some(block) = program.blocks.last_mut() else {
                    return Err(l.err("instruction outside of a labeled block"));
                };
                if block.insts.last().is_some_and(Instruction::is_terminator) {
                    return Err(l.err("instruction after block terminator; start a new label"));
                }
                let kind = parse_inst(&mut l)?;
                let inst = Instruction { id: InstId(0), block: block.id, kind };
                for t in inst.targets() {
                    label_uses.push((t.to_string(), no));
                }
                if let Some(m) = inst.mem_ref() {
                    mem_uses.push((m.region.clone(), no));
                }
                block.insts.push(inst);
            }
        }
    }

    check_regions(&program.regions)?;
    for (name, line) in mem_uses {
        if program.region(&name).is_none() {
            return Err(IrError::UndeclaredRegion { name, line });
        }
    }
    for (label, line) in label_uses {
        if !label_lines.contains_key(&label) {
            return Err(IrError::UnresolvedLabel { label, line });
        }
    }
    if program.blocks.is_empty() {
        return Err(IrError::Empty);
    }
    program.renumber();
    Ok(program)
}

pub(crate) fn check_regions(regions: &[Region]) -> Result<(), IrError> {
    let mut seen = BTreeSet::new();
    for (i, a) in regions.iter().enumerate() {
        seen.insert(a.name.as_str());
        for b in &regions[i + 1..] {
            if a.size > 0 && b.size > 0 && a.base < b.end() && b.base < a.end() {
                return Err(IrError::OverlappingRegions {
                    first: a.name.clone(),
                    second: b.name.clone(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const V01: &str = "
region array1 @0x1000 size 256
region secret @0x1100 size 32
region array2 @0x10000 size 131072
region vars @0x40000 size 64

entry:
  call fread -> x
  load.q size, [vars + 0]
  binop lt c, x, size
  branch c, then, done
then:
  load y, [array1 + x*1]
  binop mul k, y, 512
  load v, [array2 + k*1]
  load t, [vars + 8]
  binop and t, t, v
  store [vars + 8], t
  jump done
done:
  halt
";

    #[test]
    fn parses_victim_v01() {
        let p = parse_program(V01).unwrap();
        assert_eq!(p.regions.len(), 4);
        assert_eq!(p.blocks.len(), 3);
        assert_eq!(p.instructions().filter(|i| i.is_branch()).count(), 1);
        assert_eq!(p.instructions().filter(|i| i.is_load()).count(), 4);
        let ids: Vec<u32> = p.instructions().map(|i| i.id.0).collect();
        assert_eq!(ids, (0..ids.len() as u32).collect::<Vec<_>>());
        assert_eq!(p.inst(InstId(4)).unwrap().opcode(), Opcode::Load);
    }

    #[test]
    fn minimal_program() {
        let p = parse_program("main:\n  halt\n").unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.num_instructions(), 1);
    }

    #[test]
    fn duplicate_label() {
        let err = parse_program("L1:\n  halt\nL1:\n  halt\n").unwrap_err();
        assert_eq!(err, IrError::DuplicateLabel { label: "L1".into(), line: 3 });
    }

    #[test]
    fn undeclared_region() {
        let err = parse_program("a:\n  load r, [nowhere + 1]\n  halt\n").unwrap_err();
        assert!(matches!(err, IrError::UndeclaredRegion { ref name, line: 2 } if name == "nowhere"));
    }

    #[test]
    fn overlapping_regions() {
        let src = "region a @0 size 16\nregion b @8 size 16\nm:\n  halt\n";
        assert!(matches!(parse_program(src), Err(IrError::OverlappingRegions { .. })));
    }

    #[test]
    fn unresolved_label() {
        let err = parse_program("a:\n  jump nowhere\n").unwrap_err();
        assert!(matches!(err, IrError::UnresolvedLabel { .. }));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_program("a:\n  binop foo r1, r2, r3\n").unwrap_err();
        match err {
            IrError::Syntax { line, col, .. } => {
                assert_eq!(line, 2);
                assert_eq!(col, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_scale_rejected() {
        let src = "region a @0 size 16\nm:\n  load r, [a + i*0]\n  halt\n";
        assert!(matches!(parse_program(src), Err(IrError::Syntax { .. })));
    }

    #[test]
    fn indirect_jump_forms() {
        let src = "e:\n  jump *r1 targets [a, b]\na:\n  halt\nb:\n  jump *r2\n";
        let p = parse_program(src).unwrap();
        let j = p.inst(InstId(0)).unwrap();
        assert_eq!(j.targets(), vec!["a", "b"]);
        let j2 = p.inst(InstId(2)).unwrap();
        assert!(j2.targets().is_empty());
    }

    #[test]
    fn instruction_after_terminator_rejected() {
        assert!(parse_program("a:\n  halt\n  fence\n").is_err());
    }
}
