//! Line-oriented assembly parser.
//!
//! Grammar, one item per line (`;` starts a comment):
//!
//! ```text
//! .global <name> = <int>
//! func <name>(<arity>):        ; arity optional, defaults to 0
//! <label>:                     ; may be followed by an instruction
//!     OPCODE[COND] operands    ; operands: Rn, #imm, <label>, @global
//! ```
//!
//! A conditional branch closes the current block: either the next line is
//! an unconditional `B`, which joins the block as the false branch, or the
//! following instructions start a fall-through block (auto-labeled
//! `<label>.f<n>` when no explicit label is given).

use std::collections::{BTreeMap, BTreeSet};

use super::{BasicBlock, Cond, Function, Instruction, Opcode, Operand, Program, Register};
use crate::{Error, Result};

struct ParsedInstr {
    ins: Instruction,
    line: usize,
}

struct FnBuilder {
    name: String,
    arity: usize,
    line: usize,
    blocks: Vec<(String, Vec<ParsedInstr>, usize)>,
    labels: BTreeSet<String>,
    auto_counter: usize,
    /// Whether the current block can still accept instructions.
    open: bool,
}

impl FnBuilder {
    fn new(name: String, arity: usize, line: usize) -> Self {
        FnBuilder {
            name,
            arity,
            line,
            blocks: Vec::new(),
            labels: BTreeSet::new(),
            auto_counter: 0,
            open: false,
        }
    }

    fn start_block(&mut self, label: String, line: usize) -> Result<()> {
        if !self.labels.insert(label.clone()) {
            return Err(Error::DuplicateLabel { line, label });
        }
        self.blocks.push((label, Vec::new(), line));
        self.open = true;
        Ok(())
    }

    fn auto_label(&mut self) -> String {
        let base = self
            .blocks
            .last()
            .map(|(l, _, _)| l.clone())
            .unwrap_or_else(|| "entry".to_string());
        // Derive continuations of a continuation from the original label.
        let base = match base.rfind(".f") {
            Some(i) if base[i + 2..].chars().all(|c| c.is_ascii_digit()) => base[..i].to_string(),
            _ => base,
        };
        loop {
            self.auto_counter += 1;
            let cand = format!("{base}.f{}", self.auto_counter);
            if !self.labels.contains(&cand) {
                return cand;
            }
        }
    }

    fn push(&mut self, ins: Instruction, line: usize) -> Result<()> {
        if self.blocks.is_empty() || !self.open {
            // Instruction without a live block: open a fall-through block.
            let label = if self.blocks.is_empty() {
                "entry".to_string()
            } else {
                self.auto_label()
            };
            self.start_block(label, line)?;
        }
        let closes = match ins.opcode {
            Opcode::Ret => true,
            Opcode::B => ins.cond == Cond::Al,
            _ => false,
        };
        let cond_branch = ins.is_cond_branch();
        let block = self.blocks.last_mut().expect("block exists");
        // A conditional branch may only be followed by one unconditional B
        // inside the same block (the explicit false branch).
        let after_cond = block
            .1
            .last()
            .is_some_and(|p| p.ins.is_cond_branch());
        if after_cond && !ins.is_uncond_branch() {
            // Fall-through continuation: new auto-labeled block.
            let label = self.auto_label();
            self.start_block(label, line)?;
            return self.push(ins, line);
        }
        let block = self.blocks.last_mut().expect("block exists");
        block.1.push(ParsedInstr { ins, line });
        if closes {
            self.open = false;
        } else if cond_branch {
            // Stay open for exactly one unconditional B; anything else
            // re-routes through the auto-label path above.
        }
        Ok(())
    }
}

fn parse_register(tok: &str, line: usize) -> Result<Register> {
    let rest = tok
        .strip_prefix('R')
        .or_else(|| tok.strip_prefix('r'))
        .ok_or_else(|| Error::Syntax {
            line,
            msg: format!("expected register, got `{tok}`"),
        })?;
    let idx: u8 = rest.parse().map_err(|_| Error::Syntax {
        line,
        msg: format!("bad register `{tok}`"),
    })?;
    if idx > 15 {
        return Err(Error::Syntax {
            line,
            msg: format!("register index {idx} out of range"),
        });
    }
    if idx == 13 {
        return Err(Error::ReservedRegister { line });
    }
    if idx == 15 {
        return Err(Error::Syntax {
            line,
            msg: "R15 is the program counter; it is only readable through ADR".to_string(),
        });
    }
    Ok(Register(idx))
}

fn parse_int(s: &str, line: usize) -> Result<i32> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16)
    } else {
        body.parse::<i64>()
    }
    .map_err(|_| Error::Syntax {
        line,
        msg: format!("bad integer literal `{s}`"),
    })?;
    let value = if neg { -value } else { value };
    if value < i32::MIN as i64 || value > u32::MAX as i64 {
        return Err(Error::Syntax {
            line,
            msg: format!("integer `{s}` not representable in 32 bits"),
        });
    }
    // Values in i32::MAX..=u32::MAX are accepted and wrapped, so unsigned
    // hex constants like 0xFFFFFFFF can be written directly.
    Ok(value as u32 as i32)
}

fn parse_operand(tok: &str, line: usize) -> Result<Operand> {
    if let Some(imm) = tok.strip_prefix('#') {
        Ok(Operand::Imm(parse_int(imm, line)?))
    } else {
        Ok(Operand::Reg(parse_register(tok, line)?))
    }
}

fn parse_mnemonic(tok: &str, line: usize) -> Result<(Opcode, Cond)> {
    let upper = tok.to_ascii_uppercase();
    for op in Opcode::ALL {
        if upper == op.mnemonic() {
            return Ok((op, Cond::Al));
        }
    }
    // Longest opcode prefix with a valid condition suffix wins, so BLT is
    // B+LT while BLEQ is BL+EQ.
    let mut cands: Vec<Opcode> = Opcode::ALL.to_vec();
    cands.sort_by_key(|op| std::cmp::Reverse(op.mnemonic().len()));
    for op in cands {
        if let Some(rest) = upper.strip_prefix(op.mnemonic()) {
            for (suffix, cond) in Cond::SUFFIXES {
                if rest == suffix {
                    return Ok((op, cond));
                }
            }
        }
    }
    Err(Error::Syntax {
        line,
        msg: format!("unknown mnemonic `{tok}`"),
    })
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_instruction(text: &str, line: usize) -> Result<Instruction> {
    let text = text.trim();
    let (mn, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let (opcode, cond) = parse_mnemonic(mn, line)?;
    let ops: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let mut ins = Instruction::new(opcode).with_cond(cond);

    let expect = |n: usize| -> Result<()> {
        if ops.len() != n {
            Err(Error::Syntax {
                line,
                msg: format!("{} expects {n} operand(s), got {}", opcode.mnemonic(), ops.len()),
            })
        } else {
            Ok(())
        }
    };

    match opcode {
        Opcode::Mov | Opcode::Mvn => {
            expect(2)?;
            ins.dest = Some(parse_register(ops[0], line)?);
            ins.src1 = Some(parse_operand(ops[1], line)?);
        }
        op if op.is_alu3() => {
            expect(3)?;
            ins.dest = Some(parse_register(ops[0], line)?);
            ins.src1 = Some(Operand::Reg(parse_register(ops[1], line)?));
            ins.src2 = Some(parse_operand(ops[2], line)?);
        }
        Opcode::Cmp => {
            expect(2)?;
            ins.src1 = Some(Operand::Reg(parse_register(ops[0], line)?));
            ins.src2 = Some(parse_operand(ops[1], line)?);
        }
        Opcode::Adr => {
            expect(2)?;
            ins.dest = Some(parse_register(ops[0], line)?);
            let imm = ops[1].strip_prefix('#').ok_or_else(|| Error::Syntax {
                line,
                msg: "ADR expects an immediate offset".to_string(),
            })?;
            ins.src1 = Some(Operand::Imm(parse_int(imm, line)?));
        }
        Opcode::B | Opcode::Bl | Opcode::Blx => {
            expect(1)?;
            if !is_ident(ops[0]) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("bad branch target `{}`", ops[0]),
                });
            }
            ins.target = Some(ops[0].to_string());
        }
        Opcode::Ret | Opcode::Nop => {
            expect(0)?;
            if cond != Cond::Al {
                return Err(Error::Syntax {
                    line,
                    msg: format!("{} may not be conditional", opcode.mnemonic()),
                });
            }
        }
        Opcode::Out => {
            expect(1)?;
            ins.src1 = Some(parse_operand(ops[0], line)?);
        }
        Opcode::Ldrg | Opcode::Strg => {
            expect(2)?;
            let reg = parse_register(ops[0], line)?;
            if opcode == Opcode::Ldrg {
                ins.dest = Some(reg);
            } else {
                ins.src1 = Some(Operand::Reg(reg));
            }
            let name = ops[1].strip_prefix('@').ok_or_else(|| Error::Syntax {
                line,
                msg: format!("{} expects a @global operand", opcode.mnemonic()),
            })?;
            if !is_ident(name) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("bad global name `{name}`"),
                });
            }
            ins.global = Some(name.to_string());
        }
        _ => unreachable!("all opcodes covered"),
    }
    Ok(ins)
}

/// Parses assembly text into a [`Program`] with addresses assigned.
pub fn parse_program(text: &str) -> Result<Program> {
    let mut globals: BTreeMap<String, i32> = BTreeMap::new();
    let mut builders: Vec<FnBuilder> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split(';').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }

        if let Some(rest) = content.strip_prefix(".global") {
            let (name, value) = rest.split_once('=').ok_or_else(|| Error::Syntax {
                line,
                msg: "expected `.global <name> = <int>`".to_string(),
            })?;
            let name = name.trim();
            if !is_ident(name) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("bad global name `{name}`"),
                });
            }
            globals.insert(name.to_string(), parse_int(value.trim(), line)?);
            continue;
        }

        if let Some(rest) = content.strip_prefix("func ") {
            let header = rest.trim().strip_suffix(':').ok_or_else(|| Error::Syntax {
                line,
                msg: "function header must end with `:`".to_string(),
            })?;
            let (name, arity) = match header.split_once('(') {
                Some((name, args)) => {
                    let n = args.strip_suffix(')').ok_or_else(|| Error::Syntax {
                        line,
                        msg: "unclosed `(` in function header".to_string(),
                    })?;
                    (name.trim(), n.trim().parse::<usize>().map_err(|_| Error::Syntax {
                        line,
                        msg: format!("bad arity `{n}`"),
                    })?)
                }
                None => (header.trim(), 0),
            };
            if !is_ident(name) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("bad function name `{name}`"),
                });
            }
            if arity > 4 {
                return Err(Error::Syntax {
                    line,
                    msg: format!("arity {arity} exceeds 4 (inputs arrive in R0..R3)"),
                });
            }
            if builders.iter().any(|b| b.name == name) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("duplicate function `{name}`"),
                });
            }
            builders.push(FnBuilder::new(name.to_string(), arity, line));
            continue;
        }

        let builder = builders.last_mut().ok_or_else(|| Error::Syntax {
            line,
            msg: "instruction outside of any function".to_string(),
        })?;

        // `label:` optionally followed by an instruction on the same line.
        // The head of a label line has no whitespace before the colon,
        // which is what tells `b:` apart from a `B` instruction.
        let mut body = content;
        if let Some(colon) = content.find(':') {
            let head = &content[..colon];
            if is_ident(head) {
                builder.start_block(head.to_string(), line)?;
                body = content[colon + 1..].trim();
                if body.is_empty() {
                    continue;
                }
            }
        }
        let ins = parse_instruction(body, line)?;
        builder.push(ins, line)?;
    }

    // Assemble and validate.
    let mut program = Program {
        globals,
        ..Program::default()
    };
    let fn_names: BTreeSet<String> = builders.iter().map(|b| b.name.clone()).collect();

    for b in builders {
        if b.blocks.is_empty() {
            return Err(Error::Syntax {
                line: b.line,
                msg: format!("function `{}` has no body", b.name),
            });
        }
        let labels = b.labels.clone();
        let mut blocks = Vec::new();
        let block_count = b.blocks.len();
        for (i, (label, instrs, bline)) in b.blocks.into_iter().enumerate() {
            let last_falls = instrs
                .last()
                .map(|p| !matches!(p.ins.opcode, Opcode::Ret) && !p.ins.is_uncond_branch())
                .unwrap_or(true);
            if i + 1 == block_count && last_falls {
                return Err(Error::Syntax {
                    line: bline,
                    msg: format!(
                        "block `{label}` falls off the end of function `{}`",
                        b.name
                    ),
                });
            }
            let mut block = BasicBlock::new(&label);
            for p in instrs {
                match p.ins.opcode {
                    Opcode::B => {
                        let t = p.ins.target.as_deref().unwrap_or("");
                        if !labels.contains(t) {
                            return Err(Error::UnresolvedTarget {
                                line: p.line,
                                target: t.to_string(),
                            });
                        }
                    }
                    Opcode::Bl | Opcode::Blx => {
                        let t = p.ins.target.as_deref().unwrap_or("");
                        if !fn_names.contains(t) {
                            return Err(Error::UnresolvedTarget {
                                line: p.line,
                                target: t.to_string(),
                            });
                        }
                    }
                    Opcode::Ldrg | Opcode::Strg => {
                        let g = p.ins.global.as_deref().unwrap_or("");
                        if !program.globals.contains_key(g) {
                            return Err(Error::Syntax {
                                line: p.line,
                                msg: format!("global `{g}` is not declared"),
                            });
                        }
                    }
                    _ => {}
                }
                block.instructions.push(p.ins);
            }
            blocks.push(block);
        }
        let entry = blocks[0].label.clone();
        program.order.push(b.name.clone());
        program.functions.insert(
            b.name.clone(),
            Function {
                name: b.name,
                arity: b.arity,
                blocks,
                entry,
                base_address: 0,
            },
        );
    }

    program.assign_addresses();
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{serialize_program, BASE_ADDRESS};

    #[test]
    fn minimal_function_gets_base_address() {
        let p = parse_program("func f:\ne: MOV R0, #5\n   RET\n").unwrap();
        let f = p.function("f").unwrap();
        assert_eq!(f.blocks[0].instructions[0].address, BASE_ADDRESS);
        assert_eq!(f.blocks[0].instructions[1].address, BASE_ADDRESS + 4);
        assert_eq!(f.entry, "e");
        assert_eq!(f.arity, 0);
    }

    #[test]
    fn unresolved_branch_target_is_rejected() {
        let err = parse_program("func f(1):\ne:\n    B nowhere\n").unwrap_err();
        assert!(matches!(err, Error::UnresolvedTarget { target, .. } if target == "nowhere"));
    }

    #[test]
    fn r13_is_rejected() {
        let err = parse_program("func f:\ne:\n    MOV R13, #0\n    RET\n").unwrap_err();
        assert!(matches!(err, Error::ReservedRegister { .. }));
    }

    #[test]
    fn r15_is_rejected() {
        let err = parse_program("func f:\ne:\n    MOV R0, R15\n    RET\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { .. }));
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let err = parse_program("func f:\na:\n    NOP\na:\n    RET\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateLabel { label, .. } if label == "a"));
    }

    #[test]
    fn undeclared_global_is_rejected() {
        let err = parse_program("func f:\ne:\n    LDRG R0, @x\n    RET\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { .. }));
    }

    #[test]
    fn falling_off_the_end_is_rejected() {
        let err = parse_program("func f:\ne:\n    MOV R0, #1\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { .. }));
    }

    #[test]
    fn conditional_branch_splits_blocks() {
        let src = "func f(2):\ne:\n    CMP R0, R1\n    BEQ done\n    BLT less\n    SUB R0, R0, R1\n    B e\nless:\n    SUB R1, R1, R0\n    B e\ndone:\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        let labels: Vec<&str> = f.blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, vec!["e", "e.f1", "e.f2", "less", "done"]);
        // e ends with the conditional branch pair boundary
        assert_eq!(f.blocks[0].instructions.len(), 2);
        assert!(f.blocks[0].instructions[1].is_cond_branch());
    }

    #[test]
    fn cond_pair_stays_in_one_block() {
        let src = "func f(1):\ne:\n    CMP R0, #0\n    BEQ zero\n    B other\nzero:\n    RET\nother:\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        assert_eq!(f.blocks[0].instructions.len(), 3);
    }

    #[test]
    fn mnemonic_disambiguation() {
        // BLT is a conditional branch, BLEQ a conditional call.
        let p = parse_program(
            "func g:\ne:\n    RET\nfunc f(1):\ns:\n    CMP R0, #0\n    BLT neg\n    BLEQ g\n    RET\nneg:\n    RET\n",
        )
        .unwrap();
        let f = p.function("f").unwrap();
        let b = &f.blocks[0].instructions[1];
        assert_eq!((b.opcode, b.cond), (Opcode::B, Cond::Lt));
        let c = &f.blocks[1].instructions[0];
        assert_eq!((c.opcode, c.cond), (Opcode::Bl, Cond::Eq));
    }

    #[test]
    fn functions_are_laid_out_consecutively(){
        let p = parse_program("func a:\ne:\n    NOP\n    RET\nfunc b:\ns:\n    RET\n").unwrap();
        assert_eq!(p.function("a").unwrap().base_address, BASE_ADDRESS);
        assert_eq!(p.function("b").unwrap().base_address, BASE_ADDRESS + 8);
    }

    #[test]
    fn serialize_round_trips() {
        let src = ".global seed = -7\nfunc f(2):\ne:\n    LDRG R4, @seed\n    ADD R0, R0, R4\n    CMP R0, R1\n    BGT big\n    MOV R0, #0\n    RET\nbig:\n    OUT R0\n    ADR R5, #-16\n    RET\n";
        let p = parse_program(src).unwrap();
        let round = parse_program(&serialize_program(&p)).unwrap();
        assert_eq!(p, round);
    }
}
