//! The mini instruction set: program model, textual assembly, CFG
//! construction, DOT emission, and a concrete interpreter.
//!
//! Programs are lists of functions made of labeled basic blocks. Every
//! instruction occupies one 4-byte slot; addresses are assigned at parse
//! time starting at [`BASE_ADDRESS`] and never reused, which is what makes
//! PC-relative constants (`ADR`) meaningful to later analyses.

mod cfg;
mod interp;
mod parse;

pub use cfg::{build_cfg, emit_dot, Cfg, CfgNode, Edge, EdgeKind};
pub use interp::{interpret, interpret_with_budget, CompiledProgram, ExecResult, InterpState, StepOutcome, CALL_DEPTH_LIMIT, STEP_BUDGET};
pub use parse::parse_program;

use std::collections::BTreeMap;
use std::fmt;

use crate::{Error, Result};

/// Byte address of the first instruction of the first function.
pub const BASE_ADDRESS: u32 = 0x800;

/// A general-purpose register, `R0`..`R15`.
///
/// `R13` is reserved and rejected by the parser; `R14` is the link
/// register; `R15` (the program counter) is never named directly and is
/// only observable through `ADR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Register(pub u8);

impl Register {
    pub const ROUTING: Register = Register(12);
    pub const LINK: Register = Register(14);

    pub fn new(index: u8) -> Result<Self> {
        if index > 15 {
            return Err(Error::Syntax {
                line: 0,
                msg: format!("register index {index} out of range"),
            });
        }
        Ok(Register(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// A flexible operand: a register or a 32-bit signed immediate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    Imm(i32),
}

impl Operand {
    pub fn as_reg(self) -> Option<Register> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }

    pub fn as_imm(self) -> Option<i32> {
        match self {
            Operand::Imm(v) => Some(v),
            Operand::Reg(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "#{v}"),
        }
    }
}

/// Condition codes over the N and Z flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Cond {
    #[default]
    Al,
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl Cond {
    pub const SUFFIXES: [(&'static str, Cond); 7] = [
        ("AL", Cond::Al),
        ("EQ", Cond::Eq),
        ("NE", Cond::Ne),
        ("LT", Cond::Lt),
        ("GT", Cond::Gt),
        ("LE", Cond::Le),
        ("GE", Cond::Ge),
    ];

    /// Evaluates the condition against concrete flag values.
    pub fn holds(self, n: bool, z: bool) -> bool {
        match self {
            Cond::Al => true,
            Cond::Eq => z,
            Cond::Ne => !z,
            Cond::Lt => n,
            Cond::Ge => !n,
            Cond::Gt => !n && !z,
            Cond::Le => n || z,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Cond::Al => "",
            Cond::Eq => "EQ",
            Cond::Ne => "NE",
            Cond::Lt => "LT",
            Cond::Gt => "GT",
            Cond::Le => "LE",
            Cond::Ge => "GE",
        }
    }
}

/// Every opcode of the mini ISA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum Opcode {
    Mov,
    Mvn,
    Add,
    Sub,
    Rsb,
    Mul,
    And,
    Orr,
    Eor,
    Cmp,
    Ands,
    Subs,
    Adr,
    B,
    Bl,
    Blx,
    Ret,
    Nop,
    Out,
    Ldrg,
    Strg,
}

impl Opcode {
    pub const ALL: [Opcode; 21] = [
        Opcode::Mov,
        Opcode::Mvn,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Rsb,
        Opcode::Mul,
        Opcode::And,
        Opcode::Orr,
        Opcode::Eor,
        Opcode::Cmp,
        Opcode::Ands,
        Opcode::Subs,
        Opcode::Adr,
        Opcode::B,
        Opcode::Bl,
        Opcode::Blx,
        Opcode::Ret,
        Opcode::Nop,
        Opcode::Out,
        Opcode::Ldrg,
        Opcode::Strg,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Mov => "MOV",
            Opcode::Mvn => "MVN",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Rsb => "RSB",
            Opcode::Mul => "MUL",
            Opcode::And => "AND",
            Opcode::Orr => "ORR",
            Opcode::Eor => "EOR",
            Opcode::Cmp => "CMP",
            Opcode::Ands => "ANDS",
            Opcode::Subs => "SUBS",
            Opcode::Adr => "ADR",
            Opcode::B => "B",
            Opcode::Bl => "BL",
            Opcode::Blx => "BLX",
            Opcode::Ret => "RET",
            Opcode::Nop => "NOP",
            Opcode::Out => "OUT",
            Opcode::Ldrg => "LDRG",
            Opcode::Strg => "STRG",
        }
    }

    /// Three-operand ALU opcodes (`op Rd, Rn, op2`).
    pub fn is_alu3(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Rsb
                | Opcode::Mul
                | Opcode::And
                | Opcode::Orr
                | Opcode::Eor
                | Opcode::Ands
                | Opcode::Subs
        )
    }

    /// Opcodes that update the N/Z flags.
    pub fn sets_flags(self) -> bool {
        matches!(self, Opcode::Cmp | Opcode::Ands | Opcode::Subs)
    }

    pub fn is_call(self) -> bool {
        matches!(self, Opcode::Bl | Opcode::Blx)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// One 4-byte instruction slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub address: u32,
    pub opcode: Opcode,
    pub cond: Cond,
    pub dest: Option<Register>,
    pub src1: Option<Operand>,
    pub src2: Option<Operand>,
    /// Branch or call target: a block label for `B`, a function name for
    /// `BL`/`BLX`.
    pub target: Option<String>,
    /// Global name for `LDRG`/`STRG`.
    pub global: Option<String>,
}

impl Instruction {
    pub fn new(opcode: Opcode) -> Self {
        Instruction {
            address: 0,
            opcode,
            cond: Cond::Al,
            dest: None,
            src1: None,
            src2: None,
            target: None,
            global: None,
        }
    }

    pub fn nop() -> Self {
        Instruction::new(Opcode::Nop)
    }

    pub fn mov(dest: Register, src: Operand) -> Self {
        Instruction {
            dest: Some(dest),
            src1: Some(src),
            ..Instruction::new(Opcode::Mov)
        }
    }

    pub fn mvn(dest: Register, src: Operand) -> Self {
        Instruction {
            dest: Some(dest),
            src1: Some(src),
            ..Instruction::new(Opcode::Mvn)
        }
    }

    pub fn alu3(opcode: Opcode, dest: Register, src1: Register, src2: Operand) -> Self {
        Instruction {
            dest: Some(dest),
            src1: Some(Operand::Reg(src1)),
            src2: Some(src2),
            ..Instruction::new(opcode)
        }
    }

    pub fn cmp(src1: Register, src2: Operand) -> Self {
        Instruction {
            src1: Some(Operand::Reg(src1)),
            src2: Some(src2),
            ..Instruction::new(Opcode::Cmp)
        }
    }

    pub fn adr(dest: Register, offset: i32) -> Self {
        Instruction {
            dest: Some(dest),
            src1: Some(Operand::Imm(offset)),
            ..Instruction::new(Opcode::Adr)
        }
    }

    pub fn branch(cond: Cond, target: &str) -> Self {
        Instruction {
            cond,
            target: Some(target.to_string()),
            ..Instruction::new(Opcode::B)
        }
    }

    pub fn ldrg(dest: Register, global: &str) -> Self {
        Instruction {
            dest: Some(dest),
            global: Some(global.to_string()),
            ..Instruction::new(Opcode::Ldrg)
        }
    }

    pub fn with_cond(mut self, cond: Cond) -> Self {
        self.cond = cond;
        self
    }

    /// Registers read by this instruction.
    pub fn reads(&self) -> Vec<Register> {
        let mut rs = Vec::new();
        match self.opcode {
            Opcode::Strg => {
                if let Some(Operand::Reg(r)) = self.src1 {
                    rs.push(r);
                }
            }
            _ => {
                if !matches!(self.opcode, Opcode::Adr) {
                    if let Some(Operand::Reg(r)) = self.src1 {
                        rs.push(r);
                    }
                }
                if let Some(Operand::Reg(r)) = self.src2 {
                    rs.push(r);
                }
            }
        }
        rs
    }

    /// Register written by this instruction, if any.
    pub fn writes(&self) -> Option<Register> {
        match self.opcode {
            Opcode::Cmp | Opcode::B | Opcode::Ret | Opcode::Nop | Opcode::Out | Opcode::Strg => None,
            Opcode::Bl | Opcode::Blx => Some(Register::LINK),
            _ => self.dest,
        }
    }

    /// True for `B` with a non-AL condition.
    pub fn is_cond_branch(&self) -> bool {
        self.opcode == Opcode::B && self.cond != Cond::Al
    }

    pub fn is_uncond_branch(&self) -> bool {
        self.opcode == Opcode::B && self.cond == Cond::Al
    }

    /// Renders the instruction without its address, as parsed.
    pub fn render(&self) -> String {
        let mn = format!("{}{}", self.opcode.mnemonic(), self.cond.suffix());
        let mut parts: Vec<String> = Vec::new();
        match self.opcode {
            Opcode::Ldrg => {
                parts.push(self.dest.unwrap().to_string());
                parts.push(format!("@{}", self.global.as_deref().unwrap_or("?")));
            }
            Opcode::Strg => {
                parts.push(self.src1.unwrap().to_string());
                parts.push(format!("@{}", self.global.as_deref().unwrap_or("?")));
            }
            Opcode::B | Opcode::Bl | Opcode::Blx => {
                parts.push(self.target.clone().unwrap_or_default());
            }
            _ => {
                if let Some(d) = self.dest {
                    parts.push(d.to_string());
                }
                if let Some(s) = self.src1 {
                    parts.push(s.to_string());
                }
                if let Some(s) = self.src2 {
                    parts.push(s.to_string());
                }
            }
        }
        if parts.is_empty() {
            mn
        } else {
            format!("{} {}", mn, parts.join(", "))
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A labeled straight-line run of instructions.
///
/// Only the final instruction may transfer control (`B`, conditional `B`,
/// or `RET`); a block without a trailing branch falls through to the next
/// block in listing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    pub fn new(label: &str) -> Self {
        BasicBlock {
            label: label.to_string(),
            instructions: Vec::new(),
        }
    }

    pub fn terminator(&self) -> Option<&Instruction> {
        self.instructions.last().filter(|i| {
            matches!(i.opcode, Opcode::B | Opcode::Ret)
        })
    }
}

/// A function: inputs arrive in `R0..R3`, the result is `R0` at the
/// top-level `RET`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub arity: usize,
    pub blocks: Vec<BasicBlock>,
    pub entry: String,
    pub base_address: u32,
}

impl Function {
    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }

    /// Registers referenced anywhere in the function body.
    pub fn used_registers(&self) -> std::collections::BTreeSet<Register> {
        let mut used = std::collections::BTreeSet::new();
        for ins in self.instructions() {
            if let Some(d) = ins.dest {
                used.insert(d);
            }
            for r in ins.reads() {
                used.insert(r);
            }
        }
        used
    }

    /// Reassigns instruction addresses: consecutive 4-byte slots from
    /// `base_address` in listing order.
    pub fn assign_addresses(&mut self) {
        let mut addr = self.base_address;
        for block in &mut self.blocks {
            for ins in &mut block.instructions {
                ins.address = addr;
                addr = addr.wrapping_add(4);
            }
        }
    }

    /// Address one past the last instruction slot.
    pub fn end_address(&self) -> u32 {
        let n: u32 = self.blocks.iter().map(|b| b.instructions.len() as u32).sum();
        self.base_address.wrapping_add(4 * n)
    }
}

/// A whole program: named functions plus named 32-bit globals.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub functions: BTreeMap<String, Function>,
    pub globals: BTreeMap<String, i32>,
    /// Function names in source order, used for deterministic layout.
    pub order: Vec<String>,
}

impl Program {
    pub fn function(&self, name: &str) -> Result<&Function> {
        self.functions
            .get(name)
            .ok_or_else(|| Error::NoSuchFunction(name.to_string()))
    }

    /// Relayouts every function: consecutive 4-byte slots, first function
    /// at [`BASE_ADDRESS`], later functions packed directly after.
    pub fn assign_addresses(&mut self) {
        let mut base = BASE_ADDRESS;
        for name in self.order.clone() {
            let f = self.functions.get_mut(&name).expect("ordered function exists");
            f.base_address = base;
            f.assign_addresses();
            base = f.end_address();
        }
    }
}

/// Renders a program back to its textual assembly form.
///
/// `parse_program(serialize_program(p))` is structurally identical to `p`.
pub fn serialize_program(p: &Program) -> String {
    let mut out = String::new();
    for (name, value) in &p.globals {
        out.push_str(&format!(".global {name} = {value}\n"));
    }
    if !p.globals.is_empty() {
        out.push('\n');
    }
    for name in &p.order {
        let f = &p.functions[name];
        out.push_str(&format!("func {}({}):\n", f.name, f.arity));
        for block in &f.blocks {
            out.push_str(&format!("{}:\n", block.label));
            for ins in &block.instructions {
                out.push_str(&format!("    {}\n", ins.render()));
            }
        }
        out.push('\n');
    }
    out
}
