//! Instruction substitution: every eligible ADD/SUB/AND/ORR/EOR is
//! replaced by one of thirteen equivalent multi-instruction sequences,
//! chosen by seeded RNG. Scratch registers come from the function's
//! unused pool; `r` constants are materialized with a MOV.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scratch_pool, subseed, ObfConfig, SubstitutedSite};
use crate::ir::{Function, Instruction, Opcode, Operand, Register};

/// Variant identifiers follow the substitution table rows: 1..=4 encode
/// `a = b + c`, 5..=8 `a = b - c`, 9..=10 `a = b & c`, 11 `a = b | c`,
/// 12..=13 `a = b ^ c`.
pub(crate) fn variants_for(op: Opcode) -> &'static [u8] {
    match op {
        Opcode::Add => &[1, 2, 3, 4],
        Opcode::Sub => &[5, 6, 7, 8],
        Opcode::And => &[9, 10],
        Opcode::Orr => &[11],
        Opcode::Eor => &[12, 13],
        _ => &[],
    }
}

pub(crate) fn scratch_need(variant: u8) -> usize {
    match variant {
        1 | 5 | 6 | 9 => 1,
        2 | 3 | 4 | 7 | 8 | 11 | 12 => 2,
        10 | 13 => 3,
        _ => 0,
    }
}

/// Emits the replacement sequence for one site. The destination is only
/// ever written by the final instruction, so sequences stay correct when
/// `a` aliases `b` or `c`.
pub(crate) fn emit_variant(
    variant: u8,
    a: Register,
    b: Register,
    c: Operand,
    s: &[Register],
    k: i32,
) -> Vec<Instruction> {
    use Opcode::*;
    let rb = Operand::Reg(b);
    let kimm = Operand::Imm(k);
    let zero = Operand::Imm(0);
    let mut out = Vec::new();
    // Negation of the flexible operand: registers negate in place via
    // RSB, immediates are materialized first.
    let neg_c = |out: &mut Vec<Instruction>, dest: Register| match c {
        Operand::Reg(rc) => out.push(Instruction::alu3(Rsb, dest, rc, zero)),
        Operand::Imm(v) => {
            out.push(Instruction::mov(dest, Operand::Imm(v)));
            out.push(Instruction::alu3(Rsb, dest, dest, zero));
        }
    };
    let mat_c = |out: &mut Vec<Instruction>, dest: Register| -> Register {
        match c {
            Operand::Reg(rc) => rc,
            Operand::Imm(v) => {
                out.push(Instruction::mov(dest, Operand::Imm(v)));
                dest
            }
        }
    };
    match variant {
        // a = b - (-c)
        1 => {
            neg_c(&mut out, s[0]);
            out.push(Instruction::alu3(Sub, a, b, Operand::Reg(s[0])));
        }
        // a = -(-b + (-c))
        2 => {
            out.push(Instruction::alu3(Rsb, s[0], b, zero));
            neg_c(&mut out, s[1]);
            out.push(Instruction::alu3(Add, s[0], s[0], Operand::Reg(s[1])));
            out.push(Instruction::alu3(Rsb, a, s[0], zero));
        }
        // a = b + r; a += c; a -= r
        3 => {
            out.push(Instruction::mov(s[0], kimm));
            out.push(Instruction::alu3(Add, s[1], b, Operand::Reg(s[0])));
            out.push(Instruction::alu3(Add, s[1], s[1], c));
            out.push(Instruction::alu3(Sub, a, s[1], Operand::Reg(s[0])));
        }
        // a = b - r; a += c; a += r
        4 => {
            out.push(Instruction::mov(s[0], kimm));
            out.push(Instruction::alu3(Sub, s[1], b, Operand::Reg(s[0])));
            out.push(Instruction::alu3(Add, s[1], s[1], c));
            out.push(Instruction::alu3(Add, a, s[1], Operand::Reg(s[0])));
        }
        // a = b + (-c)
        5 => {
            neg_c(&mut out, s[0]);
            out.push(Instruction::alu3(Add, a, b, Operand::Reg(s[0])));
        }
        // a = -((-b) + c)
        6 => {
            out.push(Instruction::alu3(Rsb, s[0], b, zero));
            out.push(Instruction::alu3(Add, s[0], s[0], c));
            out.push(Instruction::alu3(Rsb, a, s[0], zero));
        }
        // a = b + r; a -= c; a -= r
        7 => {
            out.push(Instruction::mov(s[0], kimm));
            out.push(Instruction::alu3(Add, s[1], b, Operand::Reg(s[0])));
            out.push(Instruction::alu3(Sub, s[1], s[1], c));
            out.push(Instruction::alu3(Sub, a, s[1], Operand::Reg(s[0])));
        }
        // a = b - r; a -= c; a += r
        8 => {
            out.push(Instruction::mov(s[0], kimm));
            out.push(Instruction::alu3(Sub, s[1], b, Operand::Reg(s[0])));
            out.push(Instruction::alu3(Sub, s[1], s[1], c));
            out.push(Instruction::alu3(Add, a, s[1], Operand::Reg(s[0])));
        }
        // a = (b ^ !c) & b
        9 => {
            out.push(Instruction::mvn(s[0], c));
            out.push(Instruction::alu3(Eor, s[0], b, Operand::Reg(s[0])));
            out.push(Instruction::alu3(And, a, s[0], rb));
        }
        // a = !(!b | !c) & (r | !r)
        10 => {
            out.push(Instruction::mvn(s[0], rb));
            out.push(Instruction::mvn(s[1], c));
            out.push(Instruction::alu3(Orr, s[0], s[0], Operand::Reg(s[1])));
            out.push(Instruction::mvn(s[0], Operand::Reg(s[0])));
            out.push(Instruction::mov(s[1], kimm));
            out.push(Instruction::mvn(s[2], Operand::Reg(s[1])));
            out.push(Instruction::alu3(Orr, s[1], s[1], Operand::Reg(s[2])));
            out.push(Instruction::alu3(And, a, s[0], Operand::Reg(s[1])));
        }
        // a = (b & c) | (b ^ c)
        11 => {
            out.push(Instruction::alu3(And, s[0], b, c));
            out.push(Instruction::alu3(Eor, s[1], b, c));
            out.push(Instruction::alu3(Orr, a, s[0], Operand::Reg(s[1])));
        }
        // a = (!b & c) | (b & !c)
        12 => {
            out.push(Instruction::mvn(s[0], rb));
            out.push(Instruction::alu3(And, s[0], s[0], c));
            out.push(Instruction::mvn(s[1], c));
            out.push(Instruction::alu3(And, s[1], b, Operand::Reg(s[1])));
            out.push(Instruction::alu3(Orr, a, s[0], Operand::Reg(s[1])));
        }
        // a = (b ^ r) ^ (c ^ r)
        13 => {
            out.push(Instruction::mov(s[0], kimm));
            out.push(Instruction::alu3(Eor, s[1], b, Operand::Reg(s[0])));
            let rc = mat_c(&mut out, s[2]);
            out.push(Instruction::alu3(Eor, s[2], rc, Operand::Reg(s[0])));
            out.push(Instruction::alu3(Eor, a, s[1], Operand::Reg(s[2])));
        }
        _ => unreachable!("variant {variant}"),
    }
    out
}

fn eligible(ins: &Instruction) -> bool {
    matches!(
        ins.opcode,
        Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Orr | Opcode::Eor
    ) && ins.cond == crate::ir::Cond::Al
}

/// Replaces every eligible site in the function. Sites without enough
/// free scratch registers are left untouched and unrecorded.
pub fn inssub_pass(f: &Function, cfg: &ObfConfig) -> (Function, Vec<SubstitutedSite>) {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &f.name, "inssub"));
    let pool = scratch_pool(f);
    let mut out = f.clone();
    let mut sites = Vec::new();

    for block in &mut out.blocks {
        let mut instrs = Vec::with_capacity(block.instructions.len());
        for ins in &block.instructions {
            if !eligible(ins) {
                instrs.push(ins.clone());
                continue;
            }
            let applicable: Vec<u8> = variants_for(ins.opcode)
                .iter()
                .copied()
                .filter(|v| scratch_need(*v) <= pool.len())
                .collect();
            if applicable.is_empty() {
                instrs.push(ins.clone());
                continue;
            }
            let variant = applicable[rng.gen_range(0..applicable.len())];
            let k = rng.gen_range(1..=0x7FFF);
            let a = ins.dest.unwrap();
            let b = ins.src1.unwrap().as_reg().unwrap();
            let c = ins.src2.unwrap();
            let start_index = instrs.len();
            let emitted = emit_variant(variant, a, b, c, &pool, k);
            let len = emitted.len();
            instrs.extend(emitted);
            sites.push(SubstitutedSite {
                block: block.label.clone(),
                start_index,
                len,
                op: ins.opcode,
                addr_range: None,
            });
        }
        block.instructions = instrs;
    }
    out.assign_addresses();
    (out, sites)
}
