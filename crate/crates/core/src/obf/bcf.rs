//! Bogus control flow: selected blocks get an opaque-predicate guard in
//! front of them. The predicate is `y < 10 || (x*(x-1) % 2) == 0`, which
//! is always true, so the dead branch it protects can never execute.
//!
//! Each insertion produces two predicate blocks (the `y < 10` guard and
//! the `SUB/MUL/ANDS` computation, which cannot share a block because a
//! block has at most two successors) plus one dead block: a shuffled
//! clone of the host with control transfers and OUTs stripped, looping
//! back to the guard.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{has_flag_livein, scratch_pool, subseed, ObfConfig};
use crate::ir::{BasicBlock, Cond, Function, Instruction, Opcode, Operand};

#[derive(Debug, Clone, Default)]
pub struct BcfFragment {
    pub predicate_blocks: BTreeSet<String>,
    pub dead_blocks: BTreeSet<String>,
}

fn garbage_clone(host: &BasicBlock, rng: &mut ChaCha8Rng, filler: Instruction) -> Vec<Instruction> {
    let mut body: Vec<Instruction> = host
        .instructions
        .iter()
        .filter(|i| {
            !matches!(
                i.opcode,
                Opcode::B | Opcode::Ret | Opcode::Out | Opcode::Bl | Opcode::Blx
            )
        })
        .cloned()
        .collect();
    if body.is_empty() {
        body.push(filler);
    }
    body.shuffle(rng);
    body
}

/// Runs the selection sweep `bcf_loop` times over the blocks that existed
/// when the pass started; each sweep guards every selected block.
pub fn bcf_pass(f: &Function, cfg: &ObfConfig) -> (Function, BcfFragment) {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &f.name, "bcf"));
    let mut out = f.clone();
    let mut frag = BcfFragment::default();

    let pool = scratch_pool(f);
    if pool.len() < 2 {
        return (out, frag);
    }
    let (sy, sx) = (pool[0], pool[1]);
    let original: Vec<String> = f.blocks.iter().map(|b| b.label.clone()).collect();
    let mut counter = 0usize;

    for _round in 0..cfg.bcf_loop.max(1) {
        for label in &original {
            if rng.gen_range(1..=100) > cfg.bcf_prob {
                continue;
            }
            let Some(idx) = out.block_index(label) else { continue };
            if has_flag_livein(&out.blocks[idx]) {
                continue;
            }
            counter += 1;
            let guard_label = format!("{label}.bcfg{counter}");
            let pred_label = format!("{label}.bcfp{counter}");
            let dead_label = format!("{label}.bcfd{counter}");

            // Existing jumps to the host now enter through the guard; the
            // new unit itself still targets the host directly.
            for block in &mut out.blocks {
                for ins in &mut block.instructions {
                    if ins.opcode == Opcode::B && ins.target.as_deref() == Some(label) {
                        ins.target = Some(guard_label.clone());
                    }
                }
            }

            let mut guard = BasicBlock::new(&guard_label);
            guard.instructions = vec![
                Instruction::ldrg(sy, "y"),
                Instruction::cmp(sy, Operand::Imm(10)),
                Instruction::branch(Cond::Lt, label),
            ];
            let mut pred = BasicBlock::new(&pred_label);
            pred.instructions = vec![
                Instruction::ldrg(sx, "x"),
                Instruction::alu3(Opcode::Sub, sy, sx, Operand::Imm(1)),
                Instruction::alu3(Opcode::Mul, sy, sx, Operand::Reg(sy)),
                Instruction::alu3(Opcode::Ands, sy, sy, Operand::Imm(1)),
                Instruction::branch(Cond::Eq, label),
                Instruction::branch(Cond::Al, &dead_label),
            ];
            let mut dead = BasicBlock::new(&dead_label);
            let filler = Instruction::mov(sx, Operand::Imm(rng.gen_range(1..4096)));
            let idx_now = out.block_index(label).expect("host exists");
            dead.instructions = garbage_clone(&out.blocks[idx_now], &mut rng, filler);
            dead.instructions.push(Instruction::branch(Cond::Al, &guard_label));

            out.blocks.splice(idx_now..idx_now, [guard, pred, dead]);
            frag.predicate_blocks.insert(guard_label);
            frag.predicate_blocks.insert(pred_label);
            frag.dead_blocks.insert(dead_label);
        }
    }
    out.entry = out.blocks[0].label.clone();
    out.assign_addresses();
    (out, frag)
}
