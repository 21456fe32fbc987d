//! Control-flow flattening.
//!
//! The rebuilt function is a prologue that seeds the routing register
//! R12, an if-else ladder of three-instruction dispatchers
//! (`ADR rt, #a; CMP R12, rt; BEQ case`), a self-looping trap behind the
//! last dispatcher, and the original blocks rewritten to route through
//! R12: one successor becomes `MOV R12, #case; B pd`, two successors
//! become `MOV R12, #case_false; MOV<cond> R12, #case_true; B pd`.
//!
//! Case values obey `value = adr_address + 8 + alpha` with alpha drawn
//! from [-4096, 4096]; they are pairwise distinct and never collide with
//! an immediate already present in the function, so the later taint rule
//! over routing constants cannot misfire.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{has_flag_livein, scratch_pool, subseed, ObfConfig};
use crate::ir::{build_cfg, BasicBlock, Cfg, Cond, Function, Instruction, Opcode, Operand, Register};
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct CffFragment {
    /// Original-block label -> routing value.
    pub case_values: BTreeMap<String, u32>,
    /// CFG after splitting, before flattening.
    pub original_cfg: Option<Cfg>,
}

/// Resolved terminator of a block, independent of listing order.
#[derive(Debug, Clone)]
enum Term {
    Ret,
    /// Unconditional successor (explicit branch or fallthrough).
    One(String),
    /// Conditional: `cond` true -> `t`, false -> `f`.
    Two { cond: Cond, t: String, f: String },
}

/// Splits off the terminator instruction group and resolves its targets.
fn resolve_term(block: &BasicBlock, next: Option<&str>) -> (usize, Term) {
    let n = block.instructions.len();
    let last = block.instructions.last();
    let prev = n.checked_sub(2).and_then(|k| block.instructions.get(k));
    match last {
        Some(i) if i.opcode == Opcode::Ret => (n - 1, Term::Ret),
        Some(i) if i.is_uncond_branch() => match prev {
            Some(p) if p.is_cond_branch() => (
                n - 2,
                Term::Two {
                    cond: p.cond,
                    t: p.target.clone().unwrap(),
                    f: i.target.clone().unwrap(),
                },
            ),
            _ => (n - 1, Term::One(i.target.clone().unwrap())),
        },
        Some(i) if i.is_cond_branch() => (
            n - 1,
            Term::Two {
                cond: i.cond,
                t: i.target.clone().unwrap(),
                f: next.expect("validated: no fall off the end").to_string(),
            },
        ),
        _ => (n, Term::One(next.expect("validated: no fall off the end").to_string())),
    }
}

/// Interior points where a block may be split without separating a flag
/// producer from its consumers or cutting a protected range.
fn legal_split_points(
    block: &BasicBlock,
    body_len: usize,
    protected: &[Range<usize>],
) -> Vec<usize> {
    let mut points = Vec::new();
    'cand: for p in 1..body_len {
        for r in protected {
            if p > r.start && p < r.end {
                continue 'cand;
            }
        }
        let mut setter_seen = false;
        for ins in &block.instructions[p..] {
            if ins.cond != Cond::Al && !setter_seen {
                continue 'cand;
            }
            if ins.opcode.sets_flags() {
                setter_seen = true;
            }
            if ins.opcode.is_call() {
                setter_seen = false;
            }
        }
        points.push(p);
    }
    points
}

fn unique_label(base: &str, taken: &BTreeSet<String>) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    let mut i = 1;
    loop {
        let cand = format!("{base}_{i}");
        if !taken.contains(&cand) {
            return cand;
        }
        i += 1;
    }
}

/// Flattens a function. `machinery` names blocks that must not be split
/// (predicate and dead blocks of an earlier pass); `protected` gives
/// per-block instruction ranges that must stay contiguous.
pub fn cff_pass(
    f: &Function,
    cfg: &ObfConfig,
    machinery: &BTreeSet<String>,
    protected: &HashMap<String, Vec<Range<usize>>>,
) -> Result<(Function, CffFragment)> {
    let obf_err = |msg: String| Error::Obfuscation {
        fn_name: f.name.clone(),
        msg,
    };
    if f.blocks.len() < 2 {
        return Err(obf_err("flattening needs at least two blocks".into()));
    }
    let non_return = f
        .blocks
        .iter()
        .filter(|b| !b.instructions.last().is_some_and(|i| i.opcode == Opcode::Ret))
        .count();
    if non_return < 2 {
        // Every non-return block branches back to the pre-dispatcher;
        // fewer than two cannot push its in-degree past two.
        return Err(obf_err("flattening needs at least two non-return blocks".into()));
    }
    let used = f.used_registers();
    if used.contains(&Register::ROUTING) {
        return Err(obf_err("R12 is in use; it is needed as the routing register".into()));
    }
    for block in &f.blocks {
        if has_flag_livein(block) {
            return Err(obf_err(format!(
                "block `{}` reads flags it does not set; dispatching would clobber them",
                block.label
            )));
        }
    }
    let pool = scratch_pool(f);
    let rt = *pool.first().ok_or_else(|| obf_err("no free scratch register for dispatch compares".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &f.name, "cff"));

    // Resolve terminators, then split.
    let mut labels: BTreeSet<String> = f.blocks.iter().map(|b| b.label.clone()).collect();
    let mut pieces: Vec<(BasicBlock, Term)> = Vec::new();
    for (i, block) in f.blocks.iter().enumerate() {
        let next = f.blocks.get(i + 1).map(|b| b.label.as_str());
        let (body_len, term) = resolve_term(block, next);
        let mut cuts: Vec<usize> = Vec::new();
        if cfg.split_num > 0 && !machinery.contains(&block.label) {
            let ranges = protected.get(&block.label).cloned().unwrap_or_default();
            let mut candidates = legal_split_points(block, body_len, &ranges);
            candidates.shuffle(&mut rng);
            cuts = candidates
                .into_iter()
                .take(cfg.split_num as usize)
                .collect();
            cuts.sort_unstable();
        }
        let mut bounds = vec![0usize];
        bounds.extend(cuts);
        bounds.push(body_len);
        let piece_count = bounds.len() - 1;
        let mut piece_labels = vec![block.label.clone()];
        for k in 1..piece_count {
            let lbl = unique_label(&format!("{}.s{k}", block.label), &labels);
            labels.insert(lbl.clone());
            piece_labels.push(lbl);
        }
        for k in 0..piece_count {
            let mut piece = BasicBlock::new(&piece_labels[k]);
            piece.instructions = block.instructions[bounds[k]..bounds[k + 1]].to_vec();
            let term = if k + 1 < piece_count {
                Term::One(piece_labels[k + 1].clone())
            } else {
                match &term {
                    Term::Ret => {
                        piece.instructions.push(block.instructions[body_len].clone());
                        Term::Ret
                    }
                    t => t.clone(),
                }
            };
            pieces.push((piece, term));
        }
    }

    // The pre-flattening CFG is the ground truth the recovery is judged
    // against. Materialize terminators so build_cfg sees real blocks.
    let split_fn = {
        let mut blocks = Vec::new();
        for (piece, term) in &pieces {
            let mut b = piece.clone();
            match term {
                Term::Ret => {}
                Term::One(t) => b.instructions.push(Instruction::branch(Cond::Al, t)),
                Term::Two { cond, t, f } => {
                    b.instructions.push(Instruction::branch(*cond, t));
                    b.instructions.push(Instruction::branch(Cond::Al, f));
                }
            }
            blocks.push(b);
        }
        let mut sf = Function {
            name: f.name.clone(),
            arity: f.arity,
            blocks,
            entry: f.entry.clone(),
            base_address: f.base_address,
        };
        sf.assign_addresses();
        sf
    };
    let original_cfg = build_cfg(&split_fn);

    // Immediates already present must never become case values.
    let mut forbidden: BTreeSet<u32> = BTreeSet::new();
    for ins in split_fn.instructions() {
        for op in [ins.src1, ins.src2].into_iter().flatten() {
            if let Operand::Imm(v) = op {
                forbidden.insert(v as u32);
            }
        }
    }

    let pro_label = unique_label("cff_pro", &labels);
    let pd_label = unique_label("cff_pd", &labels);
    let trap_label = unique_label("cff_trap", &labels);

    // Rewrite case-block tails. Case values are not known yet, so the MOV
    // immediates are patched afterwards.
    #[derive(Debug)]
    struct Pending {
        block_idx: usize,
        instr_idx: usize,
        target: String,
    }
    let mut case_blocks: Vec<BasicBlock> = Vec::new();
    let mut pendings: Vec<Pending> = Vec::new();
    for (piece, term) in &pieces {
        let mut b = piece.clone();
        match term {
            Term::Ret => {}
            Term::One(t) => {
                pendings.push(Pending {
                    block_idx: case_blocks.len(),
                    instr_idx: b.instructions.len(),
                    target: t.clone(),
                });
                b.instructions.push(Instruction::mov(Register::ROUTING, Operand::Imm(0)));
                b.instructions.push(Instruction::branch(Cond::Al, &pd_label));
            }
            Term::Two { cond, t, f } => {
                pendings.push(Pending {
                    block_idx: case_blocks.len(),
                    instr_idx: b.instructions.len(),
                    target: f.clone(),
                });
                b.instructions.push(Instruction::mov(Register::ROUTING, Operand::Imm(0)));
                pendings.push(Pending {
                    block_idx: case_blocks.len(),
                    instr_idx: b.instructions.len(),
                    target: t.clone(),
                });
                b.instructions
                    .push(Instruction::mov(Register::ROUTING, Operand::Imm(0)).with_cond(*cond));
                b.instructions.push(Instruction::branch(Cond::Al, &pd_label));
            }
        }
        case_blocks.push(b);
    }

    // Case order and dispatcher order are both shuffled.
    let mut case_order: Vec<usize> = (0..case_blocks.len()).collect();
    case_order.shuffle(&mut rng);

    // The first dispatcher is the jump-back target of every case block;
    // that in-degree is what makes it the pre-dispatcher.
    let mut dispatchers: Vec<BasicBlock> = Vec::new();
    for (i, &case_idx) in case_order.iter().enumerate() {
        let dl = if i == 0 {
            pd_label.clone()
        } else {
            unique_label(&format!("cff_d{i}"), &labels)
        };
        let mut d = BasicBlock::new(&dl);
        d.instructions = vec![
            Instruction::adr(rt, 0),
            Instruction::cmp(Register::ROUTING, Operand::Reg(rt)),
            Instruction::branch(Cond::Eq, &case_blocks[case_idx].label),
        ];
        dispatchers.push(d);
    }

    let mut prologue = BasicBlock::new(&pro_label);
    pendings.push(Pending {
        block_idx: usize::MAX, // the prologue, patched specially below
        instr_idx: 0,
        target: f.entry.clone(),
    });
    prologue
        .instructions
        .push(Instruction::mov(Register::ROUTING, Operand::Imm(0)));

    let mut trap = BasicBlock::new(&trap_label);
    trap.instructions.push(Instruction::branch(Cond::Al, &trap_label));

    let mut out = Function {
        name: f.name.clone(),
        arity: f.arity,
        blocks: Vec::new(),
        entry: pro_label.clone(),
        base_address: f.base_address,
    };
    out.blocks.push(prologue);
    out.blocks.extend(dispatchers);
    out.blocks.push(trap);
    for &i in &case_order {
        out.blocks.push(case_blocks[i].clone());
    }
    out.assign_addresses();

    // Draw case values per dispatcher with final addresses in hand.
    let mut case_values: BTreeMap<String, u32> = BTreeMap::new();
    let mut taken: BTreeSet<u32> = BTreeSet::new();
    for (i, &case_idx) in case_order.iter().enumerate() {
        let d = &mut out.blocks[1 + i];
        let adr_addr = d.instructions[0].address;
        let value = loop {
            let alpha: i32 = rng.gen_range(-4096..=4096);
            let v = adr_addr.wrapping_add(8).wrapping_add(alpha as u32);
            if !taken.contains(&v) && !forbidden.contains(&v) {
                d.instructions[0].src1 = Some(Operand::Imm(alpha));
                break v;
            }
        };
        taken.insert(value);
        case_values.insert(case_blocks[case_idx].label.clone(), value);
    }

    // Patch the routing MOV immediates.
    let case_start = 1 + case_order.len() + 1; // prologue + dispatchers + trap
    let mut position_of: HashMap<usize, usize> = HashMap::new();
    for (pos, &i) in case_order.iter().enumerate() {
        position_of.insert(i, case_start + pos);
    }
    for p in pendings {
        let value = case_values[&p.target] as i32;
        if p.block_idx == usize::MAX {
            out.blocks[0].instructions[0].src1 = Some(Operand::Imm(value));
        } else {
            let b = position_of[&p.block_idx];
            out.blocks[b].instructions[p.instr_idx].src1 = Some(Operand::Imm(value));
        }
    }
    out.assign_addresses();

    Ok((
        out,
        CffFragment {
            case_values,
            original_cfg: Some(original_cfg),
        },
    ))
}
