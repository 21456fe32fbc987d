//! Opaque-predicate recognition and dead-branch removal.
//!
//! The predicate family is `y < 10 || (x*(x-1) % 2) == 0`: a `CMP _, #10`
//! guard plus a `SUB/MUL/ANDS` computation whose result is always zero.
//! Blocks carrying either piece are predicate blocks; taint on the
//! computation's result register also flags later blocks that branch on
//! a zero/one comparison of it. Resolution forces each predicate block's
//! choice to the side the tautology selects, in both the plain
//! conditional-branch form and the flattened conditional-move form.

use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{
    build_cfg, BasicBlock, Cfg, Cond, Function, Instruction, Opcode, Operand, Register,
};

/// Matches the `SUB t, x, #1; MUL u, x, t; ANDS v, u, #1` chain inside a
/// block, with unrelated instructions allowed in between as long as they
/// do not disturb the threaded registers. Returns the three instruction
/// indices and the result register.
pub fn find_opaque_chain(block: &BasicBlock) -> Option<(Vec<usize>, Register)> {
    let instrs = &block.instructions;
    for i in 0..instrs.len() {
        let sub = &instrs[i];
        if sub.opcode != Opcode::Sub || sub.src2 != Some(Operand::Imm(1)) || sub.cond != Cond::Al {
            continue;
        }
        let (Some(d1), Some(x)) = (sub.dest, sub.src1.and_then(Operand::as_reg)) else {
            continue;
        };
        let mut alive = true;
        for j in i + 1..instrs.len() {
            if !alive {
                break;
            }
            let mul = &instrs[j];
            if mul.opcode == Opcode::Mul && mul.cond == Cond::Al {
                let ops = (mul.src1.and_then(Operand::as_reg), mul.src2.and_then(Operand::as_reg));
                let threads = matches!(ops, (Some(p), Some(q)) if (p == x && q == d1) || (p == d1 && q == x));
                if threads {
                    let d2 = mul.dest.unwrap();
                    let mut alive2 = true;
                    for (k, ands) in instrs.iter().enumerate().skip(j + 1) {
                        if !alive2 {
                            break;
                        }
                        if ands.opcode == Opcode::Ands
                            && ands.cond == Cond::Al
                            && ands.src1 == Some(Operand::Reg(d2))
                            && ands.src2 == Some(Operand::Imm(1))
                        {
                            return Some((vec![i, j, k], ands.dest.unwrap()));
                        }
                        if ands.writes() == Some(d2) {
                            alive2 = false;
                        }
                    }
                }
            }
            if let Some(w) = mul.writes() {
                if w == d1 || w == x {
                    alive = false;
                }
            }
        }
    }
    None
}

/// How a predicate block's choice is forced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Forced {
    /// Plain conditional branch: always go to this label.
    Branch(String),
    /// Flattened conditional-move routing: the conditional MOV wins.
    CaseTrue,
    /// Flattened conditional-move routing: the base MOV wins.
    CaseFalse,
}

/// Predicate blocks with their forced choices and the taint that found
/// them.
#[derive(Debug, Clone, Default)]
pub struct PredicateSet {
    pub predicate_blocks: BTreeSet<String>,
    pub forced: BTreeMap<String, Forced>,
    /// Chain result register per computation block (always zero at
    /// runtime).
    pub taint: BTreeMap<String, Register>,
}

/// Terminal conditional choice of a block, in either encoding.
enum Choice {
    /// `B<cc> t` optionally followed by `B e`; false target resolved by
    /// the caller when it is a fallthrough.
    Branch { cond: Cond, t: String, f: Option<String> },
    /// `MOV rr, #_; MOV<cc> rr, #_; B _` tail at the given indices.
    MovPair { cond: Cond, base: usize, conditional: usize },
}

fn terminal_choice(block: &BasicBlock) -> Option<Choice> {
    let n = block.instructions.len();
    let last = block.instructions.last()?;
    if last.is_cond_branch() {
        return Some(Choice::Branch {
            cond: last.cond,
            t: last.target.clone().unwrap(),
            f: None,
        });
    }
    if last.is_uncond_branch() && n >= 2 {
        let prev = &block.instructions[n - 2];
        if prev.is_cond_branch() {
            return Some(Choice::Branch {
                cond: prev.cond,
                t: prev.target.clone().unwrap(),
                f: last.target.clone(),
            });
        }
        if n >= 3 {
            let cmov = &block.instructions[n - 2];
            let base = &block.instructions[n - 3];
            let is_pair = cmov.opcode == Opcode::Mov
                && cmov.cond != Cond::Al
                && base.opcode == Opcode::Mov
                && base.cond == Cond::Al
                && base.dest == cmov.dest
                && base.src1.and_then(Operand::as_imm).is_some()
                && cmov.src1.and_then(Operand::as_imm).is_some();
            if is_pair {
                return Some(Choice::MovPair {
                    cond: cmov.cond,
                    base: n - 3,
                    conditional: n - 2,
                });
            }
        }
    }
    None
}

fn has_cmp_ten(block: &BasicBlock) -> bool {
    block
        .instructions
        .iter()
        .any(|i| i.opcode == Opcode::Cmp && i.src2 == Some(Operand::Imm(10)))
}

/// Finds every predicate block and decides its forced choice.
pub fn find_predicate_blocks(f: &Function) -> PredicateSet {
    let cfg = build_cfg(f);
    let mut ps = PredicateSet::default();

    // Computation blocks: the chain result is always zero, so evaluate
    // the choice under flags N=0, Z=1.
    for block in &f.blocks {
        if let Some((_, result)) = find_opaque_chain(block) {
            ps.predicate_blocks.insert(block.label.clone());
            ps.taint.insert(block.label.clone(), result);
            if let Some(choice) = terminal_choice(block) {
                let forced = match choice {
                    Choice::Branch { cond, t, f: fl } => {
                        if cond.holds(false, true) {
                            Some(Forced::Branch(t))
                        } else {
                            fl.or_else(|| fallthrough_of(&cfg, &block.label)).map(Forced::Branch)
                        }
                    }
                    Choice::MovPair { cond, .. } => Some(if cond.holds(false, true) {
                        Forced::CaseTrue
                    } else {
                        Forced::CaseFalse
                    }),
                };
                if let Some(forced) = forced {
                    ps.forced.insert(block.label.clone(), forced);
                }
            }
        }
    }

    // Guard blocks: a #10 compare feeding a conditional choice. The
    // forced side is the one that reaches the computation, which is how
    // the analysis keeps the rest of the predicate observable.
    for block in &f.blocks {
        if ps.predicate_blocks.contains(&block.label) || !has_cmp_ten(block) {
            continue;
        }
        let Some(choice) = terminal_choice(block) else { continue };
        let forced = match choice {
            Choice::Branch { t, f: fl, .. } => {
                let fl = fl.or_else(|| fallthrough_of(&cfg, &block.label));
                let t_chain = f.block(&t).and_then(find_opaque_chain).is_some();
                let f_chain = fl
                    .as_deref()
                    .and_then(|l| f.block(l))
                    .and_then(find_opaque_chain)
                    .is_some();
                if t_chain {
                    Some(Forced::Branch(t))
                } else if f_chain || fl.is_some() {
                    fl.map(Forced::Branch)
                } else {
                    None
                }
            }
            // Flattened guards cannot be followed statically; keep the
            // fall-into-the-computation polarity, the untaken side.
            Choice::MovPair { .. } => Some(Forced::CaseFalse),
        };
        if let Some(forced) = forced {
            ps.predicate_blocks.insert(block.label.clone());
            ps.forced.insert(block.label.clone(), forced);
        }
    }

    // Propagation: walk forward from each computation block; any block
    // branching on the still-zero result register against #0 or #1 is a
    // predicate block too. Writes to the register free the taint.
    let computation: Vec<(String, Register)> =
        ps.taint.iter().map(|(l, r)| (l.clone(), *r)).collect();
    for (start, reg) in computation {
        let mut stack: Vec<String> = cfg.successors(&start).iter().map(|e| e.to.clone()).collect();
        let mut visited: BTreeSet<String> = BTreeSet::new();
        while let Some(label) = stack.pop() {
            if !visited.insert(label.clone()) {
                continue;
            }
            let Some(block) = f.block(&label) else { continue };
            let mut freed = false;
            let mut cmp_imm: Option<i32> = None;
            for ins in &block.instructions {
                if ins.opcode == Opcode::Cmp
                    && ins.src1 == Some(Operand::Reg(reg))
                    && matches!(ins.src2.and_then(Operand::as_imm), Some(0) | Some(1))
                {
                    cmp_imm = ins.src2.and_then(Operand::as_imm);
                }
                if ins.writes() == Some(reg) || ins.opcode.is_call() {
                    freed = true;
                    break;
                }
            }
            if let (Some(imm), Some(Choice::Branch { cond, t, f: fl })) =
                (cmp_imm, terminal_choice(block))
            {
                // result register is zero: CMP 0, #imm
                let (n, z) = (0 < imm, 0 == imm);
                let forced = if cond.holds(n, z) {
                    Some(Forced::Branch(t))
                } else {
                    fl.or_else(|| fallthrough_of(&cfg, &label)).map(Forced::Branch)
                };
                if let Some(forced) = forced {
                    ps.predicate_blocks.insert(label.clone());
                    ps.forced.insert(label.clone(), forced);
                }
            }
            if !freed {
                for e in cfg.successors(&label) {
                    stack.push(e.to.clone());
                }
            }
        }
    }
    ps
}

fn fallthrough_of(cfg: &Cfg, label: &str) -> Option<String> {
    cfg.successors(label)
        .into_iter()
        .find(|e| matches!(e.kind, crate::ir::EdgeKind::False | crate::ir::EdgeKind::Fallthrough))
        .map(|e| e.to.clone())
}

/// Rewrites each predicate block's choice to its forced side, NOPs the
/// predicate computation when nothing outside reads it, and leaves
/// ambiguous blocks untouched (returned for reporting). Addresses never
/// move.
pub fn resolve_opaque_branches(f: &Function, ps: &PredicateSet) -> (Function, Vec<String>) {
    let mut out = f.clone();
    let mut untouched = Vec::new();

    for label in &ps.predicate_blocks {
        let Some(forced) = ps.forced.get(label) else {
            untouched.push(label.clone());
            continue;
        };
        let Some(idx) = out.block_index(label) else { continue };
        let choice = terminal_choice(&out.blocks[idx]);
        let block = &mut out.blocks[idx];
        let n = block.instructions.len();
        match (choice, forced) {
            (Some(Choice::Branch { t, f: fl, .. }), Forced::Branch(target)) => {
                let nop_at = |block: &mut BasicBlock, i: usize| {
                    let addr = block.instructions[i].address;
                    block.instructions[i] = Instruction::nop();
                    block.instructions[i].address = addr;
                };
                if *target == t {
                    if fl.is_some() {
                        // [B<cc> t; B e] -> [NOP; B t]
                        nop_at(block, n - 2);
                        let addr = block.instructions[n - 1].address;
                        block.instructions[n - 1] = Instruction::branch(Cond::Al, target);
                        block.instructions[n - 1].address = addr;
                    } else {
                        // [B<cc> t] -> [B t]
                        let addr = block.instructions[n - 1].address;
                        block.instructions[n - 1] = Instruction::branch(Cond::Al, target);
                        block.instructions[n - 1].address = addr;
                    }
                } else {
                    // force the false side: drop the conditional branch
                    let i = if fl.is_some() { n - 2 } else { n - 1 };
                    nop_at(block, i);
                }
            }
            (Some(Choice::MovPair { base, conditional, .. }), forced) => {
                let nop_with_addr = |ins: &mut Instruction| {
                    let addr = ins.address;
                    *ins = Instruction::nop();
                    ins.address = addr;
                };
                match forced {
                    Forced::CaseFalse => nop_with_addr(&mut block.instructions[conditional]),
                    Forced::CaseTrue => {
                        let value = block.instructions[conditional].src1.unwrap();
                        let dest = block.instructions[conditional].dest.unwrap();
                        nop_with_addr(&mut block.instructions[base]);
                        let addr = block.instructions[conditional].address;
                        block.instructions[conditional] = Instruction::mov(dest, value);
                        block.instructions[conditional].address = addr;
                    }
                    Forced::Branch(_) => untouched.push(label.clone()),
                }
            }
            _ => untouched.push(label.clone()),
        }
    }

    // Clean up predicate computations whose values no longer matter:
    // chain instructions, the #10 compare, and the loads feeding them.
    // The candidate set spans the whole function at once, because the
    // obfuscator reuses the same scratch registers across units and the
    // only cross-unit readers are other removable candidates.
    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (bi, b) in out.blocks.iter().enumerate() {
        if !ps.predicate_blocks.contains(&b.label) {
            continue;
        }
        let mut idxs: BTreeSet<usize> = BTreeSet::new();
        if let Some((chain, _)) = find_opaque_chain(b) {
            idxs.extend(chain);
        }
        for (i, ins) in b.instructions.iter().enumerate() {
            if ins.opcode == Opcode::Cmp && ins.src2 == Some(Operand::Imm(10)) {
                idxs.insert(i);
            }
        }
        let feeds: BTreeSet<Register> = idxs
            .iter()
            .flat_map(|&i| b.instructions[i].reads())
            .collect();
        for (i, ins) in b.instructions.iter().enumerate() {
            if ins.opcode == Opcode::Ldrg && ins.dest.is_some_and(|d| feeds.contains(&d)) {
                idxs.insert(i);
            }
        }
        candidates.extend(idxs.into_iter().map(|i| (bi, i)));
    }

    let removable: Vec<(usize, usize)> = candidates
        .iter()
        .copied()
        .filter(|&(bi, i)| {
            let ins = &out.blocks[bi].instructions[i];
            let Some(w) = ins.writes() else {
                return ins.opcode == Opcode::Cmp; // flags only
            };
            // no reader of the defined register outside the cleanup set
            !out.blocks.iter().enumerate().any(|(bj, b)| {
                b.instructions.iter().enumerate().any(|(ij, other)| {
                    !candidates.contains(&(bj, ij)) && other.reads().contains(&w)
                })
            })
        })
        .collect();
    for (bi, i) in removable {
        let block = &mut out.blocks[bi];
        let ins = &block.instructions[i];
        // Flag writers stay unless no conditional instruction follows
        // them in the block.
        if ins.opcode.sets_flags() {
            let later_cond = block.instructions[i + 1..]
                .iter()
                .any(|x| x.cond != Cond::Al);
            if later_cond {
                continue;
            }
        }
        let addr = block.instructions[i].address;
        block.instructions[i] = Instruction::nop();
        block.instructions[i].address = addr;
    }

    (out, untouched)
}

/// Drops every node unreachable from the entry.
pub fn remove_dead_branches(g: &Cfg) -> Cfg {
    let reachable = g.reachable();
    let dead: BTreeSet<String> = g
        .nodes
        .iter()
        .map(|n| n.label.clone())
        .filter(|l| !reachable.contains(l))
        .collect();
    let mut out = g.clone();
    out.remove_nodes(&dead);
    out
}

/// Match, resolve, and prune in one step. Returns the rewritten function
/// (unreachable blocks removed), the predicate set, and the removed
/// labels.
pub fn deobfuscate_bcf(f: &Function) -> (Function, PredicateSet, BTreeSet<String>) {
    let ps = find_predicate_blocks(f);
    let (resolved, _untouched) = resolve_opaque_branches(f, &ps);
    let reachable = build_cfg(&resolved).reachable();
    let removed: BTreeSet<String> = resolved
        .blocks
        .iter()
        .map(|b| b.label.clone())
        .filter(|l| !reachable.contains(l))
        .collect();
    let mut pruned = resolved;
    pruned.blocks.retain(|b| reachable.contains(&b.label));
    pruned.entry = pruned.blocks[0].label.clone();
    pruned.assign_addresses();
    (pruned, ps, removed)
}
