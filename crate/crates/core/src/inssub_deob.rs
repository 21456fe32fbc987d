//! Recognizes instruction-substitution sequences and rewrites them back
//! to single instructions, guided by register taint.
//!
//! Matching is opcode-sequence plus operand dataflow: a pattern may have
//! unrelated instructions interleaved as long as they do not overwrite a
//! register the pattern is still threading a value through. Registers are
//! treated as opaque values throughout, so constant folding cannot hide a
//! site.

use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{BasicBlock, Cond, Function, Instruction, Opcode, Operand, Register};

/// Pattern variables. `A`/`B` and the scratch slots bind registers; `C`
/// and `R` bind either a register or an immediate, because the `r`
/// constant may live in a register or appear literally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Var {
    A,
    B,
    C,
    R,
    S1,
    S2,
    S3,
}

#[derive(Debug, Clone, Copy)]
enum OpPat {
    /// Literal `#0`.
    Zero,
    Var(Var),
}

#[derive(Debug, Clone, Copy)]
struct PatIns {
    op: Opcode,
    dest: Var,
    src1: OpPat,
    src2: Option<OpPat>,
}

const fn pi(op: Opcode, dest: Var, src1: OpPat, src2: Option<OpPat>) -> PatIns {
    PatIns { op, dest, src1, src2 }
}

struct Pattern {
    id: u8,
    recovered: Opcode,
    items: &'static [PatIns],
}

use OpPat::{Var as V, Zero};
use Var::*;

/// The substitution table, one entry per row (row 10 appears twice to
/// cover both the materialized-constant and plain-register forms).
static PATTERNS: &[Pattern] = &[
    // a = b & c  <=  !(!b | !c) & (r | !r), r materialized
    Pattern {
        id: 10,
        recovered: Opcode::And,
        items: &[
            pi(Opcode::Mvn, S1, V(B), None),
            pi(Opcode::Mvn, S2, V(C), None),
            pi(Opcode::Orr, S1, V(S1), Some(V(S2))),
            pi(Opcode::Mvn, S1, V(S1), None),
            pi(Opcode::Mov, S2, V(R), None),
            pi(Opcode::Mvn, S3, V(S2), None),
            pi(Opcode::Orr, S2, V(S2), Some(V(S3))),
            pi(Opcode::And, A, V(S1), Some(V(S2))),
        ],
    },
    // a = b & c  <=  !(!b | !c) & (r | !r), r in a register
    Pattern {
        id: 10,
        recovered: Opcode::And,
        items: &[
            pi(Opcode::Mvn, S1, V(B), None),
            pi(Opcode::Mvn, S2, V(C), None),
            pi(Opcode::Orr, S1, V(S1), Some(V(S2))),
            pi(Opcode::Mvn, S1, V(S1), None),
            pi(Opcode::Mvn, S3, V(R), None),
            pi(Opcode::Orr, S3, V(R), Some(V(S3))),
            pi(Opcode::And, A, V(S1), Some(V(S3))),
        ],
    },
    // a = b ^ c  <=  (!b & c) | (b & !c)
    Pattern {
        id: 12,
        recovered: Opcode::Eor,
        items: &[
            pi(Opcode::Mvn, S1, V(B), None),
            pi(Opcode::And, S1, V(S1), Some(V(C))),
            pi(Opcode::Mvn, S2, V(C), None),
            pi(Opcode::And, S2, V(B), Some(V(S2))),
            pi(Opcode::Orr, A, V(S1), Some(V(S2))),
        ],
    },
    // a = b + c  <=  -(-b + (-c))
    Pattern {
        id: 2,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Rsb, S1, V(B), Some(Zero)),
            pi(Opcode::Rsb, S2, V(C), Some(Zero)),
            pi(Opcode::Add, S1, V(S1), Some(V(S2))),
            pi(Opcode::Rsb, A, V(S1), Some(Zero)),
        ],
    },
    // a = b + c  <=  a = b + r; a += c; a -= r
    Pattern {
        id: 3,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Add, S1, V(B), Some(V(R))),
            pi(Opcode::Add, S1, V(S1), Some(V(C))),
            pi(Opcode::Sub, A, V(S1), Some(V(R))),
        ],
    },
    // a = b + c  <=  a = b - r; a += c; a += r
    Pattern {
        id: 4,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Sub, S1, V(B), Some(V(R))),
            pi(Opcode::Add, S1, V(S1), Some(V(C))),
            pi(Opcode::Add, A, V(S1), Some(V(R))),
        ],
    },
    // a = b - c  <=  -((-b) + c)
    Pattern {
        id: 6,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Rsb, S1, V(B), Some(Zero)),
            pi(Opcode::Add, S1, V(S1), Some(V(C))),
            pi(Opcode::Rsb, A, V(S1), Some(Zero)),
        ],
    },
    // a = b - c  <=  a = b + r; a -= c; a -= r
    Pattern {
        id: 7,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Add, S1, V(B), Some(V(R))),
            pi(Opcode::Sub, S1, V(S1), Some(V(C))),
            pi(Opcode::Sub, A, V(S1), Some(V(R))),
        ],
    },
    // a = b - c  <=  a = b - r; a -= c; a += r
    Pattern {
        id: 8,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Sub, S1, V(B), Some(V(R))),
            pi(Opcode::Sub, S1, V(S1), Some(V(C))),
            pi(Opcode::Add, A, V(S1), Some(V(R))),
        ],
    },
    // a = b & c  <=  (b ^ !c) & b
    Pattern {
        id: 9,
        recovered: Opcode::And,
        items: &[
            pi(Opcode::Mvn, S1, V(C), None),
            pi(Opcode::Eor, S1, V(B), Some(V(S1))),
            pi(Opcode::And, A, V(S1), Some(V(B))),
        ],
    },
    // a = b | c  <=  (b & c) | (b ^ c)
    Pattern {
        id: 11,
        recovered: Opcode::Orr,
        items: &[
            pi(Opcode::And, S1, V(B), Some(V(C))),
            pi(Opcode::Eor, S2, V(B), Some(V(C))),
            pi(Opcode::Orr, A, V(S1), Some(V(S2))),
        ],
    },
    // a = b ^ c  <=  (b ^ r) ^ (c ^ r)
    Pattern {
        id: 13,
        recovered: Opcode::Eor,
        items: &[
            pi(Opcode::Eor, S1, V(B), Some(V(R))),
            pi(Opcode::Eor, S2, V(C), Some(V(R))),
            pi(Opcode::Eor, A, V(S1), Some(V(S2))),
        ],
    },
    // a = b + c  <=  b - (-c)
    Pattern {
        id: 1,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Rsb, S1, V(C), Some(Zero)),
            pi(Opcode::Sub, A, V(B), Some(V(S1))),
        ],
    },
    // a = b - c  <=  b + (-c)
    Pattern {
        id: 5,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Rsb, S1, V(C), Some(Zero)),
            pi(Opcode::Add, A, V(B), Some(V(S1))),
        ],
    },
    // Materialized-constant forms of the rows above: the MOV that loads
    // the constant belongs to the site, so the rewrite absorbs it too.
    Pattern {
        id: 1,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Mov, S1, V(C), None),
            pi(Opcode::Rsb, S1, V(S1), Some(Zero)),
            pi(Opcode::Sub, A, V(B), Some(V(S1))),
        ],
    },
    Pattern {
        id: 5,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Mov, S1, V(C), None),
            pi(Opcode::Rsb, S1, V(S1), Some(Zero)),
            pi(Opcode::Add, A, V(B), Some(V(S1))),
        ],
    },
    Pattern {
        id: 2,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Rsb, S1, V(B), Some(Zero)),
            pi(Opcode::Mov, S2, V(C), None),
            pi(Opcode::Rsb, S2, V(S2), Some(Zero)),
            pi(Opcode::Add, S1, V(S1), Some(V(S2))),
            pi(Opcode::Rsb, A, V(S1), Some(Zero)),
        ],
    },
    Pattern {
        id: 3,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Mov, S3, V(R), None),
            pi(Opcode::Add, S1, V(B), Some(V(S3))),
            pi(Opcode::Add, S1, V(S1), Some(V(C))),
            pi(Opcode::Sub, A, V(S1), Some(V(S3))),
        ],
    },
    Pattern {
        id: 4,
        recovered: Opcode::Add,
        items: &[
            pi(Opcode::Mov, S3, V(R), None),
            pi(Opcode::Sub, S1, V(B), Some(V(S3))),
            pi(Opcode::Add, S1, V(S1), Some(V(C))),
            pi(Opcode::Add, A, V(S1), Some(V(S3))),
        ],
    },
    Pattern {
        id: 7,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Mov, S3, V(R), None),
            pi(Opcode::Add, S1, V(B), Some(V(S3))),
            pi(Opcode::Sub, S1, V(S1), Some(V(C))),
            pi(Opcode::Sub, A, V(S1), Some(V(S3))),
        ],
    },
    Pattern {
        id: 8,
        recovered: Opcode::Sub,
        items: &[
            pi(Opcode::Mov, S3, V(R), None),
            pi(Opcode::Sub, S1, V(B), Some(V(S3))),
            pi(Opcode::Sub, S1, V(S1), Some(V(C))),
            pi(Opcode::Add, A, V(S1), Some(V(S3))),
        ],
    },
    Pattern {
        id: 13,
        recovered: Opcode::Eor,
        items: &[
            pi(Opcode::Mov, S3, V(R), None),
            pi(Opcode::Eor, S1, V(B), Some(V(S3))),
            pi(Opcode::Eor, S2, V(C), Some(V(S3))),
            pi(Opcode::Eor, A, V(S1), Some(V(S2))),
        ],
    },
];

/// One recognized substitution site.
#[derive(Debug, Clone)]
pub struct MatchSite {
    pub block: String,
    /// Addresses of the matched instructions, in order.
    pub addresses: Vec<u32>,
    pub pattern_id: u8,
    pub recovered_op: Instruction,
    /// Addresses that must survive because an outside instruction read
    /// the value they produced.
    pub retained: BTreeSet<u32>,
}

/// Register taint state during the filter scan.
#[derive(Debug, Clone, Default)]
pub struct TaintMap {
    /// Tainted register -> address of the pattern instruction that
    /// produced its current value.
    pub origin: BTreeMap<Register, u32>,
}

type Binding = BTreeMap<Var, Operand>;

fn bind(binding: &mut Binding, var: Var, value: Operand) -> bool {
    // A, B and scratch slots only ever hold registers.
    if matches!(var, A | B | S1 | S2 | S3) && value.as_reg().is_none() {
        return false;
    }
    match binding.get(&var) {
        Some(prev) => *prev == value,
        None => {
            binding.insert(var, value);
            true
        }
    }
}

fn match_operand(pat: OpPat, value: Operand, binding: &mut Binding) -> bool {
    match pat {
        Zero => value == Operand::Imm(0),
        V(var) => bind(binding, var, value),
    }
}

fn match_item(item: &PatIns, ins: &Instruction, binding: &mut Binding) -> bool {
    if ins.opcode != item.op || ins.cond != Cond::Al {
        return false;
    }
    let mut trial = binding.clone();
    let dest_ok = match ins.dest {
        Some(d) => bind(&mut trial, item.dest, Operand::Reg(d)),
        None => false,
    };
    if !dest_ok {
        return false;
    }
    let src1_ok = match ins.src1 {
        Some(s) => match_operand(item.src1, s, &mut trial),
        None => false,
    };
    if !src1_ok {
        return false;
    }
    match (item.src2, ins.src2) {
        (None, None) => {}
        (Some(pat), Some(s)) => {
            if !match_operand(pat, s, &mut trial) {
                return false;
            }
        }
        _ => return false,
    }
    *binding = trial;
    true
}

/// Does `ins` destroy a value the pattern is currently threading?
fn clobbers(ins: &Instruction, binding: &Binding) -> bool {
    if ins.opcode.is_call() {
        // A call may write anything the callee touches.
        return true;
    }
    let Some(w) = ins.writes() else { return false };
    binding.values().any(|v| *v == Operand::Reg(w))
}

fn try_match_from(
    block: &BasicBlock,
    used: &[bool],
    items: &[PatIns],
    item_idx: usize,
    from: usize,
    binding: &mut Binding,
    picked: &mut Vec<usize>,
) -> bool {
    if item_idx == items.len() {
        return true;
    }
    let mut idx = from;
    while idx < block.instructions.len() {
        let ins = &block.instructions[idx];
        if !used[idx] {
            let mut trial = binding.clone();
            if match_item(&items[item_idx], ins, &mut trial) {
                picked.push(idx);
                let saved = binding.clone();
                *binding = trial;
                if try_match_from(block, used, items, item_idx + 1, idx + 1, binding, picked) {
                    return true;
                }
                *binding = saved;
                picked.pop();
            }
        }
        // Interleaved instructions may not overwrite threaded values.
        // The first pattern item has nothing threaded yet, so scanning
        // continues freely until it anchors.
        if item_idx > 0 && clobbers(ins, binding) {
            return false;
        }
        idx += 1;
    }
    false
}

fn recovered_from(pattern: &Pattern, binding: &Binding) -> Instruction {
    let a = binding[&A].as_reg().expect("A binds a register");
    let b = binding[&B].as_reg().expect("B binds a register");
    let c = binding[&C];
    Instruction::alu3(pattern.recovered, a, b, c)
}

/// Finds all substitution sites in a function. Longer patterns win over
/// their sub-patterns, earlier positions over later ones; matched
/// instructions are consumed so sites never overlap.
pub fn match_substitutions(f: &Function) -> Vec<MatchSite> {
    let mut sites = Vec::new();
    let mut order: Vec<&Pattern> = PATTERNS.iter().collect();
    order.sort_by_key(|p| (std::cmp::Reverse(p.items.len()), p.id));

    for block in &f.blocks {
        let mut used = vec![false; block.instructions.len()];
        for pattern in &order {
            let mut start = 0;
            while start < block.instructions.len() {
                let mut binding = Binding::new();
                let mut picked = Vec::new();
                if used[start]
                    || !match_item(&pattern.items[0], &block.instructions[start], &mut binding)
                {
                    start += 1;
                    continue;
                }
                picked.push(start);
                if try_match_from(block, &used, pattern.items, 1, start + 1, &mut binding, &mut picked)
                {
                    for &i in &picked {
                        used[i] = true;
                    }
                    sites.push(MatchSite {
                        block: block.label.clone(),
                        addresses: picked.iter().map(|&i| block.instructions[i].address).collect(),
                        pattern_id: pattern.id,
                        recovered_op: recovered_from(pattern, &binding),
                        retained: BTreeSet::new(),
                    });
                }
                start += 1;
            }
        }
    }
    sites.sort_by_key(|s| s.addresses[0]);
    sites
}

/// Marks pattern instructions whose intermediate value escapes to an
/// outside reader. Taint starts at each intermediate definition, moves
/// when the pattern redefines the register, and clears when an unrelated
/// instruction overwrites it.
pub fn taint_filter(f: &Function, mut sites: Vec<MatchSite>) -> Vec<MatchSite> {
    for site in &mut sites {
        let Some(block) = f.block(&site.block) else { continue };
        let addr_set: BTreeSet<u32> = site.addresses.iter().copied().collect();
        let last_addr = *site.addresses.last().expect("non-empty site");
        let Some(start) = block
            .instructions
            .iter()
            .position(|i| i.address == site.addresses[0])
        else {
            continue;
        };

        let mut taint = TaintMap::default();
        for ins in &block.instructions[start..] {
            if addr_set.contains(&ins.address) {
                if ins.address == last_addr {
                    // The final instruction defines the real result.
                    if let Some(w) = ins.writes() {
                        taint.origin.remove(&w);
                    }
                } else if let Some(w) = ins.writes() {
                    taint.origin.insert(w, ins.address);
                }
            } else {
                let reads: Vec<Register> = if ins.opcode.is_call() {
                    (0..4).map(Register).collect()
                } else {
                    ins.reads()
                };
                for r in reads {
                    if let Some(&origin) = taint.origin.get(&r) {
                        site.retained.insert(origin);
                    }
                }
                let w = if ins.opcode.is_call() {
                    Some(Register(0))
                } else {
                    ins.writes()
                };
                if let Some(w) = w {
                    taint.origin.remove(&w);
                }
            }
        }
    }
    sites
}

/// Applies the rewrites: the recovered instruction lands in the first
/// non-retained slot, every other non-retained slot becomes NOP, and
/// addresses never move.
pub fn apply_rewrites(f: &Function, sites: &[MatchSite]) -> Function {
    let mut out = f.clone();
    for site in sites {
        let Some(block) = out.blocks.iter_mut().find(|b| b.label == site.block) else {
            continue;
        };
        let patchable: Vec<u32> = site
            .addresses
            .iter()
            .copied()
            .filter(|a| !site.retained.contains(a))
            .collect();
        let Some(&first) = patchable.first() else { continue };

        // A retained instruction that runs before the recovered slot and
        // overwrites one of its operands would change the result; leave
        // such a site obfuscated.
        let recovered_reads: BTreeSet<Register> = site.recovered_op.reads().into_iter().collect();
        let unsafe_retain = block.instructions.iter().any(|ins| {
            site.retained.contains(&ins.address)
                && ins.address < first
                && ins
                    .writes()
                    .is_some_and(|w| recovered_reads.contains(&w) || Some(w) == site.recovered_op.dest)
        });
        if unsafe_retain {
            continue;
        }

        for ins in &mut block.instructions {
            if ins.address == first {
                let mut rec = site.recovered_op.clone();
                rec.address = ins.address;
                *ins = rec;
            } else if patchable.contains(&ins.address) {
                let mut nop = Instruction::nop();
                nop.address = ins.address;
                *ins = nop;
            }
        }
    }
    out
}

/// Convenience wrapper: match, filter, rewrite.
pub fn deobfuscate_inssub(f: &Function) -> (Function, Vec<MatchSite>) {
    let sites = taint_filter(f, match_substitutions(f));
    let rewritten = apply_rewrites(f, &sites);
    (rewritten, sites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, parse_program};
    use crate::obf::{inssub_pass, ObfConfig, Pass};

    /// The obfuscated listing with an interleaved dependent instruction:
    /// lines 3, 5, 6 form the site, line 4 reads the intermediate.
    const INTERLEAVED: &str = "func printf(1):\np:\n    RET\nfunc f:\nmain:\n    MOV R0, R4\n    BL printf\n    ADD R0, R7, R5\n    SUB R6, R0, #1\n    ADD R0, R0, #1\n    SUB R7, R0, R5\n    B loc_8A0\nloc_8A0:\n    RET\n";

    #[test]
    fn interleaved_site_matches_as_one_site() {
        let p = parse_program(INTERLEAVED).unwrap();
        let f = p.function("f").unwrap();
        let sites = match_substitutions(f);
        assert_eq!(sites.len(), 1);
        let site = &sites[0];
        assert_eq!(site.pattern_id, 3);
        assert_eq!(site.recovered_op.render(), "ADD R7, R7, #1");
        // lines 3, 5, 6 of the block (0-indexed instrs 2, 4, 5)
        let b = f.block("main").unwrap();
        assert_eq!(
            site.addresses,
            vec![
                b.instructions[2].address,
                b.instructions[4].address,
                b.instructions[5].address
            ]
        );
    }

    #[test]
    fn taint_retains_the_escaping_definition() {
        let p = parse_program(INTERLEAVED).unwrap();
        let f = p.function("f").unwrap();
        let sites = taint_filter(f, match_substitutions(f));
        let site = &sites[0];
        let b = f.block("main").unwrap();
        // line 3 produced the value line 4 reads
        assert_eq!(
            site.retained,
            BTreeSet::from([b.instructions[2].address])
        );
        // rewrite: line 5 carries the recovered op, line 6 becomes NOP
        let g = apply_rewrites(f, &sites);
        let gb = g.block("main").unwrap();
        assert_eq!(gb.instructions[2].render(), "ADD R0, R7, R5");
        assert_eq!(gb.instructions[4].render(), "ADD R7, R7, #1");
        assert_eq!(gb.instructions[5].opcode, Opcode::Nop);
    }

    #[test]
    fn no_external_reader_rewrites_first_slot() {
        let src = "func f:\nmain:\n    ADD R0, R7, R5\n    ADD R0, R0, #1\n    SUB R7, R0, R5\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        let (g, sites) = deobfuscate_inssub(f);
        assert_eq!(sites.len(), 1);
        assert!(sites[0].retained.is_empty());
        let gb = g.block("main").unwrap();
        assert_eq!(gb.instructions[0].render(), "ADD R7, R7, #1");
        assert_eq!(gb.instructions[1].opcode, Opcode::Nop);
        assert_eq!(gb.instructions[2].opcode, Opcode::Nop);
    }

    #[test]
    fn reader_after_taint_freed_retains_nothing() {
        // the MOV overwrites the intermediate before the later read
        let src = "func f:\nmain:\n    ADD R0, R7, R5\n    ADD R0, R0, #1\n    SUB R7, R0, R5\n    MOV R0, #9\n    SUB R6, R0, #1\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        let sites = taint_filter(f, match_substitutions(f));
        assert_eq!(sites.len(), 1);
        assert!(sites[0].retained.is_empty());
    }

    #[test]
    fn clean_function_has_no_sites() {
        let src = "func f(2):\ne:\n    MUL R2, R0, R1\n    CMP R2, #7\n    MOVGT R2, #7\n    MOV R0, R2\n    RET\n";
        let p = parse_program(src).unwrap();
        assert!(match_substitutions(p.function("f").unwrap()).is_empty());
    }

    #[test]
    fn eor_triple_recovers() {
        let src = "func f(2):\ne:\n    MOV R4, #77\n    EOR R5, R0, R4\n    EOR R6, R1, R4\n    EOR R0, R5, R6\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        let sites = match_substitutions(f);
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].pattern_id, 13);
        assert_eq!(sites[0].recovered_op.render(), "EOR R0, R0, R1");
    }

    /// Round-trip over every variant: obfuscate a one-op function, then
    /// recover it; the site count matches and behavior is preserved.
    #[test]
    fn recovery_round_trip_across_seeds() {
        for op in ["ADD", "SUB", "AND", "ORR", "EOR"] {
            for seed in 0..40u64 {
                let src = format!(
                    "func f(2):\ne:\n    {op} R0, R0, R1\n    RET\n"
                );
                let p = parse_program(&src).unwrap();
                let f = p.function("f").unwrap();
                let cfg = ObfConfig::with_passes(&[Pass::InsSub], seed);
                let (obf, gt_sites) = inssub_pass(f, &cfg);
                assert_eq!(gt_sites.len(), 1);
                let (deob, sites) = deobfuscate_inssub(&obf);
                assert_eq!(sites.len(), 1, "{op} seed {seed}");
                assert!(sites[0].retained.is_empty());
                let mut q = p.clone();
                q.functions.insert("f".into(), deob);
                q.assign_addresses();
                for (a, b) in [(5u32, 3u32), (0, 0), (u32::MAX, 1)] {
                    assert_eq!(
                        interpret(&p, "f", &[a, b]).unwrap().return_value,
                        interpret(&q, "f", &[a, b]).unwrap().return_value,
                        "{op} seed {seed}"
                    );
                }
            }
        }
    }

    #[test]
    fn immediate_forms_also_match() {
        // hand-written immediate r, no MOV materialization
        let src = "func f(1):\ne:\n    ADD R4, R0, #12\n    ADD R4, R4, #30\n    SUB R0, R4, #12\n    RET\n";
        let p = parse_program(src).unwrap();
        let sites = match_substitutions(p.function("f").unwrap());
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].pattern_id, 3);
        assert_eq!(sites[0].recovered_op.render(), "ADD R0, R0, #30");
    }
}
