//! Preprocessing: fingerprints which obfuscations are present and builds
//! the dispatcher dictionary.
//!
//! A dispatcher is the exact three-instruction shape
//! `ADR rt, #a; CMP rr, rt; B<cond> _`; its routing value is
//! `a + adr_address + 8`, the value the program counter contributes on
//! this ISA. The routing register is discovered, not assumed: the CMP's
//! non-ADR operand must agree across all dispatchers.

use std::collections::{BTreeMap, BTreeSet};

use crate::bcf_deob::find_opaque_chain;
use crate::inssub_deob::match_substitutions;
use crate::ir::{build_cfg, Cond, Function, Opcode, Operand, Register};
use crate::{Error, Result};

/// Routing values extracted from every dispatcher block.
#[derive(Debug, Clone, Default)]
pub struct DispatcherDict {
    /// Dispatcher block label -> routing value.
    pub entries: BTreeMap<String, u32>,
    pub routing_register: Option<Register>,
}

impl DispatcherDict {
    pub fn values(&self) -> BTreeSet<u32> {
        self.entries.values().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_value(&self, v: u32) -> bool {
        self.entries.values().any(|&x| x == v)
    }
}

/// Matches the dispatcher pattern against one block.
///
/// Returns `(routing_register, routing_value, branch_target)`.
pub(crate) fn match_dispatcher(block: &crate::ir::BasicBlock) -> Option<(Register, u32, String)> {
    if block.instructions.len() != 3 {
        return None;
    }
    let [adr, cmp, br] = &block.instructions[..] else {
        return None;
    };
    if adr.opcode != Opcode::Adr || adr.cond != Cond::Al {
        return None;
    }
    let rt = adr.dest?;
    let alpha = adr.src1?.as_imm()?;
    if cmp.opcode != Opcode::Cmp || cmp.cond != Cond::Al {
        return None;
    }
    let rr = cmp.src1?.as_reg()?;
    if cmp.src2 != Some(Operand::Reg(rt)) || rr == rt {
        return None;
    }
    if !br.is_cond_branch() {
        return None;
    }
    let value = adr.address.wrapping_add(8).wrapping_add(alpha as u32);
    Some((rr, value, br.target.clone().unwrap()))
}

/// Scans a function for dispatchers and extracts their routing values.
pub fn build_dispatcher_dict(f: &Function) -> Result<DispatcherDict> {
    let mut dict = DispatcherDict::default();
    for block in &f.blocks {
        let Some((rr, value, _)) = match_dispatcher(block) else {
            continue;
        };
        match dict.routing_register {
            None => dict.routing_register = Some(rr),
            Some(prev) if prev != rr => {
                return Err(Error::InconsistentRouting(prev.0, rr.0));
            }
            _ => {}
        }
        dict.entries.insert(block.label.clone(), value);
    }
    Ok(dict)
}

/// Which obfuscations a function shows evidence of.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DetectionReport {
    pub function: String,
    pub inssub: bool,
    pub bcf: bool,
    pub cff: bool,
    pub dispatcher_labels: BTreeSet<String>,
    pub routing_register: Option<Register>,
}

fn has_cmp_ten(block: &crate::ir::BasicBlock) -> bool {
    block.instructions.iter().any(|i| {
        i.opcode == Opcode::Cmp && i.src2 == Some(Operand::Imm(10))
    })
}

/// BCF evidence: a `CMP _, #10` guard followed, in the same or a
/// successor block, by the `SUB/MUL/ANDS` computation chain. Once the
/// function is flattened every block's successor is a dispatcher, so the
/// adjacency requirement is waived and the guard and chain only need to
/// coexist.
fn bcf_fingerprint(f: &Function, flattened: bool) -> bool {
    let cfg = build_cfg(f);
    let mut guard_somewhere = false;
    let mut chain_somewhere = false;
    for block in &f.blocks {
        let has_chain = find_opaque_chain(block).is_some();
        guard_somewhere |= has_cmp_ten(block);
        chain_somewhere |= has_chain;
        if !has_cmp_ten(block) {
            continue;
        }
        if has_chain {
            return true;
        }
        for e in cfg.successors(&block.label) {
            if let Some(succ) = f.block(&e.to) {
                if find_opaque_chain(succ).is_some() {
                    return true;
                }
            }
        }
    }
    flattened && guard_somewhere && chain_somewhere
}

/// Fingerprints all three obfuscations. Absence of evidence yields
/// all-false; only genuinely contradictory dispatchers are an error.
pub fn detect_obfuscations(f: &Function) -> Result<DetectionReport> {
    let dict = build_dispatcher_dict(f)?;
    Ok(DetectionReport {
        function: f.name.clone(),
        inssub: !match_substitutions(f).is_empty(),
        bcf: bcf_fingerprint(f, !dict.is_empty()),
        cff: !dict.is_empty(),
        dispatcher_labels: dict.entries.keys().cloned().collect(),
        routing_register: dict.routing_register,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::obf::{obfuscate, ObfConfig, Pass};

    const GCDISH: &str = "func f(2):\ne:\n    AND R0, R0, #255\n    AND R1, R1, #255\nhead:\n    CMP R0, R1\n    BEQ done\nagain:\n    CMP R0, R1\n    BLT less\n    SUB R0, R0, R1\n    B head\nless:\n    SUB R1, R1, R0\n    B head\ndone:\n    RET\n";

    #[test]
    fn routing_value_from_equation() {
        // ADR at 0x820 with alpha 0x100 gives 0x928
        let src = "func f:\ne:\n    NOP\n    NOP\n    NOP\n    NOP\n    NOP\n    NOP\n    NOP\n    NOP\nd:\n    ADR R3, #0x100\n    CMP R4, R3\n    BEQ e\nx:\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        assert_eq!(f.block("d").unwrap().instructions[0].address, 0x820);
        let dict = build_dispatcher_dict(f).unwrap();
        assert_eq!(dict.entries["d"], 0x928);
        assert_eq!(dict.routing_register, Some(Register(4)));
    }

    #[test]
    fn clean_function_has_empty_dict_and_all_false() {
        let p = parse_program(GCDISH).unwrap();
        let f = p.function("f").unwrap();
        assert!(build_dispatcher_dict(f).unwrap().is_empty());
        let rep = detect_obfuscations(f).unwrap();
        assert!(!rep.inssub && !rep.bcf && !rep.cff);
    }

    #[test]
    fn dict_matches_ground_truth_case_values() {
        let p = parse_program(GCDISH).unwrap();
        let (q, gt) = obfuscate(&p, &ObfConfig::with_passes(&[Pass::Cff], 17)).unwrap();
        let dict = build_dispatcher_dict(q.function("f").unwrap()).unwrap();
        let truth: BTreeSet<u32> = gt.functions["f"].case_values.values().copied().collect();
        assert_eq!(dict.values(), truth);
        assert_eq!(dict.routing_register, Some(Register::ROUTING));
    }

    #[test]
    fn detect_reports_the_passes_used() {
        let p = parse_program(GCDISH).unwrap();
        for passes in [
            vec![Pass::InsSub],
            vec![Pass::Bcf],
            vec![Pass::Cff],
            vec![Pass::InsSub, Pass::Bcf, Pass::Cff],
        ] {
            let cfg = ObfConfig {
                bcf_prob: 100,
                ..ObfConfig::with_passes(&passes, 23)
            };
            let (q, _) = obfuscate(&p, &cfg).unwrap();
            let rep = detect_obfuscations(q.function("f").unwrap()).unwrap();
            assert_eq!(rep.inssub, passes.contains(&Pass::InsSub), "{passes:?}");
            assert_eq!(rep.bcf, passes.contains(&Pass::Bcf), "{passes:?}");
            assert_eq!(rep.cff, passes.contains(&Pass::Cff), "{passes:?}");
        }
    }

    #[test]
    fn inconsistent_routing_registers_error() {
        let src = "func f:\nd1:\n    ADR R3, #8\n    CMP R4, R3\n    BEQ x\nd2:\n    ADR R3, #8\n    CMP R5, R3\n    BEQ x\nx:\n    RET\n";
        let p = parse_program(src).unwrap();
        assert!(matches!(
            build_dispatcher_dict(p.function("f").unwrap()),
            Err(Error::InconsistentRouting(4, 5))
        ));
    }
}
