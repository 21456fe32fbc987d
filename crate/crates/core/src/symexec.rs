//! A small symbolic execution engine over the mini ISA.
//!
//! Values are either concrete 32-bit words or opaque symbols; there is no
//! constraint solving because routing values are concrete by construction
//! of the flattening pass, which makes dispatcher traversal fully
//! concrete. The engine supports interrupting in front of conditional
//! moves, forcing the next conditional-move evaluation to either side,
//! skipping calls, and saving/restoring per-block states.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::ir::{Cond, Function, Instruction, Opcode, Operand, Register};
use crate::{Error, Result};

/// Default per-run step budget.
pub const SYM_STEP_BUDGET: u64 = 100_000;

/// A 32-bit value or an opaque symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymValue {
    Concrete(u32),
    Opaque(u32),
}

impl SymValue {
    pub fn concrete(self) -> Option<u32> {
        match self {
            SymValue::Concrete(v) => Some(v),
            SymValue::Opaque(_) => None,
        }
    }

    pub fn is_opaque(self) -> bool {
        matches!(self, SymValue::Opaque(_))
    }
}

/// A flag bit: known or opaque.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Concrete(bool),
    Opaque,
}

/// Machine state of one symbolic run.
#[derive(Debug, Clone)]
pub struct SymState {
    pub regs: [SymValue; 16],
    pub n: Flag,
    pub z: Flag,
    pub block: String,
    pub instr_idx: usize,
    /// Forces the next conditional-move evaluation, then clears.
    pub forced_flag: Option<bool>,
    /// Labels of blocks entered, in order.
    pub trace: Vec<String>,
    globals: BTreeMap<String, SymValue>,
    next_sym: u32,
}

impl SymState {
    /// All-opaque registers, zeroed flags, positioned at `block`.
    pub fn blank(block: &str) -> Self {
        let mut s = SymState {
            regs: [SymValue::Concrete(0); 16],
            n: Flag::Concrete(false),
            z: Flag::Concrete(false),
            block: block.to_string(),
            instr_idx: 0,
            forced_flag: None,
            trace: vec![block.to_string()],
            globals: BTreeMap::new(),
            next_sym: 0,
        };
        for i in 0..16 {
            s.regs[i] = s.fresh();
        }
        s
    }

    /// Fully concrete state (all registers zero), positioned at `block`.
    pub fn concrete_at(block: &str) -> Self {
        SymState {
            regs: [SymValue::Concrete(0); 16],
            n: Flag::Concrete(false),
            z: Flag::Concrete(false),
            block: block.to_string(),
            instr_idx: 0,
            forced_flag: None,
            trace: vec![block.to_string()],
            globals: BTreeMap::new(),
            next_sym: 0,
        }
    }

    fn fresh(&mut self) -> SymValue {
        self.next_sym += 1;
        SymValue::Opaque(self.next_sym)
    }

    pub fn reg(&self, r: Register) -> SymValue {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Register, v: SymValue) {
        self.regs[r.index()] = v;
    }

    fn operand(&self, op: Operand) -> SymValue {
        match op {
            Operand::Reg(r) => self.regs[r.index()],
            Operand::Imm(v) => SymValue::Concrete(v as u32),
        }
    }

    /// Positioned at the first instruction of a block?
    pub fn at_block_entry(&self) -> bool {
        self.instr_idx == 0
    }
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Ran,
    /// A RET executed (any call frame is the caller's business: the
    /// engine never enters callees).
    Returned,
}

/// Per-block saved states with bounded capacity and most-recent-kept
/// eviction.
#[derive(Debug, Clone)]
pub struct StateStore {
    saved: BTreeMap<String, VecDeque<SymState>>,
    capacity: usize,
}

impl StateStore {
    pub fn new(capacity: usize) -> Self {
        StateStore {
            saved: BTreeMap::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn save(&mut self, key: &str, state: SymState) {
        let q = self.saved.entry(key.to_string()).or_default();
        q.push_back(state);
        while q.len() > self.capacity {
            q.pop_front();
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.saved.get(key).is_some_and(|q| !q.is_empty())
    }

    /// Most recent saved state, or a blank state at `block`.
    pub fn restore(&self, key: &str, block: &str) -> SymState {
        self.saved
            .get(key)
            .and_then(|q| q.back())
            .cloned()
            .map(|mut s| {
                s.block = block.to_string();
                s.instr_idx = 0;
                s
            })
            .unwrap_or_else(|| SymState::blank(block))
    }

    /// Every saved state for `key`, most recent first.
    pub fn all(&self, key: &str, block: &str) -> Vec<SymState> {
        match self.saved.get(key) {
            Some(q) if !q.is_empty() => q
                .iter()
                .rev()
                .cloned()
                .map(|mut s| {
                    s.block = block.to_string();
                    s.instr_idx = 0;
                    s
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// The engine: a function plus its label index.
pub struct SymExec<'f> {
    f: &'f Function,
    index: HashMap<&'f str, usize>,
}

impl<'f> SymExec<'f> {
    pub fn new(f: &'f Function) -> Self {
        let index = f
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.as_str(), i))
            .collect();
        SymExec { f, index }
    }

    pub fn function(&self) -> &Function {
        self.f
    }

    fn block_of(&self, state: &SymState) -> Result<&'f crate::ir::BasicBlock> {
        self.index
            .get(state.block.as_str())
            .map(|&i| &self.f.blocks[i])
            .ok_or_else(|| Error::EngineFault(format!("no block `{}`", state.block)))
    }

    fn enter(&self, state: &mut SymState, label: &str) {
        state.block = label.to_string();
        state.instr_idx = 0;
        state.trace.push(label.to_string());
    }

    fn fall_to_next(&self, state: &mut SymState) -> Result<()> {
        let i = self.index[state.block.as_str()];
        match self.f.blocks.get(i + 1) {
            Some(next) => {
                let label = next.label.clone();
                self.enter(state, &label);
                Ok(())
            }
            None => Err(Error::EngineFault(format!(
                "fell off the end of `{}`",
                state.block
            ))),
        }
    }

    fn eval_cond(&self, state: &mut SymState, ins: &Instruction) -> bool {
        if ins.cond == Cond::Al {
            return true;
        }
        // A conditional move consumes a forced flag regardless of what
        // the real flags say.
        if ins.opcode == Opcode::Mov {
            if let Some(forced) = state.forced_flag.take() {
                return forced;
            }
        }
        match (state.n, state.z) {
            (Flag::Concrete(n), Flag::Concrete(z)) => ins.cond.holds(n, z),
            // Opaque flags without a forced choice: the not-executed path.
            _ => false,
        }
    }

    /// Executes one instruction with symbolic semantics.
    pub fn step(&self, state: &mut SymState) -> Result<StepEvent> {
        let block = self.block_of(state)?;
        let Some(ins) = block.instructions.get(state.instr_idx) else {
            // Empty or exhausted block: fall through.
            self.fall_to_next(state)?;
            return Ok(StepEvent::Ran);
        };

        if !self.eval_cond(state, ins) {
            state.instr_idx += 1;
            if state.instr_idx >= block.instructions.len() {
                self.fall_to_next(state)?;
            }
            return Ok(StepEvent::Ran);
        }

        let mut jumped = false;
        match ins.opcode {
            Opcode::Nop | Opcode::Out => {}
            Opcode::Mov => {
                let v = state.operand(ins.src1.unwrap());
                state.set_reg(ins.dest.unwrap(), v);
            }
            Opcode::Mvn => {
                let v = match state.operand(ins.src1.unwrap()) {
                    SymValue::Concrete(v) => SymValue::Concrete(!v),
                    SymValue::Opaque(_) => state.fresh(),
                };
                state.set_reg(ins.dest.unwrap(), v);
            }
            Opcode::Add | Opcode::Sub | Opcode::Rsb | Opcode::Mul | Opcode::And | Opcode::Orr
            | Opcode::Eor | Opcode::Ands | Opcode::Subs => {
                let a = state.operand(ins.src1.unwrap());
                let b = state.operand(ins.src2.unwrap());
                let v = match (a.concrete(), b.concrete()) {
                    (Some(a), Some(b)) => SymValue::Concrete(match ins.opcode {
                        Opcode::Add => a.wrapping_add(b),
                        Opcode::Sub | Opcode::Subs => a.wrapping_sub(b),
                        Opcode::Rsb => b.wrapping_sub(a),
                        Opcode::Mul => a.wrapping_mul(b),
                        Opcode::And | Opcode::Ands => a & b,
                        Opcode::Orr => a | b,
                        Opcode::Eor => a ^ b,
                        _ => unreachable!(),
                    }),
                    _ => state.fresh(),
                };
                state.set_reg(ins.dest.unwrap(), v);
                if ins.opcode.sets_flags() {
                    match v {
                        SymValue::Concrete(v) => {
                            state.n = Flag::Concrete((v as i32) < 0);
                            state.z = Flag::Concrete(v == 0);
                        }
                        SymValue::Opaque(_) => {
                            state.n = Flag::Opaque;
                            state.z = Flag::Opaque;
                        }
                    }
                }
            }
            Opcode::Cmp => {
                let a = state.operand(ins.src1.unwrap());
                let b = state.operand(ins.src2.unwrap());
                match (a.concrete(), b.concrete()) {
                    (Some(a), Some(b)) => {
                        state.n = Flag::Concrete((a as i32) < (b as i32));
                        state.z = Flag::Concrete(a == b);
                    }
                    _ => {
                        state.n = Flag::Opaque;
                        state.z = Flag::Opaque;
                    }
                }
            }
            Opcode::Adr => {
                let alpha = ins.src1.unwrap().as_imm().unwrap();
                state.set_reg(
                    ins.dest.unwrap(),
                    SymValue::Concrete(ins.address.wrapping_add(8).wrapping_add(alpha as u32)),
                );
            }
            Opcode::B => {
                let target = ins.target.clone().unwrap();
                self.enter(state, &target);
                jumped = true;
            }
            Opcode::Bl | Opcode::Blx => {
                // Calls are skipped; the callee's only trace is a fresh
                // opaque result in R0.
                let v = state.fresh();
                state.set_reg(Register(0), v);
            }
            Opcode::Ret => return Ok(StepEvent::Returned),
            Opcode::Ldrg => {
                let name = ins.global.clone().unwrap();
                let v = match state.globals.get(&name) {
                    Some(v) => *v,
                    None => {
                        let v = state.fresh();
                        state.globals.insert(name, v);
                        v
                    }
                };
                state.set_reg(ins.dest.unwrap(), v);
            }
            Opcode::Strg => {
                let v = state.operand(ins.src1.unwrap());
                state.globals.insert(ins.global.clone().unwrap(), v);
            }
        }
        if !jumped {
            state.instr_idx += 1;
            if state.instr_idx >= block.instructions.len() {
                self.fall_to_next(state)?;
            }
        }
        Ok(StepEvent::Ran)
    }

    /// Steps until entering a block in `stopset` or executing a RET,
    /// whichever comes first. A state already sitting at the entry of a
    /// stopset block returns immediately.
    pub fn run_until(
        &self,
        mut state: SymState,
        stopset: &std::collections::BTreeSet<String>,
        budget: u64,
    ) -> Result<(String, SymState)> {
        let mut steps = 0u64;
        loop {
            if state.at_block_entry() && stopset.contains(&state.block) {
                return Ok((state.block.clone(), state));
            }
            if steps >= budget {
                return Err(Error::NoSuccessorFound(budget));
            }
            steps += 1;
            let before = state.block.clone();
            match self.step(&mut state)? {
                StepEvent::Returned => return Ok((before, state)),
                StepEvent::Ran => {}
            }
        }
    }

    /// Like [`run_until`], but first leaves the current block so a block
    /// can discover itself as its own successor.
    pub fn run_leaving_then_until(
        &self,
        mut state: SymState,
        stopset: &std::collections::BTreeSet<String>,
        budget: u64,
    ) -> Result<(String, SymState)> {
        let start_trace = state.trace.len();
        let mut steps = 0u64;
        while state.trace.len() == start_trace {
            if steps >= budget {
                return Err(Error::NoSuccessorFound(budget));
            }
            steps += 1;
            let before = state.block.clone();
            match self.step(&mut state)? {
                StepEvent::Returned => return Ok((before, state)),
                StepEvent::Ran => {}
            }
        }
        self.run_until(state, stopset, budget.saturating_sub(steps))
    }

    /// Finds the decisive conditional move ahead of the current position:
    /// the last one on the straight path (fallthroughs and unconditional
    /// branches) before a conditional branch, a RET, a revisit, or a
    /// block in `stops`.
    fn scan_condmove(
        &self,
        state: &SymState,
        stops: &std::collections::BTreeSet<String>,
    ) -> Option<(String, usize)> {
        let mut label = state.block.clone();
        let mut idx = state.instr_idx;
        let mut found = None;
        let mut visited = 0;
        loop {
            let &bi = self.index.get(label.as_str())?;
            let block = &self.f.blocks[bi];
            while idx < block.instructions.len() {
                let ins = &block.instructions[idx];
                if ins.opcode == Opcode::Mov && ins.cond != Cond::Al {
                    found = Some((label.clone(), idx));
                }
                if ins.opcode == Opcode::Ret || ins.is_cond_branch() {
                    return found;
                }
                if ins.is_uncond_branch() {
                    label = ins.target.clone().unwrap();
                    idx = 0;
                    visited += 1;
                    if visited > 64 || stops.contains(&label) {
                        return found;
                    }
                    break;
                }
                idx += 1;
            }
            if idx >= block.instructions.len() {
                label = self.f.blocks.get(bi + 1)?.label.clone();
                idx = 0;
                visited += 1;
                if visited > 64 || stops.contains(&label) {
                    return found;
                }
            }
        }
    }

    /// Splits the state at the next decisive conditional move: both
    /// copies sit right before it, one forcing the move to execute and
    /// one forcing it not to.
    pub fn fork_at_condmove(&self, state: &SymState, budget: u64) -> Result<(SymState, SymState)> {
        self.fork_at_condmove_stopping(state, &std::collections::BTreeSet::new(), budget)
    }

    /// Like [`fork_at_condmove`], but the forward scan will not cross
    /// into any block in `stops` (another analysis target owns the path
    /// from there on).
    pub fn fork_at_condmove_stopping(
        &self,
        state: &SymState,
        stops: &std::collections::BTreeSet<String>,
        budget: u64,
    ) -> Result<(SymState, SymState)> {
        let (label, idx) = self.scan_condmove(state, stops).ok_or(Error::NoCondMove)?;
        let mut s = state.clone();
        let mut steps = 0u64;
        while !(s.block == label && s.instr_idx == idx) {
            if steps >= budget {
                return Err(Error::NoSuccessorFound(budget));
            }
            steps += 1;
            if matches!(self.step(&mut s)?, StepEvent::Returned) {
                return Err(Error::NoCondMove);
            }
        }
        let mut s_true = s.clone();
        s_true.forced_flag = Some(true);
        let mut s_false = s;
        s_false.forced_flag = Some(false);
        Ok((s_true, s_false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, CompiledProgram, InterpState, StepOutcome};
    use std::collections::BTreeSet;

    fn stops(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn concrete_mov_and_opaque_propagation() {
        let p = parse_program("func f:\ne:\n    MOV R12, #0x928\n    ADD R1, R12, R2\n    RET\n")
            .unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let mut s = SymState::blank("e");
        eng.step(&mut s).unwrap();
        assert_eq!(s.reg(Register(12)), SymValue::Concrete(0x928));
        eng.step(&mut s).unwrap();
        // concrete + opaque stays opaque
        assert!(s.reg(Register(1)).is_opaque());
    }

    #[test]
    fn forced_flag_drives_conditional_move_then_clears() {
        let p = parse_program("func f:\ne:\n    MOVEQ R0, #7\n    MOVEQ R1, #8\n    RET\n").unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let mut s = SymState::blank("e");
        s.n = Flag::Opaque;
        s.z = Flag::Opaque;
        s.forced_flag = Some(true);
        eng.step(&mut s).unwrap();
        assert_eq!(s.reg(Register(0)), SymValue::Concrete(7));
        assert_eq!(s.forced_flag, None);
        // second conditional move sees opaque flags and is skipped
        eng.step(&mut s).unwrap();
        assert!(s.reg(Register(1)).is_opaque());
    }

    #[test]
    fn run_until_stops_immediately_when_already_there() {
        let p = parse_program("func f:\ne:\n    NOP\n    RET\n").unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let s = SymState::blank("e");
        let (reached, _) = eng.run_until(s, &stops(&["e"]), 10).unwrap();
        assert_eq!(reached, "e");
    }

    #[test]
    fn run_leaving_finds_self_loop() {
        let p = parse_program("func f:\na:\n    ADD R0, R0, #1\n    B a\n").unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let s = SymState::blank("a");
        let (reached, _) = eng.run_leaving_then_until(s, &stops(&["a"]), 100).unwrap();
        assert_eq!(reached, "a");
    }

    #[test]
    fn budget_error_when_nothing_matches() {
        let p = parse_program("func f:\na:\n    B a\n").unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let s = SymState::blank("a");
        let err = eng.run_leaving_then_until(s, &stops(&["nowhere"]), 50).unwrap_err();
        assert!(matches!(err, Error::NoSuccessorFound(_)));
    }

    #[test]
    fn calls_clobber_r0_only() {
        let p = parse_program(
            "func g:\nx:\n    RET\nfunc f:\ne:\n    MOV R12, #9\n    MOV R0, #1\n    BL g\n    BLX g\n    RET\n",
        )
        .unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let mut s = SymState::blank("e");
        for _ in 0..4 {
            eng.step(&mut s).unwrap();
        }
        assert!(s.reg(Register(0)).is_opaque());
        assert_eq!(s.reg(Register(12)), SymValue::Concrete(9));
    }

    #[test]
    fn fork_without_condmove_is_an_error() {
        let p = parse_program("func f:\ne:\n    ADD R0, R0, #1\n    RET\n").unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let s = SymState::blank("e");
        assert!(matches!(
            eng.fork_at_condmove(&s, 100),
            Err(Error::NoCondMove)
        ));
    }

    #[test]
    fn forked_states_differ_only_in_forced_flag() {
        let p = parse_program(
            "func f:\ne:\n    CMP R0, R1\n    MOV R5, #1\n    MOVEQ R5, #2\n    B e\n",
        )
        .unwrap();
        let f = p.function("f").unwrap();
        let eng = SymExec::new(f);
        let s = SymState::blank("e");
        let (t, fl) = eng.fork_at_condmove(&s, 100).unwrap();
        assert_eq!(t.block, fl.block);
        assert_eq!(t.instr_idx, fl.instr_idx);
        assert_eq!(t.regs, fl.regs);
        assert_eq!(t.forced_flag, Some(true));
        assert_eq!(fl.forced_flag, Some(false));
        // both sit at the conditional move, after the base MOV ran
        assert_eq!(t.reg(Register(5)), SymValue::Concrete(1));
    }

    #[test]
    fn store_round_trips_and_evicts() {
        let mut store = StateStore::new(1);
        assert!(!store.has("a"));
        let blank = store.restore("a", "a");
        assert!(blank.regs.iter().all(|v| v.is_opaque()));

        let mut s1 = SymState::concrete_at("a");
        s1.set_reg(Register(3), SymValue::Concrete(11));
        store.save("a", s1);
        let mut s2 = SymState::concrete_at("a");
        s2.set_reg(Register(3), SymValue::Concrete(22));
        store.save("a", s2);
        // capacity 1: the second survives
        assert_eq!(store.restore("a", "a").reg(Register(3)), SymValue::Concrete(22));
        assert_eq!(store.all("a", "a").len(), 1);

        let mut wide = StateStore::new(2);
        for v in [1u32, 2, 3] {
            let mut s = SymState::concrete_at("a");
            s.set_reg(Register(0), SymValue::Concrete(v));
            wide.save("a", s);
        }
        let all = wide.all("a", "a");
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].reg(Register(0)), SymValue::Concrete(3));
        assert_eq!(all[1].reg(Register(0)), SymValue::Concrete(2));
    }

    /// Any operation with an opaque input stays opaque; only a MOV of an
    /// immediate (or ADR) conjures a concrete value.
    #[test]
    fn opaque_monotonicity() {
        use crate::ir::Opcode;
        let alu = [
            Opcode::Add,
            Opcode::Sub,
            Opcode::Rsb,
            Opcode::Mul,
            Opcode::And,
            Opcode::Orr,
            Opcode::Eor,
            Opcode::Ands,
            Opcode::Subs,
        ];
        for op in alu {
            let mut block = crate::ir::BasicBlock::new("e");
            block.instructions.push(Instruction::alu3(
                op,
                Register(0),
                Register(1),
                Operand::Reg(Register(2)),
            ));
            block.instructions.push(Instruction::new(Opcode::Ret));
            let f = Function {
                name: "f".into(),
                arity: 0,
                blocks: vec![block],
                entry: "e".into(),
                base_address: 0,
            };
            let eng = SymExec::new(&f);
            // concrete op opaque -> opaque, in both operand positions
            for opaque_slot in [1u8, 2] {
                let mut s = SymState::concrete_at("e");
                let fresh = SymValue::Opaque(999);
                s.set_reg(Register(opaque_slot), fresh);
                eng.step(&mut s).unwrap();
                assert!(s.reg(Register(0)).is_opaque(), "{op:?} slot {opaque_slot}");
                if op.sets_flags() {
                    assert_eq!(s.n, Flag::Opaque);
                    assert_eq!(s.z, Flag::Opaque);
                }
            }
        }
        // MVN of an opaque stays opaque
        let p = parse_program("func f:\ne:\n    MVN R0, R1\n    RET\n").unwrap();
        let eng = SymExec::new(p.function("f").unwrap());
        let mut s = SymState::blank("e");
        eng.step(&mut s).unwrap();
        assert!(s.reg(Register(0)).is_opaque());
    }

    /// Lockstep against the concrete interpreter on random straight-line
    /// programs: identical register file and flags after every step.
    #[test]
    fn lockstep_with_interpreter() {
        use crate::ir::{BasicBlock, Opcode, Program};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let ops = [
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
        ];
        let conds = [Cond::Al, Cond::Al, Cond::Eq, Cond::Ne, Cond::Lt, Cond::Gt, Cond::Le, Cond::Ge];
        for _case in 0..100 {
            let mut block = BasicBlock::new("e");
            for _ in 0..rng.gen_range(3..20) {
                let op = ops[rng.gen_range(0..ops.len())];
                let cond = conds[rng.gen_range(0..conds.len())];
                let dest = Register(rng.gen_range(0..10));
                let r1 = Register(rng.gen_range(0..10));
                let src2 = if rng.gen_bool(0.5) {
                    Operand::Reg(Register(rng.gen_range(0..10)))
                } else {
                    Operand::Imm(rng.gen_range(-100..100))
                };
                let ins = match op {
                    Opcode::Mov | Opcode::Mvn => {
                        let src = if rng.gen_bool(0.5) {
                            Operand::Reg(r1)
                        } else {
                            Operand::Imm(rng.gen_range(-100..100))
                        };
                        Instruction {
                            dest: Some(dest),
                            src1: Some(src),
                            ..Instruction::new(op)
                        }
                    }
                    Opcode::Cmp => Instruction::cmp(r1, src2),
                    Opcode::Adr => Instruction::adr(dest, rng.gen_range(-64..64)),
                    _ => Instruction::alu3(op, dest, r1, src2),
                }
                .with_cond(if op == Opcode::Cmp { Cond::Al } else { cond });
                block.instructions.push(ins);
            }
            block.instructions.push(Instruction::new(Opcode::Ret));
            let func = Function {
                name: "f".into(),
                arity: 4,
                blocks: vec![block],
                entry: "e".into(),
                base_address: 0,
            };
            let mut p = Program::default();
            p.order.push("f".into());
            p.functions.insert("f".into(), func);
            p.assign_addresses();

            let inputs: Vec<u32> = (0..4).map(|_| rng.gen()).collect();
            let compiled = CompiledProgram::new(&p);
            let mut interp = InterpState::at(&compiled, "f", &inputs, 1_000_000).unwrap();
            let f = p.function("f").unwrap();
            let eng = SymExec::new(f);
            let mut sym = SymState::concrete_at("e");
            for (i, v) in inputs.iter().enumerate() {
                sym.set_reg(Register(i as u8), SymValue::Concrete(*v));
            }
            loop {
                let done = matches!(interp.step().unwrap(), StepOutcome::Finished(_));
                let sdone = matches!(eng.step(&mut sym).unwrap(), StepEvent::Returned);
                assert_eq!(done, sdone);
                if done {
                    break;
                }
                for r in 0..16 {
                    assert_eq!(
                        sym.regs[r],
                        SymValue::Concrete(interp.regs()[r]),
                        "register R{r}"
                    );
                }
                let (n, z) = interp.flags();
                assert_eq!(sym.n, Flag::Concrete(n));
                assert_eq!(sym.z, Flag::Concrete(z));
            }
        }
    }
}
