//! Concrete interpreter.
//!
//! This is the ground-truth semantics of the ISA and the oracle behind the
//! I/O equivalence harness. All arithmetic wraps mod 2^32; `CMP` sets the
//! flags from a true signed comparison while `ANDS`/`SUBS` derive them
//! from the wrapped result.

use std::collections::{BTreeMap, HashMap};

use super::{Function, Opcode, Operand, Program, Register};
use crate::{Error, Result};

/// Default step budget before a run is declared divergent.
pub const STEP_BUDGET: u64 = 1_000_000;
/// Maximum call-stack depth.
pub const CALL_DEPTH_LIMIT: usize = 64;

/// Outcome of a terminated run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub return_value: u32,
    pub out_stream: Vec<u32>,
    pub steps: u64,
}

/// An instruction with branch/call targets resolved to flat indices.
#[derive(Debug, Clone)]
struct CompiledInstr {
    ins: super::Instruction,
    /// For `B`: flat instruction index inside the same function. For
    /// `BL`/`BLX`: function index. For `LDRG`/`STRG`: global index.
    target: usize,
}

#[derive(Debug, Clone)]
struct CompiledFn {
    instrs: Vec<CompiledInstr>,
    arity: usize,
}

/// A program lowered for fast repeated execution: labels resolved to
/// indices, globals to slots. Compile once, run many.
#[derive(Debug, Clone)]
pub struct CompiledProgram {
    fns: Vec<CompiledFn>,
    fn_index: HashMap<String, usize>,
    global_names: Vec<String>,
    global_init: Vec<u32>,
}

impl CompiledProgram {
    pub fn new(program: &Program) -> Self {
        let mut fn_index = HashMap::new();
        for (i, name) in program.order.iter().enumerate() {
            fn_index.insert(name.clone(), i);
        }
        let global_names: Vec<String> = program.globals.keys().cloned().collect();
        let global_init: Vec<u32> = program.globals.values().map(|v| *v as u32).collect();
        let global_index: BTreeMap<&str, usize> = global_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let fns = program
            .order
            .iter()
            .map(|name| compile_fn(&program.functions[name], &fn_index, &global_index))
            .collect();
        CompiledProgram {
            fns,
            fn_index,
            global_names,
            global_init,
        }
    }

    pub fn interpret(&self, fn_name: &str, inputs: &[u32], budget: u64) -> Result<ExecResult> {
        InterpState::at(self, fn_name, inputs, budget)?.run()
    }
}

fn compile_fn(
    f: &Function,
    fn_index: &HashMap<String, usize>,
    global_index: &BTreeMap<&str, usize>,
) -> CompiledFn {
    let mut starts: HashMap<&str, usize> = HashMap::new();
    let mut at = 0usize;
    for b in &f.blocks {
        starts.insert(b.label.as_str(), at);
        at += b.instructions.len();
    }
    let instrs = f
        .blocks
        .iter()
        .flat_map(|b| b.instructions.iter())
        .map(|ins| {
            let target = match ins.opcode {
                Opcode::B => starts[ins.target.as_deref().expect("validated")],
                Opcode::Bl | Opcode::Blx => fn_index[ins.target.as_deref().expect("validated")],
                Opcode::Ldrg | Opcode::Strg => {
                    global_index[ins.global.as_deref().expect("validated")]
                }
                _ => 0,
            };
            CompiledInstr {
                ins: ins.clone(),
                target,
            }
        })
        .collect();
    CompiledFn {
        instrs,
        arity: f.arity,
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    fn_idx: usize,
    return_pc: usize,
}

/// A stepping interpreter over one call tree.
pub struct InterpState<'p> {
    prog: &'p CompiledProgram,
    globals: Vec<u32>,
    regs: [u32; 16],
    n: bool,
    z: bool,
    fn_idx: usize,
    pc: usize,
    stack: Vec<Frame>,
    out: Vec<u32>,
    steps: u64,
    budget: u64,
}

/// What a single step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Running,
    Finished(u32),
}

impl<'p> InterpState<'p> {
    pub fn at(
        prog: &'p CompiledProgram,
        fn_name: &str,
        inputs: &[u32],
        budget: u64,
    ) -> Result<Self> {
        let fn_idx = *prog
            .fn_index
            .get(fn_name)
            .ok_or_else(|| Error::NoSuchFunction(fn_name.to_string()))?;
        if inputs.len() != prog.fns[fn_idx].arity {
            return Err(Error::ArityMismatch {
                fn_name: fn_name.to_string(),
                arity: prog.fns[fn_idx].arity,
                given: inputs.len(),
            });
        }
        let mut regs = [0u32; 16];
        for (i, v) in inputs.iter().enumerate() {
            regs[i] = *v;
        }
        Ok(InterpState {
            prog,
            globals: prog.global_init.clone(),
            regs,
            n: false,
            z: false,
            fn_idx,
            pc: 0,
            stack: Vec::new(),
            out: Vec::new(),
            steps: 0,
            budget,
        })
    }

    pub fn regs(&self) -> &[u32; 16] {
        &self.regs
    }

    pub fn flags(&self) -> (bool, bool) {
        (self.n, self.z)
    }

    pub fn global(&self, name: &str) -> Option<u32> {
        self.prog
            .global_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.globals[i])
    }

    fn operand(&self, op: Operand) -> u32 {
        match op {
            Operand::Reg(r) => self.regs[r.index()],
            Operand::Imm(v) => v as u32,
        }
    }

    /// Executes one instruction slot.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.steps >= self.budget {
            return Err(Error::Divergence(self.budget));
        }
        self.steps += 1;

        let ci = &self.prog.fns[self.fn_idx].instrs[self.pc];
        let ins = &ci.ins;
        let target = ci.target;

        if !ins.cond.holds(self.n, self.z) {
            self.pc += 1;
            return Ok(StepOutcome::Running);
        }

        let mut next = self.pc + 1;
        match ins.opcode {
            Opcode::Nop => {}
            Opcode::Mov => {
                self.regs[ins.dest.unwrap().index()] = self.operand(ins.src1.unwrap());
            }
            Opcode::Mvn => {
                self.regs[ins.dest.unwrap().index()] = !self.operand(ins.src1.unwrap());
            }
            Opcode::Add | Opcode::Sub | Opcode::Rsb | Opcode::Mul | Opcode::And | Opcode::Orr
            | Opcode::Eor | Opcode::Ands | Opcode::Subs => {
                let a = self.operand(ins.src1.unwrap());
                let b = self.operand(ins.src2.unwrap());
                let v = match ins.opcode {
                    Opcode::Add => a.wrapping_add(b),
                    Opcode::Sub | Opcode::Subs => a.wrapping_sub(b),
                    Opcode::Rsb => b.wrapping_sub(a),
                    Opcode::Mul => a.wrapping_mul(b),
                    Opcode::And | Opcode::Ands => a & b,
                    Opcode::Orr => a | b,
                    Opcode::Eor => a ^ b,
                    _ => unreachable!(),
                };
                self.regs[ins.dest.unwrap().index()] = v;
                if ins.opcode.sets_flags() {
                    self.n = (v as i32) < 0;
                    self.z = v == 0;
                }
            }
            Opcode::Cmp => {
                let a = self.operand(ins.src1.unwrap()) as i32;
                let b = self.operand(ins.src2.unwrap()) as i32;
                self.n = a < b;
                self.z = a == b;
            }
            Opcode::Adr => {
                let alpha = ins.src1.unwrap().as_imm().unwrap();
                self.regs[ins.dest.unwrap().index()] =
                    ins.address.wrapping_add(8).wrapping_add(alpha as u32);
            }
            Opcode::B => next = target,
            Opcode::Bl | Opcode::Blx => {
                if self.stack.len() >= CALL_DEPTH_LIMIT {
                    return Err(Error::RecursionLimit(CALL_DEPTH_LIMIT));
                }
                self.regs[Register::LINK.index()] = ins.address.wrapping_add(4);
                self.stack.push(Frame {
                    fn_idx: self.fn_idx,
                    return_pc: self.pc + 1,
                });
                self.fn_idx = target;
                next = 0;
            }
            Opcode::Ret => match self.stack.pop() {
                Some(frame) => {
                    self.fn_idx = frame.fn_idx;
                    next = frame.return_pc;
                }
                None => return Ok(StepOutcome::Finished(self.regs[0])),
            },
            Opcode::Out => {
                let v = self.operand(ins.src1.unwrap());
                self.out.push(v);
            }
            Opcode::Ldrg => {
                self.regs[ins.dest.unwrap().index()] = self.globals[target];
            }
            Opcode::Strg => {
                self.globals[target] = self.operand(ins.src1.unwrap());
            }
        }
        self.pc = next;
        Ok(StepOutcome::Running)
    }

    pub fn run(mut self) -> Result<ExecResult> {
        loop {
            if let StepOutcome::Finished(return_value) = self.step()? {
                return Ok(ExecResult {
                    return_value,
                    out_stream: self.out,
                    steps: self.steps,
                });
            }
        }
    }
}

/// Runs `fn_name` on `inputs` with the default step budget. Compiles the
/// program first; callers running many inputs should compile once via
/// [`CompiledProgram`].
pub fn interpret(program: &Program, fn_name: &str, inputs: &[u32]) -> Result<ExecResult> {
    interpret_with_budget(program, fn_name, inputs, STEP_BUDGET)
}

pub fn interpret_with_budget(
    program: &Program,
    fn_name: &str,
    inputs: &[u32],
    budget: u64,
) -> Result<ExecResult> {
    CompiledProgram::new(program).interpret(fn_name, inputs, budget)
}
