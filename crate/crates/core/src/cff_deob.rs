//! Control-flow recovery for flattened functions: block classification,
//! successor-count determination, dynamic-queue-scheduled symbolic
//! execution, and the two reconstruction rules. Also hosts the end-to-end
//! per-function deobfuscation pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::bcf_deob::{deobfuscate_bcf, find_predicate_blocks, resolve_opaque_branches};
use crate::detect::{build_dispatcher_dict, detect_obfuscations, DetectionReport, DispatcherDict};
use crate::inssub_deob::deobfuscate_inssub;
use crate::ir::{build_cfg, Cfg, CfgNode, Cond, Edge, EdgeKind, Function, Opcode, Operand};
use crate::symexec::{StateStore, SymExec, SymState, SYM_STEP_BUDGET};
use crate::{Error, Result};

/// The five block categories of a flattened function, plus Other for
/// machinery that carries no original operation (e.g. the trap).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Prologue,
    Dispatcher,
    PreDispatcher,
    Return,
    Relevant,
    Other,
}

/// Classification result. Partly-merged relevant blocks (several
/// relevant parents) are listed in `duplicated`, one copy per parent.
#[derive(Debug, Clone, Default)]
pub struct BlockClass {
    pub kinds: BTreeMap<String, BlockKind>,
    pub duplicated: BTreeMap<String, Vec<String>>,
}

impl BlockClass {
    pub fn kind(&self, label: &str) -> BlockKind {
        self.kinds.get(label).copied().unwrap_or(BlockKind::Other)
    }

    pub fn relevants(&self) -> impl Iterator<Item = &String> {
        self.kinds
            .iter()
            .filter(|(_, k)| matches!(k, BlockKind::Relevant))
            .map(|(l, _)| l)
    }

    pub fn returns(&self) -> impl Iterator<Item = &String> {
        self.kinds
            .iter()
            .filter(|(_, k)| matches!(k, BlockKind::Return))
            .map(|(l, _)| l)
    }
}

/// Classifies blocks: the entry is the Prologue, dictionary hits are
/// Dispatchers (Pre-Dispatchers when their in-degree exceeds two),
/// out-degree-zero blocks are Returns, and reverse traversal from each
/// Pre-Dispatcher up to the nearest dispatcher collects the Relevants.
pub fn classify_blocks(g: &Cfg, dict: &DispatcherDict) -> Result<BlockClass> {
    let mut bc = BlockClass::default();
    for node in &g.nodes {
        bc.kinds.insert(node.label.clone(), BlockKind::Other);
    }
    for label in dict.entries.keys() {
        bc.kinds.insert(label.clone(), BlockKind::Dispatcher);
    }
    let mut predispatchers = Vec::new();
    for label in dict.entries.keys() {
        if g.in_degree(label) > 2 {
            bc.kinds.insert(label.clone(), BlockKind::PreDispatcher);
            predispatchers.push(label.clone());
        }
    }
    if predispatchers.is_empty() {
        return Err(Error::NoPreDispatcher);
    }
    for node in &g.nodes {
        if g.out_degree(&node.label) == 0 {
            bc.kinds.insert(node.label.clone(), BlockKind::Return);
        }
    }
    bc.kinds.insert(g.entry.clone(), BlockKind::Prologue);

    // Reverse traversal: walk predecessors from each pre-dispatcher,
    // stopping at dispatchers; everything passed through is Relevant.
    for pd in &predispatchers {
        let mut stack: Vec<String> = g.predecessors(pd).iter().map(|e| e.from.clone()).collect();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        while let Some(label) = stack.pop() {
            if !seen.insert(label.clone()) {
                continue;
            }
            match bc.kind(&label) {
                BlockKind::Dispatcher | BlockKind::PreDispatcher | BlockKind::Prologue
                | BlockKind::Return => continue,
                BlockKind::Relevant | BlockKind::Other => {}
            }
            bc.kinds.insert(label.clone(), BlockKind::Relevant);
            for e in g.predecessors(&label) {
                stack.push(e.from.clone());
            }
        }
    }

    // Partly-merged relevants: several relevant parents each get a copy.
    for node in &g.nodes {
        if bc.kind(&node.label) != BlockKind::Relevant {
            continue;
        }
        let parents: Vec<String> = g
            .predecessors(&node.label)
            .iter()
            .filter(|e| bc.kind(&e.from) == BlockKind::Relevant)
            .map(|e| e.from.clone())
            .collect();
        if parents.len() >= 2 {
            let mut ps = parents;
            ps.sort();
            ps.dedup();
            if ps.len() >= 2 {
                bc.duplicated.insert(node.label.clone(), ps);
            }
        }
    }
    Ok(bc)
}

/// Identity of an analyzed block: a physical label, plus the owning
/// parent for duplicated copies of a partly-merged block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OoId {
    pub label: String,
    pub owner: Option<String>,
}

impl OoId {
    pub fn plain(label: &str) -> Self {
        OoId { label: label.to_string(), owner: None }
    }

    pub fn copy(label: &str, owner: &str) -> Self {
        OoId { label: label.to_string(), owner: Some(owner.to_string()) }
    }
}

impl fmt::Display for OoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.owner {
            Some(o) => write!(f, "{}#{}", self.label, o),
            None => f.write_str(&self.label),
        }
    }
}

/// Walks the straight path from `label` toward the pre-dispatcher,
/// stopping at dispatchers and other OO blocks, and reports whether a
/// conditional move involving a routing-tainted register lies on it.
///
/// A register is tainted by `MOV rd, #v` with `v` in the dictionary and
/// freed by any unrelated redefinition.
pub fn successor_count(
    label: &str,
    f: &Function,
    dict: &DispatcherDict,
    bc: &BlockClass,
) -> usize {
    let mut tainted: BTreeSet<crate::ir::Register> = BTreeSet::new();
    let mut current = label.to_string();
    let mut hops = 0usize;
    loop {
        let Some(block) = f.block(&current) else { return 1 };
        for ins in &block.instructions {
            let imm_in_dict = ins
                .src1
                .and_then(Operand::as_imm)
                .is_some_and(|v| dict.contains_value(v as u32));
            if ins.opcode == Opcode::Mov && ins.cond != Cond::Al {
                let dest_tainted = ins.dest.is_some_and(|d| tainted.contains(&d));
                if dest_tainted || imm_in_dict {
                    return 2;
                }
            }
            if ins.opcode == Opcode::Mov && ins.cond == Cond::Al && imm_in_dict {
                tainted.insert(ins.dest.unwrap());
                continue;
            }
            if let Some(w) = ins.writes() {
                tainted.remove(&w);
            }
        }
        // Follow the unconditional continuation, if any.
        let next = match block.instructions.last() {
            Some(i) if i.is_uncond_branch() => i.target.clone().unwrap(),
            Some(i) if i.opcode == Opcode::Ret || i.is_cond_branch() => return 1,
            _ => match f.block_index(&current).and_then(|i| f.blocks.get(i + 1)) {
                Some(b) => b.label.clone(),
                None => return 1,
            },
        };
        match bc.kind(&next) {
            BlockKind::Other => {}
            _ => return 1,
        }
        current = next;
        hops += 1;
        if hops > f.blocks.len() {
            return 1;
        }
    }
}

/// One recovered edge with its branch polarity (None for single-successor
/// runs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveredEdge {
    pub from: OoId,
    pub to: OoId,
    pub polarity: Option<bool>,
}

/// Control flow recovered by symbolic execution over the OO blocks.
#[derive(Debug, Clone, Default)]
pub struct RecoveredCfg {
    pub entry: OoId,
    pub nodes: Vec<OoId>,
    pub edges: Vec<RecoveredEdge>,
}

impl Default for OoId {
    fn default() -> Self {
        OoId::plain("")
    }
}

impl RecoveredCfg {
    /// Edge set over physical labels, Prologue excluded; this is what the
    /// ground-truth CFG is compared against.
    pub fn label_edge_pairs(&self, prologue: &str) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .filter(|e| e.from.label != prologue)
            .map(|e| (e.from.label.clone(), e.to.label.clone()))
            .collect()
    }
}

/// Execution statistics of one recovery run.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct RecoveryStats {
    pub relevants: usize,
    pub edges: usize,
    /// Fraction of non-Prologue queue entries analyzed from a restored
    /// state.
    pub restored_fraction: f64,
    /// Some block hit the step budget; its edges were omitted.
    pub partial: bool,
    /// `execution_pointer <= swap_pointer` held at every iteration.
    pub pointer_invariant_held: bool,
    /// Queue contents and swap pointer after each iteration.
    #[serde(skip)]
    pub queue_history: Vec<(Vec<String>, usize)>,
}

/// Options for the recovery stage.
#[derive(Debug, Clone, Copy)]
pub struct DeobOptions {
    /// Capacity of the per-block state store.
    pub saved_states: usize,
    pub step_budget: u64,
}

impl Default for DeobOptions {
    fn default() -> Self {
        DeobOptions {
            saved_states: 1,
            step_budget: SYM_STEP_BUDGET,
        }
    }
}

/// Dynamic queue scheduling: analyzes every OO block once, restoring the
/// state its discoverer saved (blank only at the Prologue), forking at
/// conditional moves for two-successor blocks, and swapping discovered
/// successors to the swap pointer so they inherit context before they
/// are analyzed.
pub fn recover_flow(
    f: &Function,
    bc: &BlockClass,
    dict: &DispatcherDict,
    opts: &DeobOptions,
) -> (RecoveredCfg, RecoveryStats) {
    let engine = SymExec::new(f);
    let prologue = f.entry.clone();

    // Queue: Prologue, then relevants in listing order (duplicated blocks
    // contribute one copy per parent), then returns.
    let mut queue: Vec<OoId> = vec![OoId::plain(&prologue)];
    for block in &f.blocks {
        if bc.kind(&block.label) != BlockKind::Relevant {
            continue;
        }
        match bc.duplicated.get(&block.label) {
            Some(parents) => {
                for parent in parents {
                    queue.push(OoId::copy(&block.label, parent));
                }
            }
            None => queue.push(OoId::plain(&block.label)),
        }
    }
    for block in &f.blocks {
        if bc.kind(&block.label) == BlockKind::Return && block.label != prologue {
            queue.push(OoId::plain(&block.label));
        }
    }

    let stopset: BTreeSet<String> = queue.iter().map(|id| id.label.clone()).collect();
    let mut pos_of: HashMap<OoId, usize> = queue
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();

    let mut store = StateStore::new(opts.saved_states);
    let mut rc = RecoveredCfg {
        entry: OoId::plain(&prologue),
        nodes: queue.clone(),
        edges: Vec::new(),
    };
    let mut stats = RecoveryStats {
        relevants: queue.len().saturating_sub(1),
        pointer_invariant_held: true,
        ..Default::default()
    };

    // Maps a reached physical label to the queue identity owned by the
    // runner, falling back to the plain identity.
    fn resolve_id(pos_of: &HashMap<OoId, usize>, runner: &OoId, reached: &str) -> OoId {
        let copy = OoId::copy(reached, &runner.label);
        if pos_of.contains_key(&copy) {
            copy
        } else {
            OoId::plain(reached)
        }
    }

    let mut swap_ptr = 1usize;
    let mut restored_count = 0usize;
    let mut analyzed_nonprologue = 0usize;

    let mut i = 0usize;
    while i < queue.len() {
        if i > swap_ptr {
            stats.pointer_invariant_held = false;
        }
        if swap_ptr <= i {
            // Pointers coincide: move the swap pointer forward one slot.
            swap_ptr = i + 1;
        }
        let id = queue[i].clone();
        let key = id.to_string();

        let restored = store.has(&key);
        if i > 0 {
            analyzed_nonprologue += 1;
            if restored {
                restored_count += 1;
            }
        }
        let states: Vec<SymState> = if restored {
            store.all(&key, &id.label)
        } else {
            vec![SymState::blank(&id.label)]
        };

        if bc.kind(&id.label) == BlockKind::Return {
            stats.queue_history.push((queue.iter().map(|q| q.to_string()).collect(), swap_ptr));
            i += 1;
            continue;
        }

        let nsucc = if id.label == prologue {
            2
        } else {
            successor_count(&id.label, f, dict, bc)
        };

        for state in states {
            let mut runs: Vec<(SymState, Option<bool>)> = Vec::new();
            if nsucc == 2 {
                match engine.fork_at_condmove_stopping(&state, &stopset, opts.step_budget) {
                    Ok((t, fa)) => {
                        runs.push((t, Some(true)));
                        runs.push((fa, Some(false)));
                    }
                    // No conditional move ahead: a single-successor run.
                    Err(Error::NoCondMove) => runs.push((state, None)),
                    Err(_) => {
                        stats.partial = true;
                        continue;
                    }
                }
            } else {
                runs.push((state, None));
            }

            for (run_state, polarity) in runs {
                let started_at_entry = run_state.at_block_entry();
                let result = if started_at_entry {
                    engine.run_leaving_then_until(run_state, &stopset, opts.step_budget)
                } else {
                    engine.run_until(run_state, &stopset, opts.step_budget)
                };
                let (reached, end_state) = match result {
                    Ok(r) => r,
                    Err(_) => {
                        stats.partial = true;
                        continue;
                    }
                };
                let to = resolve_id(&pos_of, &id, &reached);
                let edge = RecoveredEdge { from: id.clone(), to: to.clone(), polarity };
                if !rc.edges.contains(&edge) {
                    rc.edges.push(edge);
                }
                store.save(&to.to_string(), end_state);
                if let Some(&j) = pos_of.get(&to) {
                    if j >= swap_ptr {
                        queue.swap(j, swap_ptr);
                        pos_of.insert(queue[j].clone(), j);
                        pos_of.insert(queue[swap_ptr].clone(), swap_ptr);
                        swap_ptr += 1;
                    }
                }
            }
        }
        stats.queue_history.push((queue.iter().map(|q| q.to_string()).collect(), swap_ptr));
        i += 1;
    }

    stats.edges = rc.edges.len();
    stats.restored_fraction = if analyzed_nonprologue == 0 {
        1.0
    } else {
        restored_count as f64 / analyzed_nonprologue as f64
    };
    (rc, stats)
}

/// Materializes the recovered graph as a plain CFG. Node contents are
/// the flattened block bodies with the machinery stripped — routing MOVs
/// (immediates in the dictionary, or conditional MOVs over them), the
/// branch back to the dispatcher, and NOP padding — and with terminators
/// re-synthesized from the recovered edges, so a perfect recovery is
/// instruction-identical to the original block.
pub fn materialize(rc: &RecoveredCfg, f: &Function, dict: &DispatcherDict) -> Cfg {
    let mut nodes = Vec::new();
    for id in &rc.nodes {
        let mut cond_of_routing_mov: Option<Cond> = None;
        let mut instructions: Vec<crate::ir::Instruction> = f
            .block(&id.label)
            .map(|b| {
                b.instructions
                    .iter()
                    .filter(|ins| {
                        let routing_mov = ins.opcode == Opcode::Mov
                            && ins
                                .src1
                                .and_then(Operand::as_imm)
                                .is_some_and(|v| dict.contains_value(v as u32));
                        if routing_mov && ins.cond != Cond::Al {
                            cond_of_routing_mov = Some(ins.cond);
                        }
                        let back_branch = ins.is_uncond_branch()
                            && ins
                                .target
                                .as_deref()
                                .is_some_and(|t| dict.entries.contains_key(t));
                        !routing_mov && !back_branch && ins.opcode != Opcode::Nop
                    })
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();

        // Re-synthesize the terminator the flattening rewrote away.
        let outs: Vec<&RecoveredEdge> = rc.edges.iter().filter(|e| e.from == *id).collect();
        let ends_with_ret = instructions
            .last()
            .is_some_and(|i| i.opcode == Opcode::Ret);
        if !ends_with_ret {
            match outs.len() {
                1 => instructions.push(crate::ir::Instruction::branch(
                    Cond::Al,
                    &outs[0].to.to_string(),
                )),
                2 => {
                    let t = outs.iter().find(|e| e.polarity == Some(true));
                    let fa = outs.iter().find(|e| e.polarity == Some(false));
                    if let (Some(t), Some(fa), Some(cond)) = (t, fa, cond_of_routing_mov) {
                        instructions
                            .push(crate::ir::Instruction::branch(cond, &t.to.to_string()));
                        instructions
                            .push(crate::ir::Instruction::branch(Cond::Al, &fa.to.to_string()));
                    }
                }
                _ => {}
            }
        }
        nodes.push(CfgNode {
            label: id.to_string(),
            instructions,
        });
    }
    let edges = rc
        .edges
        .iter()
        .map(|e| Edge {
            from: e.from.to_string(),
            to: e.to.to_string(),
            kind: match e.polarity {
                Some(true) => EdgeKind::True,
                Some(false) => EdgeKind::False,
                None => EdgeKind::Uncond,
            },
        })
        .collect();
    Cfg {
        entry: rc.entry.to_string(),
        nodes,
        edges,
    }
}

fn non_nop(instrs: &[crate::ir::Instruction]) -> Vec<&crate::ir::Instruction> {
    instrs.iter().filter(|i| i.opcode != Opcode::Nop).collect()
}

/// Contents are alike when opcode sequences and register operands agree
/// and the immediates advance by the same step of one.
fn alike_with_step(a: &CfgNode, b: &CfgNode) -> Option<i64> {
    let xa = non_nop(&a.instructions);
    let xb = non_nop(&b.instructions);
    if xa.is_empty() || xa.len() != xb.len() {
        return None;
    }
    let mut step: Option<i64> = None;
    let mut any_imm = false;
    for (ia, ib) in xa.iter().zip(&xb) {
        if ia.opcode != ib.opcode || ia.cond != ib.cond || ia.dest != ib.dest {
            return None;
        }
        for (oa, ob) in [(ia.src1, ib.src1), (ia.src2, ib.src2)] {
            match (oa, ob) {
                (None, None) => {}
                (Some(Operand::Reg(ra)), Some(Operand::Reg(rb))) if ra == rb => {}
                (Some(Operand::Imm(va)), Some(Operand::Imm(vb))) => {
                    any_imm = true;
                    let d = vb as i64 - va as i64;
                    match step {
                        None => step = Some(d),
                        Some(s) if s == d => {}
                        _ => return None,
                    }
                }
                _ => return None,
            }
        }
        // Branch targets necessarily differ along a ladder; everything
        // else must agree.
        if ia.opcode != Opcode::B && ia.target != ib.target {
            return None;
        }
        if ia.global != ib.global {
            return None;
        }
    }
    match step {
        Some(1) | Some(-1) if any_imm => step,
        _ => None,
    }
}

/// Rule I: a direct-jump pair collapses into one node when the merge
/// target is reached only through it.
fn apply_rule1(g: &mut Cfg) -> bool {
    let labels: Vec<String> = g.nodes.iter().map(|n| n.label.clone()).collect();
    for u in &labels {
        let outs: Vec<Edge> = g.successors(u).into_iter().cloned().collect();
        if outs.len() != 1 {
            continue;
        }
        let v = outs[0].to.clone();
        if v == *u || v == g.entry || g.in_degree(&v) != 1 {
            continue;
        }
        let v_content = g.node(&v).map(|n| n.instructions.clone()).unwrap_or_default();
        let v_out: Vec<Edge> = g.successors(&v).into_iter().cloned().collect();
        if let Some(nu) = g.node_mut(u) {
            // Drop the glue branch that jumped to v, then absorb v.
            if nu
                .instructions
                .last()
                .is_some_and(|i| i.is_uncond_branch())
            {
                nu.instructions.pop();
            }
            nu.instructions.extend(v_content);
        }
        g.edges.retain(|e| !(e.from == *u && e.to == v) && e.from != v);
        for mut e in v_out {
            e.from = u.clone();
            g.edges.push(e);
        }
        let dead = BTreeSet::from([v]);
        g.nodes.retain(|n| !dead.contains(&n.label));
        return true;
    }
    false
}

/// Rule II: a ladder of alike two-way nodes whose other branches all hit
/// one common node rolls up into a single self-looping node.
fn apply_rule2(g: &mut Cfg) -> bool {
    let labels: Vec<String> = g.nodes.iter().map(|n| n.label.clone()).collect();
    for start in &labels {
        let Some(chain) = ladder_from(g, start) else { continue };
        let (members, common) = chain;
        if members.len() < 2 {
            continue;
        }
        // Collapse into the first member with a self-loop plus the exit.
        let head = members[0].clone();
        let rest: BTreeSet<String> = members[1..].iter().cloned().collect();
        g.edges.retain(|e| {
            !(rest.contains(&e.from) || rest.contains(&e.to) || (e.from == head && e.to != common))
        });
        g.nodes.retain(|n| !rest.contains(&n.label));
        g.edges.push(Edge {
            from: head.clone(),
            to: head.clone(),
            kind: EdgeKind::False,
        });
        return true;
    }
    false
}

/// Maximal alike ladder starting at `start`: every member has exactly two
/// successors, one of which is the common off-chain target.
fn ladder_from(g: &Cfg, start: &str) -> Option<(Vec<String>, String)> {
    let outs = g.successors(start);
    if outs.len() != 2 {
        return None;
    }
    // Try both assignments of (off-chain, next).
    for (off, next) in [(&outs[0], &outs[1]), (&outs[1], &outs[0])] {
        let common = off.to.clone();
        let mut members = vec![start.to_string()];
        let mut cur = next.to.clone();
        loop {
            if cur == common || members.contains(&cur) {
                break;
            }
            let prev = g.node(members.last().unwrap()).unwrap();
            let Some(candidate) = g.node(&cur) else { break };
            if alike_with_step(prev, candidate).is_none() {
                break;
            }
            let couts = g.successors(&cur);
            if couts.len() != 2 {
                break;
            }
            let hits_common = couts.iter().filter(|e| e.to == common).count();
            if hits_common == 0 {
                break;
            }
            members.push(cur.clone());
            match couts.iter().find(|e| e.to != common) {
                Some(e) => cur = e.to.clone(),
                // Both edges hit the common exit: the ladder ends here.
                None => break,
            }
        }
        if members.len() >= 2 {
            return Some((members, common));
        }
    }
    None
}

/// Re-unifies duplicated relevant copies once merging made them
/// byte-identical: same physical label, same content, same successors.
fn reunify_duplicates(g: &mut Cfg) -> bool {
    let mut by_label: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for n in &g.nodes {
        if let Some((phys, _)) = n.label.split_once('#') {
            by_label.entry(phys.to_string()).or_default().push(n.label.clone());
        }
    }
    for (phys, copies) in by_label {
        if copies.len() < 2 {
            continue;
        }
        let contents: Vec<_> = copies
            .iter()
            .map(|c| g.node(c).map(|n| n.instructions.clone()))
            .collect();
        let succs: Vec<BTreeSet<(String, EdgeKind)>> = copies
            .iter()
            .map(|c| {
                g.successors(c)
                    .into_iter()
                    .map(|e| (e.to.clone(), e.kind))
                    .collect()
            })
            .collect();
        if contents.windows(2).all(|w| w[0] == w[1]) && succs.windows(2).all(|w| w[0] == w[1]) {
            let unified = phys.clone();
            let keep = copies[0].clone();
            for e in &mut g.edges {
                if copies.contains(&e.from) {
                    e.from = unified.clone();
                }
                if copies.contains(&e.to) {
                    e.to = unified.clone();
                }
            }
            for n in &mut g.nodes {
                for ins in &mut n.instructions {
                    if ins.opcode == Opcode::B
                        && ins.target.as_deref().is_some_and(|t| copies.iter().any(|c| c == t))
                    {
                        ins.target = Some(unified.clone());
                    }
                }
            }
            g.edges.sort_by(|a, b| (&a.from, &a.to, a.kind).cmp(&(&b.from, &b.to, b.kind)));
            g.edges.dedup();
            let removed: BTreeSet<String> =
                copies.iter().filter(|c| **c != keep).cloned().collect();
            g.nodes.retain(|n| !removed.contains(&n.label));
            if let Some(n) = g.node_mut(&keep) {
                n.label = unified.clone();
            }
            if g.entry == keep {
                g.entry = unified;
            }
            return true;
        }
    }
    false
}

/// Splices out nodes that carry nothing but a synthesized unconditional
/// branch: leftovers of resolved predicate machinery. Their predecessors
/// connect straight to the successor regardless of in-degree.
fn bypass_empty(g: &mut Cfg) -> bool {
    let labels: Vec<String> = g.nodes.iter().map(|n| n.label.clone()).collect();
    for n in &labels {
        let outs: Vec<Edge> = g.successors(n).into_iter().cloned().collect();
        if outs.len() != 1 || outs[0].to == *n {
            continue;
        }
        let trivial = g.node(n).is_some_and(|node| {
            let real: Vec<_> = node
                .instructions
                .iter()
                .filter(|i| i.opcode != Opcode::Nop)
                .collect();
            real.is_empty() || (real.len() == 1 && real[0].is_uncond_branch())
        });
        if !trivial {
            continue;
        }
        let succ = outs[0].to.clone();
        if g.entry == *n {
            g.entry = succ.clone();
        }
        let incoming: Vec<Edge> = g.predecessors(n).into_iter().cloned().collect();
        g.edges.retain(|e| e.from != *n && e.to != *n);
        for mut e in incoming {
            e.to = succ.clone();
            if !g.edges.contains(&e) {
                g.edges.push(e);
            }
        }
        // keep branch texts in other nodes pointing at the right label
        for node in &mut g.nodes {
            for ins in &mut node.instructions {
                if ins.opcode == Opcode::B && ins.target.as_deref() == Some(n.as_str()) {
                    ins.target = Some(succ.clone());
                }
            }
        }
        let dead = BTreeSet::from([n.clone()]);
        g.nodes.retain(|x| !dead.contains(&x.label));
        return true;
    }
    false
}

fn prune_unreachable(g: &mut Cfg) -> bool {
    let reachable = g.reachable();
    let dead: BTreeSet<String> = g
        .nodes
        .iter()
        .map(|n| n.label.clone())
        .filter(|l| !reachable.contains(l))
        .collect();
    if dead.is_empty() {
        return false;
    }
    g.remove_nodes(&dead);
    true
}

/// Applies Rule I, Rule II, duplicate re-unification and unreachable
/// pruning to a fixpoint. Every rule strictly reduces the node count, so
/// this terminates.
pub fn reconstruct(rc: &RecoveredCfg, f: &Function, dict: &DispatcherDict) -> Cfg {
    let mut g = materialize(rc, f, dict);
    prune_unreachable(&mut g);
    loop {
        if apply_rule1(&mut g) {
            continue;
        }
        if bypass_empty(&mut g) {
            continue;
        }
        if apply_rule2(&mut g) {
            continue;
        }
        if reunify_duplicates(&mut g) {
            continue;
        }
        if prune_unreachable(&mut g) {
            continue;
        }
        break;
    }
    g
}

/// Per-stage results of the full pipeline on one function.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DeobReport {
    pub function: String,
    pub detected: DetectedPasses,
    /// Set when the function's analysis failed and it was skipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stages: StageReport,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DetectedPasses {
    pub inssub: bool,
    pub bcf: bool,
    pub cff: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StageReport {
    pub inssub: InsSubStage,
    pub bcf: BcfStage,
    pub cff: Option<CffStage>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct InsSubStage {
    pub sites: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BcfStage {
    pub predicates: usize,
    pub dead_removed: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CffStage {
    pub relevants: usize,
    pub edges: usize,
    pub restored_fraction: f64,
    pub partial: bool,
}

/// Everything the pipeline produced for one function.
#[derive(Debug, Clone)]
pub struct FunctionDeob {
    pub detection: DetectionReport,
    /// The function after instruction-substitution and opaque-predicate
    /// rewrites (plus dead-branch pruning when no flattening is present).
    pub rewritten: Function,
    pub recovered: Option<RecoveredCfg>,
    pub reconstructed: Option<Cfg>,
    pub stats: Option<RecoveryStats>,
    pub report: DeobReport,
}

/// The full pipeline: detection, substitution recovery, predicate
/// resolution, then (when flattening is present) classification,
/// flow recovery and reconstruction.
pub fn deobfuscate_function(f: &Function, opts: &DeobOptions) -> Result<FunctionDeob> {
    let detection = detect_obfuscations(f)?;

    let (after_inssub, sites) = deobfuscate_inssub(f);
    let retained = sites.iter().filter(|s| !s.retained.is_empty()).count();

    let (rewritten, predicates, dead_removed, recovered, reconstructed, stats) =
        if detection.cff {
            // Flattened: resolve predicates in place, recover at CFG level.
            let ps = find_predicate_blocks(&after_inssub);
            let (resolved, _untouched) = resolve_opaque_branches(&after_inssub, &ps);
            let dict = build_dispatcher_dict(&resolved)?;
            let g = build_cfg(&resolved);
            let bc = classify_blocks(&g, &dict)?;
            let (rc, stats) = recover_flow(&resolved, &bc, &dict, opts);
            let rebuilt = reconstruct(&rc, &resolved, &dict);
            let npred = ps.predicate_blocks.len();
            // In flattened form the dead decoys surface as recovered
            // nodes no path leads to; count the ones pruning dropped.
            let raw = materialize(&rc, &resolved, &dict);
            let reachable = raw.reachable();
            let pruned = rc
                .nodes
                .iter()
                .filter(|id| !reachable.contains(&id.to_string()))
                .count();
            (resolved, npred, pruned, Some(rc), Some(rebuilt), Some(stats))
        } else {
            let (resolved, ps, removed) = deobfuscate_bcf(&after_inssub);
            (
                resolved,
                ps.predicate_blocks.len(),
                removed.len(),
                None,
                None,
                None,
            )
        };

    let report = DeobReport {
        function: f.name.clone(),
        detected: DetectedPasses {
            inssub: detection.inssub,
            bcf: detection.bcf,
            cff: detection.cff,
        },
        error: None,
        stages: StageReport {
            inssub: InsSubStage {
                sites: sites.len(),
                retained,
            },
            bcf: BcfStage {
                predicates,
                dead_removed,
            },
            cff: stats.as_ref().map(|s| CffStage {
                relevants: s.relevants,
                edges: s.edges,
                restored_fraction: s.restored_fraction,
                partial: s.partial,
            }),
        },
    };

    Ok(FunctionDeob {
        detection,
        rewritten,
        recovered,
        reconstructed,
        stats,
        report,
    })
}

/// Runs the pipeline on every function of a program; the rewritten
/// functions are reassembled into a program (flattened functions keep
/// their flattened shape, their recovery is delivered as a CFG).
///
/// A function whose analysis fails is skipped and carried through
/// unchanged, with the failure recorded in its report; the batch
/// continues.
pub fn deobfuscate_program(
    p: &crate::ir::Program,
    opts: &DeobOptions,
) -> Result<(crate::ir::Program, BTreeMap<String, FunctionDeob>)> {
    let mut out = p.clone();
    let mut results = BTreeMap::new();
    for name in p.order.clone() {
        match deobfuscate_function(&p.functions[&name], opts) {
            Ok(deob) => {
                out.functions.insert(name.clone(), deob.rewritten.clone());
                results.insert(name, deob);
            }
            Err(e @ (Error::InconsistentRouting(..) | Error::NoPreDispatcher)) => {
                let f = &p.functions[&name];
                results.insert(
                    name.clone(),
                    FunctionDeob {
                        detection: DetectionReport {
                            function: name.clone(),
                            inssub: false,
                            bcf: false,
                            cff: false,
                            dispatcher_labels: BTreeSet::new(),
                            routing_register: None,
                        },
                        rewritten: f.clone(),
                        recovered: None,
                        reconstructed: None,
                        stats: None,
                        report: DeobReport {
                            function: name.clone(),
                            detected: DetectedPasses {
                                inssub: false,
                                bcf: false,
                                cff: false,
                            },
                            error: Some(e.to_string()),
                            stages: StageReport {
                                inssub: InsSubStage { sites: 0, retained: 0 },
                                bcf: BcfStage { predicates: 0, dead_removed: 0 },
                                cff: None,
                            },
                        },
                    },
                );
            }
            Err(e) => return Err(e),
        }
    }
    out.assign_addresses();
    Ok((out, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, Instruction, Register};
    use crate::obf::{obfuscate, ObfConfig, Pass};

    const DIAMOND5: &str = "func f(1):\ne:\n    AND R0, R0, #255\n    B test\ntest:\n    CMP R0, #100\n    BGT big\n    B small\nbig:\n    SUB R0, R0, #100\n    B join\nsmall:\n    ADD R0, R0, #1\n    B join\njoin:\n    ADD R0, R0, #2\n    RET\n";

    fn flattened(src: &str, seed: u64, split: u32) -> (crate::ir::Program, crate::ir::Program, crate::obf::GroundTruth) {
        let p = parse_program(src).unwrap();
        let cfg = ObfConfig {
            split_num: split,
            ..ObfConfig::with_passes(&[Pass::Cff], seed)
        };
        let (q, gt) = obfuscate(&p, &cfg).unwrap();
        (p, q, gt)
    }

    #[test]
    fn classify_five_block_diamond() {
        let (_, q, gt) = flattened(DIAMOND5, 41, 0);
        let f = q.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        let g = build_cfg(f);
        let bc = classify_blocks(&g, &dict).unwrap();

        assert_eq!(bc.kind(&f.entry), BlockKind::Prologue);
        let relevants: BTreeSet<String> = bc.relevants().cloned().collect();
        let returns: BTreeSet<String> = bc.returns().cloned().collect();
        // relevant set == ground-truth original blocks minus returns
        let truth: BTreeSet<String> = gt.functions["f"]
            .case_values
            .keys()
            .filter(|l| !returns.contains(*l))
            .cloned()
            .collect();
        assert_eq!(relevants, truth);
        assert_eq!(returns, BTreeSet::from(["join".to_string()]));
        // exactly one pre-dispatcher, the branch-back target
        let pds: Vec<&String> = bc
            .kinds
            .iter()
            .filter(|(_, k)| matches!(k, BlockKind::PreDispatcher))
            .map(|(l, _)| l)
            .collect();
        assert_eq!(pds.len(), 1);
        assert!(g.in_degree(pds[0]) > 2);
    }

    #[test]
    fn classify_without_predispatcher_is_an_error() {
        // dispatchers exist but nothing branches back to them
        let src = "func f:\nd1:\n    ADR R3, #8\n    CMP R4, R3\n    BEQ x\nd2:\n    ADR R3, #8\n    CMP R4, R3\n    BEQ y\nx:\n    RET\ny:\n    RET\n";
        let p = parse_program(src).unwrap();
        let f = p.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        assert!(matches!(
            classify_blocks(&build_cfg(f), &dict),
            Err(Error::NoPreDispatcher)
        ));
    }

    /// A hand-built flattened shape with a partly-merged relevant block:
    /// two relevants jump directly into a shared tail that sets the next
    /// case.
    fn merged_shape() -> crate::ir::Program {
        let src = "\
func f(1):
pro:
    MOV R12, #0
pd:
    ADR R11, #0
    CMP R12, R11
    BEQ a
d1:
    ADR R11, #0
    CMP R12, R11
    BEQ b
d2:
    ADR R11, #0
    CMP R12, R11
    BEQ c
d3:
    ADR R11, #0
    CMP R12, R11
    BEQ fin
trap:
    B trap
a:
    ADD R0, R0, #1
    B m
b:
    ADD R0, R0, #2
    B m
c:
    ADD R0, R0, #3
    MOV R12, #0
    B pd
m:
    ADD R0, R0, #10
    MOV R12, #0
    B pd
fin:
    RET
";
        let mut p = parse_program(src).unwrap();
        // patch routing values to satisfy the dispatcher equation
        let f = p.functions.get_mut("f").unwrap();
        let mut values = BTreeMap::new();
        for (d, target) in [("pd", "a"), ("d1", "b"), ("d2", "c"), ("d3", "fin")] {
            let b = f.blocks.iter().find(|b| b.label == d).unwrap();
            let v = b.instructions[0].address.wrapping_add(8);
            values.insert(target.to_string(), v);
        }
        for b in &mut f.blocks {
            match b.label.as_str() {
                "pro" => b.instructions[0].src1 = Some(Operand::Imm(values["a"] as i32)),
                "m" | "c" => {
                    let n = b.instructions.len();
                    b.instructions[n - 2].src1 = Some(Operand::Imm(values["fin"] as i32));
                }
                _ => {}
            }
        }
        p
    }

    #[test]
    fn merged_relevant_is_duplicated_per_parent() {
        let p = merged_shape();
        let f = p.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        let g = build_cfg(f);
        let bc = classify_blocks(&g, &dict).unwrap();
        assert_eq!(
            bc.duplicated.get("m"),
            Some(&vec!["a".to_string(), "b".to_string()])
        );
        let (rc, _) = recover_flow(f, &bc, &dict, &DeobOptions::default());
        // each parent reaches its own copy of m
        let has = |from: &str, to: OoId| {
            rc.edges.iter().any(|e| e.from.label == from && e.to == to)
        };
        assert!(has("a", OoId::copy("m", "a")));
        assert!(has("b", OoId::copy("m", "b")));
    }

    #[test]
    fn successor_counts() {
        let (_, q, gt) = flattened(DIAMOND5, 13, 0);
        let f = q.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        let bc = classify_blocks(&build_cfg(f), &dict).unwrap();
        // `test` had two successors, the straight-line blocks one
        assert_eq!(successor_count("test", f, &dict, &bc), 2);
        assert_eq!(successor_count("e", f, &dict, &bc), 1);
        assert_eq!(successor_count("big", f, &dict, &bc), 1);
        let _ = gt;
    }

    #[test]
    fn recovered_edges_match_the_original_cfg() {
        for (seed, split) in [(1u64, 0u32), (2, 0), (3, 3), (4, 3)] {
            let (_, q, gt) = flattened(DIAMOND5, seed, split);
            let f = q.function("f").unwrap();
            let dict = build_dispatcher_dict(f).unwrap();
            assert_eq!(
                dict.values(),
                gt.functions["f"].case_values.values().copied().collect(),
            );
            let bc = classify_blocks(&build_cfg(f), &dict).unwrap();
            let (rc, stats) = recover_flow(f, &bc, &dict, &DeobOptions::default());
            assert!(stats.pointer_invariant_held);
            assert!(!stats.partial, "seed {seed} split {split}");
            assert_eq!(stats.restored_fraction, 1.0, "seed {seed} split {split}");
            let truth = gt.functions["f"].original_cfg.as_ref().unwrap().edge_pairs();
            assert_eq!(rc.label_edge_pairs(&f.entry), truth, "seed {seed} split {split}");
        }
    }

    /// The schedule example: the prologue's two forks drag blocks 5 and 3
    /// to the front of the sequence and the swap pointer ends up past
    /// them.
    #[test]
    fn dynamic_queue_schedule() {
        // hand-built flattened function: prologue forks to b5 / b3
        let src = "\
func f(1):
pro:
    CMP R0, #0
    MOV R12, #0
    MOVEQ R12, #0
    B pd
pd:
    ADR R11, #0
    CMP R12, R11
    BEQ b1
d2:
    ADR R11, #0
    CMP R12, R11
    BEQ b2
d3:
    ADR R11, #0
    CMP R12, R11
    BEQ b3
d4:
    ADR R11, #0
    CMP R12, R11
    BEQ b4
d5:
    ADR R11, #0
    CMP R12, R11
    BEQ b5
d6:
    ADR R11, #0
    CMP R12, R11
    BEQ fin
trap:
    B trap
b1:
    ADD R0, R0, #1
    MOV R12, #0
    B pd
b2:
    ADD R0, R0, #2
    MOV R12, #0
    B pd
b3:
    ADD R0, R0, #3
    MOV R12, #0
    B pd
b4:
    ADD R0, R0, #4
    MOV R12, #0
    B pd
b5:
    ADD R0, R0, #5
    MOV R12, #0
    B pd
fin:
    RET
";
        let mut p = parse_program(src).unwrap();
        let f = p.functions.get_mut("f").unwrap();
        let mut value_of = BTreeMap::new();
        for (d, target) in [
            ("pd", "b1"),
            ("d2", "b2"),
            ("d3", "b3"),
            ("d4", "b4"),
            ("d5", "b5"),
            ("d6", "fin"),
        ] {
            let b = f.blocks.iter().find(|b| b.label == d).unwrap();
            value_of.insert(target.to_string(), b.instructions[0].address.wrapping_add(8) as i32);
        }
        // prologue: false -> b3, true -> b5; every bk chains to fin
        for b in &mut f.blocks {
            let n = b.instructions.len();
            match b.label.as_str() {
                "pro" => {
                    b.instructions[1].src1 = Some(Operand::Imm(value_of["b3"]));
                    b.instructions[2].src1 = Some(Operand::Imm(value_of["b5"]));
                }
                "b1" | "b2" | "b3" | "b4" | "b5" => {
                    b.instructions[n - 2].src1 = Some(Operand::Imm(value_of["fin"]));
                }
                _ => {}
            }
        }
        let f = p.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        let bc = classify_blocks(&build_cfg(f), &dict).unwrap();
        let (rc, stats) = recover_flow(f, &bc, &dict, &DeobOptions::default());

        // After the prologue's two forks the sequence starts [b5, b3]
        // and the swap pointer sits on the third slot.
        let (queue_after_pro, swap_ptr) = &stats.queue_history[0];
        assert_eq!(queue_after_pro[1], "b5");
        assert_eq!(queue_after_pro[2], "b3");
        assert_eq!(*swap_ptr, 3);
        assert!(stats.pointer_invariant_held);

        let pairs = rc.label_edge_pairs("nothing");
        assert!(pairs.contains(&("pro".into(), "b5".into())));
        assert!(pairs.contains(&("pro".into(), "b3".into())));
        assert!(pairs.contains(&("b5".into(), "fin".into())));
    }

    #[test]
    fn rule1_merges_direct_jump_pairs() {
        let mut g = Cfg {
            entry: "a".into(),
            nodes: vec![
                CfgNode { label: "a".into(), instructions: vec![Instruction::mov(Register(0), Operand::Imm(1))] },
                CfgNode { label: "b".into(), instructions: vec![Instruction::mov(Register(1), Operand::Imm(2))] },
            ],
            edges: vec![Edge { from: "a".into(), to: "b".into(), kind: EdgeKind::Uncond }],
        };
        assert!(apply_rule1(&mut g));
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].instructions.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn rule1_respects_indegree_guard() {
        // b has two predecessors: no merge
        let mut g = Cfg {
            entry: "a".into(),
            nodes: vec![
                CfgNode { label: "a".into(), instructions: vec![] },
                CfgNode { label: "c".into(), instructions: vec![] },
                CfgNode { label: "b".into(), instructions: vec![] },
            ],
            edges: vec![
                Edge { from: "a".into(), to: "b".into(), kind: EdgeKind::Uncond },
                Edge { from: "c".into(), to: "b".into(), kind: EdgeKind::Uncond },
            ],
        };
        assert!(!apply_rule1(&mut g));
    }

    #[test]
    fn rule2_rolls_a_comparison_ladder_into_a_loop() {
        let cmp_node = |label: &str, k: i32| CfgNode {
            label: label.into(),
            instructions: vec![Instruction::cmp(Register(0), Operand::Imm(k))],
        };
        let mut g = Cfg {
            entry: "n1".into(),
            nodes: vec![
                cmp_node("n1", 1),
                cmp_node("n2", 2),
                cmp_node("n3", 3),
                CfgNode { label: "x".into(), instructions: vec![Instruction::new(Opcode::Ret)] },
            ],
            edges: vec![
                Edge { from: "n1".into(), to: "x".into(), kind: EdgeKind::True },
                Edge { from: "n1".into(), to: "n2".into(), kind: EdgeKind::False },
                Edge { from: "n2".into(), to: "x".into(), kind: EdgeKind::True },
                Edge { from: "n2".into(), to: "n3".into(), kind: EdgeKind::False },
                Edge { from: "n3".into(), to: "x".into(), kind: EdgeKind::True },
                Edge { from: "n3".into(), to: "x".into(), kind: EdgeKind::False },
            ],
        };
        assert!(apply_rule2(&mut g));
        prune_unreachable(&mut g);
        // one loop node plus the common exit
        assert_eq!(g.nodes.len(), 2);
        assert!(g.edges.iter().any(|e| e.from == "n1" && e.to == "n1"));
        assert!(g.edges.iter().any(|e| e.from == "n1" && e.to == "x"));
    }

    #[test]
    fn reconstruction_is_a_fixpoint_on_minimal_graphs() {
        // a diamond cannot merge or roll
        let mut g = Cfg {
            entry: "a".into(),
            nodes: ["a", "b", "c", "d"]
                .iter()
                .map(|l| CfgNode {
                    label: l.to_string(),
                    instructions: vec![Instruction::mov(Register(0), Operand::Imm(7))],
                })
                .collect(),
            edges: vec![
                Edge { from: "a".into(), to: "b".into(), kind: EdgeKind::True },
                Edge { from: "a".into(), to: "c".into(), kind: EdgeKind::False },
                Edge { from: "b".into(), to: "d".into(), kind: EdgeKind::Uncond },
                Edge { from: "c".into(), to: "d".into(), kind: EdgeKind::Uncond },
            ],
        };
        let before = g.clone();
        assert!(!apply_rule1(&mut g));
        assert!(!apply_rule2(&mut g));
        assert_eq!(g, before);
    }

    #[test]
    fn single_return_body_recovers_prologue_to_return() {
        // hand-built: only a return case plus two undispatched decoys
        // that give the pre-dispatcher its in-degree
        let src = "\
func f(1):
pro:
    MOV R12, #0
pd:
    ADR R11, #0
    CMP R12, R11
    BEQ fin
trap:
    B trap
u1:
    MOV R12, #1
    B pd
u2:
    MOV R12, #2
    B pd
fin:
    RET
";
        let mut p = parse_program(src).unwrap();
        let f = p.functions.get_mut("f").unwrap();
        let pd_adr = f.blocks.iter().find(|b| b.label == "pd").unwrap().instructions[0].address;
        let fin_case = pd_adr.wrapping_add(8) as i32;
        f.blocks[0].instructions[0].src1 = Some(Operand::Imm(fin_case));
        let f = p.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        let bc = classify_blocks(&build_cfg(f), &dict).unwrap();
        let (rc, _stats) = recover_flow(f, &bc, &dict, &DeobOptions::default());
        let rebuilt = reconstruct(&rc, f, &dict);
        // the reachable recovery is exactly Prologue -> Return
        assert!(rc
            .edges
            .iter()
            .any(|e| e.from == OoId::plain("pro") && e.to == OoId::plain("fin")));
        let labels: BTreeSet<&str> = rebuilt.nodes.iter().map(|n| n.label.as_str()).collect();
        assert!(labels.contains("fin") || labels.contains("pro"));
        assert!(rebuilt.nodes.len() <= 2);
    }

    #[test]
    fn pipeline_on_unobfuscated_input_is_identity() {
        let p = parse_program(DIAMOND5).unwrap();
        let f = p.function("f").unwrap();
        let deob = deobfuscate_function(f, &DeobOptions::default()).unwrap();
        assert!(!deob.detection.inssub && !deob.detection.bcf && !deob.detection.cff);
        assert_eq!(&deob.rewritten, f);
        assert!(deob.recovered.is_none());
        assert_eq!(deob.report.stages.inssub.sites, 0);
        assert!(deob.report.stages.cff.is_none());
    }

    #[test]
    fn full_pipeline_on_all_passes() {
        let p = parse_program(DIAMOND5).unwrap();
        let cfg = ObfConfig {
            bcf_prob: 100,
            ..ObfConfig::with_passes(&[Pass::InsSub, Pass::Bcf, Pass::Cff], 77)
        };
        let (q, gt) = obfuscate(&p, &cfg).unwrap();
        let deob = deobfuscate_function(q.function("f").unwrap(), &DeobOptions::default()).unwrap();
        assert!(deob.detection.inssub && deob.detection.bcf && deob.detection.cff);
        let rebuilt = deob.reconstructed.as_ref().unwrap();
        // no ground-truth dead block survives reconstruction
        for dead in &gt.functions["f"].dead_blocks {
            assert!(
                !rebuilt.nodes.iter().any(|n| n.label.starts_with(dead.as_str())),
                "dead block {dead} leaked into the recovery"
            );
        }
        // similarity to the original beats the obfuscated similarity
        let orig = build_cfg(p.function("f").unwrap());
        let obf = build_cfg(q.function("f").unwrap());
        let sim_deob = crate::metrics::cfg_similarity(rebuilt, &orig).unwrap().sim;
        let sim_obf = crate::metrics::cfg_similarity(&obf, &orig).unwrap().sim;
        assert!(
            sim_deob > sim_obf,
            "sim_deob {sim_deob} <= sim_obf {sim_obf}"
        );
    }

    #[test]
    fn edge_replay_is_realizable() {
        let (_, q, _) = flattened(DIAMOND5, 29, 0);
        let f = q.function("f").unwrap();
        let dict = build_dispatcher_dict(f).unwrap();
        let bc = classify_blocks(&build_cfg(f), &dict).unwrap();
        let (rc, _) = recover_flow(f, &bc, &dict, &DeobOptions::default());
        let engine = SymExec::new(f);
        let stopset: BTreeSet<String> = rc.nodes.iter().map(|n| n.label.clone()).collect();
        for e in &rc.edges {
            let blank = SymState::blank(&e.from.label);
            let reached = match e.polarity {
                None => engine
                    .run_leaving_then_until(blank, &stopset, SYM_STEP_BUDGET)
                    .map(|(l, _)| l),
                Some(pol) => {
                    let (t, fa) = engine
                        .fork_at_condmove_stopping(&blank, &stopset, SYM_STEP_BUDGET)
                        .unwrap();
                    let s = if pol { t } else { fa };
                    engine.run_until(s, &stopset, SYM_STEP_BUDGET).map(|(l, _)| l)
                }
            };
            assert_eq!(reached.unwrap(), e.to.label, "edge {} -> {}", e.from, e.to);
        }
    }
}
