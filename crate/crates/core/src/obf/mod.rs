//! The three obfuscation passes, plus the ground truth they emit for
//! oracle-backed testing of the deobfuscation side.
//!
//! Passes run per function in the fixed order instruction substitution,
//! bogus control flow, control-flow flattening. Everything is driven by a
//! seeded RNG, so the same `(program, config)` pair always produces the
//! same output.

mod bcf;
mod cff;
mod inssub;

pub use bcf::bcf_pass;
pub use cff::cff_pass;
pub use inssub::inssub_pass;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ir::{Cfg, Function, Opcode, Program, Register, BASE_ADDRESS};
use crate::Result;

/// Which passes to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pass {
    InsSub,
    Bcf,
    Cff,
}

/// Obfuscator configuration.
#[derive(Debug, Clone)]
pub struct ObfConfig {
    pub passes: BTreeSet<Pass>,
    pub seed: u64,
    /// Probability (percent) that a block receives a bogus branch.
    pub bcf_prob: u32,
    /// How many times the BCF selection sweep runs.
    pub bcf_loop: u32,
    /// Interior split points per original block before flattening.
    pub split_num: u32,
}

impl Default for ObfConfig {
    fn default() -> Self {
        ObfConfig {
            passes: BTreeSet::new(),
            seed: 0xD1A0A,
            bcf_prob: 30,
            bcf_loop: 1,
            split_num: 0,
        }
    }
}

impl ObfConfig {
    pub fn with_passes(passes: &[Pass], seed: u64) -> Self {
        ObfConfig {
            passes: passes.iter().copied().collect(),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.bcf_prob) {
            return Err(crate::Error::Obfuscation {
                fn_name: String::new(),
                msg: format!("bcf_prob {} out of 1..=100", self.bcf_prob),
            });
        }
        if self.split_num > 8 {
            return Err(crate::Error::Obfuscation {
                fn_name: String::new(),
                msg: format!("split_num {} out of 0..=8", self.split_num),
            });
        }
        Ok(())
    }
}

/// One applied instruction substitution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SubstitutedSite {
    pub block: String,
    /// Index of the first emitted instruction inside the block.
    pub start_index: usize,
    /// Number of emitted instructions (materialization included).
    pub len: usize,
    pub op: Opcode,
    /// Byte address range in the final layout, when still resolvable.
    pub addr_range: Option<(u32, u32)>,
}

/// Ground truth for one obfuscated function.
#[derive(Debug, Clone, Default)]
pub struct FnGroundTruth {
    /// Original-block label -> routing value (flattening only).
    pub case_values: BTreeMap<String, u32>,
    pub predicate_blocks: BTreeSet<String>,
    pub dead_blocks: BTreeSet<String>,
    pub substituted_sites: Vec<SubstitutedSite>,
    /// CFG after block splitting but before flattening.
    pub original_cfg: Option<Cfg>,
}

/// Ground truth for a whole obfuscation run, per function.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub functions: BTreeMap<String, FnGroundTruth>,
}

impl GroundTruth {
    pub fn is_empty(&self) -> bool {
        self.functions.values().all(|g| {
            g.case_values.is_empty()
                && g.predicate_blocks.is_empty()
                && g.dead_blocks.is_empty()
                && g.substituted_sites.is_empty()
        })
    }

    /// Flat JSON shape; labels are qualified as `function::label` so
    /// multi-function programs stay unambiguous.
    pub fn to_spec_json(&self) -> serde_json::Value {
        let mut case_values = serde_json::Map::new();
        let mut predicate_blocks = Vec::new();
        let mut dead_blocks = Vec::new();
        let mut substituted_sites = Vec::new();
        for (fn_name, g) in &self.functions {
            for (label, v) in &g.case_values {
                case_values.insert(format!("{fn_name}::{label}"), (*v).into());
            }
            for label in &g.predicate_blocks {
                predicate_blocks.push(format!("{fn_name}::{label}"));
            }
            for label in &g.dead_blocks {
                dead_blocks.push(format!("{fn_name}::{label}"));
            }
            for site in &g.substituted_sites {
                substituted_sites.push(serde_json::json!({
                    "block": format!("{fn_name}::{}", site.block),
                    "op": site.op.mnemonic(),
                    "addr_range": site.addr_range,
                }));
            }
        }
        serde_json::json!({
            "case_values": case_values,
            "predicate_blocks": predicate_blocks,
            "dead_blocks": dead_blocks,
            "substituted_sites": substituted_sites,
        })
    }
}

/// Deterministic per-purpose sub-seed, stable across platforms.
pub(crate) fn subseed(seed: u64, fn_name: &str, purpose: &str) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in fn_name.bytes().chain([0x1F]).chain(purpose.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01B3);
        h ^= h >> 29;
    }
    h
}

/// Scratch registers available to a pass: R4..R11 not referenced by the
/// function. R12 is kept free as the routing register and R14 as the link
/// register.
pub(crate) fn scratch_pool(f: &Function) -> Vec<Register> {
    let used = f.used_registers();
    (4u8..=11)
        .map(Register)
        .filter(|r| !used.contains(r))
        .collect()
}

/// True when some conditional instruction in the block reads flags that
/// were not produced inside the block, which makes the block unsafe to
/// guard or dispatch (both clobber flags on entry).
pub(crate) fn has_flag_livein(block: &crate::ir::BasicBlock) -> bool {
    let mut flags_set = false;
    for ins in &block.instructions {
        if ins.cond != crate::ir::Cond::Al && !flags_set {
            return true;
        }
        if ins.opcode.sets_flags() {
            flags_set = true;
        }
        if ins.opcode.is_call() {
            // A call may execute arbitrary flag-setting code.
            flags_set = false;
        }
    }
    false
}

/// Applies the selected passes in order inssub -> bcf -> cff to every
/// function and merges the per-function ground truth.
pub fn obfuscate(program: &Program, cfg: &ObfConfig) -> Result<(Program, GroundTruth)> {
    cfg.validate()?;
    let mut out = program.clone();
    let mut truth = GroundTruth::default();

    if cfg.passes.contains(&Pass::Bcf) {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "", "bcf-globals"));
        use rand::Rng;
        for name in ["x", "y"] {
            out.globals
                .entry(name.to_string())
                .or_insert_with(|| rng.gen_range(-1000..1000));
        }
    }

    // Functions are laid out progressively so later passes see final
    // addresses: a function's base depends only on the sizes of the
    // already-obfuscated functions before it.
    let mut base = BASE_ADDRESS;
    for name in out.order.clone() {
        let mut f = out.functions.remove(&name).expect("ordered function");
        f.base_address = base;
        f.assign_addresses();
        let mut gt = FnGroundTruth::default();

        if cfg.passes.contains(&Pass::InsSub) {
            let (nf, sites) = inssub_pass(&f, cfg);
            f = nf;
            f.base_address = base;
            f.assign_addresses();
            gt.substituted_sites = sites;
        }
        let mut machinery: BTreeSet<String> = BTreeSet::new();
        if cfg.passes.contains(&Pass::Bcf) {
            let (nf, frag) = bcf_pass(&f, cfg);
            f = nf;
            f.base_address = base;
            f.assign_addresses();
            machinery.extend(frag.predicate_blocks.iter().cloned());
            machinery.extend(frag.dead_blocks.iter().cloned());
            gt.predicate_blocks = frag.predicate_blocks;
            gt.dead_blocks = frag.dead_blocks;
        }
        if cfg.passes.contains(&Pass::Cff) && f.blocks.len() >= 2 {
            let mut protected: BTreeMap<String, Vec<std::ops::Range<usize>>> = BTreeMap::new();
            for s in &gt.substituted_sites {
                protected
                    .entry(s.block.clone())
                    .or_default()
                    .push(s.start_index..s.start_index + s.len);
            }
            let protected = protected.into_iter().collect();
            let (nf, frag) = cff_pass(&f, cfg, &machinery, &protected)?;
            f = nf;
            f.base_address = base;
            f.assign_addresses();
            gt.case_values = frag.case_values;
            gt.original_cfg = frag.original_cfg;
        }

        base = f.end_address();
        out.functions.insert(name.clone(), f);
        truth.functions.insert(name, gt);
    }
    out.assign_addresses();

    // Resolve substitution sites to address ranges in the final layout.
    for (name, gt) in &mut truth.functions {
        let f = &out.functions[name];
        for site in &mut gt.substituted_sites {
            site.addr_range = f.block(&site.block).and_then(|b| {
                let end = site.start_index + site.len;
                (end <= b.instructions.len()).then(|| {
                    (
                        b.instructions[site.start_index].address,
                        b.instructions[end - 1].address,
                    )
                })
            });
        }
    }
    Ok((out, truth))
}
