//! Control-flow graphs over basic blocks, plus DOT rendering.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use super::{Function, Instruction};

/// Edge kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum EdgeKind {
    Uncond,
    True,
    False,
    Fallthrough,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfgNode {
    pub label: String,
    pub instructions: Vec<Instruction>,
}

/// A control-flow graph. Nodes keep their listing order; edges are
/// directed and at most two leave any node.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Cfg {
    pub entry: String,
    pub nodes: Vec<CfgNode>,
    pub edges: Vec<Edge>,
}

impl Cfg {
    pub fn node(&self, label: &str) -> Option<&CfgNode> {
        self.nodes.iter().find(|n| n.label == label)
    }

    pub fn node_mut(&mut self, label: &str) -> Option<&mut CfgNode> {
        self.nodes.iter_mut().find(|n| n.label == label)
    }

    pub fn successors(&self, label: &str) -> Vec<&Edge> {
        self.edges.iter().filter(|e| e.from == label).collect()
    }

    pub fn predecessors(&self, label: &str) -> Vec<&Edge> {
        self.edges.iter().filter(|e| e.to == label).collect()
    }

    pub fn out_degree(&self, label: &str) -> usize {
        self.edges.iter().filter(|e| e.from == label).count()
    }

    pub fn in_degree(&self, label: &str) -> usize {
        self.edges.iter().filter(|e| e.to == label).count()
    }

    /// Labels reachable from the entry, including the entry itself.
    pub fn reachable(&self) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        if self.node(&self.entry).is_none() {
            return seen;
        }
        let mut queue = VecDeque::from([self.entry.clone()]);
        seen.insert(self.entry.clone());
        while let Some(label) = queue.pop_front() {
            for e in self.successors(&label) {
                if seen.insert(e.to.clone()) {
                    queue.push_back(e.to.clone());
                }
            }
        }
        seen
    }

    /// Drops the named nodes and every edge touching them.
    pub fn remove_nodes(&mut self, labels: &BTreeSet<String>) {
        self.nodes.retain(|n| !labels.contains(&n.label));
        self.edges
            .retain(|e| !labels.contains(&e.from) && !labels.contains(&e.to));
    }

    /// Edge set as (from, to) pairs, ignoring kinds.
    pub fn edge_pairs(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect()
    }
}

/// Builds the CFG of a function. Unreachable blocks are retained so that
/// dead branches stay visible to later analyses.
pub fn build_cfg(f: &Function) -> Cfg {
    let nodes: Vec<CfgNode> = f
        .blocks
        .iter()
        .map(|b| CfgNode {
            label: b.label.clone(),
            instructions: b.instructions.clone(),
        })
        .collect();
    let mut edges = Vec::new();
    for (i, b) in f.blocks.iter().enumerate() {
        let next_label = f.blocks.get(i + 1).map(|n| n.label.clone());
        let n = b.instructions.len();
        let last = b.instructions.last();
        let prev = n.checked_sub(2).and_then(|k| b.instructions.get(k));
        match last {
            Some(ins) if ins.opcode == super::Opcode::Ret => {}
            Some(ins) if ins.is_uncond_branch() => {
                if let Some(p) = prev.filter(|p| p.is_cond_branch()) {
                    edges.push(Edge {
                        from: b.label.clone(),
                        to: p.target.clone().unwrap(),
                        kind: EdgeKind::True,
                    });
                    edges.push(Edge {
                        from: b.label.clone(),
                        to: ins.target.clone().unwrap(),
                        kind: EdgeKind::False,
                    });
                } else {
                    edges.push(Edge {
                        from: b.label.clone(),
                        to: ins.target.clone().unwrap(),
                        kind: EdgeKind::Uncond,
                    });
                }
            }
            Some(ins) if ins.is_cond_branch() => {
                edges.push(Edge {
                    from: b.label.clone(),
                    to: ins.target.clone().unwrap(),
                    kind: EdgeKind::True,
                });
                if let Some(next) = next_label {
                    edges.push(Edge {
                        from: b.label.clone(),
                        to: next,
                        kind: EdgeKind::False,
                    });
                }
            }
            _ => {
                if let Some(next) = next_label {
                    edges.push(Edge {
                        from: b.label.clone(),
                        to: next,
                        kind: EdgeKind::Fallthrough,
                    });
                }
            }
        }
    }
    Cfg {
        entry: f.entry.clone(),
        nodes,
        edges,
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders a CFG as a Graphviz digraph. True/false edges are labeled
/// `T`/`F`; false edges are dashed.
pub fn emit_dot(g: &Cfg) -> String {
    let mut out = String::from("digraph cfg {\n");
    out.push_str("    node [shape=box, fontname=\"monospace\"];\n");
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        ids.insert(n.label.as_str(), i);
        let mut text = format!("{}:", n.label);
        for ins in &n.instructions {
            let _ = write!(text, "\\l  {}", dot_escape(&ins.render()));
        }
        text.push_str("\\l");
        let shape = if n.label == g.entry { ", penwidth=2" } else { "" };
        let _ = writeln!(out, "    n{i} [label=\"{text}\"{shape}];");
    }
    for e in &g.edges {
        let (Some(&from), Some(&to)) = (ids.get(e.from.as_str()), ids.get(e.to.as_str())) else {
            continue;
        };
        let attrs = match e.kind {
            EdgeKind::True => " [label=\"T\"]",
            EdgeKind::False => " [label=\"F\", style=dashed]",
            _ => "",
        };
        let _ = writeln!(out, "    n{from} -> n{to}{attrs};");
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn straight_line_has_no_edges() {
        let p = parse_program("func f:\ne:\n    MOV R0, #1\n    RET\n").unwrap();
        let g = build_cfg(p.function("f").unwrap());
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn cond_pair_yields_true_and_false_edges() {
        let src = "func f(1):\ne:\n    CMP R0, #0\n    BEQ a\n    B b\na:\n    RET\nb:\n    RET\n";
        let p = parse_program(src).unwrap();
        let g = build_cfg(p.function("f").unwrap());
        assert_eq!(g.nodes.len(), 3);
        let kinds: Vec<(EdgeKind, &str)> = g
            .successors("e")
            .iter()
            .map(|e| (e.kind, e.to.as_str()))
            .collect();
        assert_eq!(kinds, vec![(EdgeKind::True, "a"), (EdgeKind::False, "b")]);
    }

    #[test]
    fn diamond_has_four_nodes_four_edges() {
        let src = "func f(1):\ne:\n    CMP R0, #0\n    BEQ l\n    B r\nl:\n    MOV R0, #1\n    B x\nr:\n    MOV R0, #2\n    B x\nx:\n    RET\n";
        let p = parse_program(src).unwrap();
        let g = build_cfg(p.function("f").unwrap());
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 4);
        assert_eq!(g.in_degree("x"), 2);
    }

    #[test]
    fn unreachable_blocks_are_retained() {
        let src = "func f:\ne:\n    B done\norphan:\n    MOV R1, #9\n    B done\ndone:\n    RET\n";
        let p = parse_program(src).unwrap();
        let g = build_cfg(p.function("f").unwrap());
        assert_eq!(g.nodes.len(), 3);
        assert!(!g.reachable().contains("orphan"));
    }

    #[test]
    fn dot_contains_nodes_and_labeled_edges() {
        let src = "func f(1):\ne:\n    CMP R0, #0\n    BEQ a\n    B b\na:\n    RET\nb:\n    RET\n";
        let p = parse_program(src).unwrap();
        let dot = emit_dot(&build_cfg(p.function("f").unwrap()));
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("label=\"T\""));
        assert!(dot.contains("label=\"F\""));
        assert!(dot.contains("CMP R0, #0"));
    }

    #[test]
    fn dot_of_single_block() {
        let p = parse_program("func f:\nentry:\n    RET\n").unwrap();
        let dot = emit_dot(&build_cfg(p.function("f").unwrap()));
        assert!(dot.contains("entry:"));
        assert_eq!(dot.matches("->").count(), 0);
    }

    #[test]
    fn two_node_chain_in_dot() {
        let p = parse_program("func f:\ne:\n    NOP\nnext:\n    RET\n").unwrap();
        let dot = emit_dot(&build_cfg(p.function("f").unwrap()));
        assert_eq!(dot.matches("->").count(), 1);
    }
}
