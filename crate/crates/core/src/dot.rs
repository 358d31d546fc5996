//! Graphviz rendering of a dependency graph.
//!
//! File edges are solid, service edges dashed. Output is deterministic:
//! vertices in topological order, edges in graph order.

use std::fmt::Write;

use crate::model::{DependencyGraph, TransformLogic};

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn to_dot(graph: &DependencyGraph) -> String {
    let mut out = String::from("digraph pipeline {\n  rankdir=LR;\n");
    for step in graph.ordered_steps() {
        let shape = match step.transform.logic {
            TransformLogic::Argument(_) | TransformLogic::Return(_) => "note",
            TransformLogic::Subpipeline(_) => "box3d",
            _ => "box",
        };
        let _ = writeln!(out, "  {} [shape={shape}];", quote(&step.label));
    }
    for e in graph.edges() {
        let mut attrs = format!("label={}", quote(&format!("{} -> {}", e.id.output, e.id.input)));
        if e.resource.is_service() {
            attrs.push_str(", style=dashed");
        }
        let _ = writeln!(
            out,
            "  {} -> {} [{attrs}];",
            quote(&e.id.provider),
            quote(&e.id.consumer)
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::build_graph;

    #[test]
    fn fixture_has_one_dashed_edge() {
        let dot = to_dot(&build_graph(&fixtures::ml_insight()).unwrap());
        assert_eq!(dot.lines().filter(|l| l.contains(" -> \"")).count(), 5);
        assert_eq!(dot.matches("style=dashed").count(), 1);
        let dashed = dot.lines().find(|l| l.contains("style=dashed")).unwrap();
        assert!(dashed.starts_with("  \"serve\" -> \"annotate\""), "{dashed}");
    }

    #[test]
    fn quoting() {
        assert_eq!(quote("a\"b"), "\"a\\\"b\"");
    }
}
