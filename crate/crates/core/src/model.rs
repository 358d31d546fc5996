//! Pipeline representation and structural validation.
//!
//! A [`Pipeline`] is a list of [`Step`]s. Each step applies a [`Transform`]
//! whose named input slots are wired, through [`StepInput`]s, to named output
//! slots of provider steps. [`build_graph`] checks the wiring and produces a
//! [`DependencyGraph`] whose edges carry the provider output's [`Resource`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::backend::mock::MockScript;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pipeline {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub label: String,
    pub inputs: Vec<StepInput>,
    pub transform: Transform,
}

/// Binds the consumer slot `name` to `provider_step_label.provider_output_name`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepInput {
    pub name: String,
    pub provider_step_label: String,
    pub provider_output_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transform {
    pub inputs: Vec<Slot>,
    pub outputs: Vec<Slot>,
    pub logic: TransformLogic,
}

/// A named, typed transform input or output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub resource: Resource,
}

impl Slot {
    pub fn new(name: impl Into<String>, resource: Resource) -> Self {
        Slot {
            name: name.into(),
            resource,
        }
    }
}

/// The type of the datum carried by an edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resource {
    File(FileResource),
    Service(ServiceResource),
}

impl Resource {
    pub fn file() -> Self {
        Resource::File(FileResource::default())
    }

    pub fn directory() -> Self {
        Resource::File(FileResource {
            directory: true,
            ..Default::default()
        })
    }

    pub fn service() -> Self {
        Resource::Service(ServiceResource::default())
    }

    pub fn is_file(&self) -> bool {
        matches!(self, Resource::File(_))
    }

    pub fn is_service(&self) -> bool {
        matches!(self, Resource::Service(_))
    }

    /// True for directory-valued file resources.
    pub fn is_directory(&self) -> bool {
        matches!(self, Resource::File(f) if f.directory)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FileResource {
    pub directory: bool,
    pub encoding: Option<String>,
    pub format: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ServiceResource {
    pub protocol: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformLogic {
    Argument(ArgumentLogic),
    Return(ReturnLogic),
    Container(ContainerLogic),
    Subpipeline(SubpipelineLogic),
    /// Scripted behaviour, only understood by the mock backend.
    Mock(MockScript),
}

impl TransformLogic {
    pub fn kind(&self) -> &'static str {
        match self {
            TransformLogic::Argument(_) => "arg",
            TransformLogic::Return(_) => "return",
            TransformLogic::Container(_) => "container",
            TransformLogic::Subpipeline(_) => "subpipeline",
            TransformLogic::Mock(_) => "mock",
        }
    }

    pub fn is_boundary(&self) -> bool {
        matches!(self, TransformLogic::Argument(_) | TransformLogic::Return(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgumentLogic {
    pub name: String,
    pub resource: Resource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReturnLogic {
    pub name: String,
    pub resource: Resource,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContainerLogic {
    /// Executable path for the local backend.
    pub image: String,
    pub inputs: Vec<ContainerBinding>,
    pub outputs: Vec<ContainerBinding>,
    pub flags: Vec<ContainerFlag>,
    pub env: Vec<ContainerFlag>,
}

/// How the locator of one transform input/output reaches the process.
///
/// An empty `flag` passes the locator as a bare positional argument.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContainerBinding {
    pub name: String,
    pub flag: Option<String>,
    pub env: Option<String>,
    /// Reserved for alternative locator formats; must be unset.
    pub format: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerFlag {
    pub name: String,
    pub value: Option<String>,
}

/// A whole pipeline used as a transform.
///
/// `arguments` maps inner argument names to outer transform input names and
/// `returns` maps inner return names to outer transform output names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubpipelineLogic {
    pub pipeline: Box<Pipeline>,
    pub arguments: BTreeMap<String, String>,
    pub returns: BTreeMap<String, String>,
}

impl Pipeline {
    pub fn step(&self, label: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.label == label)
    }

    /// Steps whose logic is an argument, with the argument name.
    pub fn arguments(&self) -> impl Iterator<Item = (&Step, &ArgumentLogic)> {
        self.steps.iter().filter_map(|s| match &s.transform.logic {
            TransformLogic::Argument(a) => Some((s, a)),
            _ => None,
        })
    }

    pub fn returns(&self) -> impl Iterator<Item = (&Step, &ReturnLogic)> {
        self.steps.iter().filter_map(|s| match &s.transform.logic {
            TransformLogic::Return(r) => Some((s, r)),
            _ => None,
        })
    }
}

impl Transform {
    pub fn input(&self, name: &str) -> Option<&Slot> {
        self.inputs.iter().find(|s| s.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&Slot> {
        self.outputs.iter().find(|s| s.name == name)
    }
}

/// Identity of one dependency: provider output slot to consumer input slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeId {
    pub provider: String,
    pub output: String,
    pub consumer: String,
    pub input: String,
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{} -> {}.{}",
            self.provider, self.output, self.consumer, self.input
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub id: EdgeId,
    pub resource: Resource,
}

/// Validated dataflow graph of a pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    pipeline: Pipeline,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    order: Vec<usize>,
}

impl DependencyGraph {
    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn steps(&self) -> &[Step] {
        &self.pipeline.steps
    }

    pub fn step(&self, label: &str) -> Option<&Step> {
        self.index.get(label).map(|&i| &self.pipeline.steps[i])
    }

    /// Edges ordered by provider topological position, then output name,
    /// then consumer position and input name.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn in_edges<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.id.consumer == label)
    }

    pub fn out_edges<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.id.provider == label)
    }

    /// Position of a step in the topological order.
    pub fn position(&self, label: &str) -> Option<usize> {
        let idx = *self.index.get(label)?;
        self.order.iter().position(|&i| i == idx)
    }

    pub fn ordered_steps(&self) -> impl Iterator<Item = &Step> {
        self.order.iter().map(|&i| &self.pipeline.steps[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("step #{index} has an empty label")]
    EmptyLabel { index: usize },
    #[error("duplicate step label `{0}`")]
    DuplicateLabel(String),
    #[error("step `{step}`: duplicate transform slot `{slot}`")]
    DuplicateSlot { step: String, slot: String },
    #[error("step `{step}`: input `{input}` references unknown provider `{provider}`")]
    UnknownProvider {
        step: String,
        input: String,
        provider: String,
    },
    #[error("step `{step}`: input `{input}` references unknown output `{provider}.{output}`")]
    UnknownProviderOutput {
        step: String,
        input: String,
        provider: String,
        output: String,
    },
    #[error("step `{step}`: input slot `{slot}` has no binding")]
    MissingInputBinding { step: String, slot: String },
    #[error("step `{step}`: input slot `{slot}` is bound more than once")]
    DuplicateInputBinding { step: String, slot: String },
    #[error("step `{step}`: binding `{slot}` names no declared transform input")]
    UnknownInputSlot { step: String, slot: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("step `{step}`: {reason}")]
    ArityViolation { step: String, reason: String },
    #[error("step `{step}`: container binding `{slot}`: {reason}")]
    ContainerBinding {
        step: String,
        slot: String,
        reason: String,
    },
    #[error("duplicate pipeline {kind} name `{name}`")]
    DuplicateBoundaryName { kind: &'static str, name: String },
    #[error("step `{step}`: subpipeline: {reason}")]
    Subpipeline { step: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    Error(GraphError),
    /// No return steps: legal, but nothing is ever needed.
    NoReturnSteps,
}

impl Diagnostic {
    pub fn severity(&self) -> Severity {
        match self {
            Diagnostic::Error(_) => Severity::Error,
            Diagnostic::NoReturnSteps => Severity::Warning,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::Error(e) => write!(f, "{e}"),
            Diagnostic::NoReturnSteps => f.write_str("pipeline has no return steps"),
        }
    }
}

/// Builds the dependency graph, reporting the first structural error found.
pub fn build_graph(pipeline: &Pipeline) -> Result<DependencyGraph, GraphError> {
    let mut errors = structural_errors(pipeline);
    if !errors.is_empty() {
        return Err(errors.swap_remove(0));
    }
    Ok(assemble(pipeline))
}

/// All structural errors plus warnings. Empty iff the pipeline is buildable
/// and has at least one return step.
pub fn validate_document(pipeline: &Pipeline) -> Vec<Diagnostic> {
    let mut out: Vec<Diagnostic> = structural_errors(pipeline)
        .into_iter()
        .map(Diagnostic::Error)
        .collect();
    if pipeline.returns().next().is_none() {
        out.push(Diagnostic::NoReturnSteps);
    }
    out
}

/// Deterministic topological order; ties broken by label.
pub fn topo_order(graph: &DependencyGraph) -> Vec<String> {
    graph.ordered_steps().map(|s| s.label.clone()).collect()
}

fn structural_errors(pipeline: &Pipeline) -> Vec<GraphError> {
    let mut errors = Vec::new();
    let mut labels: HashMap<&str, &Step> = HashMap::new();
    for (i, step) in pipeline.steps.iter().enumerate() {
        if step.label.is_empty() {
            errors.push(GraphError::EmptyLabel { index: i });
        }
        if labels.insert(&step.label, step).is_some() {
            errors.push(GraphError::DuplicateLabel(step.label.clone()));
        }
    }

    let mut arg_names = HashSet::new();
    let mut ret_names = HashSet::new();
    for step in &pipeline.steps {
        check_transform(step, &mut errors);
        match &step.transform.logic {
            TransformLogic::Argument(a) if !arg_names.insert(a.name.as_str()) => {
                errors.push(GraphError::DuplicateBoundaryName {
                    kind: "argument",
                    name: a.name.clone(),
                })
            }
            TransformLogic::Return(r) if !ret_names.insert(r.name.as_str()) => {
                errors.push(GraphError::DuplicateBoundaryName {
                    kind: "return",
                    name: r.name.clone(),
                })
            }
            _ => {}
        }

        let mut bound: HashSet<&str> = HashSet::new();
        for input in &step.inputs {
            if step.transform.input(&input.name).is_none() {
                errors.push(GraphError::UnknownInputSlot {
                    step: step.label.clone(),
                    slot: input.name.clone(),
                });
            } else if !bound.insert(&input.name) {
                errors.push(GraphError::DuplicateInputBinding {
                    step: step.label.clone(),
                    slot: input.name.clone(),
                });
            }
            match labels.get(input.provider_step_label.as_str()) {
                None => errors.push(GraphError::UnknownProvider {
                    step: step.label.clone(),
                    input: input.name.clone(),
                    provider: input.provider_step_label.clone(),
                }),
                Some(p) if p.transform.output(&input.provider_output_name).is_none() => {
                    errors.push(GraphError::UnknownProviderOutput {
                        step: step.label.clone(),
                        input: input.name.clone(),
                        provider: input.provider_step_label.clone(),
                        output: input.provider_output_name.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        for slot in &step.transform.inputs {
            if !bound.contains(slot.name.as_str())
                && !step.inputs.iter().any(|i| i.name == slot.name)
            {
                errors.push(GraphError::MissingInputBinding {
                    step: step.label.clone(),
                    slot: slot.name.clone(),
                });
            }
        }
    }

    if let Some(cycle) = find_cycle(pipeline) {
        errors.push(GraphError::CycleDetected(cycle));
    }
    errors
}

fn check_transform(step: &Step, errors: &mut Vec<GraphError>) {
    let t = &step.transform;
    for (kind, slots) in [("input", &t.inputs), ("output", &t.outputs)] {
        let mut seen = HashSet::new();
        for s in slots {
            if !seen.insert(s.name.as_str()) {
                errors.push(GraphError::DuplicateSlot {
                    step: step.label.clone(),
                    slot: format!("{kind} {}", s.name),
                });
            }
        }
    }
    let arity = |reason: &str| GraphError::ArityViolation {
        step: step.label.clone(),
        reason: reason.to_string(),
    };
    match &t.logic {
        TransformLogic::Argument(_) => {
            if !t.inputs.is_empty() || !step.inputs.is_empty() || t.outputs.len() != 1 {
                errors.push(arity(
                    "argument steps take no inputs and have exactly one output",
                ));
            }
        }
        TransformLogic::Return(_) => {
            if t.inputs.len() != 1 || !t.outputs.is_empty() {
                errors.push(arity(
                    "return steps have exactly one input and no outputs",
                ));
            }
        }
        TransformLogic::Container(c) => check_container(step, c, errors),
        TransformLogic::Subpipeline(sub) => check_subpipeline(step, sub, errors),
        TransformLogic::Mock(_) => {}
    }
}

fn check_container(step: &Step, c: &ContainerLogic, errors: &mut Vec<GraphError>) {
    let t = &step.transform;
    let mut err = |slot: &str, reason: &str| {
        errors.push(GraphError::ContainerBinding {
            step: step.label.clone(),
            slot: slot.to_string(),
            reason: reason.to_string(),
        })
    };
    for (bindings, slots, kind) in [
        (&c.inputs, &t.inputs, "input"),
        (&c.outputs, &t.outputs, "output"),
    ] {
        let mut seen = HashSet::new();
        for b in bindings {
            if !slots.iter().any(|s| s.name == b.name) {
                err(&b.name, &format!("no transform {kind} with this name"));
            }
            if !seen.insert(b.name.as_str()) {
                err(&b.name, "bound more than once");
            }
            if b.flag.is_none() && b.env.is_none() {
                err(&b.name, "sets neither flag nor env");
            }
            if b.format.is_some() {
                err(&b.name, "alternative locator formats are not supported");
            }
        }
        for s in slots {
            if !seen.contains(s.name.as_str()) {
                err(&s.name, &format!("transform {kind} has no container binding"));
            }
        }
    }
}

fn check_subpipeline(step: &Step, sub: &SubpipelineLogic, errors: &mut Vec<GraphError>) {
    let t = &step.transform;
    let mut err = |reason: String| {
        errors.push(GraphError::Subpipeline {
            step: step.label.clone(),
            reason,
        })
    };
    for e in structural_errors(&sub.pipeline) {
        err(format!("inner pipeline: {e}"));
    }
    let inner_args: BTreeSet<&str> = sub.pipeline.arguments().map(|(_, a)| a.name.as_str()).collect();
    let inner_rets: BTreeSet<&str> = sub.pipeline.returns().map(|(_, r)| r.name.as_str()).collect();
    check_name_map(&sub.arguments, &inner_args, &t.inputs, "argument", "input", &mut err);
    check_name_map(&sub.returns, &inner_rets, &t.outputs, "return", "output", &mut err);
}

fn check_name_map(
    map: &BTreeMap<String, String>,
    inner: &BTreeSet<&str>,
    outer: &[Slot],
    inner_kind: &str,
    outer_kind: &str,
    err: &mut impl FnMut(String),
) {
    for (i, o) in map {
        if !inner.contains(i.as_str()) {
            err(format!("no inner {inner_kind} named `{i}`"));
        }
        if !outer.iter().any(|s| &s.name == o) {
            err(format!("no transform {outer_kind} named `{o}`"));
        }
    }
    for i in inner {
        if !map.contains_key(*i) {
            err(format!("inner {inner_kind} `{i}` is not mapped"));
        }
    }
    let mapped: HashSet<&str> = map.values().map(String::as_str).collect();
    if mapped.len() != map.len() {
        err(format!("two inner {inner_kind}s map to the same {outer_kind}"));
    }
    for s in outer {
        if !mapped.contains(s.name.as_str()) {
            err(format!("transform {outer_kind} `{}` is not mapped", s.name));
        }
    }
}

/// Successor lists over resolvable references, indexed like `pipeline.steps`.
fn successors(pipeline: &Pipeline) -> Vec<Vec<usize>> {
    let mut first: HashMap<&str, usize> = HashMap::new();
    for (i, s) in pipeline.steps.iter().enumerate() {
        first.entry(&s.label).or_insert(i);
    }
    let mut succ = vec![Vec::new(); pipeline.steps.len()];
    for (c, step) in pipeline.steps.iter().enumerate() {
        for input in &step.inputs {
            if let Some(&p) = first.get(input.provider_step_label.as_str()) {
                succ[p].push(c);
            }
        }
    }
    succ
}

fn find_cycle(pipeline: &Pipeline) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let succ = successors(pipeline);
    let mut marks = vec![Mark::New; succ.len()];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        v: usize,
        succ: &[Vec<usize>],
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        marks[v] = Mark::Active;
        stack.push(v);
        for &w in &succ[v] {
            match marks[w] {
                Mark::Active => {
                    let from = stack.iter().position(|&x| x == w).unwrap();
                    let mut cycle = stack[from..].to_vec();
                    cycle.push(w);
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = visit(w, succ, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[v] = Mark::Done;
        None
    }

    for v in 0..succ.len() {
        if marks[v] == Mark::New {
            if let Some(c) = visit(v, &succ, &mut marks, &mut stack) {
                return Some(
                    c.into_iter()
                        .map(|i| pipeline.steps[i].label.clone())
                        .collect(),
                );
            }
        }
    }
    None
}

fn assemble(pipeline: &Pipeline) -> DependencyGraph {
    let index: HashMap<String, usize> = pipeline
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.label.clone(), i))
        .collect();

    let succ = successors(pipeline);
    let mut indegree = vec![0usize; succ.len()];
    for targets in &succ {
        for &t in targets {
            indegree[t] += 1;
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| (pipeline.steps[i].label.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(succ.len());
    while let Some(next) = ready.pop_first() {
        let v = next.1;
        order.push(v);
        for &w in &succ[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.insert((pipeline.steps[w].label.as_str(), w));
            }
        }
    }
    debug_assert_eq!(order.len(), succ.len(), "validated graph must be acyclic");

    let pos: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(p, &i)| (pipeline.steps[i].label.as_str(), p))
        .collect();
    let mut edges: Vec<Edge> = Vec::new();
    for step in &pipeline.steps {
        for input in &step.inputs {
            let provider = &pipeline.steps[index[&input.provider_step_label]];
            let resource = provider
                .transform
                .output(&input.provider_output_name)
                .expect("validated provider output")
                .resource
                .clone();
            edges.push(Edge {
                id: EdgeId {
                    provider: input.provider_step_label.clone(),
                    output: input.provider_output_name.clone(),
                    consumer: step.label.clone(),
                    input: input.name.clone(),
                },
                resource,
            });
        }
    }
    edges.sort_by(|a, b| {
        (pos[a.id.provider.as_str()], &a.id.output, pos[a.id.consumer.as_str()], &a.id.input).cmp(&(
            pos[b.id.provider.as_str()],
            &b.id.output,
            pos[b.id.consumer.as_str()],
            &b.id.input,
        ))
    });

    DependencyGraph {
        pipeline: pipeline.clone(),
        index,
        edges,
        order,
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn reachable(p: &Pipeline, from: usize, to: usize) -> bool {
        let succ = successors(p);
        let mut seen = vec![false; succ.len()];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            for &w in &succ[v] {
                if w == to {
                    return true;
                }
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        false
    }

    proptest! {
        #[test]
        fn topo_order_respects_every_edge(p in fixtures::arb_pipeline(6)) {
            let g = build_graph(&p).unwrap();
            let order = topo_order(&g);
            let mut sorted = order.clone();
            sorted.sort();
            let mut labels: Vec<String> = p.steps.iter().map(|s| s.label.clone()).collect();
            labels.sort();
            prop_assert_eq!(sorted, labels);
            let pos = |l: &str| order.iter().position(|x| x == l).unwrap();
            for e in g.edges() {
                prop_assert!(pos(&e.id.provider) < pos(&e.id.consumer));
            }
            prop_assert_eq!(build_graph(&p).unwrap(), g);
        }

        #[test]
        fn back_edge_yields_cycle_iff_reachable(p in fixtures::arb_pipeline(6), a in 0usize..6, b in 0usize..6) {
            // add an input on step `a` consuming some output of step `b`
            let n = p.steps.len();
            let (a, b) = (a % n, b % n);
            let mut q = p.clone();
            let out = match q.steps[b].transform.outputs.first() {
                Some(o) => o.name.clone(),
                None => return Ok(()),
            };
            let consumer = &mut q.steps[a];
            if consumer.transform.logic.is_boundary() {
                return Ok(());
            }
            consumer.transform.inputs.push(Slot::new("extra", Resource::file()));
            let provider = q.steps[b].label.clone();
            q.steps[a].inputs.push(StepInput {
                name: "extra".into(),
                provider_step_label: provider,
                provider_output_name: out,
            });
            let cyclic = a == b || reachable(&p, a, b);
            let got = matches!(build_graph(&q), Err(GraphError::CycleDetected(_)));
            prop_assert_eq!(got, cyclic);
        }
    }

    #[test]
    fn in_degree_invariants() {
        let g = build_graph(&fixtures::ml_insight()).unwrap();
        for step in g.steps() {
            for slot in &step.transform.inputs {
                assert_eq!(
                    g.in_edges(&step.label).filter(|e| e.id.input == slot.name).count(),
                    1
                );
            }
            match step.transform.logic {
                TransformLogic::Argument(_) => assert_eq!(g.in_edges(&step.label).count(), 0),
                TransformLogic::Return(_) => assert_eq!(g.out_edges(&step.label).count(), 0),
                _ => {}
            }
        }
    }
}
