//! Ready-made pipelines for tests and examples.
//!
//! Helper steps follow one naming convention: an argument or return step
//! named `X` has logic name `X`; argument steps provide output `out` and
//! return steps consume input `in`.

use std::collections::BTreeMap;

use crate::backend::mock::{mock_script, MockBehavior, ScriptMap};
use crate::document::{parse_document, parse_mock_scripts, Format, Strictness};
use crate::model::{
    ArgumentLogic, Pipeline, Resource, ReturnLogic, Slot, Step, StepInput, SubpipelineLogic,
    Transform, TransformLogic,
};

/// Source of the model-serving fixture document.
pub const ML_INSIGHT_YAML: &str = include_str!("../examples/ml-insight.yaml");
/// Mock scripts that make every fixture step succeed.
pub const ML_INSIGHT_MOCK_YAML: &str = include_str!("../examples/ml-insight.mock.yaml");

/// Two arguments (TRAIN, BUSINESS), a training job, a model server, an
/// annotation job consuming the server, and the INSIGHT return.
pub fn ml_insight() -> Pipeline {
    parse_document(ML_INSIGHT_YAML, Format::Yaml, Strictness::Strict)
        .expect("fixture parses")
        .pipeline
}

pub fn ml_insight_script() -> ScriptMap {
    parse_mock_scripts(ML_INSIGHT_MOCK_YAML, Format::Yaml).expect("fixture scripts parse")
}

fn input(name: &str, provider: &str, output: &str) -> StepInput {
    StepInput {
        name: name.into(),
        provider_step_label: provider.into(),
        provider_output_name: output.into(),
    }
}

pub fn argument_step(label: &str, resource: Resource) -> Step {
    Step {
        label: label.into(),
        inputs: vec![],
        transform: Transform {
            inputs: vec![],
            outputs: vec![Slot::new("out", resource.clone())],
            logic: TransformLogic::Argument(ArgumentLogic {
                name: label.into(),
                resource,
            }),
        },
    }
}

pub fn return_step(label: &str, provider: &str, output: &str, resource: Resource) -> Step {
    Step {
        label: label.into(),
        inputs: vec![input("in", provider, output)],
        transform: Transform {
            inputs: vec![Slot::new("in", resource.clone())],
            outputs: vec![],
            logic: TransformLogic::Return(ReturnLogic {
                name: label.into(),
                resource,
            }),
        },
    }
}

/// `arg -> ret` with nothing in between.
pub fn identity_pipeline(arg: &str, ret: &str) -> Pipeline {
    Pipeline {
        steps: vec![
            argument_step(arg, Resource::file()),
            return_step(ret, arg, "out", Resource::file()),
        ],
    }
}

/// A mock step with file inputs and outputs. `inputs` lists
/// `(slot, provider, provider output)`.
pub fn mock_step(
    label: &str,
    inputs: &[(&str, &str, &str)],
    outputs: &[&str],
    behaviors: Vec<MockBehavior>,
) -> Step {
    Step {
        label: label.into(),
        inputs: inputs.iter().map(|(n, p, o)| input(n, p, o)).collect(),
        transform: Transform {
            inputs: inputs
                .iter()
                .map(|(n, _, _)| Slot::new(*n, Resource::file()))
                .collect(),
            outputs: outputs.iter().map(|o| Slot::new(*o, Resource::file())).collect(),
            logic: mock_script(behaviors),
        },
    }
}

/// A step running `inner` with file inputs and outputs. `arguments` maps
/// inner argument names to outer input slots, `returns` inner return names
/// to outer output slots.
pub fn subpipeline_step(
    label: &str,
    inputs: &[(&str, &str, &str)],
    outputs: &[&str],
    inner: Pipeline,
    arguments: &[(&str, &str)],
    returns: &[(&str, &str)],
) -> Step {
    let map = |pairs: &[(&str, &str)]| -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    };
    let mut step = mock_step(label, inputs, outputs, vec![]);
    step.transform.logic = TransformLogic::Subpipeline(SubpipelineLogic {
        pipeline: Box::new(inner),
        arguments: map(arguments),
        returns: map(returns),
    });
    step
}

/// Resource of a named slot in `p`, looked up by step label.
fn slot_resource(p: &Pipeline, label: &str, output: bool) -> Resource {
    let t = &p.step(label).expect("step exists").transform;
    let slots = if output { &t.outputs } else { &t.inputs };
    slots[0].resource.clone()
}

/// Wraps an ml-insight-shaped pipeline as step `ml` of an outer pipeline
/// with arguments `T`, `B` and return `OUT` fed by output `insight`.
pub fn wrap_ml_insight(inner: Pipeline) -> Pipeline {
    let train = slot_resource(&inner, "TRAIN", true);
    let business = slot_resource(&inner, "BUSINESS", true);
    let insight = slot_resource(&inner, "INSIGHT", false);
    let mut ml = subpipeline_step(
        "ml",
        &[("train", "T", "out"), ("business", "B", "out")],
        &["insight"],
        inner,
        &[("TRAIN", "train"), ("BUSINESS", "business")],
        &[("INSIGHT", "insight")],
    );
    ml.transform.inputs[0].resource = train.clone();
    ml.transform.inputs[1].resource = business.clone();
    ml.transform.outputs[0].resource = insight.clone();
    Pipeline {
        steps: vec![
            argument_step("T", train),
            argument_step("B", business),
            ml,
            return_step("OUT", "ml", "insight", insight),
        ],
    }
}

/// Random valid DAGs of mock steps: one argument `A`, up to `max_steps`
/// intermediate steps each reading from earlier steps, and a return `R`
/// fed by the last one.
#[cfg(test)]
pub fn arb_pipeline(max_steps: usize) -> impl proptest::strategy::Strategy<Value = Pipeline> {
    use proptest::prelude::*;
    prop::collection::vec(prop::collection::vec(any::<prop::sample::Index>(), 1..3), 1..=max_steps)
        .prop_map(|steps| {
            let mut p = Pipeline {
                steps: vec![argument_step("A", Resource::file())],
            };
            let mut providers: Vec<(String, String)> = vec![("A".into(), "out".into())];
            for (i, picks) in steps.iter().enumerate() {
                let label = format!("s{i}");
                let mut chosen: Vec<(String, String)> = picks
                    .iter()
                    .map(|ix| providers[ix.index(providers.len())].clone())
                    .collect();
                chosen.sort();
                chosen.dedup();
                let ins: Vec<(String, &str, &str)> = chosen
                    .iter()
                    .enumerate()
                    .map(|(k, (pl, po))| (format!("i{k}"), pl.as_str(), po.as_str()))
                    .collect();
                let ins: Vec<(&str, &str, &str)> =
                    ins.iter().map(|(n, pl, po)| (n.as_str(), *pl, *po)).collect();
                p.steps.push(mock_step(
                    &label,
                    &ins,
                    &["out"],
                    vec![MockBehavior::succeed([("out", "x")])],
                ));
                providers.push((label, "out".into()));
            }
            let last = providers.last().expect("at least one step").0.clone();
            p.steps.push(return_step("R", &last, "out", Resource::file()));
            p
        })
}
