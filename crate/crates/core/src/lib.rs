//! Dataflow pipelines over file and service resources.
//!
//! A [`model::Pipeline`] wires steps together through typed edges. Before
//! anything runs, [`typecheck`] checks every edge and [`hash`] assigns each
//! edge a causal hash derived from the argument hashes and the transforms
//! upstream of it. The [`controller`] then runs the pipeline on a
//! [`backend`], reusing file outputs from the [`cache`] whenever their hash
//! is already stored and shutting services down once no step needs them.

pub mod backend;
pub mod cache;
pub mod controller;
pub mod document;
pub mod dot;
pub mod fixtures;
pub mod hash;
pub mod model;
pub mod typecheck;
