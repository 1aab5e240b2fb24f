//! Batch pipeline that turns a physics question into a narrated, animated
//! explainer video through staged LLM agents, then scores the result with a
//! rubric-driven judge and logs run analytics to a cumulative CSV.
//!
//! The stages, in order:
//!
//! 1. **solve** — a solver agent produces a delimited step-by-step solution.
//! 2. **plan** — a planner agent breaks the solution into narrated scenes.
//! 3. **code** — a coding agent emits one renderer script for all scenes,
//!    grounded by documentation retrieved from a local vector index.
//! 4. **render** — each scene is rendered by an external subprocess inside a
//!    bounded repair loop: captured stderr is fed back to the coding agent,
//!    up to five attempts per scene.
//! 5. **refine** — screenshots from the start, middle and end of every
//!    rendered scene are judged by a vision model; the aggregated feedback
//!    drives exactly one code-improvement pass (version 2 of the video).
//!
//! Both versions are scored on fifteen sub-metrics plus four component
//! scores combined as `OS = 0.05·SQ + 0.10·EQ + 0.60·VQ + 0.25·EP`.
//!
//! All model traffic flows through [`gateway::Gateway`], which supports
//! deterministic record/replay cassettes so the whole pipeline runs offline.

pub mod config;
pub mod domain;
pub mod evaluator;
pub mod gateway;
pub mod parsers;
pub mod pipeline;
pub mod prompts;
pub mod rag;
pub mod render;
pub mod reporting;
