//! Prompts for the large tier built from small-model output.
//!
//! Pruning edits the candidate list: soft mode annotates the classes the
//! small model is good at with its confidence, hard mode drops them. Transfer
//! pipelines let cheap stages condense the input before the large model sees it.

mod pipeline;
mod pruning;
mod template;

pub use pipeline::{
    Pipeline, PipelineDef, PipelineOutput, PipelineResult, PipelineStage, PureFunction, StageDef, StageExecutor,
    StageKind, StageTrace,
};
pub use pruning::{
    build_hard_prompt, build_soft_prompt, format_confidence, per_class_accuracy, ProficiencyRule, ProficiencySet,
    PromptBuilder, PromptMode, PromptRecord, DEFAULT_ANNOTATION, DEFAULT_PROFICIENCY_THRESHOLD,
};
pub use template::{Slot, Template};
