use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::pruning::{PromptMode, PromptRecord};
use super::template::{Slot, Template};
use crate::backends::{classify, ModelBackend, Sample, Tokenizer, WhitespaceTokenizer};
use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};

/// Deterministic text transforms that cost nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case", deny_unknown_fields)]
pub enum PureFunction {
    Identity,
    Lowercase,
    /// Keeps the first `max_tokens` whitespace tokens, joined by single spaces.
    Truncate {
        max_tokens: usize,
    },
}

impl PureFunction {
    pub fn apply(&self, text: &str, tokenizer: &dyn Tokenizer) -> String {
        match self {
            PureFunction::Identity => text.to_string(),
            PureFunction::Lowercase => text.to_lowercase(),
            PureFunction::Truncate { max_tokens } => {
                let tokens = tokenizer.tokenize(text);
                if tokens.len() <= *max_tokens {
                    text.to_string()
                } else {
                    tokens[..*max_tokens].join(" ")
                }
            }
        }
    }
}

#[derive(Clone)]
pub enum StageExecutor {
    /// Generates text from `template` rendered with the running text as `{stage_output}`.
    SmallModel {
        backend: Arc<dyn ModelBackend>,
        template: Template,
    },
    PureFunction(PureFunction),
    /// Classifies the sample with `template` rendered as the prompt. Final stage only.
    LargeModel {
        backend: Arc<dyn ModelBackend>,
        template: Template,
        candidates: Vec<ClassId>,
    },
}

impl std::fmt::Debug for StageExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageExecutor::SmallModel { backend, template } => f
                .debug_struct("SmallModel")
                .field("backend", &backend.name())
                .field("template", template)
                .finish(),
            StageExecutor::PureFunction(p) => f.debug_tuple("PureFunction").field(p).finish(),
            StageExecutor::LargeModel {
                backend,
                template,
                candidates,
            } => f
                .debug_struct("LargeModel")
                .field("backend", &backend.name())
                .field("template", template)
                .field("candidates", candidates)
                .finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineStage {
    pub name: String,
    pub executor: StageExecutor,
}

impl PipelineStage {
    pub fn new(name: impl Into<String>, executor: StageExecutor) -> Self {
        Self {
            name: name.into(),
            executor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub tokens_in: usize,
    pub tokens_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineResult {
    Text { text: String },
    Prediction { probs: ProbabilityVector, cost_micros: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub output: PipelineResult,
    pub record: PromptRecord,
    pub trace: Vec<StageTrace>,
}

/// Linear chain of stages. The large model, if present, is the last stage.
#[derive(Clone)]
pub struct Pipeline {
    stages: Vec<PipelineStage>,
    tokenizer: Arc<dyn Tokenizer>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("stages", &self.stages).finish()
    }
}

impl Pipeline {
    pub fn new(stages: Vec<PipelineStage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(ShuntError::config("pipeline has no stages"));
        }
        let last = stages.len() - 1;
        for (i, stage) in stages.iter().enumerate() {
            match &stage.executor {
                StageExecutor::LargeModel {
                    template, candidates, ..
                } => {
                    if i != last {
                        return Err(ShuntError::config(format!(
                            "large-model stage `{}` must be the last stage",
                            stage.name
                        )));
                    }
                    if candidates.is_empty() {
                        return Err(ShuntError::config(format!(
                            "large-model stage `{}` has no candidates",
                            stage.name
                        )));
                    }
                    template.expect_slots(&[Slot::StageOutput, Slot::Candidates], "large-model stage")?;
                }
                StageExecutor::SmallModel { template, .. } => {
                    template.expect_slots(&[Slot::StageOutput], "small-model stage")?;
                }
                StageExecutor::PureFunction(_) => {}
            }
        }
        Ok(Self {
            stages,
            tokenizer: Arc::new(WhitespaceTokenizer),
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn stages(&self) -> &[PipelineStage] {
        &self.stages
    }

    pub fn large_candidates(&self) -> Option<&[ClassId]> {
        match &self.stages.last()?.executor {
            StageExecutor::LargeModel { candidates, .. } => Some(candidates),
            _ => None,
        }
    }

    /// Runs every stage on `sample`'s text payload.
    pub fn run(&self, sample: &Sample) -> Result<PipelineOutput> {
        let entry = sample
            .payload
            .as_text()
            .ok_or_else(|| ShuntError::domain("transfer pipelines need a text payload"))?;
        let tok = self.tokenizer.as_ref();
        let mut text = entry.to_string();
        let mut trace = Vec::with_capacity(self.stages.len());
        let mut template_source = String::new();
        let mut rendered = None;
        let mut candidates = Vec::new();
        let mut result = None;

        for stage in &self.stages {
            let tokens_in = tok.count(&text);
            let fail = |e: ShuntError| e.in_stage(&stage.name);
            match &stage.executor {
                StageExecutor::PureFunction(f) => {
                    text = f.apply(&text, tok);
                    trace.push(StageTrace {
                        stage: stage.name.clone(),
                        tokens_in,
                        tokens_out: tok.count(&text),
                    });
                }
                StageExecutor::SmallModel { backend, template } => {
                    let prompt = render_stage(template, &text, &[]).map_err(fail)?;
                    text = backend.generate(&prompt).map_err(fail)?.text;
                    trace.push(StageTrace {
                        stage: stage.name.clone(),
                        tokens_in: tok.count(&prompt),
                        tokens_out: tok.count(&text),
                    });
                }
                StageExecutor::LargeModel {
                    backend,
                    template,
                    candidates: cands,
                } => {
                    let prompt = render_stage(template, &text, cands).map_err(fail)?;
                    let prediction = classify(backend.as_ref(), sample, cands, Some(&prompt)).map_err(fail)?;
                    trace.push(StageTrace {
                        stage: stage.name.clone(),
                        tokens_in: tok.count(&prompt),
                        tokens_out: prediction.usage.output_tokens as usize,
                    });
                    template_source = template.source().to_string();
                    candidates = cands.clone();
                    rendered = Some(prompt);
                    result = Some(PipelineResult::Prediction {
                        probs: prediction.probs,
                        cost_micros: prediction.cost_micros,
                    });
                }
            }
        }

        let record = PromptRecord {
            template: template_source,
            token_count_in: tok.count(entry),
            token_count_out: tok.count(&text),
            rendered: rendered.unwrap_or_else(|| text.clone()),
            mode: PromptMode::Transfer,
            injected_confidences: BTreeMap::new(),
            pruned_candidates: Vec::new(),
            candidates,
            no_op: false,
        };
        Ok(PipelineOutput {
            output: result.unwrap_or(PipelineResult::Text { text }),
            record,
            trace,
        })
    }
}

fn render_stage(template: &Template, text: &str, candidates: &[ClassId]) -> Result<String> {
    let mut values = BTreeMap::from([(Slot::StageOutput, text.to_string())]);
    values.insert(Slot::Candidates, candidates.join(", "));
    template.render(&values)
}

/// Serializable pipeline description; backends are referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDef {
    pub stages: Vec<StageDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: StageKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "executor", rename_all = "snake_case")]
pub enum StageKind {
    SmallModel { backend: String, template: Template },
    PureFunction(PureFunction),
    LargeModel { backend: String, template: Template },
}

impl PipelineDef {
    pub fn build(
        &self,
        backends: &BTreeMap<String, Arc<dyn ModelBackend>>,
        candidates: &[ClassId],
    ) -> Result<Pipeline> {
        let lookup = |id: &str| {
            backends
                .get(id)
                .cloned()
                .ok_or_else(|| ShuntError::config(format!("pipeline references unknown backend `{id}`")))
        };
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let executor = match &s.kind {
                    StageKind::SmallModel { backend, template } => StageExecutor::SmallModel {
                        backend: lookup(backend)?,
                        template: template.clone(),
                    },
                    StageKind::PureFunction(f) => StageExecutor::PureFunction(f.clone()),
                    StageKind::LargeModel { backend, template } => StageExecutor::LargeModel {
                        backend: lookup(backend)?,
                        template: template.clone(),
                        candidates: candidates.to_vec(),
                    },
                };
                Ok(PipelineStage::new(s.name.clone(), executor))
            })
            .collect::<Result<Vec<_>>>()?;
        Pipeline::new(stages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        CostLedger, CostProfile, Metered, ScriptedGenerator, SimulatedOracle, SimulatedOracleConfig,
    };
    use crate::prob::indexed_classes;
    use proptest::prelude::*;

    fn oracle() -> Arc<dyn ModelBackend> {
        Arc::new(SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(1.0, 3)).unwrap())
    }

    fn large_stage(backend: Arc<dyn ModelBackend>) -> PipelineStage {
        PipelineStage::new(
            "judge",
            StageExecutor::LargeModel {
                backend,
                template: Template::parse("{stage_output}").unwrap(),
                candidates: indexed_classes(3),
            },
        )
    }

    #[test]
    fn single_large_stage_matches_direct_call() {
        let sample = Sample::text("s1", "who is liable here").with_gold("c1");
        let out = Pipeline::new(vec![large_stage(oracle())])
            .unwrap()
            .run(&sample)
            .unwrap();
        let direct = classify(
            oracle().as_ref(),
            &sample,
            &indexed_classes(3),
            Some("who is liable here"),
        )
        .unwrap();
        match out.output {
            PipelineResult::Prediction { probs, .. } => assert_eq!(probs, direct.probs),
            other => panic!("unexpected output {other:?}"),
        }
        assert_eq!(out.record.token_count_in, out.record.token_count_out);
    }

    #[test]
    fn summarize_then_judge_bills_summary_tokens() {
        let long = "one two three four five six seven eight nine ten";
        let gen = ScriptedGenerator::new("summarizer").respond(format!("Summarize: {long}"), "four words of summary");
        let ledger = CostLedger::new();
        let large: Arc<dyn ModelBackend> = Arc::new(Metered::new(
            oracle(),
            CostProfile::per_input_token(1.0),
            ledger.clone(),
        ));
        let pipeline = Pipeline::new(vec![
            PipelineStage::new(
                "summarize",
                StageExecutor::SmallModel {
                    backend: Arc::new(gen),
                    template: Template::parse("Summarize: {stage_output}").unwrap(),
                },
            ),
            large_stage(large),
        ])
        .unwrap();
        let out = pipeline.run(&Sample::text("s", long).with_gold("c0")).unwrap();
        assert_eq!(out.record.token_count_in, 10);
        assert_eq!(out.record.token_count_out, 4);
        assert_eq!(ledger.summary().input_tokens, 4);
        let large_in: usize = out
            .trace
            .iter()
            .filter(|t| t.stage == "judge")
            .map(|t| t.tokens_in)
            .sum();
        assert_eq!(large_in as u64, ledger.summary().input_tokens);
    }

    #[test]
    fn failing_stage_is_named() {
        let pipeline = Pipeline::new(vec![
            PipelineStage::new(
                "summarize",
                StageExecutor::SmallModel {
                    backend: Arc::new(ScriptedGenerator::new("empty")),
                    template: Template::parse("{stage_output}").unwrap(),
                },
            ),
            large_stage(oracle()),
        ])
        .unwrap();
        let err = pipeline.run(&Sample::text("s", "text")).unwrap_err();
        assert!(
            matches!(&err, ShuntError::Stage { stage, .. } if stage == "summarize"),
            "{err}"
        );
    }

    #[test]
    fn large_stage_must_be_last() {
        let stages = vec![
            large_stage(oracle()),
            PipelineStage::new("noop", StageExecutor::PureFunction(PureFunction::Identity)),
        ];
        assert!(Pipeline::new(stages).is_err());
        assert!(Pipeline::new(vec![]).is_err());
    }

    #[test]
    fn def_parses_from_toml() {
        let def: PipelineDef = toml::from_str(
            r#"
            [[stages]]
            name = "summarize"
            executor = "small_model"
            backend = "summarizer"
            template = "Summarize: {stage_output}"

            [[stages]]
            name = "clip"
            executor = "pure_function"
            function = "truncate"
            max_tokens = 60

            [[stages]]
            name = "judge"
            executor = "large_model"
            backend = "large"
            template = "{stage_output}"
            "#,
        )
        .unwrap();
        assert_eq!(def.stages.len(), 3);
        let mut backends: BTreeMap<String, Arc<dyn ModelBackend>> = BTreeMap::new();
        backends.insert("large".into(), oracle());
        assert!(def.build(&backends, &indexed_classes(2)).is_err());
        backends.insert("summarizer".into(), Arc::new(ScriptedGenerator::new("summarizer")));
        assert_eq!(def.build(&backends, &indexed_classes(2)).unwrap().stages().len(), 3);
    }

    proptest! {
        #[test]
        fn truncation_caps_tokens(words in prop::collection::vec("[a-z]{1,8}", 0..300), sep in "[ \t\n]{1,3}") {
            let text = words.join(&sep);
            prop_assume!(!text.trim().is_empty());
            let pipeline = Pipeline::new(vec![PipelineStage::new(
                "clip",
                StageExecutor::PureFunction(PureFunction::Truncate { max_tokens: 100 }),
            )]).unwrap();
            let out = pipeline.run(&Sample::text("s", text)).unwrap();
            prop_assert!(out.record.token_count_out <= 100);
            prop_assert_eq!(out.record.token_count_out, words.len().min(100));
        }
    }
}
