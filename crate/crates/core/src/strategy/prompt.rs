use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::parse::{EVALUATION_MARKER, PLAN_MARKER, RECALL_MARKER};
use super::template::{self, render};
use super::{M2WFParams, RecalledExample, StrategyKind};
use crate::retrieval::RetrievedShot;
use crate::task::Task;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }
}

/// A fully rendered request for one task under one strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<Message>,
    pub strategy: StrategyKind,
    pub params_fingerprint: String,
    pub task_id: String,
    /// `normal`, `m2wf`, ... for single-pass prompts; `m2wf-step1` / `m2wf-step2`
    /// for the two halves of a stage-split pipeline.
    pub variant: String,
}

impl PromptBundle {
    fn seal(
        strategy: StrategyKind,
        task: &Task,
        variant: String,
        params: Option<&M2WFParams>,
        messages: Vec<Message>,
    ) -> Self {
        let mut hasher = FieldHasher::default();
        hasher.field(template::TEMPLATE_VERSION);
        hasher.field(strategy.as_str());
        hasher.field(&variant);
        hasher.field(&task.id);
        match params {
            Some(p) => {
                hasher.field(&p.k.to_string());
                hasher.field(&p.m.to_string());
                hasher.field(&p.target_language);
            }
            None => hasher.field(""),
        }
        for message in &messages {
            hasher.field(match message.role {
                Role::System => "system",
                Role::User => "user",
            });
            hasher.field(&message.text);
        }
        Self {
            messages,
            strategy,
            params_fingerprint: hasher.finish(),
            task_id: task.id.clone(),
            variant,
        }
    }

    /// Text of the final user message.
    pub fn user_text(&self) -> &str {
        self.messages.last().map(|m| m.text.as_str()).unwrap_or("")
    }
}

/// Length-prefixed SHA-256 so that field boundaries cannot be forged.
#[derive(Default)]
struct FieldHasher(Sha256);

impl FieldHasher {
    fn field(&mut self, value: &str) {
        self.0.update((value.len() as u64).to_le_bytes());
        self.0.update(value.as_bytes());
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// The workflow stages. `Guidance` always produces the final code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Recall,
    Evaluation,
    Planning,
    Guidance,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Recall, Stage::Evaluation, Stage::Planning, Stage::Guidance];

    fn instruction(self) -> &'static str {
        match self {
            Stage::Recall => template::RECALL,
            Stage::Evaluation => template::EVALUATION,
            Stage::Planning => template::PLANNING,
            Stage::Guidance => template::GUIDANCE,
        }
    }

    fn format_line(self) -> &'static str {
        match self {
            Stage::Recall => template::FORMAT_RECALL,
            Stage::Evaluation => template::FORMAT_EVALUATION,
            Stage::Planning => template::FORMAT_PLAN,
            Stage::Guidance => template::FORMAT_SOLUTION,
        }
    }
}

/// Intermediate outputs handed from the first to the second half of a split pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageArtifacts {
    pub recalled: Vec<RecalledExample>,
    pub evaluation: Option<String>,
    pub plan: Option<String>,
}

pub fn build_prompt(
    strategy: StrategyKind,
    task: &Task,
    params: &M2WFParams,
    shots: Option<&[RetrievedShot]>,
) -> Result<PromptBundle> {
    let variant = strategy.as_str().to_string();
    let bundle = match strategy {
        StrategyKind::Normal => {
            PromptBundle::seal(strategy, task, variant, None, vec![Message::user(task.prompt.clone())])
        }
        StrategyKind::CoT => {
            let text = format!("{}{}", task.prompt, template::COT_SUFFIX);
            PromptBundle::seal(strategy, task, variant, None, vec![Message::user(text)])
        }
        StrategyKind::Analogical => {
            params.validate()?;
            let k = params.k.to_string();
            let text = render(
                template::ANALOGICAL,
                &[("TASK", &task.prompt), ("K", &k), ("LANG", &params.target_language)],
            );
            PromptBundle::seal(strategy, task, variant, Some(params), vec![Message::user(text)])
        }
        StrategyKind::FewShot => {
            let shots = shots.filter(|s| !s.is_empty()).ok_or_else(|| {
                Error::Config("few-shot prompting needs at least one retrieved shot".into())
            })?;
            let fence = task.language.to_ascii_lowercase();
            let mut parts: Vec<String> = shots
                .iter()
                .enumerate()
                .map(|(i, shot)| {
                    let index = (i + 1).to_string();
                    render(
                        template::FEWSHOT_EXAMPLE,
                        &[
                            ("INDEX", &index),
                            ("PROBLEM", shot.problem.trim_end()),
                            ("FENCE", &fence),
                            ("SOLUTION", shot.solution.trim_end()),
                        ],
                    )
                })
                .collect();
            parts.push(render(template::FEWSHOT_TASK, &[("TASK", &task.prompt)]));
            PromptBundle::seal(strategy, task, variant, None, vec![Message::user(parts.join("\n\n"))])
        }
        StrategyKind::M2WF => {
            params.validate()?;
            let text = compose(task, params, &Stage::ALL, None);
            PromptBundle::seal(strategy, task, variant, Some(params), vec![Message::user(text)])
        }
    };
    Ok(bundle)
}

/// First half of a split pipeline: instructions for `Recall..=through` only.
pub fn build_stage_prompt(task: &Task, params: &M2WFParams, through: Stage) -> Result<PromptBundle> {
    params.validate()?;
    if through == Stage::Guidance {
        return Err(Error::Parameter("a split pipeline must stop before guidance".into()));
    }
    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| *s <= through).collect();
    let text = compose(task, params, &stages, None);
    Ok(PromptBundle::seal(
        StrategyKind::M2WF,
        task,
        "m2wf-step1".into(),
        Some(params),
        vec![Message::user(text)],
    ))
}

/// Second half of a split pipeline: earlier artifacts followed by the
/// instructions for `from..=Guidance`.
pub fn build_continuation_prompt(
    task: &Task,
    params: &M2WFParams,
    artifacts: &StageArtifacts,
    from: Stage,
) -> Result<PromptBundle> {
    params.validate()?;
    if from == Stage::Recall {
        return Err(Error::Parameter("the continuation needs recalled artifacts".into()));
    }
    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| *s >= from).collect();
    let text = compose(task, params, &stages, Some((artifacts, &task.language)));
    Ok(PromptBundle::seal(
        StrategyKind::M2WF,
        task,
        "m2wf-step2".into(),
        Some(params),
        vec![Message::user(text)],
    ))
}

fn compose(
    task: &Task,
    params: &M2WFParams,
    stages: &[Stage],
    previous: Option<(&StageArtifacts, &str)>,
) -> String {
    let k = params.k.to_string();
    let m = params.m.to_string();
    let vars = [("K", k.as_str()), ("M", m.as_str()), ("LANG", params.target_language.as_str())];

    let mut blocks = vec![render(template::HEADER, &[("TASK", &task.prompt)])];
    if let Some((artifacts, fence)) = previous {
        blocks.push(template::CONTINUATION.to_string());
        blocks.push(render_artifacts(artifacts, fence));
    }
    for stage in stages {
        blocks.push(render(stage.instruction(), &vars));
    }
    let mut format = String::from(template::FORMAT_INTRO);
    for stage in stages {
        format.push('\n');
        format.push_str(&render(stage.format_line(), &vars));
    }
    blocks.push(format);
    blocks.join("\n\n")
}

fn render_artifacts(artifacts: &StageArtifacts, fence: &str) -> String {
    let fence = fence.to_ascii_lowercase();
    let mut sections: Vec<String> = artifacts
        .recalled
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            format!(
                "{RECALL_MARKER} {}\nProblem: {}\nSteps: {}\n```{fence}\n{}\n```",
                i + 1,
                ex.problem.trim(),
                ex.steps.trim(),
                ex.code.trim_end()
            )
        })
        .collect();
    if let Some(evaluation) = &artifacts.evaluation {
        sections.push(format!("{EVALUATION_MARKER}\n{}", evaluation.trim()));
    }
    if let Some(plan) = &artifacts.plan {
        sections.push(format!("{PLAN_MARKER}\n{}", plan.trim()));
    }
    sections.join("\n\n")
}
