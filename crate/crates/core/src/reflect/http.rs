//! Reflector backed by a chat-completions model. Each stage renders a text
//! template, expects a fenced JSON block back, and gets one repair turn
//! when the reply does not parse.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{CrossoverEvidence, Edit, EditScript, ReflectError, ReflectionLesson, Reflector, TrajectorySummary};
use crate::population::NodeId;
use crate::rollout::{Problem, Trajectory, TrajectoryContent};
use crate::transport::{ChatMessage, ChatRequest, ChatTransport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub summarize: String,
    pub critique: String,
    pub aggregate: String,
    pub crossover: String,
}

impl Templates {
    pub fn builtin() -> Self {
        Self {
            summarize: include_str!("../../templates/summarize.txt").into(),
            critique: include_str!("../../templates/critique.txt").into(),
            aggregate: include_str!("../../templates/aggregate.txt").into(),
            crossover: include_str!("../../templates/crossover.txt").into(),
        }
    }

    /// Built-ins overridden by whichever stage files exist in `dir`.
    pub fn load(dir: &Path) -> Result<Self, ReflectError> {
        let mut t = Self::builtin();
        for (name, slot) in [
            ("summarize", &mut t.summarize),
            ("critique", &mut t.critique),
            ("aggregate", &mut t.aggregate),
            ("crossover", &mut t.crossover),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(&path)
                    .map_err(|e| ReflectError::Template(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(t)
    }
}

/// Substitutes `{{name}}` placeholders in one pass; inserted text is not
/// rescanned.
fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, ReflectError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| ReflectError::Template("unclosed placeholder".into()))?;
        let name = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .ok_or_else(|| ReflectError::Template(format!("unknown placeholder {{{{{name}}}}}")))?;
        out.push_str(value.1);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Contents of the first fenced block, or the bare reply if it is an object.
fn json_block(reply: &str) -> Option<&str> {
    if let Some(open) = reply.find("```") {
        let body = &reply[open + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        let close = body.find("```")?;
        return Some(body[..close].trim());
    }
    let trimmed = reply.trim();
    trimmed.starts_with('{').then_some(trimmed)
}

fn parse_reply<T: DeserializeOwned>(reply: &str) -> Result<T, String> {
    let block = json_block(reply).ok_or("no fenced JSON block")?;
    serde_json::from_str(block).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct SummaryReply {
    summaries: Vec<SummaryItem>,
}

#[derive(Deserialize)]
struct SummaryItem {
    text: String,
}

#[derive(Deserialize)]
struct LessonReply {
    #[serde(default)]
    diagnosis: String,
    #[serde(default)]
    edits: Vec<Edit>,
}

pub struct HttpReflector {
    transport: Arc<dyn ChatTransport>,
    model: String,
    temperature: f64,
    templates: Templates,
}

impl HttpReflector {
    pub fn new(transport: Arc<dyn ChatTransport>, model: impl Into<String>, temperature: f64, templates: Templates) -> Self {
        Self { transport, model: model.into(), temperature, templates }
    }

    fn ask<T: DeserializeOwned>(&self, prompt: String) -> Result<T, ReflectError> {
        let mut request = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.temperature,
        };
        let reply = self.transport.complete(&request)?;
        let err = match parse_reply(&reply) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        log::warn!("reflector reply did not parse ({err}); sending one repair request");
        request.messages.push(ChatMessage::assistant(reply));
        request.messages.push(ChatMessage::user(format!(
            "Your reply could not be parsed: {err}. Answer again with exactly one fenced JSON block in the requested schema and nothing else."
        )));
        parse_reply(&self.transport.complete(&request)?).map_err(ReflectError::Parse)
    }
}

fn describe_rollout(j: usize, t: &Trajectory) -> String {
    let body = match &t.content {
        TrajectoryContent::Text(text) => text.clone(),
        TrajectoryContent::Action { index, success } => format!("chose strategy {index}; outcome success={success}"),
    };
    format!("### Rollout {} (reward {:.3})\n{body}\n", j + 1, t.reward)
}

impl Reflector for HttpReflector {
    fn summarize(&self, prompt: &str, problem: &Problem, rollouts: &[Trajectory]) -> Result<Vec<TrajectorySummary>, ReflectError> {
        let listing: String = rollouts.iter().enumerate().map(|(j, t)| describe_rollout(j, t)).collect();
        let text = render(
            &self.templates.summarize,
            &[
                ("prompt", prompt),
                ("problem", &problem.payload),
                ("ground_truth", problem.ground_truth().unwrap_or("(none)")),
                ("rollouts", &listing),
            ],
        )?;
        let reply: SummaryReply = self.ask(text)?;
        // Labels are reassigned from rewards downstream; a count mismatch is
        // caught there too.
        Ok(reply
            .summaries
            .into_iter()
            .enumerate()
            .map(|(j, s)| {
                let reward = rollouts.get(j).map_or(0.0, |t| t.reward);
                TrajectorySummary { success: reward >= super::SUCCESS_THRESHOLD, reward, text: s.text }
            })
            .collect())
    }

    fn critique(&self, prompt: &str, problem: &Problem, summaries: &[TrajectorySummary], k_ops: usize) -> Result<ReflectionLesson, ReflectError> {
        let mut listing = String::new();
        for (j, s) in summaries.iter().enumerate() {
            let label = if s.success { "SUCCESS" } else { "FAILURE" };
            let _ = writeln!(listing, "{}. [{label}, reward {:.3}] {}", j + 1, s.reward, s.text);
        }
        let k = k_ops.to_string();
        let text = render(
            &self.templates.critique,
            &[
                ("prompt", prompt),
                ("problem", &problem.payload),
                ("ground_truth", problem.ground_truth().unwrap_or("(none)")),
                ("summaries", &listing),
                ("k_ops", &k),
            ],
        )?;
        let reply: LessonReply = self.ask(text)?;
        Ok(ReflectionLesson { problem_id: problem.id.clone(), diagnosis: reply.diagnosis, edits: reply.edits })
    }

    fn aggregate(&self, prompt: &str, lessons: &[ReflectionLesson]) -> Result<EditScript, ReflectError> {
        let mut listing = String::new();
        for l in lessons {
            let edits = serde_json::to_string(&l.edits).expect("edits serialize");
            let _ = writeln!(listing, "- problem {}: {}\n  proposed edits: {edits}", l.problem_id, l.diagnosis);
        }
        let text = render(&self.templates.aggregate, &[("prompt", prompt), ("lessons", &listing)])?;
        self.ask(text)
    }

    fn crossover(&self, top_id: NodeId, top_prompt: &str, evidence: &[CrossoverEvidence]) -> Result<EditScript, ReflectError> {
        let mut listing = String::new();
        for e in evidence.iter().filter(|e| e.prompt_id != top_id && !e.won_problems.is_empty()) {
            let _ = writeln!(
                listing,
                "### Prompt {} (won: {})\n{}\n",
                e.prompt_id,
                e.won_problems.join(", "),
                e.prompt_text
            );
        }
        let text = render(&self.templates.crossover, &[("prompt", top_prompt), ("evidence", &listing)])?;
        self.ask(text)
    }
}
