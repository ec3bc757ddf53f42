//! Prompt templates shipped as data, and `{placeholder}` substitution.

use thiserror::Error;

pub const INSTRUCTIONS_MULTI: &str = include_str!("../templates/instructions_multi.md");
pub const INSTRUCTIONS_SINGLE: &str = include_str!("../templates/instructions_single.md");
pub const HEARTBEAT_REFLECT: &str = include_str!("../templates/heartbeat_reflect.md");
pub const HEARTBEAT_CONSOLIDATE: &str = include_str!("../templates/heartbeat_consolidate.md");
pub const HEARTBEAT_PIVOT: &str = include_str!("../templates/heartbeat_pivot.md");
pub const ORIENTATION: &str = include_str!("../templates/orientation.md");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unresolved placeholder `{0}`")]
    Unresolved(String),
    #[error("field `{0}` must not be empty")]
    EmptyField(String),
}

/// Replace every `{name}` (name = `[A-Za-z_][A-Za-z0-9_]*`) in one pass.
///
/// Substituted values are not rescanned. Braces that do not enclose an
/// identifier are left alone.
pub fn render(template: &str, fields: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match placeholder_name(after) {
            Some(name) => {
                let value = fields
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::Unresolved(name.to_string()))?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn placeholder_name(s: &str) -> Option<&str> {
    let end = s.find('}')?;
    let name = &s[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    if (first.is_ascii_alphabetic() || first == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Some(name)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstructionKind {
    Multi,
    Single,
}

impl InstructionKind {
    pub fn for_agent_count(count: u32) -> Self {
        if count > 1 {
            InstructionKind::Multi
        } else {
            InstructionKind::Single
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            InstructionKind::Multi => INSTRUCTIONS_MULTI,
            InstructionKind::Single => INSTRUCTIONS_SINGLE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InstructionFields<'a> {
    pub task_name: &'a str,
    pub task_description: &'a str,
    pub score_direction: &'a str,
    pub shared_dir: &'a str,
    pub agent_id: &'a str,
}

/// Render the agent instruction file. `template` overrides the built-in text for `kind`.
pub fn render_instructions(
    kind: InstructionKind,
    template: Option<&str>,
    fields: &InstructionFields<'_>,
) -> Result<String, TemplateError> {
    let pairs = [
        ("task_name", fields.task_name),
        ("task_description", fields.task_description),
        ("score_direction", fields.score_direction),
        ("shared_dir", fields.shared_dir),
        ("agent_id", fields.agent_id),
    ];
    for (k, v) in pairs {
        if v.trim().is_empty() {
            return Err(TemplateError::EmptyField(k.to_string()));
        }
    }
    render(template.unwrap_or(kind.template()), &pairs)
}

/// Human wording for the optimization direction used in prompts.
pub fn direction_phrase(direction: crate::model::Direction) -> &'static str {
    match direction {
        crate::model::Direction::Maximize => "higher is better",
        crate::model::Direction::Minimize => "lower is better",
    }
}
