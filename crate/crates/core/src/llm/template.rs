//! Prompt templates with named placeholders and few-shot examples.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template_id}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template_id: String, name: String },
    #[error("template {template_id}: placeholder {{{name}}} is not supplied for task {task}")]
    NotSupplied {
        template_id: String,
        name: String,
        task: Task,
    },
    #[error("template {template_id}: user text must reference {{{name}}}")]
    MissingInput { template_id: String, name: &'static str },
    #[error("template {template_id}: unbalanced brace at byte {offset}")]
    Unbalanced { template_id: String, offset: usize },
    #[error("template {template_id}: value for {{{name}}} missing at render time")]
    MissingValue { template_id: String, name: String },
    #[error("parsing template {path}: {message}")]
    Parse { path: String, message: String },
    #[error("duplicate template id {0}")]
    Duplicate(String),
    #[error("no {task} template with version {version}")]
    NotFound { task: Task, version: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rewrite,
    Refine,
    Synthesize,
    Validity,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rewrite, Task::Refine, Task::Synthesize, Task::Validity];

    /// Placeholders the caller fills for this task.
    pub fn supplied(self) -> &'static [&'static str] {
        match self {
            Task::Rewrite => &["utterances"],
            Task::Refine => &["response", "demand"],
            Task::Synthesize => &["candidates", "demand"],
            Task::Validity => &["demand"],
        }
    }

    /// The placeholder carrying the main input; a template without it would
    /// never show the model what to work on.
    pub fn primary(self) -> &'static str {
        self.supplied()[0]
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Rewrite => "rewrite",
            Task::Refine => "refine",
            Task::Synthesize => "synthesize",
            Task::Validity => "validity",
        })
    }
}

pub const KNOWN_PLACEHOLDERS: [&str; 4] = ["utterances", "demand", "response", "candidates"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShot {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub template_id: String,
    pub task: Task,
    pub version: String,
    #[serde(default)]
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub few_shot: Vec<FewShot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Literal(char),
    Slot(&'a str),
}

/// Splits template text into literal runs and `{name}` slots. `{{` and `}}`
/// are escaped braces.
fn tokenize<'a>(template_id: &str, text: &'a str) -> Result<Vec<Piece<'a>>, TemplateError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let unbalanced = |offset| TemplateError::Unbalanced {
        template_id: template_id.to_string(),
        offset,
    };
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                out.push(Piece::Text(&text[start..i]));
                out.push(Piece::Literal(bytes[i] as char));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = text[i + 1..].find('}').ok_or_else(|| unbalanced(i))? + i + 1;
                let name = &text[i + 1..close];
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                    return Err(unbalanced(i));
                }
                out.push(Piece::Text(&text[start..i]));
                out.push(Piece::Slot(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(unbalanced(i)),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&text[start..]));
    Ok(out)
}

fn placeholders(template_id: &str, text: &str) -> Result<Vec<String>, TemplateError> {
    Ok(tokenize(template_id, text)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s.to_string()),
            _ => None,
        })
        .collect())
}

impl PromptTemplate {
    /// Load-time check: every placeholder is known and supplied for the task,
    /// and the task's primary input is referenced.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let id = &self.template_id;
        let mut used = placeholders(id, &self.system)?;
        let user = placeholders(id, &self.user)?;
        used.extend(user.iter().cloned());
        for name in &used {
            if !KNOWN_PLACEHOLDERS.contains(&name.as_str()) {
                return Err(TemplateError::UnknownPlaceholder {
                    template_id: id.clone(),
                    name: name.clone(),
                });
            }
            if !self.task.supplied().contains(&name.as_str()) {
                return Err(TemplateError::NotSupplied {
                    template_id: id.clone(),
                    name: name.clone(),
                    task: self.task,
                });
            }
        }
        let primary = self.task.primary();
        if !user.iter().any(|n| n == primary) {
            return Err(TemplateError::MissingInput {
                template_id: id.clone(),
                name: primary,
            });
        }
        Ok(())
    }

    pub fn parse_toml(text: &str, origin: &str) -> Result<Self, TemplateError> {
        let de = toml::Deserializer::new(text);
        let t: PromptTemplate = serde_path_to_error::deserialize(de).map_err(|e| TemplateError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    fn fill(&self, text: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(text.len());
        for piece in tokenize(&self.template_id, text)? {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Literal(c) => out.push(c),
                Piece::Slot(name) => out.push_str(vars.get(name).ok_or_else(|| TemplateError::MissingValue {
                    template_id: self.template_id.clone(),
                    name: name.to_string(),
                })?),
            }
        }
        Ok(out)
    }

    /// System message, then each example as a user/assistant pair, then the
    /// rendered user message.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<Vec<Message>, TemplateError> {
        let mut messages = Vec::with_capacity(2 + 2 * self.few_shot.len());
        if !self.system.trim().is_empty() {
            messages.push(Message::new("system", self.fill(&self.system, vars)?));
        }
        for ex in &self.few_shot {
            messages.push(Message::new("user", ex.input.clone()));
            messages.push(Message::new("assistant", ex.output.clone()));
        }
        messages.push(Message::new("user", self.fill(&self.user, vars)?));
        Ok(messages)
    }
}

const BUILTIN: [(&str, &str); 8] = [
    ("rewrite-v1.toml", include_str!("../../templates/rewrite-v1.toml")),
    ("rewrite-v2.toml", include_str!("../../templates/rewrite-v2.toml")),
    ("refine-v1.toml", include_str!("../../templates/refine-v1.toml")),
    ("refine-v2.toml", include_str!("../../templates/refine-v2.toml")),
    ("synthesize-v1.toml", include_str!("../../templates/synthesize-v1.toml")),
    ("synthesize-v2.toml", include_str!("../../templates/synthesize-v2.toml")),
    ("validity-v1.toml", include_str!("../../templates/validity-v1.toml")),
    ("validity-v2.toml", include_str!("../../templates/validity-v2.toml")),
];

/// Templates indexed by (task, version).
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<(Task, String), PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let mut set = TemplateSet::default();
        for (name, text) in BUILTIN {
            let t = PromptTemplate::parse_toml(text, name).expect("built-in template is valid");
            set.insert(t).expect("built-in ids are unique");
        }
        set
    }

    /// Built-ins overlaid with every `*.toml` file in `dir`; a file with the
    /// same (task, version) as a built-in replaces it.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let io = |source| TemplateError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "toml"))
            .collect();
        paths.sort();
        let mut seen = std::collections::HashSet::new();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let t = PromptTemplate::parse_toml(&text, &path.display().to_string())?;
            if !seen.insert(t.template_id.clone()) {
                return Err(TemplateError::Duplicate(t.template_id));
            }
            set.templates.retain(|_, old| old.template_id != t.template_id);
            set.templates.insert((t.task, t.version.clone()), t);
        }
        Ok(set)
    }

    pub fn insert(&mut self, t: PromptTemplate) -> Result<(), TemplateError> {
        t.validate()?;
        if self.templates.values().any(|o| o.template_id == t.template_id) {
            return Err(TemplateError::Duplicate(t.template_id));
        }
        self.templates.insert((t.task, t.version.clone()), t);
        Ok(())
    }

    pub fn get(&self, task: Task, version: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(&(task, version.to_string()))
            .ok_or_else(|| TemplateError::NotFound {
                task,
                version: version.to_string(),
            })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}
