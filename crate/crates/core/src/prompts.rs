//! Prompt templates.
//!
//! Each template is a text file with a system part and a user part separated
//! by a line holding only `---`. Placeholders are written `{{name}}`. The
//! built-in set is compiled in; [`PromptSet::from_dir`] overrides individual
//! templates with files of the same name.

use std::path::Path;

use crate::error::{QkgError, Result};
use crate::llm::ChatMessage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: String,
}

impl Template {
    /// Fills placeholders and splits into system and user messages.
    pub fn render(&self, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
        let mut text = self.text.clone();
        for (key, value) in vars {
            text = text.replace(&format!("{{{{{key}}}}}"), value);
        }
        let sep = text
            .lines()
            .scan(0usize, |offset, line| {
                let start = *offset;
                *offset += line.len() + 1;
                Some((start, line))
            })
            .find(|(_, line)| line.trim() == "---")
            .map(|(start, line)| (start, start + line.len() + 1));
        match sep {
            Some((a, b)) => {
                let system = text[..a].trim_end().to_string();
                let user = text.get(b..).unwrap_or("").trim().to_string();
                vec![ChatMessage::system(system), ChatMessage::user(user)]
            }
            None => vec![ChatMessage::user(text.trim().to_string())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub annotate: Template,
    pub patient_context: Template,
    pub applicability_judge: Template,
    pub reasoner_answer: Template,
    pub reasoner_reconsider: Template,
    pub validator: Template,
    pub relabel: Template,
    pub entity_extraction: Template,
}

macro_rules! builtin {
    ($name:literal) => {
        Template {
            name: $name,
            text: include_str!(concat!("../prompts/", $name)).to_string(),
        }
    };
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            annotate: builtin!("annotate_v1.txt"),
            patient_context: builtin!("patient_context_v1.txt"),
            applicability_judge: builtin!("applicability_judge_v1.txt"),
            reasoner_answer: builtin!("reasoner_answer_v1.txt"),
            reasoner_reconsider: builtin!("reasoner_reconsider_v1.txt"),
            validator: builtin!("validator_v1.txt"),
            relabel: builtin!("relabel_v1.txt"),
            entity_extraction: builtin!("entity_extraction_v1.txt"),
        }
    }
}

impl PromptSet {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = PromptSet::default();
        for t in set.templates_mut() {
            let path = dir.join(t.name);
            if path.exists() {
                t.text = std::fs::read_to_string(&path).map_err(|e| QkgError::io(&path, e))?;
            }
        }
        Ok(set)
    }

    fn templates_mut(&mut self) -> [&mut Template; 8] {
        [
            &mut self.annotate,
            &mut self.patient_context,
            &mut self.applicability_judge,
            &mut self.reasoner_answer,
            &mut self.reasoner_reconsider,
            &mut self.validator,
            &mut self.relabel,
            &mut self.entity_extraction,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Speaker;

    #[test]
    fn render_splits_and_substitutes() {
        let t = Template {
            name: "t",
            text: "sys {{a}}\n---\nuser {{a}} {{b}}\n".into(),
        };
        let m = t.render(&[("a", "1"), ("b", "2")]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].speaker, Speaker::System);
        assert_eq!(m[0].text, "sys 1");
        assert_eq!(m[1].text, "user 1 2");
    }

    #[test]
    fn builtins_have_both_parts() {
        let mut set = PromptSet::default();
        for t in set.templates_mut() {
            assert_eq!(t.render(&[]).len(), 2, "{}", t.name);
        }
    }

    #[test]
    fn dir_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("relabel_v1.txt"), "x\n---\ny").unwrap();
        let set = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.relabel.text, "x\n---\ny");
        assert_eq!(set.annotate, PromptSet::default().annotate);
    }
}
