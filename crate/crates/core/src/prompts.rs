//! Prompt templates.
//!
//! Templates are plain text with `{NAME}` placeholders (upper-case letters,
//! digits and underscores). The defaults are compiled in from the `prompts/`
//! directory of this crate; [`PromptSet::load_dir`] overrides any of them
//! with same-named files from another directory.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitute every placeholder in one pass. A placeholder without a
    /// value is an error; substituted values are never re-scanned.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let src = self.text.as_str();
        let mut out = String::with_capacity(src.len() + 256);
        let mut rest = src;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name {
                Some(name) if is_placeholder(name) => {
                    let value = vars
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| {
                            Error::Template(format!(
                                "template {} needs a value for {{{name}}}",
                                self.name
                            ))
                        })?;
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut names = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            rest = &rest[open + 1..];
            if let Some(close) = rest.find('}') {
                let name = &rest[..close];
                if is_placeholder(name) && !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }
}

fn is_placeholder(name: &str) -> bool {
    !name.is_empty()
        && name.starts_with(|c: char| c.is_ascii_uppercase())
        && name
            .chars()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

macro_rules! prompt_set {
    ($($field:ident),* $(,)?) => {
        /// Every template used by the agents.
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct PromptSet {
            $(pub $field: Template,)*
        }

        impl Default for PromptSet {
            fn default() -> Self {
                Self {
                    $($field: Template::new(
                        stringify!($field),
                        include_str!(concat!("../prompts/", stringify!($field), ".txt")),
                    ),)*
                }
            }
        }

        impl PromptSet {
            pub const FILE_NAMES: &'static [&'static str] =
                &[$(concat!(stringify!($field), ".txt")),*];

            /// Every template, in declaration order.
            pub fn templates(&self) -> Vec<&Template> {
                vec![$(&self.$field),*]
            }

            /// Defaults, with any `<name>.txt` found in `dir` taking precedence.
            pub fn load_dir(dir: &Path) -> Result<Self> {
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "prompt directory {} does not exist",
                        dir.display()
                    )));
                }
                let mut set = Self::default();
                $(
                    let path = dir.join(concat!(stringify!($field), ".txt"));
                    if path.is_file() {
                        set.$field = Template::new(stringify!($field), std::fs::read_to_string(&path)?);
                    }
                )*
                Ok(set)
            }
        }
    };
}

prompt_set!(
    doctor_system,
    doctor_input,
    patient_system,
    patient_input,
    keywords_system,
    keywords_input,
    synthesis_system,
    synthesis_input,
    diagnosis_system,
    diagnosis_format,
    diagnosis_cot_format,
    diagnosis_input,
    driver_system,
    driver_input,
    driver_chooser_system,
    driver_chooser_input,
    rationale_system,
    rationale_input,
    disease_merge_system,
    disease_merge_input,
    fact_summary_system,
    fact_summary_input,
);

/// Rendering used for absent optional inputs.
pub const NONE_PROVIDED: &str = "None provided.";

pub(crate) fn or_none(text: &str) -> &str {
    if text.trim().is_empty() {
        NONE_PROVIDED
    } else {
        text
    }
}

/// `- item` lines.
pub(crate) fn bullet_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .map(|i| format!("- {}", i.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}
