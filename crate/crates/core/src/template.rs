//! `{{ variable }}` prompt templates.
//!
//! Template files may break long lines with a trailing backslash; the
//! backslash and the newline after it are removed when the file is loaded.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}` uses unbound variable `{variable}`")]
    Unbound { template: String, variable: String },
    #[error("template `{template}` has an unterminated placeholder at byte {offset}")]
    Unterminated { template: String, offset: usize },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([^{}]*?)\s*\}\}").expect("valid pattern"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let text = source.replace("\\\r\n", "").replace("\\\n", "");
        let text = text.strip_suffix('\\').map(str::to_string).unwrap_or(text);
        let stripped = placeholder().replace_all(&text, "");
        if let Some(offset) = stripped.find("{{") {
            return Err(TemplateError::Unterminated {
                template: name.to_string(),
                offset,
            });
        }
        Ok(Template {
            name: name.to_string(),
            text,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Variable names in order of first use.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in placeholder().captures_iter(&self.text) {
            let v = c[1].to_string();
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for c in placeholder().captures_iter(&self.text) {
            let m = c.get(0).unwrap();
            let var = &c[1];
            let value = bindings.get(var).ok_or_else(|| TemplateError::Unbound {
                template: self.name.clone(),
                variable: var.to_string(),
            })?;
            out.push_str(&self.text[last..m.start()]);
            out.push_str(value);
            last = m.end();
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

const USER: &str = include_str!("../templates/user.txt");
const SYSTEM: &str = include_str!("../templates/system.txt");
const SYSTEM_SINGLE_STYLE: &str = include_str!("../templates/system_single_style.txt");
const QC: &str = include_str!("../templates/qc.txt");

/// The four prompts the pipeline renders.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub user: Template,
    pub system: Template,
    pub system_single_style: Template,
    pub qc: Template,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        let t = |n: &str, s: &str| Template::parse(n, s).expect("bundled templates are well formed");
        TemplateSet {
            user: t("user", USER),
            system: t("system", SYSTEM),
            system_single_style: t("system_single_style", SYSTEM_SINGLE_STYLE),
            qc: t("qc", QC),
        }
    }

    /// Load `user.txt`, `system.txt`, `system_single_style.txt` and `qc.txt`
    /// from `dir`; files that are absent keep the bundled text.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::bundled();
        for (name, slot) in [
            ("user", &mut set.user),
            ("system", &mut set.system),
            ("system_single_style", &mut set.system_single_style),
            ("qc", &mut set.qc),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                *slot = Template::parse(name, &text)?;
            }
        }
        Ok(set)
    }
}
