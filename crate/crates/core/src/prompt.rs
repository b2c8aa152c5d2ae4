//! Prompt templates: loading, validation and rendering.
//!
//! Templates are plain text files with `{placeholder}` markers, one file per
//! `(domain, template id)` under `templates/<domain>/<id>.txt`. The built-in
//! sets are compiled in from the crate's `templates/` directory and can be
//! replaced at run time by pointing [`load_template_dir`] at another tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ClassDescription,
    ContextualizingText,
    SegGenerate,
    DiscriminativeText,
    CegGenerate,
    Verification,
    Modification,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::ClassDescription,
        TemplateId::ContextualizingText,
        TemplateId::SegGenerate,
        TemplateId::DiscriminativeText,
        TemplateId::CegGenerate,
        TemplateId::Verification,
        TemplateId::Modification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ClassDescription => "class_description",
            TemplateId::ContextualizingText => "contextualizing_text",
            TemplateId::SegGenerate => "seg_generate",
            TemplateId::DiscriminativeText => "discriminative_text",
            TemplateId::CegGenerate => "ceg_generate",
            TemplateId::Verification => "verification",
            TemplateId::Modification => "modification",
        }
    }

    /// Placeholders a template of this id may use. `domain` is allowed
    /// everywhere and bound by the owning [`TemplateSet`].
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::ClassDescription => &["target_class_name", "target_seed_data", "domain"],
            TemplateId::ContextualizingText => {
                &["data", "class_description", "target_seed_example", "domain"]
            }
            TemplateId::SegGenerate => {
                &["target_class", "target_seed_example", "contextualizing_text", "domain"]
            }
            TemplateId::DiscriminativeText => &[
                "target_class_name",
                "target_seed_data",
                "ambiguous_class_name",
                "ambiguous_seed_data",
                "domain",
            ],
            TemplateId::CegGenerate => &[
                "target_class_name",
                "target_seed_data",
                "ambiguous_class_name",
                "ambiguous_seed_data",
                "discriminative_text",
                "domain",
            ],
            TemplateId::Verification => &["verification_shots", "target_text", "domain"],
            TemplateId::Modification => &[
                "target_class",
                "target_class_data",
                "discriminative_text",
                "verification_result_class",
                "generated_example",
                "domain",
            ],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Template(format!("unknown template id `{s}`")))
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// A value bound to a placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Text(String),
    /// Rendered as `\n- item` per item.
    List(Vec<String>),
}

impl Binding {
    fn render_into(&self, out: &mut String) {
        match self {
            Binding::Text(t) => out.push_str(t),
            Binding::List(items) => {
                for item in items {
                    out.push_str("\n- ");
                    out.push_str(item);
                }
            }
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Binding::Text(t) => t.is_empty(),
            Binding::List(items) => items.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, Binding>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), Binding::Text(value.into()));
        self
    }

    pub fn list<I, S>(mut self, name: &str, items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.0
            .insert(name.to_string(), Binding::List(items.into_iter().map(Into::into).collect()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Binding> {
        self.0.get(name)
    }

    fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    domain: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, domain: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let domain = domain.into();
        if body.is_empty() {
            return Err(Error::Template(format!("{domain}/{id}: empty body")));
        }
        let allowed = id.placeholders();
        for name in placeholders_in(&body) {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::Template(format!(
                    "{domain}/{id}: undeclared placeholder `{{{name}}}`"
                )));
            }
        }
        Ok(PromptTemplate { id, domain, body })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        placeholders_in(&self.body)
    }

    /// Bindings that the body never references.
    pub fn unused_bindings(&self, bindings: &Bindings) -> Vec<String> {
        let used = self.placeholders();
        bindings
            .names()
            .filter(|n| !used.contains(*n))
            .map(str::to_string)
            .collect()
    }

    /// Substitutes every placeholder. Nothing is escaped or trimmed.
    pub fn render(&self, bindings: &Bindings) -> Result<String> {
        for name in self.unused_bindings(bindings) {
            log::warn!("{}/{}: binding `{name}` is not used", self.domain, self.id);
        }
        let mut out = String::with_capacity(self.body.len() * 2);
        let mut last = 0;
        for caps in placeholder_re().captures_iter(&self.body) {
            let whole = caps.get(0).expect("match");
            let name = &caps[1];
            let value = bindings.get(name).ok_or_else(|| Error::MissingBinding {
                template: format!("{}/{}", self.domain, self.id),
                placeholder: name.to_string(),
            })?;
            if value.is_empty() {
                return Err(Error::Template(format!(
                    "{}/{}: binding `{name}` is empty",
                    self.domain, self.id
                )));
            }
            out.push_str(&self.body[last..whole.start()]);
            value.render_into(&mut out);
            last = whole.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

fn placeholders_in(body: &str) -> BTreeSet<String> {
    placeholder_re()
        .captures_iter(body)
        .map(|c| c[1].to_string())
        .collect()
}

/// One complete template per id for a dataset domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    domain: String,
    domain_label: String,
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn new(domain: impl Into<String>, templates: Vec<PromptTemplate>) -> Result<Self> {
        let domain = domain.into();
        let mut map = BTreeMap::new();
        for t in templates {
            if map.insert(t.id, t).is_some() {
                return Err(Error::Template(format!("{domain}: duplicate template id")));
            }
        }
        let missing: Vec<&str> = TemplateId::ALL
            .iter()
            .filter(|id| !map.contains_key(id))
            .map(|id| id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Template(format!(
                "{domain}: incomplete set, missing {}",
                missing.join(", ")
            )));
        }
        Ok(TemplateSet {
            domain_label: domain.replace('_', " "),
            domain,
            templates: map,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// The text bound to `{domain}`.
    pub fn domain_label(&self) -> &str {
        &self.domain_label
    }

    pub fn with_domain_label(mut self, label: impl Into<String>) -> Self {
        self.domain_label = label.into();
        self
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<String> {
        let template = self.get(id);
        let mut bindings = bindings.clone();
        if template.placeholders().contains("domain") && !bindings.contains("domain") {
            bindings = bindings.text("domain", self.domain_label.clone());
        }
        template.render(&bindings)
    }
}

macro_rules! builtin_set {
    ($domain:literal) => {
        (
            $domain,
            [
                include_str!(concat!("../templates/", $domain, "/class_description.txt")),
                include_str!(concat!("../templates/", $domain, "/contextualizing_text.txt")),
                include_str!(concat!("../templates/", $domain, "/seg_generate.txt")),
                include_str!(concat!("../templates/", $domain, "/discriminative_text.txt")),
                include_str!(concat!("../templates/", $domain, "/ceg_generate.txt")),
                include_str!(concat!("../templates/", $domain, "/verification.txt")),
                include_str!(concat!("../templates/", $domain, "/modification.txt")),
            ],
        )
    };
}

const BUILTIN: [(&str, [&str; 7]); 4] = [
    builtin_set!("banking"),
    builtin_set!("daily_life"),
    builtin_set!("question_type"),
    builtin_set!("generic"),
];

fn file_body(raw: &str) -> &str {
    raw.strip_suffix('\n').unwrap_or(raw)
}

/// The compiled-in sets: `banking`, `daily_life`, `question_type` and `generic`.
pub fn builtin_template_sets() -> Vec<TemplateSet> {
    BUILTIN
        .iter()
        .map(|(domain, bodies)| {
            let templates = TemplateId::ALL
                .iter()
                .zip(bodies)
                .map(|(&id, body)| PromptTemplate::new(id, *domain, file_body(body)))
                .collect::<Result<Vec<_>>>()
                .expect("built-in templates are valid");
            TemplateSet::new(*domain, templates).expect("built-in sets are complete")
        })
        .collect()
}

pub fn builtin_template_set(domain: &str) -> Result<TemplateSet> {
    builtin_template_sets()
        .into_iter()
        .find(|s| s.domain() == domain)
        .ok_or_else(|| Error::Config(format!("no built-in template set for domain `{domain}`")))
}

/// Loads every `<root>/<domain>/` directory as a template set.
pub fn load_template_dir(root: &Path) -> Result<Vec<TemplateSet>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .collect();
    dirs.sort_by_key(|e| e.file_name());
    let mut sets = Vec::new();
    for entry in dirs {
        let domain = entry.file_name().to_string_lossy().into_owned();
        let mut templates = Vec::new();
        for id in TemplateId::ALL {
            let path = entry.path().join(format!("{}.txt", id.as_str()));
            if !path.exists() {
                continue;
            }
            let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            templates.push(PromptTemplate::new(id, domain.clone(), file_body(&raw))?);
        }
        sets.push(TemplateSet::new(domain, templates)?);
    }
    if sets.is_empty() {
        return Err(Error::Template(format!("no template sets under {}", root.display())));
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_set_is_complete() {
        let sets = builtin_template_sets();
        assert_eq!(sets.len(), 4);
        for set in &sets {
            for id in TemplateId::ALL {
                assert_eq!(set.get(id).id(), id);
            }
        }
    }

    #[test]
    fn zero_placeholders_render_verbatim() {
        let t = PromptTemplate::new(TemplateId::Verification, "x", "  plain {not a placeholder} ").unwrap();
        assert_eq!(t.render(&Bindings::new()).unwrap(), "  plain {not a placeholder} ");
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let t = PromptTemplate::new(TemplateId::SegGenerate, "x", "a {target_class} b").unwrap();
        match t.render(&Bindings::new()) {
            Err(Error::MissingBinding { placeholder, .. }) => assert_eq!(placeholder, "target_class"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn undeclared_placeholder_rejected() {
        assert!(PromptTemplate::new(TemplateId::SegGenerate, "x", "{bogus}").is_err());
    }

    #[test]
    fn list_binding_uses_dash_lines() {
        let t = PromptTemplate::new(TemplateId::ClassDescription, "x", "{target_class_name} :{target_seed_data}\nEnd").unwrap();
        let out = t
            .render(&Bindings::new().text("target_class_name", "c").list("target_seed_data", ["a", "b"]))
            .unwrap();
        assert_eq!(out, "c :\n- a\n- b\nEnd");
    }

    #[test]
    fn unused_bindings_reported() {
        let t = PromptTemplate::new(TemplateId::SegGenerate, "x", "{target_class}").unwrap();
        let b = Bindings::new().text("target_class", "c").text("extra", "e");
        assert_eq!(t.unused_bindings(&b), ["extra"]);
        assert_eq!(t.render(&b).unwrap(), "c");
    }

    #[test]
    fn empty_value_rejected() {
        let t = PromptTemplate::new(TemplateId::SegGenerate, "x", "{target_class}").unwrap();
        assert!(t.render(&Bindings::new().text("target_class", "")).is_err());
    }

    #[test]
    fn generic_set_binds_domain() {
        let set = builtin_template_set("generic").unwrap().with_domain_label("travel");
        let out = set
            .render(
                TemplateId::ClassDescription,
                &Bindings::new().text("target_class_name", "c").list("target_seed_data", ["x"]),
            )
            .unwrap();
        assert!(out.contains("about travel c :"));
    }

    #[test]
    fn template_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("custom");
        std::fs::create_dir(&d).unwrap();
        for id in TemplateId::ALL {
            std::fs::write(d.join(format!("{id}.txt")), format!("{id} body\n")).unwrap();
        }
        let sets = load_template_dir(dir.path()).unwrap();
        assert_eq!(sets[0].domain(), "custom");
        assert_eq!(sets[0].get(TemplateId::Modification).body(), "modification body");
        std::fs::remove_file(d.join("verification.txt")).unwrap();
        assert!(load_template_dir(dir.path()).is_err());
    }
}
