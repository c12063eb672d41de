//! Prompt catalog: one plain-text file per agent, loaded verbatim.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use thiserror::Error;

/// Catalog entry names. Each maps to `<name>.txt` on disk.
pub const COUNSELLOR_INITIAL: &str = "counsellor-initial";
pub const COUNSELLOR_FINAL: &str = "counsellor-final";
pub const MODERATOR: &str = "moderator";
pub const OFFTRACK: &str = "offtrack";
pub const END: &str = "end";
pub const SUMMARY_SUFFIX: &str = "summary-suffix";
pub const VIRTUAL_CLIENT: &str = "virtual-client";
pub const VIRTUAL_CLIENT_RULES: &str = "virtual-client-rules";
pub const PARSER: &str = "parser";
pub const ANNOTATOR_COUNSELLOR: &str = "annotator-counsellor";
pub const ANNOTATOR_CLIENT: &str = "annotator-client";
pub const ANNOTATOR_FORMAT: &str = "annotator-format";
pub const RQ_RESOLVE: &str = "rq-resolve";

const BUILTIN: &[(&str, &str)] = &[
    (COUNSELLOR_INITIAL, include_str!("../prompts/counsellor-initial.txt")),
    (COUNSELLOR_FINAL, include_str!("../prompts/counsellor-final.txt")),
    (MODERATOR, include_str!("../prompts/moderator.txt")),
    (OFFTRACK, include_str!("../prompts/offtrack.txt")),
    (END, include_str!("../prompts/end.txt")),
    (SUMMARY_SUFFIX, include_str!("../prompts/summary-suffix.txt")),
    (VIRTUAL_CLIENT, include_str!("../prompts/virtual-client.txt")),
    (VIRTUAL_CLIENT_RULES, include_str!("../prompts/virtual-client-rules.txt")),
    (PARSER, include_str!("../prompts/parser.txt")),
    (ANNOTATOR_COUNSELLOR, include_str!("../prompts/annotator-counsellor.txt")),
    (ANNOTATOR_CLIENT, include_str!("../prompts/annotator-client.txt")),
    (ANNOTATOR_FORMAT, include_str!("../prompts/annotator-format.txt")),
    (RQ_RESOLVE, include_str!("../prompts/rq-resolve.txt")),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown prompt profile {0:?}")]
    UnknownProfile(String),
    #[error("prompt {0:?} is not in the catalog")]
    Missing(String),
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("reading prompt {name:?}: {message}")]
    Io { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    entries: BTreeMap<String, String>,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptCatalog {
    /// The texts vendored under `prompts/`.
    pub fn builtin() -> Self {
        PromptCatalog {
            entries: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(k, _)| *k)
    }

    /// Reads `<name>.txt` for every catalog entry from `dir`, byte for byte.
    /// Entries without a file keep their built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut catalog = Self::builtin();
        for name in Self::names() {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| PromptError::Io { name: name.to_string(), message: e.to_string() })?;
                catalog.entries.insert(name.to_string(), text);
            }
        }
        Ok(catalog)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), PromptError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| PromptError::Io { name: dir.display().to_string(), message: e.to_string() })?;
        for (name, text) in &self.entries {
            std::fs::write(dir.join(format!("{name}.txt")), text)
                .map_err(|e| PromptError::Io { name: name.clone(), message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.entries
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::Missing(name.to_string()))
    }

    pub fn set(&mut self, name: &str, text: impl Into<String>) {
        self.entries.insert(name.to_string(), text.into());
    }

    /// Maps a counsellor profile id (`initial` / `final`) to its entry name.
    pub fn counsellor_entry(profile: &str) -> Result<&'static str, PromptError> {
        match profile {
            "initial" => Ok(COUNSELLOR_INITIAL),
            "final" => Ok(COUNSELLOR_FINAL),
            other => Err(PromptError::UnknownProfile(other.to_string())),
        }
    }
}

/// Substitutes `{key}` placeholders; any placeholder left over is an error.
pub fn render(template: &str, vars: &HashMap<&str, &str>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder(&after[..close]) => {
                let key = &after[..close];
                match vars.get(key) {
                    Some(value) => out.push_str(value),
                    None => return Err(PromptError::UnresolvedPlaceholder(key.to_string())),
                }
                rest = &after[close + 1..];
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

fn is_placeholder(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_and_rejects_leftovers() {
        let vars = HashMap::from([("client_name", "Alex")]);
        assert_eq!(render("hi {client_name}!", &vars).unwrap(), "hi Alex!");
        assert_eq!(
            render("hi {other}", &vars),
            Err(PromptError::UnresolvedPlaceholder("other".into()))
        );
        // Non-placeholder braces pass through.
        assert_eq!(render("a {B c} {", &vars).unwrap(), "a {B c} {");
    }

    #[test]
    fn builtin_catalog_is_complete() {
        let c = PromptCatalog::builtin();
        for name in PromptCatalog::names() {
            assert!(!c.get(name).unwrap().trim().is_empty(), "{name}");
        }
        assert!(matches!(c.get("nope"), Err(PromptError::Missing(_))));
    }

    #[test]
    fn profiles() {
        assert_eq!(PromptCatalog::counsellor_entry("final").unwrap(), COUNSELLOR_FINAL);
        assert_eq!(
            PromptCatalog::counsellor_entry("nonexistent"),
            Err(PromptError::UnknownProfile("nonexistent".into()))
        );
    }

    #[test]
    fn disk_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = PromptCatalog::builtin();
        c.write_dir(dir.path()).unwrap();
        assert_eq!(PromptCatalog::load_dir(dir.path()).unwrap(), c);
        let vendored = Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts");
        let loaded = PromptCatalog::load_dir(&vendored).unwrap();
        for name in PromptCatalog::names() {
            let raw = std::fs::read(vendored.join(format!("{name}.txt"))).unwrap();
            assert_eq!(loaded.get(name).unwrap().as_bytes(), raw.as_slice());
        }
    }

    #[test]
    fn vendored_texts_carry_key_lines() {
        let c = PromptCatalog::builtin();
        assert!(c
            .get(COUNSELLOR_FINAL)
            .unwrap()
            .lines()
            .any(|l| l.starts_with("You should never use prepositional phrases")));
        assert!(c.get(MODERATOR).unwrap().contains("\"Flagged: Evokes Sustain Talk\""));
        assert!(c.get(OFFTRACK).unwrap().contains("benefit of the doubt to the client"));
        assert!(c.get(END).unwrap().contains("provide a one-word response of either True or False"));
        assert!(c.get(VIRTUAL_CLIENT_RULES).unwrap().contains("Stay in character throughout."));
    }
}
