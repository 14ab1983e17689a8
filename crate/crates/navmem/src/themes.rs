//! Room-theme vocabularies.
//!
//! Scenes draw object labels per room from these lists. Every label
//! carries its theme word, so labels of one room share character
//! features under the reference embedding provider while rooms stay
//! near-orthogonal to each other — the margin the clustering and
//! retrieval paths rely on. The table doubles as the planner oracle's
//! stand-in for world knowledge (which objects belong where).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theme {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThemeTable {
    pub themes: Vec<Theme>,
}

static BUILTIN: OnceLock<ThemeTable> = OnceLock::new();

impl ThemeTable {
    pub fn builtin() -> &'static ThemeTable {
        BUILTIN.get_or_init(|| {
            serde_json::from_str(include_str!("../data/themes.json"))
                .expect("bundled theme table parses")
        })
    }

    pub fn theme(&self, name: &str) -> Option<&Theme> {
        self.themes.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn theme_of_label(&self, label: &str) -> Option<&Theme> {
        self.themes
            .iter()
            .find(|t| t.labels.iter().any(|l| l.eq_ignore_ascii_case(label)))
    }

    /// Stand-in for general knowledge about a label: the joined word
    /// list of its theme, or the bare label when no theme claims it.
    pub fn context_text(&self, label: &str) -> String {
        match self.theme_of_label(label) {
            Some(theme) => theme.labels.join(" "),
            None => label.to_string(),
        }
    }
}
