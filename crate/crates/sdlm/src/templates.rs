//! Diagnosis and debiasing input construction, and the attribute registry.
//!
//! The self-diagnosis input asks the model whether a text contains an
//! attribute and reads the probabilities of the answer words at the next
//! token position. The self-debiasing input places an attribute-encouraging
//! prefix before the text so that attribute-leaning continuations gain
//! probability relative to the plain context.

use std::path::Path;

use crate::error::{Error, Result};

/// Placeholder substituted with the input text.
pub const TEXT_PLACEHOLDER: &str = "{text}";
/// Placeholder substituted with the attribute description.
pub const ATTRIBUTE_PLACEHOLDER: &str = "{attribute}";

/// A named undesired attribute: short name, free-text description, and an
/// optional single-keyword form.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttributeDescription {
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
}

impl AttributeDescription {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let description = description.into();
        if name.is_empty() {
            return Err(Error::validation("attribute name must be nonempty"));
        }
        if description.is_empty() {
            return Err(Error::validation(format!(
                "attribute {name:?} needs a nonempty description"
            )));
        }
        Ok(AttributeDescription {
            name,
            description,
            keyword: None,
        })
    }

    pub fn with_keyword(mut self, keyword: impl Into<String>) -> Self {
        self.keyword = Some(keyword.into());
        self
    }
}

/// An ordered collection of attributes with unique names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRegistry {
    entries: Vec<AttributeDescription>,
}

impl AttributeRegistry {
    pub fn new(entries: Vec<AttributeDescription>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for entry in &entries {
            if entry.name.is_empty() {
                return Err(Error::validation("attribute name must be nonempty"));
            }
            if entry.description.is_empty() {
                return Err(Error::validation(format!(
                    "attribute {:?} needs a nonempty description",
                    entry.name
                )));
            }
            if !seen.insert(entry.name.clone()) {
                return Err(Error::validation(format!(
                    "duplicate attribute name {:?} in registry",
                    entry.name
                )));
            }
        }
        Ok(AttributeRegistry { entries })
    }

    pub fn get(&self, name: &str) -> Option<&AttributeDescription> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[AttributeDescription] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Loads a registry file: a JSON list of
    /// `{"name": ..., "description": ..., "keyword": ...}` objects.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let entries: Vec<AttributeDescription> =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.display().to_string(),
                location: Some(format!("line {} column {}", e.line(), e.column())),
                message: e.to_string(),
            })?;
        AttributeRegistry::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| Error::validation(format!("serializing registry: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

impl<'a> IntoIterator for &'a AttributeRegistry {
    type Item = &'a AttributeDescription;
    type IntoIter = std::slice::Iter<'a, AttributeDescription>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// The six stock attributes with their moderation-API descriptions and
/// best-fit keywords. Profanity has no keyword form.
pub fn default_registry() -> AttributeRegistry {
    let entries = vec![
        AttributeDescription {
            name: "toxicity".into(),
            description: "rude, disrespectful or unreasonable language".into(),
            keyword: Some("rude".into()),
        },
        AttributeDescription {
            name: "severe toxicity".into(),
            description: "very hateful, aggressive, disrespectful language".into(),
            keyword: Some("hateful".into()),
        },
        AttributeDescription {
            name: "sexually explicit".into(),
            description: "sexually explicit language".into(),
            keyword: Some("sexually explicit".into()),
        },
        AttributeDescription {
            name: "threat".into(),
            description: "a threat".into(),
            keyword: Some("threat".into()),
        },
        AttributeDescription {
            name: "profanity".into(),
            description: "swear words, curse words, or other obscene or profane language".into(),
            keyword: None,
        },
        AttributeDescription {
            name: "identity attack".into(),
            description: "negative or hateful language targeting someone because of their identity"
                .into(),
            keyword: Some("racist".into()),
        },
    ];
    AttributeRegistry::new(entries).expect("stock registry is valid")
}

/// The eight keyword attributes as registry entries in their own right, for
/// keyword-only debiasing runs.
pub fn keyword_registry() -> AttributeRegistry {
    let keywords = [
        "rude",
        "sexually explicit",
        "sexist",
        "racist",
        "hateful",
        "aggressive",
        "violent",
        "threat",
    ];
    let entries = keywords
        .iter()
        .map(|kw| AttributeDescription {
            name: (*kw).into(),
            description: (*kw).into(),
            keyword: Some((*kw).into()),
        })
        .collect();
    AttributeRegistry::new(entries).expect("keyword registry is valid")
}

/// A template body with `{text}` and `{attribute}` placeholders (each exactly
/// once) plus the answer-word pair read at the diagnosis slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    body: String,
    answer_words: (String, String),
}

impl TemplateSpec {
    pub fn new(body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        for placeholder in [TEXT_PLACEHOLDER, ATTRIBUTE_PLACEHOLDER] {
            let n = body.matches(placeholder).count();
            if n != 1 {
                return Err(Error::validation(format!(
                    "template body must contain {placeholder} exactly once, found {n}"
                )));
            }
        }
        Ok(TemplateSpec {
            body,
            answer_words: ("Yes".into(), "No".into()),
        })
    }

    /// The self-diagnosis template.
    pub fn sdg_default() -> Self {
        TemplateSpec::new("\"{text}\"\nQuestion: Does the above text contain {attribute}?\nAnswer:")
            .expect("stock sdg template is valid")
    }

    /// The self-debiasing template.
    pub fn sdb_default() -> Self {
        TemplateSpec::new("The following text contains {attribute}:\n{text}")
            .expect("stock sdb template is valid")
    }

    /// Reads a template body from a UTF-8 file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        TemplateSpec::new(body)
    }

    /// Overrides the answer-word pair. Subword-model adapters map these to
    /// their single leading-space token variants.
    pub fn with_answer_words(
        mut self,
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Result<Self> {
        let positive = positive.into();
        let negative = negative.into();
        if positive == negative {
            return Err(Error::validation("answer words must be distinct"));
        }
        self.answer_words = (positive, negative);
        Ok(self)
    }

    pub fn answer_words(&self) -> (&str, &str) {
        (&self.answer_words.0, &self.answer_words.1)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitutes both placeholders positionally, so placeholder-looking
    /// substrings inside `text` or the description are left alone.
    pub fn render(&self, text: &str, attribute: &AttributeDescription) -> String {
        let text_at = self.body.find(TEXT_PLACEHOLDER).expect("validated");
        let attr_at = self.body.find(ATTRIBUTE_PLACEHOLDER).expect("validated");
        let (first_at, first_len, first_val, second_at, second_len, second_val) =
            if text_at < attr_at {
                (
                    text_at,
                    TEXT_PLACEHOLDER.len(),
                    text,
                    attr_at,
                    ATTRIBUTE_PLACEHOLDER.len(),
                    attribute.description.as_str(),
                )
            } else {
                (
                    attr_at,
                    ATTRIBUTE_PLACEHOLDER.len(),
                    attribute.description.as_str(),
                    text_at,
                    TEXT_PLACEHOLDER.len(),
                    text,
                )
            };
        let mut out = String::with_capacity(self.body.len() + text.len() + attribute.description.len());
        out.push_str(&self.body[..first_at]);
        out.push_str(first_val);
        out.push_str(&self.body[first_at + first_len..second_at]);
        out.push_str(second_val);
        out.push_str(&self.body[second_at + second_len..]);
        out
    }
}

/// Renders the self-diagnosis input for `text` and attribute `y` using the
/// stock template. The diagnosis slot is the next-token position after the
/// trailing "Answer:".
pub fn render_sdg(text: &str, y: &AttributeDescription) -> Result<String> {
    if text.is_empty() {
        return Err(Error::input("self-diagnosis input text must be nonempty"));
    }
    Ok(TemplateSpec::sdg_default().render(text, y))
}

/// Renders the self-debiasing input for `text` and attribute `y` using the
/// stock template. `text` may be empty (generation from scratch); continuation
/// tokens are scored after this prefix.
pub fn render_sdb(text: &str, y: &AttributeDescription) -> String {
    TemplateSpec::sdb_default().render(text, y)
}

/// Renders the keyword form of the self-debiasing input: the attribute's
/// keyword prepended in parentheses.
pub fn render_sdb_keyword(text: &str, y: &AttributeDescription) -> Result<String> {
    match y.keyword.as_deref() {
        Some(kw) if !kw.is_empty() => Ok(format!("({kw}) {text}")),
        _ => Err(Error::config(format!(
            "attribute {:?} has no keyword for the keyword-style debiasing input",
            y.name
        ))),
    }
}
