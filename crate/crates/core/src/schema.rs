//! The closed 15-category extraction schema.
//!
//! A [`StructuredReport`] maps categories to ordered lists of concepts. On the
//! wire each category value is a single string whose concepts are separated by
//! semicolons; [`serialize_report`] and [`parse_model_output`] convert between
//! the two forms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Delimiter between concepts inside one category value.
pub const CONCEPT_DELIMITER: char = ';';

/// Separator used when joining concepts back into a category value.
pub const CONCEPT_JOINER: &str = "; ";

/// One of the fifteen extraction categories.
///
/// Declaration order is the canonical order used for serialization and tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Age,
    Comorbidities,
    Diagnosis,
    DiagnosticProcedures,
    FamilyHistory,
    Gender,
    InterventionalTherapy,
    LaboratoryValues,
    LifeStyle,
    MedicalSurgicalHistory,
    Pathology,
    PatientOutcomeAssessment,
    PharmacologicalTherapy,
    SignsSymptoms,
    SocialHistory,
}

impl Category {
    pub const COUNT: usize = 15;

    pub const ALL: [Category; Category::COUNT] = [
        Category::Age,
        Category::Comorbidities,
        Category::Diagnosis,
        Category::DiagnosticProcedures,
        Category::FamilyHistory,
        Category::Gender,
        Category::InterventionalTherapy,
        Category::LaboratoryValues,
        Category::LifeStyle,
        Category::MedicalSurgicalHistory,
        Category::Pathology,
        Category::PatientOutcomeAssessment,
        Category::PharmacologicalTherapy,
        Category::SignsSymptoms,
        Category::SocialHistory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Age => "age",
            Category::Comorbidities => "comorbidities",
            Category::Diagnosis => "diagnosis",
            Category::DiagnosticProcedures => "diagnostic_procedures",
            Category::FamilyHistory => "family_history",
            Category::Gender => "gender",
            Category::InterventionalTherapy => "interventional_therapy",
            Category::LaboratoryValues => "laboratory_values",
            Category::LifeStyle => "life_style",
            Category::MedicalSurgicalHistory => "medical_surgical_history",
            Category::Pathology => "pathology",
            Category::PatientOutcomeAssessment => "patient_outcome_assessment",
            Category::PharmacologicalTherapy => "pharmacological_therapy",
            Category::SignsSymptoms => "signs_symptoms",
            Category::SocialHistory => "social_history",
        }
    }

    /// Zero-based position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

/// Language tag of a clinical report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    De,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::De => "de",
        }
    }
}

impl FromStr for Language {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" | "eng" | "english" => Ok(Language::En),
            "de" | "deu" | "ger" | "german" => Ok(Language::De),
            other => Err(SchemaError::UnknownLanguage(other.to_string())),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("report text is empty")]
    EmptyText,
    #[error("report id is empty")]
    EmptyId,
    #[error("unknown language tag {0:?}")]
    UnknownLanguage(String),
    #[error("concept {0:?} contains the concept delimiter")]
    DelimiterInConcept(String),
}

/// A free-text patient summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalReport {
    id: String,
    language: Language,
    text: String,
}

impl ClinicalReport {
    pub fn new(
        id: impl Into<String>,
        language: Language,
        text: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        let id = id.into();
        let text = text.into();
        if id.trim().is_empty() {
            return Err(SchemaError::EmptyId);
        }
        if text.trim().is_empty() {
            return Err(SchemaError::EmptyText);
        }
        Ok(Self { id, language, text })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Splits a raw category value into its concepts.
///
/// Segments are whitespace-trimmed and empty segments dropped; order is kept.
pub fn split_concepts(raw: &str) -> Vec<String> {
    raw.split(CONCEPT_DELIMITER)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Mapping from category to its ordered concept list.
///
/// Categories with no concepts are never stored, so an absent key and an empty
/// list are the same value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct StructuredReport {
    entries: BTreeMap<Category, Vec<String>>,
}

impl StructuredReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the concepts of `category`.
    ///
    /// Concepts are trimmed and empty ones dropped. A concept containing the
    /// delimiter is rejected rather than silently split.
    pub fn set<I, S>(&mut self, category: Category, concepts: I) -> Result<(), SchemaError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut cleaned = Vec::new();
        for concept in concepts {
            let concept = concept.as_ref().trim();
            if concept.contains(CONCEPT_DELIMITER) {
                return Err(SchemaError::DelimiterInConcept(concept.to_string()));
            }
            if !concept.is_empty() {
                cleaned.push(concept.to_string());
            }
        }
        if cleaned.is_empty() {
            self.entries.remove(&category);
        } else {
            self.entries.insert(category, cleaned);
        }
        Ok(())
    }

    /// Sets a category from its raw delimited value string.
    pub fn set_raw(&mut self, category: Category, raw: &str) {
        let concepts = split_concepts(raw);
        if concepts.is_empty() {
            self.entries.remove(&category);
        } else {
            self.entries.insert(category, concepts);
        }
    }

    /// Builder-style variant of [`StructuredReport::set_raw`].
    pub fn with(mut self, category: Category, raw: &str) -> Self {
        self.set_raw(category, raw);
        self
    }

    pub fn remove(&mut self, category: Category) -> Option<Vec<String>> {
        self.entries.remove(&category)
    }

    pub fn get(&self, category: Category) -> Option<&[String]> {
        self.entries.get(&category).map(Vec::as_slice)
    }

    pub fn contains(&self, category: Category) -> bool {
        self.entries.contains_key(&category)
    }

    /// Concepts joined back into the wire value, or `None` when absent.
    pub fn joined(&self, category: Category) -> Option<String> {
        self.entries.get(&category).map(|c| c.join(CONCEPT_JOINER))
    }

    /// Entries in canonical category order.
    pub fn iter(&self) -> impl Iterator<Item = (Category, &[String])> {
        self.entries.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn categories(&self) -> impl Iterator<Item = Category> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn concept_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Builds a report from a decoded object, applying `mode` to keys and values.
    pub fn from_object(
        object: &Map<String, Value>,
        mode: ParseMode,
    ) -> Result<(Self, Vec<ParseWarning>), ParseFailureKind> {
        let mut report = StructuredReport::new();
        let mut warnings = Vec::new();
        for (key, value) in object {
            let category = match resolve_key(key, mode) {
                Some(c) => c,
                None => match mode {
                    ParseMode::Strict => return Err(ParseFailureKind::UnknownCategory(key.clone())),
                    ParseMode::Lenient => {
                        warnings.push(ParseWarning::DroppedUnknownKey(key.clone()));
                        continue;
                    }
                },
            };
            let text = match value_text(value, mode) {
                Some(t) => t,
                None => return Err(ParseFailureKind::NonTextValue(key.clone())),
            };
            let concepts = split_concepts(&text);
            if concepts.is_empty() {
                continue;
            }
            match report.entries.get_mut(&category) {
                Some(existing) => {
                    warnings.push(ParseWarning::MergedDuplicateKey(key.clone()));
                    existing.extend(concepts);
                }
                None => {
                    report.entries.insert(category, concepts);
                }
            }
        }
        Ok((report, warnings))
    }
}

fn resolve_key(key: &str, mode: ParseMode) -> Option<Category> {
    match mode {
        ParseMode::Strict => key.parse().ok(),
        ParseMode::Lenient => {
            let folded: String = key
                .trim()
                .chars()
                .map(|c| match c {
                    ' ' | '-' => '_',
                    c => c.to_ascii_lowercase(),
                })
                .collect();
            folded.parse().ok()
        }
    }
}

/// Text content of a category value. `null` is treated as an empty value in
/// both modes; lenient mode also accepts scalars and arrays of scalars.
fn value_text(value: &Value, mode: ParseMode) -> Option<String> {
    match (value, mode) {
        (Value::String(s), _) => Some(s.clone()),
        (Value::Null, _) => Some(String::new()),
        (Value::Number(n), ParseMode::Lenient) => Some(n.to_string()),
        (Value::Bool(b), ParseMode::Lenient) => Some(b.to_string()),
        (Value::Array(items), ParseMode::Lenient) => {
            let mut parts = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::Array(_) | Value::Object(_) => return None,
                    other => parts.push(value_text(other, mode)?),
                }
            }
            Some(parts.join(CONCEPT_JOINER))
        }
        _ => None,
    }
}

impl Serialize for StructuredReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (category, concepts) in &self.entries {
            map.serialize_entry(category.as_str(), &concepts.join(CONCEPT_JOINER))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for StructuredReport {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let object = Map::<String, Value>::deserialize(deserializer)?;
        StructuredReport::from_object(&object, ParseMode::Strict)
            .map(|(report, _)| report)
            .map_err(de::Error::custom)
    }
}

/// Canonical object-literal text: keys in category order, compact, each value
/// the `"; "`-join of its concepts.
pub fn serialize_report(report: &StructuredReport) -> String {
    let mut out = String::from("{");
    for (i, (category, concepts)) in report.entries.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('"');
        out.push_str(category.as_str());
        out.push_str("\":");
        // serde_json string escaping cannot fail for a &str
        out.push_str(&serde_json::to_string(&concepts.join(CONCEPT_JOINER)).expect("string"));
    }
    out.push('}');
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", content = "key", rename_all = "snake_case")]
pub enum ParseWarning {
    DroppedUnknownKey(String),
    MergedDuplicateKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "key", rename_all = "snake_case")]
pub enum ParseFailureKind {
    #[error("no object literal found")]
    NoObjectFound,
    #[error("malformed object literal")]
    MalformedObject,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("value of {0:?} is not text")]
    NonTextValue(String),
}

/// A completion that could not be turned into a report. Keeps the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub report: StructuredReport,
    pub warnings: Vec<ParseWarning>,
}

/// Extracts a [`StructuredReport`] from a model completion.
///
/// The first well-formed object literal in `raw` is used, so code fences and
/// surrounding prose are ignored. Strict mode rejects unknown keys and
/// non-string values; lenient mode drops unknown keys with a warning, folds
/// key case, and stringifies scalar values.
pub fn parse_model_output(raw: &str, mode: ParseMode) -> Result<ParsedOutput, ParseFailure> {
    let fail = |kind| ParseFailure {
        kind,
        raw: raw.to_string(),
    };
    let object = locate_object(raw).map_err(fail)?;
    let (report, warnings) = StructuredReport::from_object(&object, mode).map_err(fail)?;
    Ok(ParsedOutput { report, warnings })
}

fn locate_object(raw: &str) -> Result<Map<String, Value>, ParseFailureKind> {
    let mut saw_brace = false;
    for (start, _) in raw.match_indices('{') {
        saw_brace = true;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(object))) = stream.next() {
            return Ok(object);
        }
    }
    if saw_brace {
        Err(ParseFailureKind::MalformedObject)
    } else {
        Err(ParseFailureKind::NoObjectFound)
    }
}
