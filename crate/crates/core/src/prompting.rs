//! Prompt rendering for the three extraction setups.
//!
//! * naive: category names and the output format, nothing else;
//! * advanced: category definitions plus retrieved (report, gold) examples;
//! * minimal: a one-line instruction for fine-tuned models.
//!
//! Templates and the default definition set are text assets under `assets/`.
//! Rendering is a pure function of its inputs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::CorpusSample;
use crate::schema::{serialize_report, Category, ClinicalReport, StructuredReport};

const SYSTEM_TEMPLATE: &str = include_str!("../assets/templates/system.txt");
const NAIVE_TEMPLATE: &str = include_str!("../assets/templates/naive.txt");
const ADVANCED_TEMPLATE: &str = include_str!("../assets/templates/advanced.txt");
const MINIMAL_TEMPLATE: &str = include_str!("../assets/templates/minimal.txt");
const OUTPUT_FORMAT: &str = include_str!("../assets/templates/output_format.txt");
const BUILTIN_DEFINITIONS: &str = include_str!("../assets/definitions/v1.toml");

/// Appended as a follow-up turn when a completion could not be parsed.
pub const REPAIR_NUDGE: &str =
    "Your answer could not be read. Reply again with only the JSON object, without any other text.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("definition set lacks category {0}")]
    MissingDefinition(Category),
    #[error("definition set: {0}")]
    InvalidDefinitions(String),
    #[error("advanced prompting needs at least one example")]
    EmptyExamples,
    #[error("cannot read definitions: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Naive,
    Advanced,
    Minimal,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Advanced => "advanced",
            Mode::Minimal => "minimal",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Mode::Naive),
            "advanced" => Ok(Mode::Advanced),
            "minimal" => Ok(Mode::Minimal),
            other => Err(format!("unknown mode {other:?} (expected naive, advanced or minimal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDefinition {
    pub category: Category,
    pub definition: String,
    pub scope_notes: String,
}

/// Versioned definitions for all fifteen categories, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefinitionSet {
    version: String,
    definitions: Vec<CategoryDefinition>,
}

#[derive(Deserialize)]
struct RawDefinition {
    definition: String,
    #[serde(default)]
    scope: String,
}

impl DefinitionSet {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_DEFINITIONS).expect("builtin definitions are valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Parses a `version = "..."` key plus one `[category]` table per category,
    /// each with `definition` and optional `scope`.
    pub fn from_toml_str(content: &str) -> Result<Self, PromptError> {
        let invalid = |msg: String| PromptError::InvalidDefinitions(msg);
        let mut table: toml::Table = content.parse().map_err(|e| invalid(format!("{e}")))?;
        let version = match table.remove("version") {
            Some(toml::Value::String(v)) if !v.trim().is_empty() => v,
            _ => return Err(invalid("missing version string".into())),
        };
        let mut slots: Vec<Option<CategoryDefinition>> = vec![None; Category::COUNT];
        for (key, value) in table {
            let category: Category = key.parse().map_err(|e| invalid(format!("{e}")))?;
            let raw: RawDefinition = value
                .try_into()
                .map_err(|e| invalid(format!("{category}: {e}")))?;
            if raw.definition.trim().is_empty() {
                return Err(invalid(format!("{category}: empty definition")));
            }
            slots[category.index()] = Some(CategoryDefinition {
                category,
                definition: raw.definition.trim().to_string(),
                scope_notes: raw.scope.trim().to_string(),
            });
        }
        let definitions = slots
            .into_iter()
            .zip(Category::ALL)
            .map(|(slot, category)| slot.ok_or(PromptError::MissingDefinition(category)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            version,
            definitions,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, category: Category) -> &CategoryDefinition {
        &self.definitions[category.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &CategoryDefinition> {
        self.definitions.iter()
    }

    /// The definitions block as it appears in advanced prompts.
    pub fn render(&self) -> String {
        self.definitions
            .iter()
            .map(|d| {
                if d.scope_notes.is_empty() {
                    format!("- {}: {}", d.category, d.definition)
                } else {
                    format!("- {}: {} Scope: {}", d.category, d.definition, d.scope_notes)
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// SHA-256 over the version and rendered definitions, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(&[self.version.as_bytes(), self.render().as_bytes()])
    }
}

/// A fully rendered two-message prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: Mode,
    pub system_text: String,
    pub user_text: String,
    pub example_count: usize,
    /// Ids of the in-context examples, in prompt order.
    pub example_ids: Vec<String>,
}

impl PromptSpec {
    /// SHA-256 of mode, system text and user text.
    pub fn hash(&self) -> String {
        sha256_hex(&[
            self.mode.as_str().as_bytes(),
            self.system_text.as_bytes(),
            self.user_text.as_bytes(),
        ])
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// Single-pass `{{name}}` substitution; substituted text is never rescanned.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").expect("unterminated placeholder in template");
        let name = &after[..end];
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .unwrap_or_else(|| panic!("template placeholder {name:?} has no value"))
            .1;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

fn system_text() -> String {
    SYSTEM_TEMPLATE.trim_end().to_string()
}

fn category_list() -> String {
    Category::ALL
        .iter()
        .map(|c| format!("- {c}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_naive_prompt(report: &ClinicalReport) -> PromptSpec {
    let user_text = render(
        NAIVE_TEMPLATE.trim_end(),
        &[
            ("category_list", &category_list()),
            ("output_format", OUTPUT_FORMAT.trim_end()),
            ("report", report.text()),
        ],
    );
    PromptSpec {
        mode: Mode::Naive,
        system_text: system_text(),
        user_text,
        example_count: 0,
        example_ids: Vec::new(),
    }
}

/// Renders one in-context example block.
fn render_example(rank: usize, report: &ClinicalReport, gold: &StructuredReport) -> String {
    format!(
        "### Example {rank}\nReport:\n{}\nOutput:\n{}",
        report.text(),
        serialize_report(gold)
    )
}

/// Advanced prompt with definitions and `examples` in the given (rank) order.
pub fn build_advanced_prompt(
    report: &ClinicalReport,
    examples: &[(&ClinicalReport, &StructuredReport)],
    definitions: &DefinitionSet,
) -> Result<PromptSpec, PromptError> {
    if examples.is_empty() {
        return Err(PromptError::EmptyExamples);
    }
    let rendered_examples = examples
        .iter()
        .enumerate()
        .map(|(i, (r, s))| render_example(i + 1, r, s))
        .collect::<Vec<_>>()
        .join("\n\n");
    let user_text = render(
        ADVANCED_TEMPLATE.trim_end(),
        &[
            ("definitions", &definitions.render()),
            ("output_format", OUTPUT_FORMAT.trim_end()),
            ("examples", &rendered_examples),
            ("report", report.text()),
        ],
    );
    Ok(PromptSpec {
        mode: Mode::Advanced,
        system_text: system_text(),
        user_text,
        example_count: examples.len(),
        example_ids: examples.iter().map(|(r, _)| r.id().to_string()).collect(),
    })
}

/// Convenience over [`build_advanced_prompt`] for corpus samples.
pub fn build_advanced_prompt_from_samples(
    report: &ClinicalReport,
    examples: &[&CorpusSample],
    definitions: &DefinitionSet,
) -> Result<PromptSpec, PromptError> {
    let pairs: Vec<_> = examples.iter().map(|s| (&s.report, &s.gold)).collect();
    build_advanced_prompt(report, &pairs, definitions)
}

/// Instruction used both at inference time and in fine-tuning data.
pub fn build_minimal_prompt(report: &ClinicalReport) -> PromptSpec {
    PromptSpec {
        mode: Mode::Minimal,
        system_text: system_text(),
        user_text: render(MINIMAL_TEMPLATE.trim_end(), &[("report", report.text())]),
        example_count: 0,
        example_ids: Vec::new(),
    }
}

/// Hash of the minimal template and system text, for checking that training
/// data and inference prompts come from the same template.
pub fn minimal_template_hash() -> String {
    sha256_hex(&[SYSTEM_TEMPLATE.trim_end().as_bytes(), MINIMAL_TEMPLATE.trim_end().as_bytes()])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: String,
    pub content: String,
}

/// One supervised fine-tuning example in chat form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub id: String,
    pub template_hash: String,
    pub messages: Vec<ChatTurn>,
}

/// Pairs the minimal prompt of a sample with its canonical gold serialization.
pub fn fine_tuning_record(sample: &CorpusSample) -> FineTuneRecord {
    let prompt = build_minimal_prompt(&sample.report);
    let turn = |role: &str, content: String| ChatTurn {
        role: role.to_string(),
        content,
    };
    FineTuneRecord {
        id: sample.id().to_string(),
        template_hash: minimal_template_hash(),
        messages: vec![
            turn("system", prompt.system_text),
            turn("user", prompt.user_text),
            turn("assistant", serialize_report(&sample.gold)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Language;

    fn report(id: &str, text: &str) -> ClinicalReport {
        ClinicalReport::new(id, Language::En, text).unwrap()
    }

    #[test]
    fn naive_lists_categories_once_and_embeds_text() {
        let r = report("q", "A 45-year-old man with fever.");
        let p = build_naive_prompt(&r);
        for c in Category::ALL {
            assert_eq!(p.user_text.matches(&format!("- {c}\n")).count(), 1, "{c}");
        }
        assert!(p.user_text.contains(r.text()));
        assert!(!p.user_text.contains("Scope:"));
        assert!(!p.user_text.contains("Example"));
        assert!(!p.user_text.contains(DefinitionSet::builtin().get(Category::Age).definition.as_str()));
        assert_eq!(p.example_count, 0);
        assert!(p.user_text.contains("JSON object"));
    }

    #[test]
    fn advanced_orders_examples_and_lists_definitions() {
        let defs = DefinitionSet::builtin();
        let q = report("q", "Query text.");
        let e: Vec<_> = (1..=3).map(|i| report(&format!("e{i}"), &format!("example report {i}"))).collect();
        let g = StructuredReport::new().with(Category::Diagnosis, "sepsis; ards");
        let pairs: Vec<_> = e.iter().map(|r| (r, &g)).collect();
        let p = build_advanced_prompt(&q, &pairs, &defs).unwrap();
        let pos: Vec<usize> = (1..=3)
            .map(|i| p.user_text.find(&format!("### Example {i}\nReport:\nexample report {i}")).unwrap())
            .collect();
        assert!(pos[0] < pos[1] && pos[1] < pos[2]);
        for d in defs.iter() {
            assert_eq!(p.user_text.matches(&format!("- {}: ", d.category)).count(), 1);
            assert_eq!(p.user_text.matches(d.definition.as_str()).count(), 1);
        }
        assert!(p.user_text.contains(r#"{"diagnosis":"sepsis; ards"}"#));
        assert!(p.user_text.ends_with("Query text."));
        assert_eq!(p.example_count, 3);
        assert_eq!(p.example_ids, ["e1", "e2", "e3"]);
        assert_eq!(p, build_advanced_prompt(&q, &pairs, &defs).unwrap());
        assert!(matches!(build_advanced_prompt(&q, &[], &defs), Err(PromptError::EmptyExamples)));
    }

    #[test]
    fn minimal_prompt_is_short_and_plain() {
        let r = report("q", "Some report.");
        let p = build_minimal_prompt(&r);
        assert_eq!(p.example_count, 0);
        assert!(!p.user_text.contains("Scope:"));
        assert!(!p.user_text.contains("Example"));
        assert_eq!(p.user_text.len(), MINIMAL_TEMPLATE.trim_end().len() - "{{report}}".len() + r.text().len());
        assert_eq!(p, build_minimal_prompt(&r));
    }

    #[test]
    fn report_text_is_not_reinterpreted() {
        let r = report("q", "literal {{examples}} and {{report}}");
        let p = build_minimal_prompt(&r);
        assert!(p.user_text.ends_with("literal {{examples}} and {{report}}"));
    }

    #[test]
    fn definition_set_validation() {
        let defs = DefinitionSet::builtin();
        assert_eq!(defs.version(), "v1");
        assert_eq!(defs.iter().count(), 15);
        assert_eq!(defs.content_hash().len(), 64);
        assert_eq!(defs.content_hash(), DefinitionSet::builtin().content_hash());

        let partial = "version = \"x\"\n[age]\ndefinition = \"Age.\"\n";
        assert!(matches!(
            DefinitionSet::from_toml_str(partial),
            Err(PromptError::MissingDefinition(Category::Comorbidities))
        ));
        let unknown = format!("{BUILTIN_DEFINITIONS}\n[weight]\ndefinition = \"w\"\n");
        assert!(matches!(DefinitionSet::from_toml_str(&unknown), Err(PromptError::InvalidDefinitions(_))));
    }

    #[test]
    fn fine_tuning_matches_minimal_prompt() {
        let sample = CorpusSample {
            report: report("s1", "A woman with asthma."),
            gold: StructuredReport::new().with(Category::Comorbidities, "asthma"),
            source_id: "s1".into(),
        };
        let record = fine_tuning_record(&sample);
        let prompt = build_minimal_prompt(&sample.report);
        assert_eq!(record.messages[0].content, prompt.system_text);
        assert_eq!(record.messages[1].content, prompt.user_text);
        assert_eq!(record.messages[2].content, r#"{"comorbidities":"asthma"}"#);
        assert_eq!(record.template_hash, minimal_template_hash());
    }

    #[test]
    fn hashes_differ_by_mode() {
        let r = report("q", "text");
        assert_ne!(build_naive_prompt(&r).hash(), build_minimal_prompt(&r).hash());
    }
}
