//! Per-category scoring of one prediction and aggregation across samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{bert_score, entity_prf, normalize_entity, rouge_l, rouge_n, tokenize, MetricError, Prf};
use crate::embedding::{EntityRecognizer, TokenEmbedder};
use crate::schema::{Category, StructuredReport};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Column order of the rendered tables.
pub const TABLE_COLUMNS: [&str; 7] = [
    "R-1",
    "R-2",
    "R-L",
    "BERTScore F1",
    "Entity P",
    "Entity R",
    "Entity F1",
];

/// Treatment of a category present in exactly one of prediction and gold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OneSided {
    #[default]
    Zero,
    Skip,
}

/// Order of averaging for the macro row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Mean over samples per category, then mean over categories.
    #[default]
    CategoryThenMacro,
    /// Mean over categories per sample, then mean over samples.
    SampleThenMean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPolicy {
    pub one_sided: OneSided,
}

/// Model services used for the embedding and entity cells. A missing service
/// leaves its cells unscored.
#[derive(Clone, Copy, Default)]
pub struct EvalDeps<'a> {
    pub tokens: Option<&'a dyn TokenEmbedder>,
    pub ner: Option<&'a dyn EntityRecognizer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    BothAbsent,
    OneSided,
    EntitySetsBothEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Cell {
    Scored(Prf),
    Skipped { reason: SkipReason },
    Unscored { reason: String },
}

impl Cell {
    pub fn scored(&self) -> Option<Prf> {
        match self {
            Cell::Scored(p) => Some(*p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum CategoryStatus {
    Scored,
    Skipped(SkipReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub status: CategoryStatus,
    pub rouge1: Cell,
    pub rouge2: Cell,
    pub rouge_l: Cell,
    pub bert: Cell,
    pub entity: Cell,
}

impl CategoryScore {
    fn skipped(category: Category, reason: SkipReason) -> Self {
        let cell = || Cell::Skipped { reason };
        Self {
            category,
            status: CategoryStatus::Skipped(reason),
            rouge1: cell(),
            rouge2: cell(),
            rouge_l: cell(),
            bert: cell(),
            entity: cell(),
        }
    }

    fn zero(category: Category) -> Self {
        let cell = || Cell::Scored(Prf::ZERO);
        Self {
            category,
            status: CategoryStatus::Scored,
            rouge1: cell(),
            rouge2: cell(),
            rouge_l: cell(),
            bert: cell(),
            entity: cell(),
        }
    }

    fn cells(&self) -> [&Cell; 5] {
        [&self.rouge1, &self.rouge2, &self.rouge_l, &self.bert, &self.entity]
    }
}

/// Scores of one sample, all fifteen categories in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub scores: Vec<CategoryScore>,
}

/// Scores every category of `pred` against `gold`.
///
/// Both present: ROUGE on the joined values, BERTScore on their token
/// embeddings, entity P/R/F1 on recognized entity sets. Present on one side:
/// all zeros (or skipped, per `policy`). Absent on both: skipped. Service
/// failures become unscored cells carrying the error text.
pub fn evaluate_pair(
    pred: &StructuredReport,
    gold: &StructuredReport,
    deps: &EvalDeps<'_>,
    policy: &EvalPolicy,
) -> Vec<CategoryScore> {
    Category::ALL
        .iter()
        .map(|&category| match (pred.joined(category), gold.joined(category)) {
            (None, None) => CategoryScore::skipped(category, SkipReason::BothAbsent),
            (Some(_), None) | (None, Some(_)) => match policy.one_sided {
                OneSided::Zero => CategoryScore::zero(category),
                OneSided::Skip => CategoryScore::skipped(category, SkipReason::OneSided),
            },
            (Some(p), Some(g)) => score_present(category, &p, &g, deps),
        })
        .collect()
}

fn score_present(category: Category, pred: &str, gold: &str, deps: &EvalDeps<'_>) -> CategoryScore {
    let cand_tokens = tokenize(pred);
    let ref_tokens = tokenize(gold);
    CategoryScore {
        category,
        status: CategoryStatus::Scored,
        rouge1: Cell::Scored(rouge_n(&cand_tokens, &ref_tokens, 1)),
        rouge2: Cell::Scored(rouge_n(&cand_tokens, &ref_tokens, 2)),
        rouge_l: Cell::Scored(rouge_l(&cand_tokens, &ref_tokens)),
        bert: bert_cell(pred, gold, deps.tokens),
        entity: entity_cell(pred, gold, deps.ner),
    }
}

fn bert_cell(pred: &str, gold: &str, embedder: Option<&dyn TokenEmbedder>) -> Cell {
    let Some(embedder) = embedder else {
        return Cell::Unscored {
            reason: "no token embedder configured".into(),
        };
    };
    let result = embedder.embed_tokens(pred).and_then(|c| {
        embedder.embed_tokens(gold).map(|r| (c, r))
    });
    match result {
        Ok((c, r)) => match bert_score(&c.vectors, &r.vectors) {
            Ok(prf) => Cell::Scored(prf),
            Err(e) => Cell::Unscored {
                reason: e.to_string(),
            },
        },
        Err(e) => Cell::Unscored {
            reason: e.to_string(),
        },
    }
}

fn entity_cell(pred: &str, gold: &str, ner: Option<&dyn EntityRecognizer>) -> Cell {
    let Some(ner) = ner else {
        return Cell::Unscored {
            reason: "no entity recognizer configured".into(),
        };
    };
    let set = |text: &str| -> Result<BTreeSet<String>, String> {
        Ok(ner
            .entities(text)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|e| normalize_entity(&e.text))
            .filter(|e| !e.is_empty())
            .collect())
    };
    match set(pred).and_then(|p| set(gold).map(|g| (p, g))) {
        Ok((p, g)) => match entity_prf(&p, &g) {
            Some(prf) => Cell::Scored(prf),
            None => Cell::Skipped {
                reason: SkipReason::EntitySetsBothEmpty,
            },
        },
        Err(reason) => Cell::Unscored { reason },
    }
}

/// Component-wise means over `n` scored cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

/// Mean with a summation order independent of input order.
fn stable_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn mean_prf(cells: &[Prf]) -> Option<MeanPrf> {
    let mut p: Vec<f64> = cells.iter().map(|c| c.precision).collect();
    let mut r: Vec<f64> = cells.iter().map(|c| c.recall).collect();
    let mut f: Vec<f64> = cells.iter().map(|c| c.f1).collect();
    Some(MeanPrf {
        precision: stable_mean(&mut p)?,
        recall: stable_mean(&mut r)?,
        f1: stable_mean(&mut f)?,
        n: cells.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAggregate {
    pub category: Category,
    /// Samples in which the category was scored at all.
    pub scored_samples: usize,
    pub rouge1: Option<MeanPrf>,
    pub rouge2: Option<MeanPrf>,
    pub rouge_l: Option<MeanPrf>,
    pub bert: Option<MeanPrf>,
    pub entity: Option<MeanPrf>,
}

impl CategoryAggregate {
    fn metrics(&self) -> [Option<MeanPrf>; 5] {
        [self.rouge1, self.rouge2, self.rouge_l, self.bert, self.entity]
    }

    /// Values in [`TABLE_COLUMNS`] order.
    pub fn columns(&self) -> [Option<f64>; 7] {
        columns_of(self.metrics())
    }
}

fn columns_of(m: [Option<MeanPrf>; 5]) -> [Option<f64>; 7] {
    [
        m[0].map(|x| x.f1),
        m[1].map(|x| x.f1),
        m[2].map(|x| x.f1),
        m[3].map(|x| x.f1),
        m[4].map(|x| x.precision),
        m[4].map(|x| x.recall),
        m[4].map(|x| x.f1),
    ]
}

/// The headline row. Each value carries the number of terms it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRow {
    pub rouge1_f1: Option<f64>,
    pub rouge2_f1: Option<f64>,
    pub rouge_l_f1: Option<f64>,
    pub bert_f1: Option<f64>,
    pub entity_precision: Option<f64>,
    pub entity_recall: Option<f64>,
    pub entity_f1: Option<f64>,
    pub denominators: [usize; 7],
}

impl MacroRow {
    pub fn columns(&self) -> [Option<f64>; 7] {
        [
            self.rouge1_f1,
            self.rouge2_f1,
            self.rouge_l_f1,
            self.bert_f1,
            self.entity_precision,
            self.entity_recall,
            self.entity_f1,
        ]
    }

    fn from_columns(values: [Option<f64>; 7], denominators: [usize; 7]) -> Self {
        Self {
            rouge1_f1: values[0],
            rouge2_f1: values[1],
            rouge_l_f1: values[2],
            bert_f1: values[3],
            entity_precision: values[4],
            entity_recall: values[5],
            entity_f1: values[6],
            denominators,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    /// Model name, e.g. the served model id.
    pub label: String,
    /// Extraction setup (naive, advanced, minimal).
    pub setup: String,
    pub sample_count: usize,
    pub averaging: Averaging,
    pub metadata: BTreeMap<String, String>,
    pub categories: Vec<CategoryAggregate>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroRow,
    pub warnings: Vec<String>,
}

/// Averages per-sample category scores into an [`EvaluationReport`].
pub fn aggregate(
    samples: &[SampleScores],
    averaging: Averaging,
) -> Result<EvaluationReport, MetricError> {
    let mut per_category: Vec<[Vec<Prf>; 5]> = (0..Category::COUNT).map(|_| Default::default()).collect();
    let mut scored_samples = [0usize; Category::COUNT];
    let mut any_scored = false;
    for sample in samples {
        for score in &sample.scores {
            let slot = &mut per_category[score.category.index()];
            let mut scored_here = false;
            for (k, cell) in score.cells().iter().enumerate() {
                if let Some(prf) = cell.scored() {
                    slot[k].push(prf);
                    scored_here = true;
                }
            }
            if scored_here {
                scored_samples[score.category.index()] += 1;
                any_scored = true;
            }
        }
    }
    if !any_scored {
        return Err(MetricError::NothingScored);
    }

    let categories: Vec<CategoryAggregate> = Category::ALL
        .iter()
        .map(|&category| {
            let cells = &per_category[category.index()];
            CategoryAggregate {
                category,
                scored_samples: scored_samples[category.index()],
                rouge1: mean_prf(&cells[0]),
                rouge2: mean_prf(&cells[1]),
                rouge_l: mean_prf(&cells[2]),
                bert: mean_prf(&cells[3]),
                entity: mean_prf(&cells[4]),
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let macro_avg = match averaging {
        Averaging::CategoryThenMacro => {
            let mut values = [None; 7];
            let mut denominators = [0usize; 7];
            for k in 0..7 {
                let mut column: Vec<f64> = categories.iter().filter_map(|c| c.columns()[k]).collect();
                denominators[k] = column.len();
                values[k] = stable_mean(&mut column);
                let excluded = Category::COUNT - column.len();
                if excluded > 0 {
                    let names: Vec<&str> = categories
                        .iter()
                        .filter(|c| c.columns()[k].is_none())
                        .map(|c| c.category.as_str())
                        .collect();
                    warnings.push(format!(
                        "{}: {excluded} categories without scored samples excluded ({})",
                        TABLE_COLUMNS[k],
                        names.join(", ")
                    ));
                }
            }
            MacroRow::from_columns(values, denominators)
        }
        Averaging::SampleThenMean => {
            let mut per_sample: [Vec<f64>; 7] = Default::default();
            for sample in samples {
                let mut metric_cells: [Vec<Prf>; 5] = Default::default();
                for score in &sample.scores {
                    for (k, cell) in score.cells().iter().enumerate() {
                        if let Some(prf) = cell.scored() {
                            metric_cells[k].push(prf);
                        }
                    }
                }
                let means = metric_cells.map(|cells| mean_prf(&cells));
                for (k, value) in columns_of(means).iter().enumerate() {
                    if let Some(v) = value {
                        per_sample[k].push(*v);
                    }
                }
            }
            let denominators = [0, 1, 2, 3, 4, 5, 6].map(|k| per_sample[k].len());
            let values = per_sample.map(|mut column| stable_mean(&mut column));
            MacroRow::from_columns(values, denominators)
        }
    };

    Ok(EvaluationReport {
        format_version: REPORT_FORMAT_VERSION,
        label: String::new(),
        setup: String::new(),
        sample_count: samples.len(),
        averaging,
        metadata: BTreeMap::new(),
        categories,
        macro_avg,
        warnings,
    })
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn render_rows(header: &[String], rows: &[Vec<String>], markdown: bool) -> String {
    let mut out = String::new();
    if markdown {
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(
            out,
            "|{}|",
            header
                .iter()
                .enumerate()
                .map(|(i, _)| if i == 0 { ":---" } else { "---:" })
                .collect::<Vec<_>>()
                .join("|")
        );
        for row in rows {
            let _ = writeln!(out, "| {} |", row.join(" | "));
        }
        return out;
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for row in rows {
        let _ = writeln!(out, "{}", line(row));
    }
    out
}

impl EvaluationReport {
    /// Per-category table followed by the macro row.
    pub fn render(&self, markdown: bool) -> String {
        let mut header = vec!["Category".to_string()];
        header.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
        header.push("n".to_string());
        let mut rows: Vec<Vec<String>> = self
            .categories
            .iter()
            .map(|c| {
                let mut row = vec![c.category.to_string()];
                row.extend(c.columns().iter().map(|v| fmt_value(*v)));
                row.push(c.scored_samples.to_string());
                row
            })
            .collect();
        let mut macro_row = vec!["macro".to_string()];
        macro_row.extend(self.macro_avg.columns().iter().map(|v| fmt_value(*v)));
        macro_row.push(self.sample_count.to_string());
        rows.push(macro_row);
        let mut out = String::new();
        if !self.label.is_empty() || !self.setup.is_empty() {
            let _ = writeln!(out, "{} ({})", self.label, self.setup);
        }
        out.push_str(&render_rows(&header, &rows, markdown));
        out
    }
}

/// One row per report with its macro values; the best value of each column
/// is marked (`*` in plain text, bold in markdown).
pub fn render_comparison(reports: &[EvaluationReport], markdown: bool) -> String {
    let mut header = vec!["Setup".to_string(), "Model".to_string()];
    header.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
    let best: Vec<Option<f64>> = (0..7)
        .map(|k| {
            reports
                .iter()
                .filter_map(|r| r.macro_avg.columns()[k])
                .max_by(f64::total_cmp)
        })
        .collect();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.setup.clone(), r.label.clone()];
            for (k, v) in r.macro_avg.columns().iter().enumerate() {
                let text = fmt_value(*v);
                let is_best = reports.len() > 1 && v.is_some() && *v == best[k];
                row.push(match (is_best, markdown) {
                    (true, true) => format!("**{text}**"),
                    (true, false) => format!("{text}*"),
                    (false, _) => text,
                });
            }
            row
        })
        .collect();
    // first column is left-aligned; keep the model column readable too
    let mut out = render_rows(&header, &rows, markdown);
    if !markdown && reports.len() > 1 {
        out.push_str("* best value in column\n");
    }
    out
}
