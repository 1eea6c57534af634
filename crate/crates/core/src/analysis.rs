//! Reports over a profiled dataset: accuracy, entropy correlation,
//! chi-squared fit to student rates, per-choice correlations, agreement
//! between the two model metrics, order stability and the phrasing
//! comparison.
//!
//! Every report accounts for each dataset question exactly once, either in
//! `included` or in the exclusion `ledger`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendIdentity;
use crate::dataset::{assign_choice_roles, ChoiceRole, Dataset, Question, QuestionType};
use crate::prompting::Phrasing;
use crate::stats::{chi_squared_gof, counts_from_rates, spearman, StatsError};
use crate::uncertainty::{student_entropy, Exclusion, ProfileSet, UncertaintyProfile, NO_PROBE};
use crate::Scalar;

pub const MISSING_RATES: &str = "missing student rates";
pub const ZERO_RATE: &str = "zero student rate";
pub const TOO_FEW: &str = "n < 3";
pub const EMPTY_STRATUM: &str = "empty stratum";

/// Correlation inputs are snapped to this grid so values that agree up to
/// rounding noise rank as ties.
const RANK_GRID: f64 = 1e12;

pub const CHI_SQUARED_CONVENTION: &str =
    "observed = student counts at N = examinee_count; expected = model distribution";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("phrasing coverage differs; missing probes for: {}", .missing.join(", "))]
    MismatchedCoverage { missing: Vec<String> },
    #[error("phrasing comparison needs two different phrasings of the same backend")]
    IncompatibleSets,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    AccuracyTable,
    EntropyCorrelation,
    ChiSquaredFirstToken,
    ChiSquaredOrderSensitivity,
    PerChoiceCorrelationAll,
    PerChoiceCorrelationCorrect,
    MetricAgreement,
    OrderStability,
    PhrasingComparison,
}

impl ReportKind {
    pub const ALL: [ReportKind; 9] = [
        ReportKind::AccuracyTable,
        ReportKind::EntropyCorrelation,
        ReportKind::ChiSquaredFirstToken,
        ReportKind::ChiSquaredOrderSensitivity,
        ReportKind::PerChoiceCorrelationAll,
        ReportKind::PerChoiceCorrelationCorrect,
        ReportKind::MetricAgreement,
        ReportKind::OrderStability,
        ReportKind::PhrasingComparison,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            ReportKind::AccuracyTable => "accuracy_table",
            ReportKind::EntropyCorrelation => "entropy_correlation",
            ReportKind::ChiSquaredFirstToken => "chi_squared_first_token",
            ReportKind::ChiSquaredOrderSensitivity => "chi_squared_order_sensitivity",
            ReportKind::PerChoiceCorrelationAll => "per_choice_correlation_all",
            ReportKind::PerChoiceCorrelationCorrect => "per_choice_correlation_correct",
            ReportKind::MetricAgreement => "metric_agreement",
            ReportKind::OrderStability => "order_stability",
            ReportKind::PhrasingComparison => "phrasing_comparison",
        }
    }
}

/// Per-choice model quantity compared against student rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FirstToken,
    OrderSensitivity,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::FirstToken, Metric::OrderSensitivity];

    pub fn values<F: Scalar>(self, p: &UncertaintyProfile<F>) -> [F; 3] {
        match self {
            Metric::FirstToken => p.choice_probs.values,
            Metric::OrderSensitivity => p.order_sens.frequencies,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    AllQuestions,
    CorrectlyAnswered,
    IncorrectlyAnswered,
}

impl Subset {
    pub fn admits(self, is_correct: bool) -> bool {
        match self {
            Subset::AllQuestions => true,
            Subset::CorrectlyAnswered => is_correct,
            Subset::IncorrectlyAnswered => !is_correct,
        }
    }
}

/// Question type filter crossed with a correctness subset. Correctness is
/// always the first-token argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stratum {
    pub qtype: Option<QuestionType>,
    pub subset: Subset,
}

impl Stratum {
    pub fn admits<F>(&self, q: &Question, p: &UncertaintyProfile<F>) -> bool {
        self.qtype.is_none_or(|t| q.effective_type() == t) && self.subset.admits(p.is_correct)
    }

    pub fn qtype_label(&self) -> String {
        self.qtype
            .map_or_else(|| "all".to_string(), |t| t.code().to_string())
    }

    /// Ids of the admitted entries, in input order.
    pub fn question_ids<F>(&self, entries: &[(&Question, &UncertaintyProfile<F>)]) -> Vec<String> {
        entries
            .iter()
            .filter(|(q, p)| self.admits(q, p))
            .map(|(q, _)| q.id.clone())
            .collect()
    }
}

fn type_filters() -> [Option<QuestionType>; 5] {
    [
        None,
        Some(QuestionType::FillGap),
        Some(QuestionType::FillTwoGaps),
        Some(QuestionType::WhQuestion),
        Some(QuestionType::SentenceCompletion),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    ModelAccuracy,
    StudentCorrectRate,
    SpearmanRho,
    MeanChiSquared,
    SignificantFraction,
    Stability,
    MeanAbsDelta,
}

/// One cell of a report table. Absent values carry a `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow<F> {
    pub qtype: String,
    pub subset: Subset,
    pub role: Option<ChoiceRole>,
    pub metric: Option<Metric>,
    pub phrasing: Option<Phrasing>,
    pub statistic: Statistic,
    pub n: usize,
    pub value: Option<F>,
    pub p_value: Option<F>,
    pub significant: Option<bool>,
    pub note: Option<String>,
}

impl<F> ReportRow<F> {
    fn new(stratum: Stratum, statistic: Statistic, n: usize) -> Self {
        ReportRow {
            qtype: stratum.qtype_label(),
            subset: stratum.subset,
            role: None,
            metric: None,
            phrasing: None,
            statistic,
            n,
            value: None,
            p_value: None,
            significant: None,
            note: None,
        }
    }

    fn role(mut self, role: ChoiceRole) -> Self {
        self.role = Some(role);
        self
    }

    fn metric(mut self, metric: Metric) -> Self {
        self.metric = Some(metric);
        self
    }

    fn phrasing(mut self, phrasing: Phrasing) -> Self {
        self.phrasing = Some(phrasing);
        self
    }

    fn value(mut self, value: F) -> Self {
        self.value = Some(value);
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    /// Name of the series this row belongs to in plot data.
    pub fn series(&self) -> String {
        let mut parts = vec![format!("{:?}", self.statistic)];
        if let Some(m) = self.metric {
            parts.push(format!("{m:?}"));
        }
        if let Some(r) = self.role {
            parts.push(r.name().to_string());
        }
        if let Some(p) = self.phrasing {
            parts.push(format!("phrasing{p}"));
        }
        parts.push(format!("{:?}", self.subset));
        parts.join("/")
    }
}

/// Per-question change in a metric from phrasing 1 to phrasing 2, by
/// original choice index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDelta<F> {
    pub question_id: String,
    pub metric: Metric,
    pub delta: [F; 3],
}

/// Flat record for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint<F> {
    pub x: String,
    pub y: F,
    pub stratum: String,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport<F> {
    pub kind: ReportKind,
    pub backend: BackendIdentity,
    /// `"1"`, `"2"` or `"1_vs_2"`.
    pub phrasing: String,
    pub alpha: F,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convention: Option<String>,
    pub rows: Vec<ReportRow<F>>,
    pub included: Vec<String>,
    pub ledger: Vec<Exclusion>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub deltas: Vec<QuestionDelta<F>>,
}

impl<F: Scalar> AnalysisReport<F> {
    fn start(kind: ReportKind, set: &ProfileSet<F>, alpha: F) -> Self {
        AnalysisReport {
            kind,
            backend: set.backend.clone(),
            phrasing: set.phrasing.to_string(),
            alpha,
            convention: None,
            rows: Vec::new(),
            included: Vec::new(),
            ledger: Vec::new(),
            deltas: Vec::new(),
        }
    }

    /// True when every dataset question appears exactly once across
    /// `included` and `ledger`, and nothing else does.
    pub fn is_partition_of(&self, ds: &Dataset) -> bool {
        let mut seen = BTreeSet::new();
        let ids = self
            .included
            .iter()
            .chain(self.ledger.iter().map(|e| &e.question_id));
        for id in ids {
            if !seen.insert(id.as_str()) || ds.get(id).is_none() {
                return false;
            }
        }
        seen.len() == ds.len()
    }

    pub fn plot_points(&self) -> Vec<PlotPoint<F>> {
        self.rows
            .iter()
            .filter_map(|r| {
                r.value.map(|y| PlotPoint {
                    x: r.qtype.clone(),
                    y,
                    stratum: r.series(),
                    significant: r.significant,
                })
            })
            .collect()
    }
}

type Entry<'a, F> = (&'a Question, &'a UncertaintyProfile<F>);

/// Profiled questions in dataset order, plus a ledger holding everything the
/// profile stage dropped.
fn entries<'a, F: Scalar>(
    set: &'a ProfileSet<F>,
    ds: &'a Dataset,
) -> (Vec<Entry<'a, F>>, Vec<Exclusion>) {
    let profiles: HashMap<&str, &UncertaintyProfile<F>> = set
        .profiles
        .iter()
        .map(|p| (p.question_id.as_str(), p))
        .collect();
    let reasons: HashMap<&str, &Exclusion> = set
        .excluded
        .iter()
        .map(|e| (e.question_id.as_str(), e))
        .collect();
    let mut out = Vec::with_capacity(ds.len());
    let mut ledger = Vec::new();
    for q in &ds.questions {
        match (profiles.get(q.id.as_str()), reasons.get(q.id.as_str())) {
            (Some(p), _) => out.push((q, *p)),
            (None, Some(e)) => ledger.push((*e).clone()),
            (None, None) => ledger.push(exclude(q, NO_PROBE)),
        }
    }
    (out, ledger)
}

fn exclude(q: &Question, reason: &str) -> Exclusion {
    Exclusion {
        question_id: q.id.clone(),
        reason: reason.to_string(),
    }
}

/// Keeps entries that have student rates; the rest go to the ledger.
fn with_rates<'a, F: Scalar>(
    entries: Vec<Entry<'a, F>>,
    ledger: &mut Vec<Exclusion>,
) -> Vec<(Entry<'a, F>, [f64; 3])> {
    let mut out = Vec::with_capacity(entries.len());
    for (q, p) in entries {
        match q.student_rates {
            Some(r) => out.push(((q, p), r)),
            None => ledger.push(exclude(q, MISSING_RATES)),
        }
    }
    out
}

fn snap<F: Scalar>(v: F) -> F {
    let grid = F::of(RANK_GRID);
    (v * grid).round() / grid
}

/// Spearman row for one stratum; failures become a note instead of a value.
fn correlation_row<F: Scalar>(stratum: Stratum, x: &[F], y: &[F], alpha: F) -> ReportRow<F> {
    let row = ReportRow::new(stratum, Statistic::SpearmanRho, x.len());
    let xs: Vec<F> = x.iter().map(|&v| snap(v)).collect();
    let ys: Vec<F> = y.iter().map(|&v| snap(v)).collect();
    match spearman(&xs, &ys, alpha) {
        Ok(r) => ReportRow {
            value: Some(r.rho),
            p_value: Some(r.p_value),
            significant: Some(r.significant),
            ..row
        },
        Err(StatsError::TooFewSamples(_)) => row.note(TOO_FEW),
        Err(e) => row.note(e.to_string()),
    }
}

fn mean<F: Scalar>(values: impl IntoIterator<Item = F>) -> Option<F> {
    let (sum, n) = values
        .into_iter()
        .fold((F::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / F::of(n as f64))
}

fn fraction<F: Scalar>(flags: impl IntoIterator<Item = bool>) -> Option<F> {
    mean(
        flags
            .into_iter()
            .map(|b| if b { F::one() } else { F::zero() }),
    )
}

fn fill<F: Scalar>(row: ReportRow<F>, value: Option<F>) -> ReportRow<F> {
    match value {
        Some(v) => row.value(v),
        None => row.note(EMPTY_STRATUM),
    }
}

/// Model accuracy and mean student correct rate, overall and per type.
pub fn accuracy_table<F: Scalar>(set: &ProfileSet<F>, ds: &Dataset) -> AnalysisReport<F> {
    let mut report = AnalysisReport::start(ReportKind::AccuracyTable, set, F::zero());
    let (entries, ledger) = entries(set, ds);
    for qtype in type_filters() {
        let stratum = Stratum {
            qtype,
            subset: Subset::AllQuestions,
        };
        let members: Vec<&Entry<F>> = entries
            .iter()
            .filter(|(q, p)| stratum.admits(q, p))
            .collect();
        let acc = fraction(members.iter().map(|(_, p)| p.is_correct));
        report.rows.push(fill(
            ReportRow::new(stratum, Statistic::ModelAccuracy, members.len()),
            acc,
        ));
        let student: Vec<F> = members
            .iter()
            .filter_map(|(q, _)| q.student_rates.map(|r| F::of(r[q.correct_index])))
            .collect();
        let n = student.len();
        report.rows.push(fill(
            ReportRow::new(stratum, Statistic::StudentCorrectRate, n),
            mean(student),
        ));
    }
    report.included = entries.iter().map(|(q, _)| q.id.clone()).collect();
    report.ledger = ledger;
    report
}

/// Spearman between student and model choice entropy per type, over all
/// questions and over correctly answered ones.
pub fn entropy_correlation<F: Scalar>(
    set: &ProfileSet<F>,
    ds: &Dataset,
    alpha: F,
) -> AnalysisReport<F> {
    let mut report = AnalysisReport::start(ReportKind::EntropyCorrelation, set, alpha);
    let (entries, mut ledger) = entries(set, ds);
    let rated = with_rates(entries, &mut ledger);
    let mut points = Vec::with_capacity(rated.len());
    for ((q, p), _) in &rated {
        match student_entropy::<F>(q) {
            Ok(h) => points.push((*q, *p, h)),
            Err(e) => ledger.push(exclude(q, &e.to_string())),
        }
    }
    for qtype in type_filters() {
        for subset in [Subset::AllQuestions, Subset::CorrectlyAnswered] {
            let stratum = Stratum { qtype, subset };
            let (x, y): (Vec<F>, Vec<F>) = points
                .iter()
                .filter(|(q, p, _)| stratum.admits(q, p))
                .map(|(_, p, h)| (*h, p.entropy_model))
                .unzip();
            report.rows.push(correlation_row(stratum, &x, &y, alpha));
        }
    }
    report.included = points.iter().map(|(q, _, _)| q.id.clone()).collect();
    report.ledger = sorted_ledger(ds, ledger);
    report
}

/// Per-question chi-squared of student counts against the model's metric
/// distribution, averaged per stratum. Questions with a zero student rate
/// are left out.
pub fn chi_squared_rates<F: Scalar>(
    set: &ProfileSet<F>,
    ds: &Dataset,
    metric: Metric,
    alpha: F,
) -> AnalysisReport<F> {
    let kind = match metric {
        Metric::FirstToken => ReportKind::ChiSquaredFirstToken,
        Metric::OrderSensitivity => ReportKind::ChiSquaredOrderSensitivity,
    };
    let mut report = AnalysisReport::start(kind, set, alpha);
    report.convention = Some(CHI_SQUARED_CONVENTION.to_string());
    let (entries, mut ledger) = entries(set, ds);
    let rated = with_rates(entries, &mut ledger);
    let mut results = Vec::with_capacity(rated.len());
    for ((q, p), rates) in rated {
        if rates.iter().any(|&r| r <= 0.0) {
            ledger.push(exclude(q, ZERO_RATE));
            continue;
        }
        let observed = counts_from_rates(&rates, q.examinee_count);
        match chi_squared_gof(&observed, &metric.values(p), alpha) {
            Ok(r) => results.push((q, p, r)),
            Err(e) => ledger.push(exclude(q, &e.to_string())),
        }
    }
    for qtype in type_filters() {
        for subset in [
            Subset::AllQuestions,
            Subset::CorrectlyAnswered,
            Subset::IncorrectlyAnswered,
        ] {
            let stratum = Stratum { qtype, subset };
            let members: Vec<_> = results
                .iter()
                .filter(|(q, p, _)| stratum.admits(q, p))
                .collect();
            let n = members.len();
            report.rows.push(fill(
                ReportRow::new(stratum, Statistic::MeanChiSquared, n).metric(metric),
                mean(members.iter().map(|(_, _, r)| r.statistic)),
            ));
            report.rows.push(fill(
                ReportRow::new(stratum, Statistic::SignificantFraction, n).metric(metric),
                fraction(members.iter().map(|(_, _, r)| r.significant)),
            ));
        }
    }
    report.included = results.iter().map(|(q, _, _)| q.id.clone()).collect();
    report.ledger = sorted_ledger(ds, ledger);
    report
}

/// Role-indexed (student rate, model metric) pairs for one question.
fn role_pairs<F: Scalar>(
    q: &Question,
    p: &UncertaintyProfile<F>,
    rates: [f64; 3],
    metric: Metric,
) -> [(F, F); 3] {
    let roles = assign_choice_roles(q).expect("rates checked by caller");
    let values = metric.values(p);
    ChoiceRole::ALL.map(|role| {
        let c = roles.choice_for(role);
        (F::of(rates[c]), values[c])
    })
}

fn per_choice_rows<F: Scalar>(
    rated: &[(Entry<F>, [f64; 3])],
    subset: Subset,
    alpha: F,
    phrasing: Option<Phrasing>,
    qtypes: &[Option<QuestionType>],
) -> Vec<ReportRow<F>> {
    let mut rows = Vec::new();
    for metric in Metric::ALL {
        for (r, role) in ChoiceRole::ALL.into_iter().enumerate() {
            for &qtype in qtypes {
                let stratum = Stratum { qtype, subset };
                let (x, y): (Vec<F>, Vec<F>) = rated
                    .iter()
                    .filter(|((q, p), _)| stratum.admits(q, p))
                    .map(|((q, p), rates)| role_pairs(q, p, *rates, metric)[r])
                    .unzip();
                let mut row = correlation_row(stratum, &x, &y, alpha)
                    .metric(metric)
                    .role(role);
                if let Some(ph) = phrasing {
                    row = row.phrasing(ph);
                }
                rows.push(row);
            }
        }
    }
    rows
}

/// Spearman between each role's student rate and the model's value for the
/// same choice, for both metrics, per type. `subset` must be all questions or
/// correctly answered ones; questions outside it go to the ledger.
pub fn per_choice_correlation<F: Scalar>(
    set: &ProfileSet<F>,
    ds: &Dataset,
    subset: Subset,
    alpha: F,
) -> AnalysisReport<F> {
    let kind = match subset {
        Subset::CorrectlyAnswered => ReportKind::PerChoiceCorrelationCorrect,
        _ => ReportKind::PerChoiceCorrelationAll,
    };
    let mut report = AnalysisReport::start(kind, set, alpha);
    let (entries, mut ledger) = entries(set, ds);
    let mut rated = with_rates(entries, &mut ledger);
    rated.retain(|((q, p), _)| {
        let keep = subset.admits(p.is_correct);
        if !keep {
            ledger.push(exclude(q, &format!("outside subset {subset:?}")));
        }
        keep
    });
    report.rows = per_choice_rows(&rated, subset, alpha, None, &type_filters());
    report.included = rated.iter().map(|((q, _), _)| q.id.clone()).collect();
    report.ledger = sorted_ledger(ds, ledger);
    report
}

/// Spearman between first-token probability and order-sensitivity frequency
/// of the same choice, per role and type.
pub fn metric_agreement<F: Scalar>(
    set: &ProfileSet<F>,
    ds: &Dataset,
    alpha: F,
) -> AnalysisReport<F> {
    let mut report = AnalysisReport::start(ReportKind::MetricAgreement, set, alpha);
    let (entries, mut ledger) = entries(set, ds);
    let rated = with_rates(entries, &mut ledger);
    for (r, role) in ChoiceRole::ALL.into_iter().enumerate() {
        for qtype in type_filters() {
            let stratum = Stratum {
                qtype,
                subset: Subset::AllQuestions,
            };
            let (x, y): (Vec<F>, Vec<F>) = rated
                .iter()
                .filter(|((q, p), _)| stratum.admits(q, p))
                .map(|((q, p), rates)| {
                    let first = role_pairs(q, p, *rates, Metric::FirstToken)[r].1;
                    let order = role_pairs(q, p, *rates, Metric::OrderSensitivity)[r].1;
                    (first, order)
                })
                .unzip();
            report
                .rows
                .push(correlation_row(stratum, &x, &y, alpha).role(role));
        }
    }
    report.included = rated.iter().map(|((q, _), _)| q.id.clone()).collect();
    report.ledger = sorted_ledger(ds, ledger);
    report
}

/// Fraction of questions whose pick is the same under every ordering.
pub fn order_stability<F: Scalar>(set: &ProfileSet<F>, ds: &Dataset) -> AnalysisReport<F> {
    let mut report = AnalysisReport::start(ReportKind::OrderStability, set, F::zero());
    let (entries, ledger) = entries(set, ds);
    for qtype in type_filters() {
        for subset in [
            Subset::AllQuestions,
            Subset::CorrectlyAnswered,
            Subset::IncorrectlyAnswered,
        ] {
            let stratum = Stratum { qtype, subset };
            let flags: Vec<bool> = entries
                .iter()
                .filter(|(q, p)| stratum.admits(q, p))
                .map(|(_, p)| p.order_sens.stable)
                .collect();
            let n = flags.len();
            report.rows.push(fill(
                ReportRow::new(stratum, Statistic::Stability, n),
                fraction(flags),
            ));
        }
    }
    report.included = entries.iter().map(|(q, _)| q.id.clone()).collect();
    report.ledger = ledger;
    report
}

/// Per-choice correlations under both phrasings side by side, plus
/// per-question metric deltas (phrasing 2 minus phrasing 1). Both sets must
/// have probes for the same questions.
pub fn phrasing_comparison<F: Scalar>(
    first: &ProfileSet<F>,
    second: &ProfileSet<F>,
    ds: &Dataset,
    alpha: F,
) -> Result<AnalysisReport<F>, AnalysisError> {
    if first.backend != second.backend || first.phrasing == second.phrasing {
        return Err(AnalysisError::IncompatibleSets);
    }
    let (first, second) = if first.phrasing < second.phrasing {
        (first, second)
    } else {
        (second, first)
    };
    let unprobed = |set: &ProfileSet<F>| -> BTreeSet<String> {
        let (_, ledger) = entries(set, ds);
        ledger
            .into_iter()
            .filter(|e| e.reason == NO_PROBE)
            .map(|e| e.question_id)
            .collect()
    };
    let (u1, u2) = (unprobed(first), unprobed(second));
    let missing: Vec<String> = ds
        .questions
        .iter()
        .filter(|q| u1.contains(&q.id) != u2.contains(&q.id))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::MismatchedCoverage { missing });
    }

    let mut report = AnalysisReport::start(ReportKind::PhrasingComparison, first, alpha);
    report.phrasing = format!("{}_vs_{}", first.phrasing, second.phrasing);
    let (e1, mut ledger) = entries(first, ds);
    let (e2, l2) = entries(second, ds);
    let in_second: HashMap<&str, &UncertaintyProfile<F>> =
        e2.iter().map(|(q, p)| (q.id.as_str(), *p)).collect();
    let already: BTreeSet<String> = ledger.iter().map(|e| e.question_id.clone()).collect();
    for e in l2 {
        if !already.contains(&e.question_id) {
            ledger.push(Exclusion {
                question_id: e.question_id,
                reason: format!("phrasing {}: {}", second.phrasing, e.reason),
            });
        }
    }
    let paired: Vec<(&Question, &UncertaintyProfile<F>, &UncertaintyProfile<F>)> = e1
        .into_iter()
        .filter_map(|(q, p1)| in_second.get(q.id.as_str()).map(|p2| (q, p1, *p2)))
        .collect();
    let mut both = Vec::new();
    for &(q, p1, p2) in &paired {
        match q.student_rates {
            Some(r) => both.push((q, p1, p2, r)),
            None => ledger.push(exclude(q, MISSING_RATES)),
        }
    }

    let all = [None];
    for (set_phrasing, pick) in [(first.phrasing, 0usize), (second.phrasing, 1)] {
        let rated: Vec<(Entry<F>, [f64; 3])> = both
            .iter()
            .map(|&(q, p1, p2, r)| ((q, if pick == 0 { p1 } else { p2 }), r))
            .collect();
        report.rows.extend(per_choice_rows(
            &rated,
            Subset::AllQuestions,
            alpha,
            Some(set_phrasing),
            &all,
        ));
    }

    let stratum = Stratum {
        qtype: None,
        subset: Subset::AllQuestions,
    };
    for metric in Metric::ALL {
        let mut abs_by_role = [Vec::new(), Vec::new(), Vec::new()];
        for &(q, p1, p2, _) in &both {
            let (v1, v2) = (metric.values(p1), metric.values(p2));
            let delta = [v2[0] - v1[0], v2[1] - v1[1], v2[2] - v1[2]];
            let roles = assign_choice_roles(q).expect("rates present");
            for (r, role) in ChoiceRole::ALL.into_iter().enumerate() {
                abs_by_role[r].push(delta[roles.choice_for(role)].abs());
            }
            report.deltas.push(QuestionDelta {
                question_id: q.id.clone(),
                metric,
                delta,
            });
        }
        for (r, role) in ChoiceRole::ALL.into_iter().enumerate() {
            let n = abs_by_role[r].len();
            report.rows.push(fill(
                ReportRow::new(stratum, Statistic::MeanAbsDelta, n)
                    .metric(metric)
                    .role(role),
                mean(abs_by_role[r].iter().copied()),
            ));
        }
    }
    report.included = both.iter().map(|(q, _, _, _)| q.id.clone()).collect();
    report.ledger = sorted_ledger(ds, ledger);
    Ok(report)
}

/// Orders ledger entries by dataset position.
fn sorted_ledger(ds: &Dataset, mut ledger: Vec<Exclusion>) -> Vec<Exclusion> {
    let pos: HashMap<&str, usize> = ds
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();
    ledger.sort_by_key(|e| {
        pos.get(e.question_id.as_str())
            .copied()
            .unwrap_or(usize::MAX)
    });
    ledger
}

/// The eight reports computed from a single phrasing.
pub fn single_phrasing_reports<F: Scalar>(
    set: &ProfileSet<F>,
    ds: &Dataset,
    alpha: F,
) -> Vec<AnalysisReport<F>> {
    vec![
        accuracy_table(set, ds),
        entropy_correlation(set, ds, alpha),
        chi_squared_rates(set, ds, Metric::FirstToken, alpha),
        chi_squared_rates(set, ds, Metric::OrderSensitivity, alpha),
        per_choice_correlation(set, ds, Subset::AllQuestions, alpha),
        per_choice_correlation(set, ds, Subset::CorrectlyAnswered, alpha),
        metric_agreement(set, ds, alpha),
        order_stability(set, ds),
    ]
}

/// Directory for a report: `<out>/reports/<backend>/phrasing<label>`.
pub fn report_dir(out: &Path, backend: &BackendIdentity, phrasing_label: &str) -> PathBuf {
    out.join("reports")
        .join(backend.slug())
        .join(format!("phrasing{phrasing_label}"))
}

#[derive(Serialize)]
struct LedgerLine<'a> {
    report: &'a str,
    question_id: &'a str,
    reason: &'a str,
}

#[derive(Serialize)]
struct DeltaLine<'a, F> {
    question_id: &'a str,
    metric: Metric,
    delta_a: F,
    delta_b: F,
    delta_c: F,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), AnalysisError> {
    let csv_err = |source| AnalysisError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `<kind>.json`, `<kind>.csv`, `<kind>_points.csv` and, for the
/// phrasing comparison, `<kind>_deltas.csv` into `dir`.
pub fn write_report<F: Scalar>(
    report: &AnalysisReport<F>,
    dir: &Path,
) -> Result<(), AnalysisError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = report.kind.file_stem();
    let json_path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    write_csv(&dir.join(format!("{stem}.csv")), &report.rows)?;
    write_csv(
        &dir.join(format!("{stem}_points.csv")),
        report.plot_points(),
    )?;
    if report.kind == ReportKind::PhrasingComparison {
        write_csv(
            &dir.join(format!("{stem}_deltas.csv")),
            report.deltas.iter().map(|d| DeltaLine {
                question_id: &d.question_id,
                metric: d.metric,
                delta_a: d.delta[0],
                delta_b: d.delta[1],
                delta_c: d.delta[2],
            }),
        )?;
    }
    Ok(())
}

/// Writes every ledger entry of `reports` to `dir/ledger.csv`.
pub fn write_ledger<F: Scalar>(
    reports: &[AnalysisReport<F>],
    dir: &Path,
) -> Result<(), AnalysisError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let lines = reports.iter().flat_map(|r| {
        r.ledger.iter().map(move |e| LedgerLine {
            report: r.kind.file_stem(),
            question_id: &e.question_id,
            reason: &e.reason,
        })
    });
    write_csv(&dir.join("ledger.csv"), lines)
}

/// Writes the profiles behind a report directory as JSON lines.
pub fn write_profiles<F: Scalar>(set: &ProfileSet<F>, dir: &Path) -> Result<(), AnalysisError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("profiles.jsonl");
    let mut text = String::new();
    for p in &set.profiles {
        text.push_str(&serde_json::to_string(p).expect("profile serializes"));
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        run_probe, FirstTokenBackend, MockBackend, MockModelSpec, ProbeCache, ProbeOptions,
    };
    use crate::dataset::{synthesize_dataset, DatasetMetadata, DEFAULT_EXAMINEE_COUNT};
    use crate::prompting::LabelStyle;
    use crate::uncertainty::{
        profile_dataset, ChoiceProbabilities, OrderSensitivity, ProfileConfig,
    };
    use proptest::prelude::*;

    fn question(
        id: usize,
        qtype: QuestionType,
        correct: usize,
        rates: Option<[f64; 3]>,
    ) -> Question {
        Question {
            id: format!("q{id:03}"),
            stem: "Which one?".into(),
            choices: ["x".into(), "y".into(), "z".into()],
            correct_index: correct,
            qtype: Some(qtype),
            student_rates: rates,
            examinee_count: DEFAULT_EXAMINEE_COUNT,
        }
    }

    fn profile(q: &Question, probs: [f64; 3], counts: [u8; 3]) -> UncertaintyProfile<f64> {
        let model_choice = crate::uncertainty::argmax(&probs);
        UncertaintyProfile {
            question_id: q.id.clone(),
            phrasing: Phrasing::One,
            choice_probs: ChoiceProbabilities {
                values: probs,
                conforming: true,
            },
            order_sens: OrderSensitivity {
                frequencies: counts.map(|c| c as f64 / 6.0),
                counts,
                stable: counts.contains(&6),
                tied_orderings: 0,
            },
            entropy_model: crate::uncertainty::entropy(&probs).unwrap(),
            model_choice,
            is_correct: model_choice == q.correct_index,
        }
    }

    fn identity() -> BackendIdentity {
        BackendIdentity {
            model: "test".into(),
            endpoint: "mem".into(),
            label_style: LabelStyle::Paren,
        }
    }

    fn set(profiles: Vec<UncertaintyProfile<f64>>, excluded: Vec<Exclusion>) -> ProfileSet<f64> {
        ProfileSet {
            backend: identity(),
            phrasing: Phrasing::One,
            profiles,
            excluded,
        }
    }

    fn dataset(questions: Vec<Question>) -> Dataset {
        Dataset::new(DatasetMetadata::default(), questions).unwrap()
    }

    /// Profiles whose first-token metric equals the student rates.
    fn mirror(ds: &Dataset) -> ProfileSet<f64> {
        set(
            ds.questions
                .iter()
                .map(|q| {
                    let r = q.student_rates.unwrap();
                    let mut counts = [0u8; 3];
                    counts[crate::uncertainty::argmax(&r)] = 6;
                    profile(q, r, counts)
                })
                .collect(),
            vec![],
        )
    }

    fn find(
        r: &AnalysisReport<f64>,
        pred: impl Fn(&ReportRow<f64>) -> bool,
    ) -> Vec<&ReportRow<f64>> {
        r.rows.iter().filter(|row| pred(row)).collect()
    }

    #[test]
    fn accuracy_counts_and_absent_strata() {
        let qs: Vec<Question> = (0..10)
            .map(|i| question(i, QuestionType::WhQuestion, 0, Some([0.7, 0.2, 0.1])))
            .collect();
        let ds = dataset(qs);
        let profiles = ds
            .questions
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let probs = if i < 7 {
                    [0.8, 0.1, 0.1]
                } else {
                    [0.1, 0.8, 0.1]
                };
                profile(q, probs, [6, 0, 0])
            })
            .collect();
        let r = accuracy_table(&set(profiles, vec![]), &ds);
        assert!(r.is_partition_of(&ds));
        let overall = find(&r, |row| {
            row.qtype == "all" && row.statistic == Statistic::ModelAccuracy
        });
        assert_eq!(overall[0].value, Some(0.7));
        let student = find(&r, |row| {
            row.qtype == "all" && row.statistic == Statistic::StudentCorrectRate
        });
        assert!((student[0].value.unwrap() - 0.7).abs() < 1e-12);
        let empty = find(&r, |row| {
            row.qtype == "1" && row.statistic == Statistic::ModelAccuracy
        });
        assert_eq!(
            (empty[0].value, empty[0].note.as_deref()),
            (None, Some(EMPTY_STRATUM))
        );
    }

    #[test]
    fn synthetic_student_rate_matches_mean() {
        let ds = synthesize_dataset(451, [0.149, 0.031, 0.503, 0.317], 3).unwrap();
        let r = accuracy_table(&mirror(&ds), &ds);
        let student = find(&r, |row| {
            row.qtype == "all" && row.statistic == Statistic::StudentCorrectRate
        });
        assert!((student[0].value.unwrap() - 0.703).abs() < 0.03);
    }

    #[test]
    fn mirrored_metrics_give_perfect_correlations_and_zero_chi_squared() {
        let ds = synthesize_dataset(120, [0.25; 4], 8).unwrap();
        let s = mirror(&ds);
        let ent = entropy_correlation(&s, &ds, 0.05);
        for row in ent.rows.iter().filter(|r| r.value.is_some()) {
            assert!((row.value.unwrap() - 1.0).abs() < 1e-12, "{row:?}");
        }
        let pc = per_choice_correlation(&s, &ds, Subset::AllQuestions, 0.05);
        for row in find(&pc, |r| r.metric == Some(Metric::FirstToken)) {
            assert!((row.value.unwrap() - 1.0).abs() < 1e-12, "{row:?}");
        }
        let chi = chi_squared_rates(&s, &ds, Metric::FirstToken, 0.05);
        for row in find(&chi, |r| {
            r.statistic == Statistic::MeanChiSquared && r.value.is_some()
        }) {
            assert!(row.value.unwrap().abs() < 1e-9, "{row:?}");
        }
        for rep in [ent, pc, chi] {
            assert!(rep.is_partition_of(&ds));
        }
    }

    #[test]
    fn monotone_distortion_keeps_rank_correlation() {
        let ds = synthesize_dataset(60, [0.25; 4], 4).unwrap();
        let mut s = mirror(&ds);
        // Per-question renormalization would reshuffle ranks across
        // questions, so only the monotone map itself is applied.
        for p in &mut s.profiles {
            p.choice_probs.values = p.choice_probs.values.map(|v| v * v);
        }
        let pc = per_choice_correlation(&s, &ds, Subset::AllQuestions, 0.05);
        let row = find(&pc, |r| {
            r.metric == Some(Metric::FirstToken)
                && r.qtype == "all"
                && r.role == Some(ChoiceRole::CorrectAnswer)
        });
        assert!((row[0].value.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_strata_are_omitted_with_reason() {
        let qs = vec![
            question(0, QuestionType::FillGap, 0, Some([0.6, 0.3, 0.1])),
            question(1, QuestionType::FillGap, 0, Some([0.5, 0.3, 0.2])),
            question(2, QuestionType::WhQuestion, 0, Some([0.4, 0.3, 0.3])),
        ];
        let ds = dataset(qs);
        let r = entropy_correlation(&mirror(&ds), &ds, 0.05);
        let row = find(&r, |row| {
            row.qtype == "1" && row.subset == Subset::AllQuestions
        });
        assert_eq!(
            (row[0].n, row[0].note.as_deref(), row[0].value),
            (2, Some(TOO_FEW), None)
        );
    }

    #[test]
    fn zero_rate_questions_go_to_ledger() {
        let ds = synthesize_dataset(30, [0.25; 4], 1).unwrap();
        let mut qs = ds.questions.clone();
        qs[4].student_rates = Some([0.8, 0.2, 0.0]);
        qs[4].correct_index = 0;
        qs[9].student_rates = None;
        let ds = dataset(qs);
        let mut s = mirror(&dataset(
            ds.questions
                .iter()
                .cloned()
                .map(|mut q| {
                    q.student_rates.get_or_insert([0.5, 0.3, 0.2]);
                    q
                })
                .collect(),
        ));
        let dropped = s.profiles.remove(12);
        s.excluded.push(Exclusion {
            question_id: dropped.question_id.clone(),
            reason: "non-conforming".into(),
        });
        let r = chi_squared_rates(&s, &ds, Metric::FirstToken, 0.05);
        assert!(r.is_partition_of(&ds));
        assert_eq!(r.included.len(), 27);
        let reasons: Vec<(&str, &str)> = r
            .ledger
            .iter()
            .map(|e| (e.question_id.as_str(), e.reason.as_str()))
            .collect();
        assert_eq!(
            reasons,
            vec![
                (ds.questions[4].id.as_str(), ZERO_RATE),
                (ds.questions[9].id.as_str(), MISSING_RATES),
                (ds.questions[12].id.as_str(), "non-conforming"),
            ]
        );
        assert_eq!(r.convention.as_deref(), Some(CHI_SQUARED_CONVENTION));
    }

    #[test]
    fn chi_squared_uniform_model_example() {
        let mut q = question(0, QuestionType::WhQuestion, 0, Some([0.7, 0.2, 0.1]));
        q.examinee_count = 100;
        let ds = dataset(vec![q.clone()]);
        let third = 1.0 / 3.0;
        let s = set(vec![profile(&q, [third, third, third], [6, 0, 0])], vec![]);
        let r = chi_squared_rates(&s, &ds, Metric::FirstToken, 0.05);
        let row = find(&r, |row| {
            row.qtype == "all" && row.subset == Subset::AllQuestions
        });
        assert!((row[0].value.unwrap() - 62.0).abs() < 1e-9);
        assert_eq!(row[1].value, Some(1.0));
    }

    #[test]
    fn correct_subset_puts_incorrect_in_ledger() {
        let ds = synthesize_dataset(40, [0.25; 4], 6).unwrap();
        let s = mirror(&ds);
        let r = per_choice_correlation(&s, &ds, Subset::CorrectlyAnswered, 0.05);
        assert!(r.is_partition_of(&ds));
        let wrong = s.profiles.iter().filter(|p| !p.is_correct).count();
        assert_eq!(r.ledger.len(), wrong);
        assert!(r
            .rows
            .iter()
            .all(|row| row.subset == Subset::CorrectlyAnswered));
        assert_eq!(r.kind, ReportKind::PerChoiceCorrelationCorrect);
    }

    #[test]
    fn constant_order_sensitivity_records_zero_variance() {
        let qs: Vec<Question> = (0..8)
            .map(|i| question(i, QuestionType::WhQuestion, 0, Some([0.5, 0.3, 0.2])))
            .collect();
        let ds = dataset(qs);
        let s = set(
            ds.questions
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    profile(
                        q,
                        [0.5 + i as f64 * 0.01, 0.3, 0.2 - i as f64 * 0.01],
                        [6, 0, 0],
                    )
                })
                .collect(),
            vec![],
        );
        let r = metric_agreement(&s, &ds, 0.05);
        let row = find(&r, |row| {
            row.qtype == "all" && row.role == Some(ChoiceRole::CorrectAnswer)
        });
        assert_eq!(row[0].value, None);
        assert_eq!(
            row[0].note.as_deref(),
            Some(StatsError::ZeroVariance.to_string().as_str())
        );
    }

    #[test]
    fn identical_underlying_metrics_agree_perfectly() {
        let qs: Vec<Question> = (0..12)
            .map(|i| question(i, QuestionType::WhQuestion, 0, Some([0.5, 0.3, 0.2])))
            .collect();
        let ds = dataset(qs);
        let s = set(
            ds.questions
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    let c = (i % 7) as u8;
                    let counts = [c.min(6), 6 - c.min(6), 0];
                    let probs = counts.map(|k| k as f64 / 6.0);
                    profile(q, probs, counts)
                })
                .collect(),
            vec![],
        );
        let r = metric_agreement(&s, &ds, 0.05);
        for row in find(&r, |row| row.qtype == "all" && row.value.is_some()) {
            assert!((row.value.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stability_by_correctness() {
        let qs: Vec<Question> = (0..4)
            .map(|i| question(i, QuestionType::FillGap, 0, Some([0.5, 0.3, 0.2])))
            .collect();
        let ds = dataset(qs);
        let s = set(
            vec![
                profile(&ds.questions[0], [0.8, 0.1, 0.1], [6, 0, 0]),
                profile(&ds.questions[1], [0.8, 0.1, 0.1], [5, 1, 0]),
                profile(&ds.questions[2], [0.1, 0.8, 0.1], [2, 2, 2]),
            ],
            vec![Exclusion {
                question_id: ds.questions[3].id.clone(),
                reason: NO_PROBE.into(),
            }],
        );
        let r = order_stability(&s, &ds);
        assert!(r.is_partition_of(&ds));
        let get = |subset| find(&r, |row| row.qtype == "all" && row.subset == subset)[0].value;
        assert_eq!(get(Subset::AllQuestions), Some(1.0 / 3.0));
        assert_eq!(get(Subset::CorrectlyAnswered), Some(0.5));
        assert_eq!(get(Subset::IncorrectlyAnswered), Some(0.0));
    }

    fn probed(
        ds: &Dataset,
        spec: MockModelSpec,
        phrasings: Vec<Phrasing>,
    ) -> (ProbeCache, BackendIdentity) {
        let backend = MockBackend::new(spec, LabelStyle::Paren).unwrap();
        let mut cache = ProbeCache::in_memory();
        let opts = ProbeOptions {
            phrasings,
            concurrency: 4,
            top_k: 10,
        };
        run_probe(ds, &backend, &mut cache, None, &opts, |_, _, _| {}).unwrap();
        (cache, backend.identity().clone())
    }

    #[test]
    fn unbiased_mock_is_stable_everywhere() {
        let ds = synthesize_dataset(60, [0.25; 4], 2).unwrap();
        let spec = MockModelSpec::from_student_rates(&ds, [1.0; 3], 0.0, 1).unwrap();
        let (cache, id) = probed(&ds, spec, vec![Phrasing::One]);
        let s = profile_dataset::<f64>(&ds, &cache, &id, Phrasing::One, &ProfileConfig::default());
        let r = order_stability(&s, &ds);
        for row in r.rows.iter().filter(|row| row.value.is_some()) {
            assert_eq!(row.value, Some(1.0), "{row:?}");
        }
    }

    #[test]
    fn strong_bias_on_flat_latents_destroys_stability() {
        let ds = synthesize_dataset(40, [0.25; 4], 2).unwrap();
        let mut spec = MockModelSpec::from_student_rates(&ds, [5.0, 1.0, 1.0], 0.0, 1).unwrap();
        for (i, l) in spec.latents.values_mut().enumerate() {
            let e = 0.01 * (i % 3) as f64;
            *l = [0.34 - e, 0.33, 0.33 + e];
        }
        let (cache, id) = probed(&ds, spec, vec![Phrasing::One]);
        let s = profile_dataset::<f64>(&ds, &cache, &id, Phrasing::One, &ProfileConfig::default());
        let r = order_stability(&s, &ds);
        let all = find(&r, |row| {
            row.qtype == "all" && row.subset == Subset::AllQuestions
        });
        assert_eq!(all[0].value, Some(0.0));
    }

    #[test]
    fn phrasing_comparison_of_identical_probes_has_zero_deltas() {
        let ds = synthesize_dataset(30, [0.25; 4], 5).unwrap();
        let s1 = mirror(&ds);
        let mut s2 = s1.clone();
        s2.phrasing = Phrasing::Two;
        for p in &mut s2.profiles {
            p.phrasing = Phrasing::Two;
        }
        let r = phrasing_comparison(&s2, &s1, &ds, 0.05).unwrap();
        assert_eq!(r.phrasing, "1_vs_2");
        assert!(r.is_partition_of(&ds));
        assert!(r.deltas.iter().all(|d| d.delta == [0.0; 3]));
        let col = |ph| {
            find(&r, |row| {
                row.phrasing == Some(ph) && row.statistic == Statistic::SpearmanRho
            })
            .iter()
            .map(|row| row.value)
            .collect::<Vec<_>>()
        };
        assert_eq!(col(Phrasing::One), col(Phrasing::Two));
        assert_eq!(col(Phrasing::One).len(), 6);
        for row in find(&r, |row| row.statistic == Statistic::MeanAbsDelta) {
            assert_eq!(row.value, Some(0.0));
        }
    }

    #[test]
    fn phrasing_comparison_names_missing_ids() {
        let ds = synthesize_dataset(10, [0.25; 4], 5).unwrap();
        let s1 = mirror(&ds);
        let mut s2 = s1.clone();
        s2.phrasing = Phrasing::Two;
        let gone: Vec<String> = s2.profiles.drain(2..5).map(|p| p.question_id).collect();
        s2.excluded = gone
            .iter()
            .map(|id| Exclusion {
                question_id: id.clone(),
                reason: NO_PROBE.into(),
            })
            .collect();
        match phrasing_comparison(&s1, &s2, &ds, 0.05) {
            Err(AnalysisError::MismatchedCoverage { missing }) => assert_eq!(missing, gone),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            phrasing_comparison(&s1, &s1, &ds, 0.05),
            Err(AnalysisError::IncompatibleSets)
        ));
    }

    #[test]
    fn noisier_phrasing_correlates_less() {
        let ds = synthesize_dataset(200, [0.149, 0.031, 0.503, 0.317], 12).unwrap();
        let mut wins = 0;
        for seed in 0..5 {
            let spec1 = MockModelSpec::from_student_rates(&ds, [1.0; 3], 0.05, seed).unwrap();
            let spec2 = MockModelSpec::from_student_rates(&ds, [1.0; 3], 0.6, seed).unwrap();
            let (c1, id1) = probed(&ds, spec1, vec![Phrasing::One]);
            let (c2, id2) = probed(&ds, spec2, vec![Phrasing::Two]);
            let cfg = ProfileConfig::default();
            let s1 = profile_dataset::<f64>(&ds, &c1, &id1, Phrasing::One, &cfg);
            let mut s2 = profile_dataset::<f64>(&ds, &c2, &id2, Phrasing::Two, &cfg);
            // Stand-in for one model whose second phrasing is noisier.
            s2.backend = id1;
            let r = phrasing_comparison(&s1, &s2, &ds, 0.05).unwrap();
            let avg = |ph| {
                let v: Vec<f64> = find(&r, |row| {
                    row.phrasing == Some(ph) && row.metric == Some(Metric::FirstToken)
                })
                .iter()
                .map(|row| row.value.unwrap())
                .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            if avg(Phrasing::One) >= avg(Phrasing::Two) {
                wins += 1;
            }
        }
        assert_eq!(wins, 5);
    }

    #[test]
    fn reports_are_written_deterministically() {
        let ds = synthesize_dataset(20, [0.25; 4], 5).unwrap();
        let s = mirror(&ds);
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for round in 0..2 {
            let d = dir.path().join(format!("r{round}"));
            let reports = single_phrasing_reports(&s, &ds, 0.05);
            for r in &reports {
                write_report(r, &d).unwrap();
            }
            write_ledger(&reports, &d).unwrap();
            let mut names: Vec<_> = fs::read_dir(&d)
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            bytes.push(
                names
                    .iter()
                    .map(|n| (n.clone(), fs::read(d.join(n)).unwrap()))
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(bytes[0], bytes[1]);
        assert_eq!(bytes[0].len(), 8 * 3 + 1);
        let back: AnalysisReport<f64> =
            serde_json::from_slice(&fs::read(dir.path().join("r0/accuracy_table.json")).unwrap())
                .unwrap();
        assert_eq!(back, accuracy_table(&s, &ds));
    }

    #[test]
    fn stratum_ids_follow_filters() {
        let ds = synthesize_dataset(30, [0.25; 4], 7).unwrap();
        let s = mirror(&ds);
        let (entries, _) = entries(&s, &ds);
        let all = Stratum {
            qtype: None,
            subset: Subset::AllQuestions,
        };
        assert_eq!(all.question_ids(&entries).len(), 30);
    }

    proptest! {
        #[test]
        fn correct_and_incorrect_partition_all(
            flags in proptest::collection::vec((0usize..3, 0usize..4), 3..40),
        ) {
            let qs: Vec<Question> = flags
                .iter()
                .enumerate()
                .map(|(i, &(pick, t))| {
                    let mut q = question(i, QuestionType::ALL[t], 0, Some([0.5, 0.3, 0.2]));
                    q.stem = format!("{pick}");
                    q
                })
                .collect();
            let ds = dataset(qs);
            let profiles: Vec<_> = ds
                .questions
                .iter()
                .zip(&flags)
                .map(|(q, &(pick, _))| {
                    let mut probs = [0.2, 0.2, 0.2];
                    probs[pick] = 0.6;
                    profile(q, probs, [2, 2, 2])
                })
                .collect();
            let s = set(profiles, vec![]);
            let (entries, _) = entries(&s, &ds);
            for qtype in type_filters() {
                let ids = |subset| Stratum { qtype, subset }.question_ids(&entries);
                let mut joined = ids(Subset::CorrectlyAnswered);
                joined.extend(ids(Subset::IncorrectlyAnswered));
                joined.sort();
                let mut all = ids(Subset::AllQuestions);
                all.sort();
                prop_assert_eq!(joined, all);
            }
            for r in single_phrasing_reports(&s, &ds, 0.05) {
                prop_assert!(r.is_partition_of(&ds));
            }
        }
    }
}
