//! Per-question uncertainty metrics derived from cached probes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendIdentity, ChoiceProbe, ProbeCache, TokenDistribution};
use crate::dataset::{Dataset, Question};
use crate::prompting::{all_permutations, Permutation, Phrasing, LETTERS};
use crate::Scalar;

/// Averaged letter mass below which a probe is treated as not answering with
/// a letter at all.
pub const DEFAULT_CONFORM_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UncertaintyError {
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
    #[error("question `{0}` has no student rates")]
    MissingRates(String),
}

/// Token spellings that count as answering with a given letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantForm {
    /// `A`
    Upper,
    /// ` A`
    SpaceUpper,
    /// `a`
    Lower,
    /// ` a`
    SpaceLower,
    /// `A `
    UpperSpace,
    /// `a `
    LowerSpace,
}

impl VariantForm {
    pub fn render(self, letter: char) -> String {
        let (u, l) = (letter.to_ascii_uppercase(), letter.to_ascii_lowercase());
        match self {
            VariantForm::Upper => u.to_string(),
            VariantForm::SpaceUpper => format!(" {u}"),
            VariantForm::Lower => l.to_string(),
            VariantForm::SpaceLower => format!(" {l}"),
            VariantForm::UpperSpace => format!("{u} "),
            VariantForm::LowerSpace => format!("{l} "),
        }
    }

    fn name(self) -> &'static str {
        match self {
            VariantForm::Upper => "upper",
            VariantForm::SpaceUpper => "space-upper",
            VariantForm::Lower => "lower",
            VariantForm::SpaceLower => "space-lower",
            VariantForm::UpperSpace => "upper-space",
            VariantForm::LowerSpace => "lower-space",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariantSet {
    forms: Vec<VariantForm>,
}

impl Default for VariantSet {
    /// `A`, ` A`, `a`, ` a`
    fn default() -> Self {
        VariantSet {
            forms: vec![
                VariantForm::Upper,
                VariantForm::SpaceUpper,
                VariantForm::Lower,
                VariantForm::SpaceLower,
            ],
        }
    }
}

impl VariantSet {
    pub fn new(mut forms: Vec<VariantForm>) -> Result<Self, String> {
        forms.sort();
        forms.dedup();
        if forms.is_empty() {
            return Err("variant set must not be empty".into());
        }
        Ok(VariantSet { forms })
    }

    pub fn uppercase_only() -> Self {
        VariantSet {
            forms: vec![VariantForm::Upper, VariantForm::SpaceUpper],
        }
    }

    pub fn forms(&self) -> &[VariantForm] {
        &self.forms
    }

    pub fn tokens(&self, letter: char) -> Vec<String> {
        self.forms.iter().map(|f| f.render(letter)).collect()
    }
}

impl fmt::Display for VariantSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.forms.iter().map(|v| v.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for VariantSet {
    type Err = String;

    /// Comma-separated form names, e.g. `upper,space-upper,lower-space`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = [
            VariantForm::Upper,
            VariantForm::SpaceUpper,
            VariantForm::Lower,
            VariantForm::SpaceLower,
            VariantForm::UpperSpace,
            VariantForm::LowerSpace,
        ];
        let forms = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                all.iter()
                    .copied()
                    .find(|f| f.name() == t)
                    .ok_or_else(|| format!("unknown variant form `{t}`"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        VariantSet::new(forms)
    }
}

/// Highest probability among the tokens spelling `letter`; 0 when none of
/// them made the top-k list.
pub fn letter_probability<F: Scalar>(
    dist: &TokenDistribution,
    letter: char,
    variants: &VariantSet,
) -> F {
    let tokens = variants.tokens(letter);
    dist.entries
        .iter()
        .filter(|e| tokens.contains(&e.token))
        .map(|e| F::of(e.prob))
        .fold(F::zero(), F::max)
}

/// Permutation-averaged probability per original choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoiceProbabilities<F> {
    pub values: [F; 3],
    /// False when the averaged letter mass fell under the conformance floor;
    /// `values` are then the raw averages, not normalized.
    pub conforming: bool,
}

fn label_masses<F: Scalar>(dist: &TokenDistribution, variants: &VariantSet) -> [F; 3] {
    LETTERS.map(|l| letter_probability(dist, l, variants))
}

/// Maps each permutation's letter masses back to the original choices,
/// averages over the orderings and normalizes onto the simplex.
pub fn choice_probabilities<F: Scalar>(
    probe: &ChoiceProbe,
    perms: &[Permutation],
    variants: &VariantSet,
    conform_floor: F,
) -> ChoiceProbabilities<F> {
    let mut acc = [F::zero(); 3];
    for (dist, perm) in probe.distributions.iter().zip(perms) {
        let masses: [F; 3] = label_masses(dist, variants);
        for (label, &choice) in perm.targets.iter().enumerate() {
            acc[choice] = acc[choice] + masses[label];
        }
    }
    let count = F::of(perms.len().min(probe.distributions.len()) as f64);
    let avg = acc.map(|a| a / count);
    let sum = avg.iter().fold(F::zero(), |s, &v| s + v);
    if sum < conform_floor || sum <= F::zero() {
        return ChoiceProbabilities {
            values: avg,
            conforming: false,
        };
    }
    ChoiceProbabilities {
        values: avg.map(|v| v / sum),
        conforming: true,
    }
}

/// How often each original choice was the model's pick across orderings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderSensitivity<F> {
    pub frequencies: [F; 3],
    pub counts: [u8; 3],
    /// Same choice picked under every ordering.
    pub stable: bool,
    /// Orderings where two or more letters tied for the top mass.
    pub tied_orderings: u8,
}

/// Per ordering, the pick is the letter with the largest mass (ties go to
/// the earliest letter and are counted), mapped back to its original choice.
pub fn order_sensitivity<F: Scalar>(
    probe: &ChoiceProbe,
    perms: &[Permutation],
    variants: &VariantSet,
) -> OrderSensitivity<F> {
    let mut counts = [0u8; 3];
    let mut tied_orderings = 0;
    let mut total = 0u8;
    for (dist, perm) in probe.distributions.iter().zip(perms) {
        let masses: [F; 3] = label_masses(dist, variants);
        let mut best = 0;
        for label in 1..3 {
            if masses[label] > masses[best] {
                best = label;
            }
        }
        if masses.iter().filter(|&&m| m == masses[best]).count() > 1 {
            tied_orderings += 1;
        }
        counts[perm.targets[best]] += 1;
        total += 1;
    }
    let total_f = F::of(total.max(1) as f64);
    OrderSensitivity {
        frequencies: counts.map(|c| F::of(c as f64) / total_f),
        counts,
        stable: counts.iter().any(|&c| c == total && total > 0),
        tied_orderings,
    }
}

/// Shannon entropy in nats of a three-way distribution, `0·ln 0 = 0`.
pub fn entropy<F: Scalar>(p: &[F; 3]) -> Result<F, UncertaintyError> {
    if let Some(&neg) = p.iter().find(|&&v| v < F::zero() || v.is_nan()) {
        return Err(UncertaintyError::NegativeProbability(neg.as_f64()));
    }
    let sum = p.iter().fold(F::zero(), |s, &v| s + v);
    if (sum - F::one()).abs() > F::of(1e-6) {
        return Err(UncertaintyError::BadSum(sum.as_f64()));
    }
    let h = p
        .iter()
        .filter(|&&v| v > F::zero())
        .fold(F::zero(), |h, &v| h - v * v.ln());
    Ok(h.max(F::zero()).min(F::of(3.0).ln()))
}

pub fn student_entropy<F: Scalar>(q: &Question) -> Result<F, UncertaintyError> {
    let rates = q
        .student_rates
        .ok_or_else(|| UncertaintyError::MissingRates(q.id.clone()))?;
    entropy(&rates.map(F::of))
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax<F: Scalar>(v: &[F; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProfile<F> {
    pub question_id: String,
    pub phrasing: Phrasing,
    pub choice_probs: ChoiceProbabilities<F>,
    pub order_sens: OrderSensitivity<F>,
    /// Entropy of the normalized choice probabilities, in nats.
    pub entropy_model: F,
    pub model_choice: usize,
    pub is_correct: bool,
}

/// A question left out of the metrics, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub question_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileConfig<F> {
    pub variants: VariantSet,
    pub conform_floor: F,
}

impl<F: Scalar> Default for ProfileConfig<F> {
    fn default() -> Self {
        ProfileConfig {
            variants: VariantSet::default(),
            conform_floor: F::of(DEFAULT_CONFORM_FLOOR),
        }
    }
}

pub fn build_profile<F: Scalar>(
    probe: &ChoiceProbe,
    q: &Question,
    cfg: &ProfileConfig<F>,
) -> Result<UncertaintyProfile<F>, Exclusion> {
    let perms = all_permutations();
    let choice_probs = choice_probabilities(probe, &perms, &cfg.variants, cfg.conform_floor);
    if !choice_probs.conforming {
        let mass = choice_probs.values.iter().fold(F::zero(), |s, &v| s + v);
        return Err(Exclusion {
            question_id: q.id.clone(),
            reason: format!(
                "non-conforming: letter mass {:.4} below {}",
                mass.as_f64(),
                cfg.conform_floor
            ),
        });
    }
    let order_sens = order_sensitivity(probe, &perms, &cfg.variants);
    let entropy_model = entropy(&choice_probs.values).map_err(|e| Exclusion {
        question_id: q.id.clone(),
        reason: e.to_string(),
    })?;
    let model_choice = argmax(&choice_probs.values);
    Ok(UncertaintyProfile {
        question_id: q.id.clone(),
        phrasing: probe.phrasing,
        choice_probs,
        order_sens,
        entropy_model,
        model_choice,
        is_correct: model_choice == q.correct_index,
    })
}

/// Profiles for one (backend, phrasing) slice of the cache, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet<F> {
    pub backend: BackendIdentity,
    pub phrasing: Phrasing,
    pub profiles: Vec<UncertaintyProfile<F>>,
    pub excluded: Vec<Exclusion>,
}

impl<F: Scalar> ProfileSet<F> {
    pub fn get(&self, question_id: &str) -> Option<&UncertaintyProfile<F>> {
        self.profiles.iter().find(|p| p.question_id == question_id)
    }
}

/// Exclusion reason for a question the cache has no probe for.
pub const NO_PROBE: &str = "no probe";

/// Questions without a cached probe are excluded with reason [`NO_PROBE`].
pub fn profile_dataset<F: Scalar>(
    ds: &Dataset,
    cache: &ProbeCache,
    backend: &BackendIdentity,
    phrasing: Phrasing,
    cfg: &ProfileConfig<F>,
) -> ProfileSet<F> {
    let mut profiles = Vec::with_capacity(ds.len());
    let mut excluded = Vec::new();
    for q in &ds.questions {
        match cache.get(&q.id, phrasing, backend) {
            None => excluded.push(Exclusion {
                question_id: q.id.clone(),
                reason: NO_PROBE.into(),
            }),
            Some(probe) => match build_profile(probe, q, cfg) {
                Ok(p) => profiles.push(p),
                Err(e) => excluded.push(e),
            },
        }
    }
    ProfileSet {
        backend: backend.clone(),
        phrasing,
        profiles,
        excluded,
    }
}
