//! Choice-order permutations and prompt rendering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Question;

pub const LETTERS: [char; 3] = ['A', 'B', 'C'];

/// Which original choice sits behind each letter label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permutation {
    /// `targets[label]` is the original choice index shown at that label.
    pub targets: [usize; 3],
}

impl Permutation {
    pub const IDENTITY: Permutation = Permutation { targets: [0, 1, 2] };

    /// Label position at which `choice` is displayed.
    pub fn position_of(&self, choice: usize) -> usize {
        self.targets
            .iter()
            .position(|&t| t == choice)
            .expect("permutation is a bijection")
    }
}

/// The six orderings of three choices, lexicographic in (A-target, B-target).
pub fn all_permutations() -> [Permutation; 6] {
    [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ]
    .map(|targets| Permutation { targets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Phrasing {
    One = 1,
    Two = 2,
}

const PHRASING_1: &str = "Below is a multiple-choice question. Choose the letter which best answers the question. Keep your response as brief as possible; just state the letter corresponding to your answer with no explanation.";

const PHRASING_2: &str = "You will be presented with a multiple-choice question. Select the option letter that you believe provides the best answer to the question. Keep your response concise by simply stating the letter of your chosen answer without providing any additional explanation.";

impl Phrasing {
    pub const ALL: [Phrasing; 2] = [Phrasing::One, Phrasing::Two];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Phrasing::One => PHRASING_1,
            Phrasing::Two => PHRASING_2,
        }
    }
}

impl TryFrom<u8> for Phrasing {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Phrasing::One),
            2 => Ok(Phrasing::Two),
            other => Err(format!("phrasing must be 1 or 2, got {other}")),
        }
    }
}

impl From<Phrasing> for u8 {
    fn from(p: Phrasing) -> u8 {
        p.id()
    }
}

impl fmt::Display for Phrasing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for Phrasing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<u8>()
            .map_err(|e| format!("phrasing `{s}`: {e}"))
            .and_then(Phrasing::try_from)
    }
}

/// Surface form of the choice labels.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum LabelStyle {
    #[default]
    #[serde(rename = "A)")]
    Paren,
    #[serde(rename = "A.")]
    Dot,
    #[serde(rename = "(A)")]
    Wrapped,
}

impl LabelStyle {
    pub fn label(self, letter: char) -> String {
        match self {
            LabelStyle::Paren => format!("{letter})"),
            LabelStyle::Dot => format!("{letter}."),
            LabelStyle::Wrapped => format!("({letter})"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelStyle::Paren => "A)",
            LabelStyle::Dot => "A.",
            LabelStyle::Wrapped => "(A)",
        }
    }
}

impl fmt::Display for LabelStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A)" | "paren" => Ok(LabelStyle::Paren),
            "A." | "dot" => Ok(LabelStyle::Dot),
            "(A)" | "wrapped" => Ok(LabelStyle::Wrapped),
            other => Err(format!(
                "label style must be one of A) (paren), A. (dot), (A) (wrapped); got `{other}`"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub question_id: String,
    pub permutation_id: usize,
    pub permutation: Permutation,
    pub phrasing: Phrasing,
    pub text: String,
}

/// Renders:
///
/// ```text
/// <instruction>
///
/// Question:
/// <stem>
/// A) <choice>
/// B) <choice>
/// C) <choice>
/// Response:
/// ```
pub fn render_prompt(
    q: &Question,
    permutation_id: usize,
    perm: Permutation,
    phrasing: Phrasing,
    style: LabelStyle,
) -> RenderedPrompt {
    let mut text = String::with_capacity(512);
    text.push_str(phrasing.instruction());
    text.push_str("\n\nQuestion:\n");
    text.push_str(&q.stem);
    text.push('\n');
    for (letter, &choice) in LETTERS.iter().zip(&perm.targets) {
        text.push_str(&style.label(*letter));
        text.push(' ');
        text.push_str(&q.choices[choice]);
        text.push('\n');
    }
    text.push_str("Response:");
    RenderedPrompt {
        question_id: q.id.clone(),
        permutation_id,
        permutation: perm,
        phrasing,
        text,
    }
}

/// All six prompts for one question under one phrasing, in permutation order.
pub fn render_all(q: &Question, phrasing: Phrasing, style: LabelStyle) -> Vec<RenderedPrompt> {
    all_permutations()
        .into_iter()
        .enumerate()
        .map(|(i, p)| render_prompt(q, i, p, phrasing, style))
        .collect()
}
