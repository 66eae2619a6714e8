use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rating {
    #[serde(rename = "Very Good")]
    VeryGood,
    Good,
    Fair,
    Poor,
}

impl Rating {
    pub const ALL: [Rating; 4] = [Self::VeryGood, Self::Good, Self::Fair, Self::Poor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VeryGood => "Very Good",
            Self::Good => "Good",
            Self::Fair => "Fair",
            Self::Poor => "Poor",
        }
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rating {
    type Err = AnnotateError;

    /// Case, spaces, hyphens and underscores are ignored: `very_good` works.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "verygood" => Ok(Self::VeryGood),
            "good" => Ok(Self::Good),
            "fair" => Ok(Self::Fair),
            "poor" => Ok(Self::Poor),
            _ => Err(AnnotateError::UnknownRating(s.to_string())),
        }
    }
}

/// Rates an infrared caption against an RGB reference. Returns the raw
/// `(accuracy, detail)` labels; they are validated by [`judge_captions`].
pub trait Judge {
    fn judge(&mut self, ir_caption: &str, rgb_reference: &str) -> Result<(String, String)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Accuracy,
    Detail,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoreTable {
    /// `[accuracy, detail]` counts in [`Rating::ALL`] order.
    pub counts: [[usize; 4]; 2],
    pub total: usize,
}

impl ScoreTable {
    pub fn add(&mut self, accuracy: Rating, detail: Rating) {
        self.counts[0][accuracy as usize] += 1;
        self.counts[1][detail as usize] += 1;
        self.total += 1;
    }

    pub fn count(&self, dim: Dimension, r: Rating) -> usize {
        self.counts[dim as usize][r as usize]
    }

    pub fn percent(&self, dim: Dimension, r: Rating) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.count(dim, r) as f64 / self.total as f64
    }
}

impl fmt::Display for ScoreTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "")?;
        for r in Rating::ALL {
            write!(f, " {:>14}", r.as_str())?;
        }
        writeln!(f)?;
        for (dim, name) in [(Dimension::Accuracy, "Accuracy"), (Dimension::Detail, "Detail")] {
            write!(f, "{name:<10}")?;
            for r in Rating::ALL {
                let cell = format!("{} ({:.1}%)", self.count(dim, r), self.percent(dim, r));
                write!(f, " {cell:>14}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn judge_captions<J: Judge + ?Sized>(judge: &mut J, pairs: &[(String, String)]) -> Result<ScoreTable> {
    if pairs.is_empty() {
        return Err(AnnotateError::InvalidArgument("nothing to judge".into()));
    }
    let mut table = ScoreTable::default();
    for (ir, rgb) in pairs {
        let (a, d) = judge.judge(ir, rgb)?;
        table.add(a.parse()?, d.parse()?);
    }
    Ok(table)
}
