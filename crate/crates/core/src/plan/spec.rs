use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PlanError;

/// Recipe applied to the top layer group of a stratified plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group3Mode {
    /// LoRA on query/key/value; bias tuning in intermediate and output sub-layers.
    FtI,
    /// As `FtI`, plus LoRA on the attention output projection.
    FtII,
}

/// A fine-tuning configuration, before it is compiled against a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanSpec {
    FullFt,
    FullBitFit,
    FullLoraI,
    FullLoraII,
    /// Layers `1..=n1` frozen, `n1+1..=n2` bias-only, `n2+1..=L` per `mode`.
    Spafit { n1: usize, n2: usize, mode: Group3Mode },
}

impl PlanSpec {
    pub fn uses_lora(&self) -> bool {
        !matches!(self, PlanSpec::FullFt | PlanSpec::FullBitFit)
    }

    pub fn is_full_ft(&self) -> bool {
        matches!(self, PlanSpec::FullFt)
    }

    /// Human label in the `SPAFIT-8-12-II` naming used in reports.
    pub fn label(&self) -> String {
        match self {
            PlanSpec::FullFt => "Full Fine-tuning".into(),
            PlanSpec::FullBitFit => "Full BitFit".into(),
            PlanSpec::FullLoraI => "Full LoRA-I".into(),
            PlanSpec::FullLoraII => "Full LoRA-II".into(),
            PlanSpec::Spafit { n1, n2, mode } => format!(
                "SPAFIT-{n1}-{n2}-{}",
                match mode {
                    Group3Mode::FtI => "I",
                    Group3Mode::FtII => "II",
                }
            ),
        }
    }
}

impl fmt::Display for PlanSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanSpec::FullFt => f.write_str("full-ft"),
            PlanSpec::FullBitFit => f.write_str("bitfit"),
            PlanSpec::FullLoraI => f.write_str("lora-i"),
            PlanSpec::FullLoraII => f.write_str("lora-ii"),
            PlanSpec::Spafit { n1, n2, mode } => write!(
                f,
                "spafit:N1={n1},N2={n2},mode={}",
                match mode {
                    Group3Mode::FtI => "I",
                    Group3Mode::FtII => "II",
                }
            ),
        }
    }
}

fn parse_mode(s: &str) -> Option<Group3Mode> {
    match s.to_ascii_uppercase().as_str() {
        "I" | "FT-I" | "FT_I" | "1" => Some(Group3Mode::FtI),
        "II" | "FT-II" | "FT_II" | "2" => Some(Group3Mode::FtII),
        _ => None,
    }
}

/// Accepts `full-ft`, `bitfit`, `lora-i`, `lora-ii`,
/// `spafit:N1=8,N2=12,mode=II` and the report form `SPAFIT-8-12-II`.
impl FromStr for PlanSpec {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let syntax = || PlanError::Syntax(s.to_string());
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        match lower.as_str() {
            "full-ft" | "fullft" | "full_ft" | "full" => return Ok(PlanSpec::FullFt),
            "bitfit" | "full-bitfit" | "fullbitfit" => return Ok(PlanSpec::FullBitFit),
            "lora-i" | "full-lora-i" | "lora1" => return Ok(PlanSpec::FullLoraI),
            "lora-ii" | "full-lora-ii" | "lora2" => return Ok(PlanSpec::FullLoraII),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix("spafit:") {
            let (mut n1, mut n2, mut mode) = (None, None, None);
            for kv in rest.split(',') {
                let (k, v) = kv.split_once('=').ok_or_else(syntax)?;
                match k.trim() {
                    "n1" if n1.is_none() => n1 = Some(v.trim().parse().map_err(|_| syntax())?),
                    "n2" if n2.is_none() => n2 = Some(v.trim().parse().map_err(|_| syntax())?),
                    "mode" if mode.is_none() => mode = Some(parse_mode(v.trim()).ok_or_else(syntax)?),
                    _ => return Err(syntax()),
                }
            }
            return match (n1, n2, mode) {
                (Some(n1), Some(n2), Some(mode)) => Ok(PlanSpec::Spafit { n1, n2, mode }),
                _ => Err(syntax()),
            };
        }
        if let Some(rest) = lower.strip_prefix("spafit-") {
            let parts: Vec<&str> = rest.split('-').collect();
            if let [n1, n2, mode] = parts.as_slice() {
                return Ok(PlanSpec::Spafit {
                    n1: n1.parse().map_err(|_| syntax())?,
                    n2: n2.parse().map_err(|_| syntax())?,
                    mode: parse_mode(mode).ok_or_else(syntax)?,
                });
            }
        }
        Err(syntax())
    }
}
