use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Input modality of an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Dna,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Dna, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Dna => "dna",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Modality::Image),
            "dna" => Ok(Modality::Dna),
            "text" => Ok(Modality::Text),
            other => Err(format!("unknown modality '{other}' (expected image, dna or text)")),
        }
    }
}
