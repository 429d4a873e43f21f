use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Taxonomic rank, coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Order,
    Family,
    Genus,
    Species,
}

impl Rank {
    pub const ALL: [Rank; 4] = [Rank::Order, Rank::Family, Rank::Genus, Rank::Species];

    pub fn as_str(self) -> &'static str {
        match self {
            Rank::Order => "order",
            Rank::Family => "family",
            Rank::Genus => "genus",
            Rank::Species => "species",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rank {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rank::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown rank '{s}' (expected order, family, genus or species)"))
    }
}

/// Four optional ranks. Present ranks always form a coarse-to-fine prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Taxonomy {
    ranks: [Option<String>; 4],
}

impl Taxonomy {
    /// Builds a taxonomy, rejecting gaps (a finer rank without a coarser one)
    /// and labels that are empty or contain tabs/newlines.
    pub fn new(
        order: Option<String>,
        family: Option<String>,
        genus: Option<String>,
        species: Option<String>,
    ) -> Result<Self, CorpusError> {
        let ranks = [order, family, genus, species];
        for label in ranks.iter().flatten() {
            if label.is_empty() || label.contains(['\t', '\n', '\r']) {
                return Err(CorpusError::InvalidLabel(label.clone()));
            }
        }
        let depth = ranks.iter().take_while(|r| r.is_some()).count();
        if ranks[depth..].iter().any(Option::is_some) {
            return Err(CorpusError::NotPrefixComplete(format!("{ranks:?}")));
        }
        Ok(Self { ranks })
    }

    /// Taxonomy from a coarse-to-fine list of labels.
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, CorpusError> {
        let mut ranks: [Option<String>; 4] = Default::default();
        for (i, label) in labels.into_iter().enumerate() {
            if i >= 4 {
                return Err(CorpusError::InvalidLabel("more than four ranks".into()));
            }
            ranks[i] = Some(label.into());
        }
        let [o, f, g, s] = ranks;
        Self::new(o, f, g, s)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, rank: Rank) -> Option<&str> {
        self.ranks[rank.index()].as_deref()
    }

    pub fn species(&self) -> Option<&str> {
        self.get(Rank::Species)
    }

    /// Number of present ranks.
    pub fn depth(&self) -> usize {
        self.ranks.iter().take_while(|r| r.is_some()).count()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.ranks.iter().map_while(|r| r.as_deref())
    }

    /// Space-joined present ranks, coarse to fine. Empty when no rank is known.
    pub fn serialize(&self) -> String {
        self.labels().collect::<Vec<_>>().join(" ")
    }
}

/// Text form of a taxonomy used as the text-encoder input.
pub fn serialize_taxonomy(t: &Taxonomy) -> String {
    t.serialize()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn some(s: &str) -> Option<String> {
        Some(s.to_string())
    }

    #[test]
    fn serializes_known_prefix() {
        let t = Taxonomy::new(some("Diptera"), some("Cecidomyiidae"), None, None).unwrap();
        assert_eq!(serialize_taxonomy(&t), "Diptera Cecidomyiidae");
        assert_eq!(serialize_taxonomy(&Taxonomy::empty()), "");
        let full = Taxonomy::new(
            some("Diptera"),
            some("Cecidomyiidae"),
            some("Asteromyia"),
            some("Asteromyia carbonifera"),
        )
        .unwrap();
        assert_eq!(
            full.serialize(),
            "Diptera Cecidomyiidae Asteromyia Asteromyia carbonifera"
        );
        assert_eq!(full.depth(), 4);
    }

    #[test]
    fn rejects_gaps_and_bad_labels() {
        assert!(matches!(
            Taxonomy::new(some("Diptera"), some("Cecidomyiidae"), None, some("x y")),
            Err(CorpusError::NotPrefixComplete(_))
        ));
        assert!(matches!(
            Taxonomy::new(None, some("F"), None, None),
            Err(CorpusError::NotPrefixComplete(_))
        ));
        assert!(matches!(
            Taxonomy::new(some("a\tb"), None, None, None),
            Err(CorpusError::InvalidLabel(_))
        ));
        assert!(matches!(
            Taxonomy::new(some(""), None, None, None),
            Err(CorpusError::InvalidLabel(_))
        ));
    }

    #[test]
    fn space_split_recovers_space_free_labels() {
        let t = Taxonomy::from_labels(["Lepidoptera", "Noctuidae", "Agrotis"]).unwrap();
        let parts: Vec<_> = t.serialize().split(' ').map(str::to_owned).collect();
        assert_eq!(parts, t.labels().collect::<Vec<_>>());
        assert_eq!(t.get(Rank::Genus), Some("Agrotis"));
        assert_eq!(t.species(), None);
    }
}
