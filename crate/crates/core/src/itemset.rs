use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A set of attribute-value pairs with at most one value per attribute,
/// e.g. `{weather=snow, location=New York}`.
///
/// Ordering compares the sorted `(attribute, value)` pairs lexicographically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Itemset(BTreeMap<String, String>);

impl Itemset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self(pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }

    pub fn with(mut self, attribute: impl Into<String>, value: impl Into<String>) -> Self {
        self.0.insert(attribute.into(), value.into());
        self
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, attribute: &str) -> Option<&str> {
        self.0.get(attribute).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// True when every pair of `self` is present in `attributes`.
    pub fn matches(&self, attributes: &BTreeMap<String, String>) -> bool {
        self.0.iter().all(|(k, v)| attributes.get(k) == Some(v))
    }

    pub fn is_subset_of(&self, other: &Itemset) -> bool {
        self.matches(&other.0)
    }

    pub fn is_strict_subset_of(&self, other: &Itemset) -> bool {
        self.len() < other.len() && self.is_subset_of(other)
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.0
    }
}

impl fmt::Display for Itemset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str("}")
    }
}

impl From<BTreeMap<String, String>> for Itemset {
    fn from(map: BTreeMap<String, String>) -> Self {
        Self(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment() {
        let snow = Itemset::new().with("weather", "snow");
        let snow_ny = snow.clone().with("location", "New York");
        assert!(snow.is_strict_subset_of(&snow_ny));
        assert!(!snow_ny.is_subset_of(&snow));
        assert!(!snow.is_strict_subset_of(&snow));
        assert!(Itemset::new().is_subset_of(&snow));
        assert_eq!(snow_ny.to_string(), "{location=New York, weather=snow}");
    }
}
