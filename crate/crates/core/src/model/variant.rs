use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EMBED_DIM;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Attention,
    Mean,
}

/// `w2v-{F_w}-{H}h` or `w2v-{F_w}-mean`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub word_dim: usize,
    pub heads: usize,
    pub aggregation: Aggregation,
}

impl Variant {
    pub const ALL: [&'static str; 6] =
        ["w2v-128-1h", "w2v-1152-1h", "w2v-128-4h", "w2v-1152-4h", "w2v-128-mean", "w2v-1152-mean"];

    pub fn attention(word_dim: usize, heads: usize) -> Self {
        Self { word_dim, heads, aggregation: Aggregation::Attention }
    }

    pub fn mean(word_dim: usize) -> Self {
        Self { word_dim, heads: 0, aggregation: Aggregation::Mean }
    }

    /// Width of φ_a and φ_w.
    pub fn contrastive_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Attention => EMBED_DIM,
            Aggregation::Mean => self.word_dim,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.aggregation {
            Aggregation::Attention => write!(f, "w2v-{}-{}h", self.word_dim, self.heads),
            Aggregation::Mean => write!(f, "w2v-{}-mean", self.word_dim),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown variant `{s}` (expected w2v-<dim>-<H>h or w2v-<dim>-mean)"));
        let rest = s.strip_prefix("w2v-").ok_or_else(bad)?;
        let (dim, agg) = rest.split_once('-').ok_or_else(bad)?;
        let word_dim: usize = dim.parse().map_err(|_| bad())?;
        if word_dim == 0 {
            return Err(bad());
        }
        if agg == "mean" {
            return Ok(Self::mean(word_dim));
        }
        let heads: usize = agg.strip_suffix('h').and_then(|h| h.parse().ok()).ok_or_else(bad)?;
        if heads == 0 {
            return Err(bad());
        }
        Ok(Self::attention(word_dim, heads))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
