use std::fmt;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::TrajectoryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiteKind::SelfAttention => "self",
            SiteKind::Cross => "cross",
        })
    }
}

/// Descriptor of one attention layer in the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub kind: SiteKind,
    /// Query grid (rows, cols); `tokens_q = rows * cols`.
    pub grid: [usize; 2],
    pub tokens_q: usize,
    /// Spatial token count for self-attention, text length for cross-attention.
    pub tokens_k: usize,
    pub heads: usize,
    /// Key dimension used in the `1/sqrt(d_k)` scaling.
    pub d_k: usize,
}

impl SiteInfo {
    pub fn map_shape(&self) -> (usize, usize, usize) {
        (self.heads, self.tokens_q, self.tokens_k)
    }
}

/// Which sites get recorded. By default only sites with at most 32x32 query
/// tokens are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFilter {
    pub max_query_tokens: usize,
    /// When set, only these site names are recorded (still subject to the
    /// token limit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allow: Option<Vec<String>>,
}

impl Default for SiteFilter {
    fn default() -> Self {
        Self { max_query_tokens: 32 * 32, allow: None }
    }
}

impl SiteFilter {
    pub fn all() -> Self {
        Self { max_query_tokens: usize::MAX, allow: None }
    }

    pub fn accepts(&self, site: &SiteInfo) -> bool {
        site.tokens_q <= self.max_query_tokens
            && self.allow.as_ref().is_none_or(|names| names.iter().any(|n| n == &site.name))
    }

    pub fn select(&self, registry: &[SiteInfo]) -> Vec<SiteInfo> {
        registry.iter().filter(|s| self.accepts(s)).cloned().collect()
    }
}

/// Post-softmax attention probabilities for a set of sites at one timestep.
///
/// Each map is `heads x tokens_q x tokens_k` with rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    sites: Vec<SiteInfo>,
    maps: Vec<Array3<f64>>,
}

impl AttentionSnapshot {
    pub fn new(sites: Vec<SiteInfo>, maps: Vec<Array3<f64>>) -> Result<Self, TrajectoryError> {
        if sites.len() != maps.len() {
            return Err(TrajectoryError::ShapeMismatch(format!("{} sites but {} maps", sites.len(), maps.len())));
        }
        for (site, map) in sites.iter().zip(&maps) {
            if map.dim() != site.map_shape() {
                return Err(TrajectoryError::ShapeMismatch(format!(
                    "site {} expects {:?}, got {:?}",
                    site.name,
                    site.map_shape(),
                    map.dim()
                )));
            }
        }
        Ok(Self { sites, maps })
    }

    pub fn empty() -> Self {
        Self { sites: Vec::new(), maps: Vec::new() }
    }

    pub fn sites(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn maps(&self) -> &[Array3<f64>] {
        &self.maps
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteInfo, &Array3<f64>)> {
        self.sites.iter().zip(&self.maps)
    }

    pub fn map(&self, name: &str) -> Option<&Array3<f64>> {
        self.sites.iter().position(|s| s.name == name).map(|i| &self.maps[i])
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn same_registry(&self, other: &AttentionSnapshot) -> bool {
        self.sites == other.sites
    }

    pub fn into_parts(self) -> (Vec<SiteInfo>, Vec<Array3<f64>>) {
        (self.sites, self.maps)
    }

    /// Largest `|row_sum - 1|` over every row of every map.
    pub fn max_row_sum_error(&self) -> f64 {
        self.maps.iter().flat_map(|m| m.sum_axis(Axis(2)).into_iter()).fold(0.0, |acc, s| acc.max((s - 1.0).abs()))
    }

    pub fn check_row_stochastic(&self, tol: f64) -> Result<(), TrajectoryError> {
        let in_range = self.maps.iter().flat_map(|m| m.iter()).all(|&p| (-tol..=1.0 + tol).contains(&p));
        let err = self.max_row_sum_error();
        if !in_range || err > tol {
            return Err(TrajectoryError::NotStochastic(err));
        }
        Ok(())
    }

    pub fn byte_len(&self) -> usize {
        self.maps.iter().map(|m| m.len() * std::mem::size_of::<f64>()).sum()
    }
}

/// Row-wise softmax over the last axis of `heads x q x k` logits.
pub fn softmax_rows(logits: &mut Array3<f64>) {
    for mut row in logits.lanes_mut(Axis(2)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
