//! Prompt-to-prompt attention control.
//!
//! Source and target prompts are aligned word by word (longest common
//! subsequence). Equal-length runs of differing words between two matches
//! are word swaps; any other unmatched target word is new. A [`P2PPlan`]
//! turns that alignment into a per-site rule for building the maps injected
//! into the edit branch from the reconstruction-branch maps and the mixed
//! edit-branch maps.

use std::collections::BTreeMap;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{PromptEmbedding, TokenKind};
use crate::trajectory::{AttentionSnapshot, SiteKind};

#[derive(Debug, Error, PartialEq)]
pub enum P2PError {
    #[error("{0} prompt has no words")]
    EmptyPrompt(&'static str),
    #[error("{name} = {value} outside [0, 1]")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error("reweight word `{0}` does not occur in the target prompt")]
    UnknownReweightWord(String),
    #[error("reweight factor {factor} for `{word}` must be finite and non-negative")]
    BadFactor { word: String, factor: f64 },
    #[error("attention snapshots cover different site registries")]
    RegistryMismatch,
    #[error("site {site} has {tokens_k} key tokens but the mapping covers {mapped} (source token {source_token})")]
    TokenOutOfRange { site: String, tokens_k: usize, mapped: usize, source_token: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditType {
    /// Word swap: substituted words take the source word's attention.
    #[default]
    Replace,
    /// Phrase addition: only identical words are mapped.
    Refine,
    /// Refine plus per-word scaling of target columns.
    Reweight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct P2PConfig {
    pub edit_type: EditType,
    /// Fraction of denoising iterations whose cross-attention comes from the
    /// reconstruction branch.
    pub cross_replace_fraction: f64,
    /// Same for self-attention.
    pub self_replace_fraction: f64,
    /// Target-prompt word to attention scale; used by [`EditType::Reweight`].
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub reweight: BTreeMap<String, f64>,
}

impl Default for P2PConfig {
    fn default() -> Self {
        Self {
            edit_type: EditType::Replace,
            cross_replace_fraction: 0.8,
            self_replace_fraction: 0.4,
            reweight: BTreeMap::new(),
        }
    }
}

impl P2PConfig {
    pub fn validate(&self) -> Result<(), P2PError> {
        for (name, value) in [
            ("cross_replace_fraction", self.cross_replace_fraction),
            ("self_replace_fraction", self.self_replace_fraction),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(P2PError::FractionOutOfRange { name, value });
            }
        }
        for (word, &factor) in &self.reweight {
            if !factor.is_finite() || factor < 0.0 {
                return Err(P2PError::BadFactor { word: word.clone(), factor });
            }
        }
        Ok(())
    }

    /// Neither window is ever open.
    pub fn is_pass_through(&self) -> bool {
        self.cross_replace_fraction == 0.0 && self.self_replace_fraction == 0.0
    }
}

/// Where a target token's attention column comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenLink {
    /// Same word (or special token) at this source token.
    Same(usize),
    /// A different word in a swapped position at this source token.
    Swapped(usize),
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMapping {
    pub source_len: usize,
    /// One link per target token.
    pub links: Vec<TokenLink>,
}

impl TokenMapping {
    /// Source column per target token; swaps count only when `allow_swaps`.
    pub fn columns(&self, allow_swaps: bool) -> Vec<Option<usize>> {
        self.links
            .iter()
            .map(|l| match *l {
                TokenLink::Same(s) => Some(s),
                TokenLink::Swapped(s) if allow_swaps => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Target token indices without a source counterpart.
    pub fn new_tokens(&self) -> Vec<usize> {
        self.links.iter().enumerate().filter(|(_, l)| **l == TokenLink::New).map(|(j, _)| j).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WordLink {
    Same(usize),
    Swapped(usize),
    New,
}

/// LCS alignment of words; returns one link per target word.
fn align_words(source: &[String], target: &[String]) -> Vec<WordLink> {
    let (n, m) = (source.len(), target.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if source[i] == target[j] { lcs[i + 1][j + 1] + 1 } else { lcs[i + 1][j].max(lcs[i][j + 1]) };
        }
    }
    let mut matches = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if source[i] == target[j] {
            matches.push((i, j));
            i += 1;
            j += 1;
        } else if lcs[i + 1][j] >= lcs[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    matches.push((n, m));

    let mut links = vec![WordLink::New; m];
    let (mut prev_s, mut prev_t) = (0, 0);
    for (s, t) in matches {
        if s - prev_s == t - prev_t {
            for k in 0..t - prev_t {
                links[prev_t + k] = WordLink::Swapped(prev_s + k);
            }
        }
        if t < m {
            links[t] = WordLink::Same(s);
        }
        prev_s = s + 1;
        prev_t = t + 1;
    }
    links
}

/// Index of the first token after the last word token (EOS for the usual layout).
fn tail_start(kinds: &[TokenKind]) -> usize {
    kinds.iter().rposition(|k| matches!(k, TokenKind::Word(_) | TokenKind::Bos)).map_or(0, |p| p + 1)
}

/// Aligns target tokens to source tokens.
pub fn build_token_mapping(source: &PromptEmbedding, target: &PromptEmbedding) -> Result<TokenMapping, P2PError> {
    if source.words.is_empty() {
        return Err(P2PError::EmptyPrompt("source"));
    }
    if target.words.is_empty() {
        return Err(P2PError::EmptyPrompt("target"));
    }
    let word_links = align_words(&source.words, &target.words);
    let (src_tail, tgt_tail) = (tail_start(&source.token_kinds), tail_start(&target.token_kinds));
    let src_bos = source.token_kinds.iter().position(|k| *k == TokenKind::Bos);

    let mut links = Vec::with_capacity(target.len());
    let mut word_offset: BTreeMap<usize, usize> = BTreeMap::new();
    for (j, kind) in target.token_kinds.iter().enumerate() {
        let link = match *kind {
            TokenKind::Bos => src_bos.map_or(TokenLink::New, TokenLink::Same),
            TokenKind::Word(w) => {
                let k = *word_offset.entry(w).and_modify(|k| *k += 1).or_insert(0);
                let tgt_count = target.word_tokens(w).count();
                let pick = |sw: usize| {
                    let src_tokens: Vec<usize> = source.word_tokens(sw).collect();
                    (src_tokens.len() == tgt_count).then(|| src_tokens[k])
                };
                match word_links[w] {
                    WordLink::Same(sw) => pick(sw).map_or(TokenLink::New, TokenLink::Same),
                    WordLink::Swapped(sw) => pick(sw).map_or(TokenLink::New, TokenLink::Swapped),
                    WordLink::New => TokenLink::New,
                }
            }
            TokenKind::Eos | TokenKind::Pad => {
                let s = src_tail + (j - tgt_tail);
                if j >= tgt_tail && s < source.len() {
                    TokenLink::Same(s)
                } else {
                    TokenLink::New
                }
            }
        };
        links.push(link);
    }
    Ok(TokenMapping { source_len: source.len(), links })
}

/// A validated configuration bound to a concrete prompt pair.
#[derive(Debug, Clone)]
pub struct P2PPlan {
    config: P2PConfig,
    mapping: TokenMapping,
    columns: Vec<Option<usize>>,
    /// Columns do not form a permutation, so rows must be renormalized.
    renormalize: bool,
    scale: Option<Vec<f64>>,
}

impl P2PPlan {
    pub fn new(config: P2PConfig, source: &PromptEmbedding, target: &PromptEmbedding) -> Result<Self, P2PError> {
        config.validate()?;
        let mapping = build_token_mapping(source, target)?;
        let columns = mapping.columns(config.edit_type == EditType::Replace);
        let mut used = vec![false; mapping.source_len];
        for s in columns.iter().flatten() {
            used[*s] = true;
        }
        let renormalize = columns.len() != mapping.source_len || !used.iter().all(|&u| u);

        let scale = if config.edit_type == EditType::Reweight && config.reweight.values().any(|&f| f != 1.0) {
            let mut scale = vec![1.0; target.len()];
            for (word, &factor) in &config.reweight {
                let key = word.to_lowercase();
                let positions: Vec<usize> =
                    target.words.iter().enumerate().filter(|(_, w)| **w == key).map(|(n, _)| n).collect();
                if positions.is_empty() {
                    return Err(P2PError::UnknownReweightWord(word.clone()));
                }
                for n in positions {
                    for tok in target.word_tokens(n) {
                        scale[tok] = factor;
                    }
                }
            }
            Some(scale)
        } else {
            None
        };
        Ok(Self { config, mapping, columns, renormalize, scale })
    }

    pub fn config(&self) -> &P2PConfig {
        &self.config
    }

    pub fn mapping(&self) -> &TokenMapping {
        &self.mapping
    }

    fn in_window(fraction: f64, iteration: usize, steps: usize) -> bool {
        (iteration as f64) < fraction * steps as f64
    }

    fn cross_map(&self, site: &str, base: &Array3<f64>, mixed: &Array3<f64>) -> Result<Array3<f64>, P2PError> {
        let tokens_k = mixed.dim().2;
        if self.columns.len() != tokens_k {
            return Err(P2PError::TokenOutOfRange {
                site: site.to_string(),
                tokens_k,
                mapped: self.columns.len(),
                source_token: self.mapping.source_len,
            });
        }
        if let Some(&bad) = self.columns.iter().flatten().find(|&&s| s >= base.dim().2) {
            return Err(P2PError::TokenOutOfRange {
                site: site.to_string(),
                tokens_k: base.dim().2,
                mapped: self.columns.len(),
                source_token: bad,
            });
        }
        let mut out = Array3::from_shape_fn(mixed.raw_dim(), |(h, q, j)| match self.columns[j] {
            Some(s) => base[[h, q, s]],
            None => mixed[[h, q, j]],
        });
        if let Some(scale) = &self.scale {
            for (j, &f) in scale.iter().enumerate() {
                out.index_axis_mut(Axis(2), j).mapv_inplace(|v| v * f);
            }
        }
        if self.renormalize || self.scale.is_some() {
            for mut row in out.lanes_mut(Axis(2)) {
                let sum = row.sum();
                if sum > 0.0 {
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
        Ok(out)
    }

    /// Maps to inject at denoising iteration `iteration` of `steps`.
    pub fn apply(
        &self,
        base: &AttentionSnapshot,
        mixed: &AttentionSnapshot,
        iteration: usize,
        steps: usize,
    ) -> Result<AttentionSnapshot, P2PError> {
        if !base.same_registry(mixed) {
            return Err(P2PError::RegistryMismatch);
        }
        let cross = Self::in_window(self.config.cross_replace_fraction, iteration, steps);
        let selfw = Self::in_window(self.config.self_replace_fraction, iteration, steps);
        let mut maps = Vec::with_capacity(mixed.len());
        for ((site, b), m) in base.iter().zip(mixed.maps()) {
            let map = match site.kind {
                SiteKind::SelfAttention if selfw => b.clone(),
                SiteKind::Cross if cross => self.cross_map(&site.name, b, m)?,
                _ => m.clone(),
            };
            maps.push(map);
        }
        Ok(AttentionSnapshot::new(mixed.sites().to_vec(), maps).expect("shapes follow the mixed snapshot"))
    }
}
