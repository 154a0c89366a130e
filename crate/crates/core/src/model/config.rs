use serde::{Deserialize, Serialize};

use super::interaction::interaction_width;
use crate::error::{Error, Result};

/// How features interact before the top MLP. Only pairwise dot products are
/// supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    #[default]
    Dot,
}

/// Model architecture.
///
/// `bottom_mlp` lists every width including the dense input, so
/// `512-512-64` is two layers. `top_mlp` lists layer outputs only; its input
/// width is derived from the interaction and prepended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlrmConfig {
    pub embedding_sizes: Vec<usize>,
    pub sparse_dim: usize,
    pub bottom_mlp: Vec<usize>,
    pub top_mlp: Vec<usize>,
    #[serde(default)]
    pub interaction: Interaction,
    pub seed: u64,
}

impl DlrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparse_dim == 0 {
            return Err(Error::Config("sparse feature size must be positive".into()));
        }
        if let Some(t) = self.embedding_sizes.iter().position(|&m| m == 0) {
            return Err(Error::Config(format!("embedding table {t} has zero rows")));
        }
        match self.bottom_mlp.last() {
            None => return Err(Error::Config("bottom MLP needs at least an input width".into())),
            Some(&last) if last != self.sparse_dim => {
                return Err(Error::Config(format!(
                    "bottom MLP output width {last} must equal the sparse feature size {}",
                    self.sparse_dim
                )))
            }
            _ => {}
        }
        if self.bottom_mlp.contains(&0) {
            return Err(Error::Config("bottom MLP widths must be positive".into()));
        }
        match self.top_mlp.last() {
            Some(1) => {}
            Some(&w) => {
                return Err(Error::Config(format!(
                    "top MLP must end in a single output, got width {w}"
                )))
            }
            None => return Err(Error::Config("top MLP needs at least one layer".into())),
        }
        if self.top_mlp.contains(&0) {
            return Err(Error::Config("top MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_tables(&self) -> usize {
        self.embedding_sizes.len()
    }

    /// Interacting vectors per sample: every table plus the dense vector.
    pub fn num_features(&self) -> usize {
        self.embedding_sizes.len() + 1
    }

    pub fn dense_dim(&self) -> usize {
        self.bottom_mlp.first().copied().unwrap_or(self.sparse_dim)
    }

    pub fn interaction_width(&self) -> usize {
        interaction_width(self.sparse_dim, self.num_features())
    }

    /// Top MLP widths with the interaction width prepended.
    pub fn top_dims(&self) -> Vec<usize> {
        std::iter::once(self.interaction_width())
            .chain(self.top_mlp.iter().copied())
            .collect()
    }

    /// Parameter count from the shapes alone; nothing is allocated.
    pub fn param_count(&self) -> u64 {
        param_count(self)
    }
}

fn mlp_params(dims: &[usize]) -> u64 {
    dims.windows(2)
        .map(|w| (w[1] as u64) * (w[0] as u64) + w[1] as u64)
        .sum()
}

pub fn embedding_param_count(config: &DlrmConfig) -> u64 {
    config
        .embedding_sizes
        .iter()
        .map(|&m| m as u64 * config.sparse_dim as u64)
        .sum()
}

pub fn param_count(config: &DlrmConfig) -> u64 {
    embedding_param_count(config) + mlp_params(&config.bottom_mlp) + mlp_params(&config.top_dims())
}
