//! Block-wise causal attention masks.

use serde::{Deserialize, Serialize};

/// Square boolean mask, row = query position, column = key position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub size: usize,
    pub block_lengths: Vec<usize>,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, query: usize, key: usize) -> bool {
        self.data[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.data[query * self.size..(query + 1) * self.size]
    }
}

/// Full attention inside a block; a token sees every earlier block and no later one.
pub fn blockwise_causal_mask(block_lengths: &[usize]) -> AttentionMask {
    let block_of: Vec<usize> = block_lengths
        .iter()
        .enumerate()
        .flat_map(|(b, n)| std::iter::repeat_n(b, *n))
        .collect();
    let size = block_of.len();
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            data.push(block_of[j] <= block_of[i]);
        }
    }
    AttentionMask {
        size,
        block_lengths: block_lengths.to_vec(),
        data,
    }
}
