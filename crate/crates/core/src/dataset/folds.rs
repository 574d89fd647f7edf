use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Train/validation/test partition of record indices for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed`, cuts it into `k` near-equal blocks, and for
/// fold `i` uses block `i` as test, block `(i + 1) % k` as validation and the
/// rest as training. Index lists within each part are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 3 {
        return Err(Error::invalid(format!("need at least 3 folds, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} records cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let base = n / k;
    let extra = n % k;
    let mut blocks = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        let mut block = order[start..start + len].to_vec();
        block.sort_unstable();
        blocks.push(block);
        start += len;
    }
    Ok((0..k)
        .map(|i| {
            let v = (i + 1) % k;
            let mut train: Vec<usize> = (0..k)
                .filter(|&b| b != i && b != v)
                .flat_map(|b| blocks[b].iter().copied())
                .collect();
            train.sort_unstable();
            FoldSplit {
                fold_index: i,
                train,
                val: blocks[v].clone(),
                test: blocks[i].clone(),
            }
        })
        .collect())
}
