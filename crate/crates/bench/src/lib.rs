//! Benchmark inputs shared by the criterion targets.

use rollplane_core::TokenId;

/// `k` sequences sharing a `prefix`-token head, each with a `suffix`-token tail.
pub fn branched(k: usize, prefix: usize, suffix: usize) -> Vec<Vec<TokenId>> {
    (0..k)
        .map(|b| {
            (0..prefix as u32)
                .map(TokenId)
                .chain((0..suffix as u32).map(|i| TokenId(100_000 + (b as u32) * 10_000 + i)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches_share_only_the_prefix() {
        let seqs = branched(3, 4, 2);
        assert_eq!(seqs[0][..4], seqs[2][..4]);
        assert_ne!(seqs[0][4], seqs[1][4]);
        assert!(seqs.iter().all(|s| s.len() == 6));
    }
}
