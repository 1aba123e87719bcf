use crate::error::{Error, Result};

fn dcg(rels: &[f64]) -> f64 {
    rels.iter()
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum()
}

/// Normalized discounted cumulative gain of the first `k` graded relevances,
/// 0 when no item is relevant.
pub fn ndcg_at_k(ranking: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Metrics("ndcg needs k >= 1".into()));
    }
    if ranking.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Metrics(format!("relevances must be nonnegative: {ranking:?}")));
    }
    let top = &ranking[..k.min(ranking.len())];
    let mut ideal = ranking.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    ideal.truncate(k);
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(top) / idcg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_case() {
        let v = ndcg_at_k(&[0.0, 2.0], 2).unwrap();
        assert!((v - 2.0 / 3f64.log2() / 2.0).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn ideal_ranking_is_one_and_zero_relevance_is_zero() {
        assert_eq!(ndcg_at_k(&[2.0, 2.0, 1.0, 0.0], 3).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0.0, 0.0], 2).unwrap(), 0.0);
        assert!(ndcg_at_k(&[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn tail_permutations_do_not_matter(
            rels in proptest::collection::vec(0u8..3, 1..20),
            k in 1usize..10,
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let rels: Vec<f64> = rels.into_iter().map(f64::from).collect();
            let mut shuffled = rels.clone();
            if shuffled.len() > k {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                shuffled[k..].shuffle(&mut rng);
            }
            let a = ndcg_at_k(&rels, k).unwrap();
            let b = ndcg_at_k(&shuffled, k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }
}
