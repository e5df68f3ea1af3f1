use rand::Rng as _;

use crate::fed::config::participants_per_round;
use crate::rng::derived_rng;

/// `ceil(C*K)` distinct client ids for round `t`, by a seeded partial
/// Fisher–Yates shuffle of `0..K`, returned in ascending order.
pub fn select_clients(round: u32, clients: usize, fraction: f64, seed: u64) -> Vec<u32> {
    let count = participants_per_round(clients, fraction);
    let mut ids: Vec<u32> = (0..clients as u32).collect();
    let mut rng = derived_rng(seed, "select", &[u64::from(round)]);
    for i in 0..count {
        let j = rng.random_range(i..clients);
        ids.swap(i, j);
    }
    let mut chosen = ids[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_participation() {
        assert_eq!(select_clients(3, 10, 1.0, 1), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fractional_participation_is_seeded() {
        let a = select_clients(0, 10, 0.1, 5);
        assert_eq!(a.len(), 1);
        assert_eq!(a, select_clients(0, 10, 0.1, 5));
        let b = select_clients(2, 10, 0.5, 5);
        assert_eq!(b.len(), 5);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        // Different rounds should not always pick the same subset.
        let distinct: std::collections::BTreeSet<_> =
            (0..20).map(|t| select_clients(t, 10, 0.3, 5)).collect();
        assert!(distinct.len() > 1);
    }
}
