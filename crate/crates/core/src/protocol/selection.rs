use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;

use super::options::SelectStrategy;
use super::ProtocolError;
use crate::AgentId;

/// Picks `min(count, |ready|)` agents from `ready`.
///
/// `attributes` maps agents to advertised dataset sizes and `votes` maps voters
/// to their ballot. Ties go to the lowest id.
pub fn select_agents<R: Rng + ?Sized>(
    ready: &BTreeSet<AgentId>,
    strategy: SelectStrategy,
    count: usize,
    attributes: &BTreeMap<AgentId, u64>,
    votes: &BTreeMap<AgentId, AgentId>,
    rng: &mut R,
) -> Result<BTreeSet<AgentId>, ProtocolError> {
    if ready.is_empty() {
        return Err(ProtocolError::Selection("no ready agents".into()));
    }
    if count == 0 {
        return Err(ProtocolError::Selection("selection count must be at least 1".into()));
    }
    let take = count.min(ready.len());
    let pool: Vec<AgentId> = ready.iter().copied().collect();
    let chosen = match strategy {
        SelectStrategy::Random => pool.choose_multiple(rng, take).copied().collect(),
        SelectStrategy::Attributes => top_by(&pool, take, |id| attributes.get(&id).copied().unwrap_or(0)),
        SelectStrategy::Votes => {
            let tally = tally_votes(votes, ready);
            top_by(&pool, take, |id| tally.get(&id).copied().unwrap_or(0))
        }
    };
    Ok(chosen)
}

fn top_by(pool: &[AgentId], take: usize, score: impl Fn(AgentId) -> u64) -> BTreeSet<AgentId> {
    let mut ranked = pool.to_vec();
    ranked.sort_by(|a, b| score(*b).cmp(&score(*a)).then(a.cmp(b)));
    ranked.into_iter().take(take).collect()
}

/// Vote counts per candidate, ignoring ballots for agents outside `candidates`.
pub fn tally_votes(votes: &BTreeMap<AgentId, AgentId>, candidates: &BTreeSet<AgentId>) -> BTreeMap<AgentId, u64> {
    let mut tally = BTreeMap::new();
    for target in votes.values() {
        if candidates.contains(target) {
            *tally.entry(*target).or_insert(0) += 1;
        }
    }
    tally
}

/// Ballot of `voter`: the other ready agent with the largest dataset, lowest id on ties.
/// Falls back to a self-vote when no other agent is ready.
pub fn cast_vote(voter: AgentId, ready: &BTreeSet<AgentId>, sizes: &BTreeMap<AgentId, u64>) -> AgentId {
    ready
        .iter()
        .copied()
        .filter(|&id| id != voter)
        .max_by(|a, b| {
            let sa = sizes.get(a).copied().unwrap_or(0);
            let sb = sizes.get(b).copied().unwrap_or(0);
            sa.cmp(&sb).then(b.cmp(a))
        })
        .unwrap_or(voter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(ids: &[AgentId]) -> BTreeSet<AgentId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn singleton_ready() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [SelectStrategy::Votes, SelectStrategy::Attributes, SelectStrategy::Random] {
            let got = select_agents(&set(&[7]), s, 3, &BTreeMap::new(), &BTreeMap::new(), &mut rng).unwrap();
            assert_eq!(got, set(&[7]));
        }
    }

    #[test]
    fn attribute_ties_go_low() {
        let sizes: BTreeMap<_, _> = [(1, 10), (2, 10), (3, 5)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = select_agents(&set(&[1, 2, 3]), SelectStrategy::Attributes, 1, &sizes, &BTreeMap::new(), &mut rng).unwrap();
        assert_eq!(got, set(&[1]));
    }

    #[test]
    fn vote_tally() {
        let votes: BTreeMap<_, _> = [(1, 2), (3, 2), (2, 1)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = select_agents(&set(&[1, 2, 3]), SelectStrategy::Votes, 1, &BTreeMap::new(), &votes, &mut rng).unwrap();
        assert_eq!(got, set(&[2]));
    }

    #[test]
    fn random_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ready = set(&[1, 2, 3, 4, 5]);
        let got = select_agents(&ready, SelectStrategy::Random, 3, &BTreeMap::new(), &BTreeMap::new(), &mut rng).unwrap();
        assert_eq!(got.len(), 3);
        assert!(got.is_subset(&ready));
    }

    #[test]
    fn empty_ready_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_agents(&BTreeSet::new(), SelectStrategy::Random, 1, &BTreeMap::new(), &BTreeMap::new(), &mut rng).is_err());
    }

    #[test]
    fn ballots_skip_self() {
        let sizes: BTreeMap<_, _> = [(0, 50), (1, 30), (2, 30)].into_iter().collect();
        assert_eq!(cast_vote(0, &set(&[0, 1, 2]), &sizes), 1);
        assert_eq!(cast_vote(1, &set(&[0, 1, 2]), &sizes), 0);
        assert_eq!(cast_vote(4, &set(&[4]), &sizes), 4);
    }
}
