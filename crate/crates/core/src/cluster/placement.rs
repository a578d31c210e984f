use std::collections::BTreeMap;

/// Which node owns each partition; `None` means the partition only lives in
/// storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementMap {
    pub assignment: Vec<Option<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Move {
    pub partition: u32,
    pub from: Option<u32>,
    pub to: Option<u32>,
}

impl PlacementMap {
    pub fn unassigned(partitions: u32) -> Self {
        Self { assignment: vec![None; partitions as usize] }
    }

    pub fn all_on(partitions: u32, node: u32) -> Self {
        Self { assignment: vec![Some(node); partitions as usize] }
    }

    pub fn round_robin(partitions: u32, nodes: u32) -> Self {
        let mut m = Self::unassigned(partitions);
        m.apply(&rebalance(&m, &(0..nodes).collect::<Vec<_>>()));
        m
    }

    pub fn node_of(&self, partition: u32) -> Option<u32> {
        self.assignment.get(partition as usize).copied().flatten()
    }

    pub fn partitions_on(&self, node: u32) -> Vec<u32> {
        (0..self.assignment.len() as u32).filter(|p| self.node_of(*p) == Some(node)).collect()
    }

    pub fn apply(&mut self, moves: &[Move]) {
        for m in moves {
            self.assignment[m.partition as usize] = m.to;
        }
    }
}

/// Moves that spread partitions over `nodes` within one of each other while
/// moving as few as possible. An empty node list unassigns everything.
pub fn rebalance(placement: &PlacementMap, nodes: &[u32]) -> Vec<Move> {
    let p = placement.assignment.len();
    if nodes.is_empty() {
        return (0..p as u32)
            .filter_map(|i| placement.node_of(i).map(|from| Move { partition: i, from: Some(from), to: None }))
            .collect();
    }
    let mut nodes = nodes.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    let (base, extra) = (p / nodes.len(), p % nodes.len());
    let mut current: BTreeMap<u32, usize> = nodes.iter().map(|n| (*n, 0)).collect();
    for n in placement.assignment.iter().flatten() {
        if let Some(c) = current.get_mut(n) {
            *c += 1;
        }
    }
    // the nodes that already hold the most get the larger quotas
    let mut by_load = nodes.clone();
    by_load.sort_by_key(|n| (std::cmp::Reverse(current[n]), *n));
    let quota: BTreeMap<u32, usize> =
        by_load.iter().enumerate().map(|(i, n)| (*n, base + usize::from(i < extra))).collect();

    let mut kept: BTreeMap<u32, usize> = BTreeMap::new();
    let mut homeless = Vec::new();
    for i in 0..p as u32 {
        match placement.node_of(i) {
            Some(n) if quota.contains_key(&n) && kept.get(&n).copied().unwrap_or(0) < quota[&n] => {
                *kept.entry(n).or_insert(0) += 1;
            }
            from => homeless.push((i, from)),
        }
    }
    let mut moves = Vec::new();
    let mut targets = nodes.iter().flat_map(|n| {
        let free = quota[n] - kept.get(n).copied().unwrap_or(0);
        std::iter::repeat_n(*n, free)
    });
    for (partition, from) in homeless {
        let to = targets.next().expect("quotas cover every partition");
        moves.push(Move { partition, from, to: Some(to) });
    }
    moves
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(m: &PlacementMap) -> BTreeMap<Option<u32>, usize> {
        let mut c = BTreeMap::new();
        for n in &m.assignment {
            *c.entry(*n).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn scale_out_move_counts() {
        for (nodes, moved, per) in [(4u32, 24usize, 8usize), (8, 28, 4)] {
            let mut m = PlacementMap::all_on(32, 0);
            let moves = rebalance(&m, &(0..nodes).collect::<Vec<_>>());
            assert_eq!(moves.len(), moved);
            m.apply(&moves);
            assert!(counts(&m).values().all(|c| *c == per));
        }
    }

    #[test]
    fn scale_to_zero() {
        let m = PlacementMap::round_robin(32, 4);
        let moves = rebalance(&m, &[]);
        assert_eq!(moves.len(), 32);
        assert!(moves.iter().all(|mv| mv.to.is_none()));
    }

    #[test]
    fn balanced_is_stable_and_uneven_is_within_one() {
        let m = PlacementMap::round_robin(32, 3);
        assert!(rebalance(&m, &[0, 1, 2]).is_empty());
        let c = counts(&m);
        assert!(c.values().max().unwrap() - c.values().min().unwrap() <= 1);
        // losing node 2 moves only its partitions
        let moves = rebalance(&m, &[0, 1]);
        assert_eq!(moves.len(), m.partitions_on(2).len());
    }
}
