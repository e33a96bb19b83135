use std::collections::BTreeMap;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EposError;

/// Balanced binary tree over agent identifiers.
///
/// Agents are laid out in heap order over a seed-shuffled list: the agent
/// at position `i` has children at `2i+1` and `2i+2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology<T: Ord + Clone> {
    order: Vec<T>,
    parent: BTreeMap<T, Option<T>>,
    children: BTreeMap<T, Vec<T>>,
}

pub fn build_tree<T: Ord + Clone + Hash>(agent_ids: &[T], seed: u64) -> Result<TreeTopology<T>, EposError> {
    if agent_ids.is_empty() {
        return Err(EposError::NoAgents);
    }
    let mut order: Vec<T> = agent_ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != agent_ids.len() {
        return Err(EposError::Disconnected("duplicate agent ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut parent = BTreeMap::new();
    let mut children: BTreeMap<T, Vec<T>> = BTreeMap::new();
    for (i, id) in order.iter().enumerate() {
        parent.insert(id.clone(), if i == 0 { None } else { Some(order[(i - 1) / 2].clone()) });
        let kids = [2 * i + 1, 2 * i + 2].iter().filter(|&&c| c < order.len()).map(|&c| order[c].clone()).collect();
        children.insert(id.clone(), kids);
    }
    Ok(TreeTopology { order, parent, children })
}

impl<T: Ord + Clone> TreeTopology<T> {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn root(&self) -> &T {
        &self.order[0]
    }

    pub fn contains(&self, id: &T) -> bool {
        self.parent.contains_key(id)
    }

    pub fn parent(&self, id: &T) -> Option<&T> {
        self.parent.get(id).and_then(|p| p.as_ref())
    }

    pub fn children(&self, id: &T) -> &[T] {
        self.children.get(id).map(|c| c.as_slice()).unwrap_or(&[])
    }

    pub fn is_leaf(&self, id: &T) -> bool {
        self.children(id).is_empty()
    }

    /// Agents in heap (breadth-first) order, root first.
    pub fn order(&self) -> &[T] {
        &self.order
    }

    /// Children always precede their parent.
    pub fn leaves_to_root(&self) -> impl Iterator<Item = &T> {
        self.order.iter().rev()
    }

    /// Edges from the root to the deepest agent.
    pub fn depth(&self) -> usize {
        (usize::BITS - 1 - self.order.len().leading_zeros()) as usize
    }

    /// Checks single root, parent/child agreement, acyclicity and reach.
    pub fn validate(&self) -> Result<(), EposError> {
        let roots: Vec<&T> = self.parent.iter().filter(|(_, p)| p.is_none()).map(|(k, _)| k).collect();
        if roots.len() != 1 {
            return Err(EposError::Disconnected(format!("{} roots", roots.len())));
        }
        for (child, p) in &self.parent {
            if let Some(p) = p {
                if !self.children(p).contains(child) {
                    return Err(EposError::Disconnected("parent and child maps disagree".into()));
                }
            }
        }
        let mut seen = 0usize;
        let mut stack = vec![roots[0].clone()];
        while let Some(n) = stack.pop() {
            seen += 1;
            if seen > self.parent.len() {
                return Err(EposError::Disconnected("cycle".into()));
            }
            if self.children(&n).len() > 2 {
                return Err(EposError::Disconnected("more than two children".into()));
            }
            stack.extend(self.children(&n).iter().cloned());
        }
        if seen != self.parent.len() {
            return Err(EposError::Disconnected(format!("{} of {} agents reachable", seen, self.parent.len())));
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn from_parts(order: Vec<T>, parent: BTreeMap<T, Option<T>>, children: BTreeMap<T, Vec<T>>) -> Self {
        TreeTopology { order, parent, children }
    }
}
