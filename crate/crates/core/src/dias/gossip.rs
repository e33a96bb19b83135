use std::collections::BTreeMap;

use crate::messaging::NetworkAddress;

/// Partial membership view maintained by the peer sampling protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerView {
    entries: Vec<(NetworkAddress, u32)>,
    capacity: usize,
}

impl PeerView {
    pub const DEFAULT_SIZE: usize = 10;

    pub fn new(capacity: usize) -> Self {
        PeerView { entries: Vec::new(), capacity: capacity.max(1) }
    }

    /// View seeded with bootstrap contacts at age 0, excluding `me`.
    pub fn seeded(capacity: usize, me: &NetworkAddress, contacts: &[NetworkAddress]) -> Self {
        let mut v = PeerView::new(capacity);
        v.merge(me, contacts.iter().map(|a| (a.clone(), 0)).collect());
        v
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[(NetworkAddress, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, addr: &NetworkAddress) -> bool {
        self.entries.iter().any(|(a, _)| a == addr)
    }

    pub fn addresses(&self) -> impl Iterator<Item = &NetworkAddress> {
        self.entries.iter().map(|(a, _)| a)
    }

    pub fn age_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.1 = e.1.saturating_add(1);
        }
    }

    /// Entry with the highest age (first in view order on ties).
    pub fn oldest(&self) -> Option<&NetworkAddress> {
        let mut best: Option<&(NetworkAddress, u32)> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.1 > b.1) {
                best = Some(e);
            }
        }
        best.map(|e| &e.0)
    }

    /// The half of the view (rounded up) with the highest ages, plus a fresh
    /// entry for `me`. `skip` (the partner) is left out.
    pub fn outgoing(&self, me: &NetworkAddress, skip: Option<&NetworkAddress>) -> Vec<(NetworkAddress, u32)> {
        let mut sorted: Vec<&(NetworkAddress, u32)> = self.entries.iter().filter(|(a, _)| Some(a) != skip).collect();
        sorted.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        let mut out = vec![(me.clone(), 0)];
        out.extend(sorted.into_iter().take(self.entries.len().div_ceil(2)).cloned());
        out
    }

    /// Merges received entries: drops `me`, keeps each address once with its
    /// lowest age, then keeps the `capacity` freshest. Returns the
    /// addresses that were not in the view before.
    pub fn merge(&mut self, me: &NetworkAddress, received: Vec<(NetworkAddress, u32)>) -> Vec<NetworkAddress> {
        let before: Vec<NetworkAddress> = self.entries.iter().map(|(a, _)| a.clone()).collect();
        let mut best: BTreeMap<NetworkAddress, u32> = BTreeMap::new();
        for (a, age) in self.entries.drain(..).chain(received) {
            if &a == me {
                continue;
            }
            best.entry(a).and_modify(|x| *x = (*x).min(age)).or_insert(age);
        }
        let mut all: Vec<(NetworkAddress, u32)> = best.into_iter().collect();
        all.sort_by(|x, y| x.1.cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
        all.truncate(self.capacity);
        self.entries = all;
        self.entries.iter().filter(|(a, _)| !before.contains(a)).map(|(a, _)| a.clone()).collect()
    }

    pub fn remove(&mut self, addr: &NetworkAddress) -> bool {
        let n = self.entries.len();
        self.entries.retain(|(a, _)| a != addr);
        n != self.entries.len()
    }
}

/// One push-pull exchange between `a` and its oldest contact `b`: both views
/// age, each side sends its outgoing half and merges what it receives.
/// Returns false (no-op) when `a` has nobody to talk to.
pub fn gossip_round(a: &mut PeerView, a_addr: &NetworkAddress, b: &mut PeerView, b_addr: &NetworkAddress) -> bool {
    if a.oldest() != Some(b_addr) {
        return false;
    }
    a.age_all();
    b.age_all();
    let to_b = a.outgoing(a_addr, Some(b_addr));
    let to_a = b.outgoing(b_addr, Some(a_addr));
    b.merge(b_addr, to_b);
    a.merge(a_addr, to_a);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn addr(i: usize) -> NetworkAddress {
        NetworkAddress::from_raw(format!("sim:{i}"))
    }

    #[test]
    fn duplicates_keep_min_age() {
        let me = addr(0);
        let mut v = PeerView::new(4);
        v.merge(&me, vec![(addr(1), 5), (addr(2), 1)]);
        v.merge(&me, vec![(addr(1), 2), (me.clone(), 0)]);
        assert_eq!(v.entries(), &[(addr(2), 1), (addr(1), 2)]);
    }

    #[test]
    fn empty_view_is_noop() {
        let mut a = PeerView::new(3);
        let mut b = PeerView::new(3);
        assert!(!gossip_round(&mut a, &addr(0), &mut b, &addr(1)));
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn every_agent_becomes_known() {
        let n = 20;
        let mut views: Vec<PeerView> = (0..n).map(|i| PeerView::seeded(10, &addr(i), &[addr((i + 1) % n)])).collect();
        for _ in 0..30 {
            for i in 0..n {
                let Some(p) = views[i].oldest().cloned() else { continue };
                let j: usize = p.as_str()[4..].parse().unwrap();
                let (x, y) = if i < j {
                    let (l, r) = views.split_at_mut(j);
                    (&mut l[i], &mut r[0])
                } else {
                    let (l, r) = views.split_at_mut(i);
                    (&mut r[0], &mut l[j])
                };
                gossip_round(x, &addr(i), y, &addr(j));
            }
        }
        for k in 0..n {
            assert!((0..n).any(|i| i != k && views[i].contains(&addr(k))), "agent {k} unknown");
        }
    }

    proptest! {
        #[test]
        fn views_stay_bounded(cap in 1usize..12, a in proptest::collection::vec((0usize..40, 0u32..9), 0..30), b in proptest::collection::vec((0usize..40, 0u32..9), 0..30)) {
            let me = addr(100);
            let mut v = PeerView::new(cap);
            v.merge(&me, a.into_iter().map(|(i, g)| (addr(i), g)).collect());
            v.merge(&me, b.into_iter().map(|(i, g)| (addr(i), g)).collect());
            prop_assert!(v.len() <= cap);
            let mut seen: Vec<_> = v.addresses().collect();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), v.len());
            prop_assert!(!v.contains(&me));
        }
    }
}
