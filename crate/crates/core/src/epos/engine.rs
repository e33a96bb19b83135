use super::{global_cost, select_plan, unfairness, AgentPreferences, EposError, GlobalCostFunction, Moments, PlanSet, TreeTopology};

/// Plans and preferences of one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct EposAgent {
    pub plans: PlanSet,
    pub prefs: AgentPreferences,
}

/// Root-side outcome of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    /// Global cost of the response in force after the iteration.
    pub global_cost: f64,
    /// Global cost of the response proposed in this iteration.
    pub proposed_cost: f64,
    /// Mean local cost of the selected plans in force.
    pub local_cost: f64,
    pub unfairness: f64,
    pub accepted: bool,
}

/// A subtree's aggregate plan and local-cost moments.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Contribution {
    pub response: Vec<f64>,
    pub moments: Moments,
}

impl Contribution {
    pub fn zero(dim: usize) -> Self {
        Contribution { response: vec![0.0; dim], moments: Moments::default() }
    }
}

/// Bottom-up step of one agent: the context is the previous global response
/// minus the agent's previous subtree, plus its children's new subtrees.
/// Children are summed in the given order so every runtime gets identical
/// floating-point results.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bottom_up(
    agent: &EposAgent,
    gcf: &GlobalCostFunction,
    normalize: bool,
    prev_global: &Contribution,
    prev_subtree: &Contribution,
    children: &[&Contribution],
) -> Result<(usize, Contribution), EposError> {
    let d = agent.plans.dim();
    let mut kids = Contribution::zero(d);
    for c in children {
        if c.response.len() != d {
            return Err(EposError::DimensionMismatch { expected: d, got: c.response.len() });
        }
        for (k, v) in kids.response.iter_mut().zip(&c.response) {
            *k += v;
        }
        kids.moments = kids.moments.plus(c.moments);
    }
    if prev_global.response.len() != d || prev_subtree.response.len() != d {
        return Err(EposError::DimensionMismatch { expected: d, got: prev_global.response.len() });
    }
    let context: Vec<f64> = (0..d).map(|k| (prev_global.response[k] - prev_subtree.response[k]) + kids.response[k]).collect();
    let context_m = prev_global.moments.minus(prev_subtree.moments).plus(kids.moments);
    let j = select_plan(&agent.plans, agent.prefs, gcf, &context, context_m, normalize)?;
    let plan = agent.plans.get(j);
    for (k, v) in kids.response.iter_mut().zip(&plan.values) {
        *k += v;
    }
    kids.moments = kids.moments.plus(Moments::of(plan.local_cost));
    Ok((j, kids))
}

/// Root decision: accept unless the global cost rose above the last
/// accepted one.
pub(crate) fn accept(gcf: &GlobalCostFunction, proposed: &[f64], last_cost: Option<f64>) -> Result<(bool, f64), EposError> {
    let cost = global_cost(gcf, proposed)?;
    Ok((last_cost.is_none_or(|c| cost <= c), cost))
}

pub(crate) fn record(t: usize, gcf: &GlobalCostFunction, global: &Contribution, proposed_cost: f64, accepted: bool) -> Result<IterationRecord, EposError> {
    Ok(IterationRecord {
        t,
        global_cost: global_cost(gcf, &global.response)?,
        proposed_cost,
        local_cost: global.moments.mean(),
        unfairness: if global.moments.count == 0 { 0.0 } else { unfairness(global.moments.sum, global.moments.sumsq, global.moments.count)? },
        accepted,
    })
}

/// In-process state of a run over agents indexed `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    /// Last completed iteration (0 before the first).
    pub t: usize,
    /// Final iteration.
    pub f: usize,
    pub global_response: Vec<f64>,
    pub global_moments: Moments,
    pub subtree_response: Vec<Vec<f64>>,
    pub subtree_moments: Vec<Moments>,
    pub selected: Vec<Option<usize>>,
    pub history: Vec<IterationRecord>,
}

impl IterationState {
    pub fn new(n: usize, dim: usize, f: usize) -> Self {
        IterationState {
            t: 0,
            f,
            global_response: vec![0.0; dim],
            global_moments: Moments::default(),
            subtree_response: vec![vec![0.0; dim]; n],
            subtree_moments: vec![Moments::default(); n],
            selected: vec![None; n],
            history: Vec::new(),
        }
    }

    fn global(&self) -> Contribution {
        Contribution { response: self.global_response.clone(), moments: self.global_moments }
    }

    fn subtree(&self, u: usize) -> Contribution {
        Contribution { response: self.subtree_response[u].clone(), moments: self.subtree_moments[u] }
    }

    pub fn last_cost(&self) -> Option<f64> {
        self.history.last().map(|r| r.global_cost)
    }
}

/// Runs one bottom-up and top-down pass. On rejection every agent keeps its
/// previous selection and subtree aggregate.
pub fn run_iteration(state: &mut IterationState, topology: &TreeTopology<usize>, agents: &[EposAgent], gcf: &GlobalCostFunction, normalize: bool) -> Result<(), EposError> {
    if state.t >= state.f {
        return Err(EposError::Finished { t: state.t + 1, f: state.f });
    }
    topology.validate()?;
    if topology.len() != agents.len() || (0..agents.len()).any(|u| !topology.contains(&u)) {
        return Err(EposError::Disconnected(format!("topology covers {} of {} agents", topology.len(), agents.len())));
    }
    let n = agents.len();
    let prev_global = state.global();
    let mut fresh: Vec<Option<Contribution>> = vec![None; n];
    let mut picks = vec![0usize; n];
    for &u in topology.leaves_to_root() {
        let kids: Vec<&Contribution> = topology.children(&u).iter().map(|c| fresh[*c].as_ref().expect("children precede parents")).collect();
        let (j, c) = bottom_up(&agents[u], gcf, normalize, &prev_global, &state.subtree(u), &kids)?;
        picks[u] = j;
        fresh[u] = Some(c);
    }
    let root = *topology.root();
    let proposed = fresh[root].clone().expect("root computed");
    let (accepted, cost) = accept(gcf, &proposed.response, state.last_cost())?;
    state.t += 1;
    if accepted {
        for (u, c) in fresh.into_iter().enumerate() {
            let c = c.expect("every agent computed");
            state.subtree_response[u] = c.response;
            state.subtree_moments[u] = c.moments;
            state.selected[u] = Some(picks[u]);
        }
        state.global_response = proposed.response;
        state.global_moments = proposed.moments;
    }
    let rec = record(state.t, gcf, &state.global(), cost, accepted)?;
    state.history.push(rec);
    Ok(())
}

/// Selected plan index of every agent once the final iteration completed.
pub fn finalize(state: &IterationState) -> Result<Vec<usize>, EposError> {
    if state.t < state.f || state.f == 0 {
        return Err(EposError::NotFinished { t: state.t, f: state.f });
    }
    Ok(state.selected.iter().map(|s| s.expect("first iteration always accepted")).collect())
}

/// Builds a tree with `seed` and runs all `f` iterations.
pub fn run_to_completion(agents: &[EposAgent], gcf: &GlobalCostFunction, f: usize, seed: u64, normalize: bool) -> Result<IterationState, EposError> {
    let ids: Vec<usize> = (0..agents.len()).collect();
    let topology = super::build_tree(&ids, seed)?;
    let dim = agents.first().ok_or(EposError::NoAgents)?.plans.dim();
    let mut state = IterationState::new(agents.len(), dim, f);
    while state.t < f {
        run_iteration(&mut state, &topology, agents, gcf, normalize)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::super::{build_tree, Plan};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_agents(n: usize, plans: usize, d: usize, prefs: AgentPreferences, seed: u64) -> Vec<EposAgent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| EposAgent {
                plans: PlanSet::new((0..plans).map(|_| Plan::new((0..d).map(|_| rng.random_range(0.0..5.0)).collect(), rng.random_range(0.0..1.0)).unwrap()).collect())
                    .unwrap(),
                prefs,
            })
            .collect()
    }

    fn sum_selected(agents: &[EposAgent], state: &IterationState) -> Vec<f64> {
        let d = agents[0].plans.dim();
        let mut total = vec![0.0; d];
        for (a, s) in agents.iter().zip(&state.selected) {
            for (t, v) in total.iter_mut().zip(&a.plans.get(s.unwrap()).values) {
                *t += v;
            }
        }
        total
    }

    #[test]
    fn single_agent_first_iteration() {
        let agents = random_agents(1, 3, 4, AgentPreferences::default(), 1);
        let tree = build_tree(&[0usize], 0).unwrap();
        let mut st = IterationState::new(1, 4, 5);
        run_iteration(&mut st, &tree, &agents, &GlobalCostFunction::MinVar, false).unwrap();
        let j = st.selected[0].unwrap();
        assert_eq!(st.global_response, agents[0].plans.get(j).values);
    }

    #[test]
    fn finalize_rejects_early_and_is_idempotent() {
        let agents = random_agents(5, 3, 4, AgentPreferences::default(), 2);
        let tree = build_tree(&(0..5).collect::<Vec<_>>(), 0).unwrap();
        let mut st = IterationState::new(5, 4, 3);
        assert!(finalize(&st).is_err());
        run_iteration(&mut st, &tree, &agents, &GlobalCostFunction::MinVar, false).unwrap();
        assert_eq!(finalize(&st), Err(EposError::NotFinished { t: 1, f: 3 }));
        while st.t < 3 {
            run_iteration(&mut st, &tree, &agents, &GlobalCostFunction::MinVar, false).unwrap();
        }
        let a = finalize(&st).unwrap();
        assert_eq!(a, finalize(&st).unwrap());
        assert!(a.iter().enumerate().all(|(u, &j)| j < agents[u].plans.len()));
        assert!(matches!(run_iteration(&mut st, &tree, &agents, &GlobalCostFunction::MinVar, false), Err(EposError::Finished { .. })));
    }

    #[test]
    fn partial_topology_rejected() {
        let agents = random_agents(3, 2, 2, AgentPreferences::default(), 3);
        let tree = build_tree(&[0usize, 1], 0).unwrap();
        let mut st = IterationState::new(3, 2, 2);
        assert!(matches!(run_iteration(&mut st, &tree, &agents, &GlobalCostFunction::MinVar, false), Err(EposError::Disconnected(_))));
    }

    proptest! {
        #[test]
        fn root_response_is_sum_of_selections(n in 1usize..20, seed in any::<u64>(), a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let agents = random_agents(n, 3, 4, AgentPreferences::new(a, b).unwrap(), seed);
            let tree = build_tree(&(0..n).collect::<Vec<_>>(), seed).unwrap();
            let mut st = IterationState::new(n, 4, 10);
            while st.t < 10 {
                run_iteration(&mut st, &tree, &agents, &GlobalCostFunction::MinVar, false).unwrap();
                let total = sum_selected(&agents, &st);
                for (x, y) in total.iter().zip(&st.global_response) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn altruists_never_increase_cost(n in 1usize..20, seed in any::<u64>()) {
            let agents = random_agents(n, 4, 6, AgentPreferences::default(), seed);
            let st = run_to_completion(&agents, &GlobalCostFunction::MinVar, 15, seed, false).unwrap();
            for w in st.history.windows(2) {
                prop_assert!(w[1].global_cost <= w[0].global_cost);
            }
        }

        #[test]
        fn selfish_agents_stick_to_local_argmin(n in 1usize..15, seed in any::<u64>()) {
            let agents = random_agents(n, 4, 3, AgentPreferences::new(0.0, 1.0).unwrap(), seed);
            let st = run_to_completion(&agents, &GlobalCostFunction::MinVar, 5, seed, false).unwrap();
            for (a, s) in agents.iter().zip(finalize(&st).unwrap()) {
                prop_assert_eq!(s, a.plans.local_argmin());
            }
        }

        #[test]
        fn fixed_seed_is_deterministic(n in 1usize..15, seed in any::<u64>()) {
            let agents = random_agents(n, 3, 3, AgentPreferences::new(0.2, 0.3).unwrap(), seed);
            let a = run_to_completion(&agents, &GlobalCostFunction::MinVar, 8, seed, true).unwrap();
            let b = run_to_completion(&agents, &GlobalCostFunction::MinVar, 8, seed, true).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
