use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::Serialize;

use super::{Phase, Recipe, RecipeError, RecipeRegistry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanEntry {
    pub step: String,
    /// Recipe that first declared the step.
    pub recipe: String,
    pub phase: Phase,
    pub skip: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionPlan {
    pub entries: Vec<PlanEntry>,
}

impl ExecutionPlan {
    pub fn steps(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.step.as_str()).collect()
    }

    pub fn runnable(&self) -> usize {
        self.entries.iter().filter(|e| e.skip.is_none()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct Node {
    step: String,
    recipe: String,
    phase: Phase,
    order: usize,
}

pub fn plan(registry: &RecipeRegistry, recipe: &Recipe, satisfied: &BTreeSet<String>) -> Result<ExecutionPlan, RecipeError> {
    plan_joint(registry, &[recipe], satisfied)
}

/// Plan several recipes as one: shared steps collapse to a single node,
/// other steps stay private to their recipe.
pub fn plan_joint(registry: &RecipeRegistry, recipes: &[&Recipe], satisfied: &BTreeSet<String>) -> Result<ExecutionPlan, RecipeError> {
    let mut nodes: Vec<Node> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let mut edges: Vec<BTreeSet<usize>> = Vec::new();

    for recipe in recipes {
        registry.check(recipe)?;
        let mut local: HashMap<&str, usize> = HashMap::new();
        for (id, phase) in recipe.phased_steps() {
            let shared = registry.step(id).is_some_and(|s| s.shared);
            let owner = if shared { String::new() } else { recipe.name.clone() };
            let n = *index.entry((owner, id.to_string())).or_insert_with(|| {
                nodes.push(Node { step: id.into(), recipe: recipe.name.clone(), phase, order: nodes.len() });
                edges.push(BTreeSet::new());
                nodes.len() - 1
            });
            local.insert(id, n);
        }
        let ids = |list: &[String]| list.iter().map(|s| local[s.as_str()]).collect::<Vec<_>>();
        let init = ids(&recipe.template.init_steps);
        let core = ids(&recipe.core_steps);
        let fin = ids(&recipe.template.finalize_steps);
        for chain in [&init, &fin] {
            for w in chain.windows(2) {
                edges[w[0]].insert(w[1]);
            }
        }
        let phases: Vec<&Vec<usize>> = [&init, &core, &fin].into_iter().filter(|p| !p.is_empty()).collect();
        for pair in phases.windows(2) {
            for &a in pair[0] {
                for &b in pair[1] {
                    edges[a].insert(b);
                }
            }
        }
        for (a, b) in &recipe.constraints {
            edges[local[a.as_str()]].insert(local[b.as_str()]);
        }
    }

    let mut indegree = vec![0usize; nodes.len()];
    for outs in &edges {
        for &b in outs {
            indegree[b] += 1;
        }
    }
    let key = |n: usize| Reverse((nodes[n].order, nodes[n].step.clone()));
    let mut ready: BinaryHeap<(Reverse<(usize, String)>, usize)> =
        (0..nodes.len()).filter(|&n| indegree[n] == 0).map(|n| (key(n), n)).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some((_, n)) = ready.pop() {
        order.push(n);
        for &b in &edges[n] {
            indegree[b] -= 1;
            if indegree[b] == 0 {
                ready.push((key(b), b));
            }
        }
    }
    if order.len() < nodes.len() {
        let remaining: BTreeSet<usize> = (0..nodes.len()).filter(|n| indegree[*n] > 0).collect();
        let cycle = find_cycle(&edges, &remaining);
        return Err(RecipeError::CyclicConstraints(cycle.into_iter().map(|n| nodes[n].step.clone()).collect()));
    }

    let entries = order
        .into_iter()
        .map(|n| {
            let node = &nodes[n];
            PlanEntry {
                step: node.step.clone(),
                recipe: node.recipe.clone(),
                phase: node.phase,
                skip: satisfied.contains(&node.step).then(|| "already satisfied in this session".to_string()),
            }
        })
        .collect();
    Ok(ExecutionPlan { entries })
}

/// A closed walk within `remaining`, first node repeated at the end.
fn find_cycle(edges: &[BTreeSet<usize>], remaining: &BTreeSet<usize>) -> Vec<usize> {
    // every remaining node has a remaining predecessor, so walking
    // predecessors must revisit a node
    let mut preds: HashMap<usize, usize> = HashMap::new();
    for &a in remaining {
        for &b in &edges[a] {
            if remaining.contains(&b) {
                preds.entry(b).or_insert(a);
            }
        }
    }
    let mut walk = vec![*remaining.iter().next().expect("non-empty")];
    loop {
        let cur = *walk.last().unwrap();
        let prev = preds[&cur];
        if let Some(pos) = walk.iter().position(|&n| n == prev) {
            let mut cycle: Vec<usize> = walk[pos..].to_vec();
            cycle.reverse();
            cycle.push(cycle[0]);
            return cycle;
        }
        walk.push(prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipes::{make_template, Step, TaskTemplate};

    fn registry(ids: &[(&str, bool)]) -> RecipeRegistry {
        let mut reg = RecipeRegistry::new();
        for (id, shared) in ids {
            let mut s = Step::new(id, "true");
            s.shared = *shared;
            reg.add_step(s).unwrap();
        }
        reg
    }

    #[test]
    fn empty_recipe_empty_plan() {
        let reg = RecipeRegistry::new();
        let r = Recipe::new("e", TaskTemplate::default(), &[]);
        assert!(plan(&reg, &r, &BTreeSet::new()).unwrap().is_empty());
    }

    #[test]
    fn two_node_cycle_is_named() {
        let reg = registry(&[("a", false), ("b", false)]);
        let mut r = Recipe::new("c", TaskTemplate::default(), &["a", "b"]);
        r.constraints = vec![("a".into(), "b".into()), ("b".into(), "a".into())];
        match plan(&reg, &r, &BTreeSet::new()) {
            Err(RecipeError::CyclicConstraints(cycle)) => {
                assert!(cycle.contains(&"a".to_string()) && cycle.contains(&"b".to_string()));
                assert_eq!(cycle.first(), cycle.last());
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn shared_init_planned_once() {
        let reg = registry(&[("init", true), ("x", false), ("y", false), ("fin", true)]);
        let t = make_template(&["init"], &["fin"]).unwrap();
        let r1 = Recipe::new("r1", t.clone(), &["x"]);
        let r2 = Recipe::new("r2", t, &["y"]);
        let p = plan_joint(&reg, &[&r1, &r2], &BTreeSet::new()).unwrap();
        assert_eq!(p.steps(), vec!["init", "x", "y", "fin"]);
    }

    #[test]
    fn ties_follow_declaration_order() {
        let reg = registry(&[("z", false), ("a", false), ("m", false)]);
        let r = Recipe::new("r", TaskTemplate::default(), &["z", "a", "m"]);
        assert_eq!(plan(&reg, &r, &BTreeSet::new()).unwrap().steps(), vec!["z", "a", "m"]);
    }

    #[test]
    fn satisfied_steps_are_skipped() {
        let reg = registry(&[("init", true), ("x", false)]);
        let r = Recipe::new("r", make_template(&["init"], &[]).unwrap(), &["x"]);
        let p = plan(&reg, &r, &BTreeSet::from(["init".to_string()])).unwrap();
        assert!(p.entries[0].skip.is_some());
        assert_eq!(p.runnable(), 1);
    }
}
