//! PUCT search guided by a policy/value estimate.
//!
//! Each simulation descends by `argmax U(s,a)` with
//! `U(s,a) = Q(s,a) + c P(a|s) sqrt(N(s)) / (1 + N(s,a))`, ties broken by the
//! lowest action index. A non-terminal leaf is expanded with the guide's
//! priors and backs up the guide's value; a terminal leaf realizes its
//! pipeline and backs up the actual evaluation `e`. Unvisited edges have
//! `Q = 0`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{Scorer, Status};
use crate::game::{Action, Game, GameState, IllegalAction};
use crate::metafeatures::META_DIM;
use crate::network::{ModelParams, TrainingExample};

/// Supplies priors over the legal actions of a state and a value estimate.
pub trait Guide {
    fn evaluate(&self, game: &Game, state: &GameState, legal: &[Action]) -> (Vec<f64>, f64);
}

/// Uniform priors and value 0.5: what an all-zero network produces.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformGuide;

impl Guide for UniformGuide {
    fn evaluate(&self, _: &Game, _: &GameState, legal: &[Action]) -> (Vec<f64>, f64) {
        let k = legal.len().max(1) as f64;
        (vec![1.0 / k; legal.len()], 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuideError {
    #[error("network expects {expected} actions, game has {got}")]
    Actions { expected: usize, got: usize },
    #[error("network vocabulary has {expected} tokens, game has {got}")]
    Vocabulary { expected: usize, got: usize },
}

type MemoKey = (Vec<u32>, [u64; META_DIM], Vec<u32>);

/// Network priors and value. Outputs are memoized per encoded state and
/// legal set, which is sound because the parameters are immutable.
pub struct NetworkGuide {
    params: Arc<ModelParams>,
    zero: bool,
    memo: Mutex<HashMap<MemoKey, (Vec<f64>, f64)>>,
}

impl NetworkGuide {
    pub fn new(params: Arc<ModelParams>, game: &Game) -> Result<Self, GuideError> {
        let shape = params.shape();
        if shape.actions != game.action_space_size() {
            return Err(GuideError::Actions { expected: shape.actions, got: game.action_space_size() });
        }
        if shape.vocab != game.vocabulary().len() {
            return Err(GuideError::Vocabulary { expected: shape.vocab, got: game.vocabulary().len() });
        }
        let zero = params.data().iter().all(|&x| x == 0.0);
        Ok(NetworkGuide { params, zero, memo: Mutex::new(HashMap::new()) })
    }

    pub fn params(&self) -> &Arc<ModelParams> {
        &self.params
    }
}

impl Guide for NetworkGuide {
    fn evaluate(&self, game: &Game, state: &GameState, legal: &[Action]) -> (Vec<f64>, f64) {
        if self.zero {
            // An all-zero network is exactly uniform with value 0.5.
            return UniformGuide.evaluate(game, state, legal);
        }
        let encoded = game.encode(state).expect("game vocabulary covers its own symbols");
        let idx: Vec<u32> = legal.iter().map(|a| game.action_index(a) as u32).collect();
        let key = (encoded.tokens.clone(), encoded.meta.map(f64::to_bits), idx);
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let out = self
            .params
            .forward_legal(&encoded, &key.2)
            .expect("shapes validated at construction");
        self.memo.lock().expect("memo lock").insert(key, out.clone());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletNoise {
    pub alpha: f64,
    pub epsilon: f64,
}

/// Move temperature: `initial` for the first `initial_moves` moves, then `later`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub initial_moves: usize,
    pub later: f64,
}

impl TemperatureSchedule {
    pub fn constant(tau: f64) -> Self {
        TemperatureSchedule { initial: tau, initial_moves: 0, later: tau }
    }

    pub fn at(&self, move_number: usize) -> f64 {
        if move_number < self.initial_moves {
            self.initial
        } else {
            self.later
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub c: f64,
    pub simulations: usize,
    pub temperature: TemperatureSchedule,
    pub root_noise: Option<DirichletNoise>,
    pub reuse_subtree: bool,
}

impl Default for SearchConfig {
    /// 128 simulations: with unvisited edges valued at 0 and scores near 0.8,
    /// 64 simulations rarely open more than a few children of a 16-way node.
    fn default() -> Self {
        SearchConfig {
            c: 1.41,
            simulations: 128,
            temperature: TemperatureSchedule { initial: 1.0, initial_moves: 2, later: 0.25 },
            root_noise: None,
            reuse_subtree: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("search started from a terminal state")]
    TerminalRoot,
    #[error("simulations must be at least 1")]
    NoSimulations,
    #[error(transparent)]
    Illegal(#[from] IllegalAction),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub action: Action,
    /// Index in the game's action vocabulary.
    pub index: usize,
    pub prior: f64,
    pub n: u32,
    pub w: f64,
    child: Option<usize>,
}

impl Edge {
    /// An unvisited edge with no child yet.
    pub fn new(action: Action, index: usize, prior: f64) -> Self {
        Edge { action, index, prior, n: 0, w: 0.0, child: None }
    }

    pub fn q(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.w / f64::from(self.n)
        }
    }
}

/// `Q + c P sqrt(total_n) / (1 + N)`.
pub fn ucb(edge: &Edge, total_n: u32, c: f64) -> f64 {
    edge.q() + c * edge.prior * f64::from(total_n).sqrt() / (1.0 + f64::from(edge.n))
}

#[derive(Clone, Debug)]
pub struct SearchNode {
    pub state: GameState,
    pub edges: Vec<Edge>,
    pub total_n: u32,
    pub expanded: bool,
    pub terminal: bool,
    terminal_value: Option<f64>,
}

/// Counters describing the shape of the explored tree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub simulations: u64,
    pub expanded_nodes: u64,
    /// Sum of legal-action counts over expanded nodes.
    pub total_actions: u64,
    pub max_depth: u64,
    /// Sum over simulations of the game depth of the leaf reached.
    pub depth_sum: u64,
    pub evaluations: u64,
    pub failures: u64,
}

impl SearchStats {
    pub fn mean_branching(&self) -> f64 {
        if self.expanded_nodes == 0 {
            0.0
        } else {
            self.total_actions as f64 / self.expanded_nodes as f64
        }
    }

    pub fn mean_depth(&self) -> f64 {
        if self.simulations == 0 {
            0.0
        } else {
            self.depth_sum as f64 / self.simulations as f64
        }
    }

    pub fn merge(&mut self, other: &SearchStats) {
        self.simulations += other.simulations;
        self.expanded_nodes += other.expanded_nodes;
        self.total_actions += other.total_actions;
        self.max_depth = self.max_depth.max(other.max_depth);
        self.depth_sum += other.depth_sum;
        self.evaluations += other.evaluations;
        self.failures += other.failures;
    }
}

pub struct SearchTree {
    nodes: Vec<SearchNode>,
    root: usize,
    stats: SearchStats,
}

impl SearchTree {
    /// Creates a tree rooted at `state` and expands the root.
    pub fn new(
        game: &Game,
        guide: &dyn Guide,
        state: GameState,
        noise: Option<DirichletNoise>,
        rng: &mut impl Rng,
    ) -> Result<Self, SearchError> {
        if game.is_terminal(&state) {
            return Err(SearchError::TerminalRoot);
        }
        let mut tree = SearchTree { nodes: Vec::new(), root: 0, stats: SearchStats::default() };
        tree.push_node(game, state);
        tree.expand(game, guide, 0);
        if let Some(noise) = noise {
            tree.add_root_noise(noise, rng);
        }
        Ok(tree)
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[self.root]
    }

    pub fn node(&self, id: usize) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.iter()
    }

    pub fn stats(&self) -> &SearchStats {
        &self.stats
    }

    pub fn child_of(&self, node: usize, edge: usize) -> Option<usize> {
        self.nodes[node].edges[edge].child
    }

    fn push_node(&mut self, game: &Game, state: GameState) -> usize {
        let terminal = game.is_terminal(&state);
        self.nodes.push(SearchNode {
            state,
            edges: Vec::new(),
            total_n: 0,
            expanded: false,
            terminal,
            terminal_value: None,
        });
        self.nodes.len() - 1
    }

    fn expand(&mut self, game: &Game, guide: &dyn Guide, id: usize) -> f64 {
        let legal = game.legal_actions(&self.nodes[id].state);
        let (priors, value) = guide.evaluate(game, &self.nodes[id].state, &legal);
        self.stats.expanded_nodes += 1;
        self.stats.total_actions += legal.len() as u64;
        let node = &mut self.nodes[id];
        node.edges = legal
            .into_iter()
            .zip(priors)
            .map(|(action, prior)| Edge { index: game.action_index(&action), action, prior, n: 0, w: 0.0, child: None })
            .collect();
        node.expanded = true;
        value
    }

    fn add_root_noise(&mut self, noise: DirichletNoise, rng: &mut impl Rng) {
        let root = &mut self.nodes[self.root];
        let Ok(gamma) = Gamma::new(noise.alpha, 1.0) else { return };
        let draws: Vec<f64> = root.edges.iter().map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total <= 0.0 {
            return;
        }
        for (e, d) in root.edges.iter_mut().zip(draws) {
            e.prior = (1.0 - noise.epsilon) * e.prior + noise.epsilon * d / total;
        }
    }

    fn select(&self, id: usize, c: f64) -> usize {
        let node = &self.nodes[id];
        let mut best = 0;
        let mut best_u = f64::NEG_INFINITY;
        // Edges are stored in ascending action index, so strict `>` keeps
        // the lowest index on ties.
        for (i, e) in node.edges.iter().enumerate() {
            let u = ucb(e, node.total_n, c);
            if u > best_u {
                best_u = u;
                best = i;
            }
        }
        best
    }

    fn terminal_value(&mut self, game: &Game, scorer: &mut dyn Scorer, id: usize) -> f64 {
        if let Some(v) = self.nodes[id].terminal_value {
            return v;
        }
        let v = match game.realized_pipeline(&self.nodes[id].state) {
            Some(p) if !p.is_empty() => {
                let r = scorer.score(&p);
                self.stats.evaluations += 1;
                if matches!(r.status, Status::ExecutorError(_)) {
                    self.stats.failures += 1;
                }
                r.score
            }
            _ => 0.0,
        };
        self.nodes[id].terminal_value = Some(v);
        v
    }

    /// Runs one simulation from the root.
    pub fn simulate(&mut self, game: &Game, guide: &dyn Guide, scorer: &mut dyn Scorer, c: f64) {
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut id = self.root;
        let value = loop {
            if self.nodes[id].terminal {
                break self.terminal_value(game, scorer, id);
            }
            if !self.nodes[id].expanded {
                break self.expand(game, guide, id);
            }
            let e = self.select(id, c);
            let child = match self.nodes[id].edges[e].child {
                Some(child) => child,
                None => {
                    let action = self.nodes[id].edges[e].action;
                    let next = game.step(&self.nodes[id].state, &action).expect("edges hold legal actions");
                    let child = self.push_node(game, next);
                    self.nodes[id].edges[e].child = Some(child);
                    child
                }
            };
            path.push((id, e));
            id = child;
        };
        let depth = self.nodes[id].state.steps_taken as u64;
        self.stats.simulations += 1;
        self.stats.depth_sum += depth;
        self.stats.max_depth = self.stats.max_depth.max(depth);
        for (node, e) in path {
            let n = &mut self.nodes[node];
            n.edges[e].n += 1;
            n.edges[e].w += value;
            n.total_n += 1;
        }
    }

    /// Makes the child reached by `edge` the new root, keeping its subtree.
    /// Returns false when that child was never created.
    pub fn advance(&mut self, game: &Game, guide: &dyn Guide, edge: usize) -> bool {
        match self.nodes[self.root].edges[edge].child {
            Some(child) if !self.nodes[child].terminal => {
                self.root = child;
                if !self.nodes[child].expanded {
                    self.expand(game, guide, child);
                }
                true
            }
            _ => false,
        }
    }

    pub fn reset_stats(&mut self) {
        self.stats = SearchStats::default();
    }
}

/// Visit-count policy over the root's legal edges: `N^(1/tau)` normalized,
/// or one-hot on the most visited edge (lowest index on ties) when `tau = 0`.
pub fn search_policy(root: &SearchNode, tau: f64) -> Vec<f64> {
    let counts: Vec<f64> = root.edges.iter().map(|e| f64::from(e.n)).collect();
    visit_policy(&counts, tau)
}

pub fn visit_policy(counts: &[f64], tau: f64) -> Vec<f64> {
    let max = counts.iter().copied().fold(0.0, f64::max);
    if counts.is_empty() {
        return Vec::new();
    }
    if max == 0.0 {
        return vec![1.0 / counts.len() as f64; counts.len()];
    }
    if tau <= 0.0 {
        let best = counts.iter().position(|&n| n == max).expect("max is present");
        let mut out = vec![0.0; counts.len()];
        out[best] = 1.0;
        return out;
    }
    let powered: Vec<f64> = counts.iter().map(|&n| (n / max).powf(1.0 / tau)).collect();
    let total: f64 = powered.iter().sum();
    powered.into_iter().map(|x| x / total).collect()
}

/// Dense `pi` over the whole action vocabulary.
pub fn dense_policy(game: &Game, root: &SearchNode, pi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; game.action_space_size()];
    for (e, &p) in root.edges.iter().zip(pi) {
        out[e.index] = p;
    }
    out
}

/// Runs `config.simulations` simulations on a fresh tree.
pub fn run_search(
    game: &Game,
    guide: &dyn Guide,
    scorer: &mut dyn Scorer,
    state: GameState,
    config: &SearchConfig,
    rng: &mut impl Rng,
) -> Result<SearchTree, SearchError> {
    if config.simulations == 0 {
        return Err(SearchError::NoSimulations);
    }
    let mut tree = SearchTree::new(game, guide, state, config.root_noise, rng)?;
    for _ in 0..config.simulations {
        tree.simulate(game, guide, scorer, config.c);
    }
    Ok(tree)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub state: String,
    pub action: Action,
    pub label: String,
    /// Search probabilities over the legal actions, by action label.
    pub pi: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// `None` when the step cap cut a grammar derivation short.
    pub pipeline: Option<Vec<String>>,
    pub e: f64,
    pub status: Option<Status>,
    pub examples: Vec<TrainingExample>,
    pub moves: Vec<MoveRecord>,
    pub stats: SearchStats,
}

fn sample(pi: &[f64], rng: &mut impl Rng) -> usize {
    let mut x: f64 = rng.random_range(0.0..1.0);
    for (i, &p) in pi.iter().enumerate() {
        if x < p {
            return i;
        }
        x -= p;
    }
    pi.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Plays one self-play episode from `start`: search, record `(state, pi)`,
/// sample a move from `pi`, repeat until terminal, then label every recorded
/// example with the final evaluation `e`.
pub fn run_episode(
    game: &Game,
    guide: &dyn Guide,
    scorer: &mut dyn Scorer,
    start: GameState,
    config: &SearchConfig,
    rng: &mut impl Rng,
) -> Result<Episode, SearchError> {
    if config.simulations == 0 {
        return Err(SearchError::NoSimulations);
    }
    let mut state = start;
    let mut stats = SearchStats::default();
    let mut examples = Vec::new();
    let mut moves = Vec::new();
    let mut reused: Option<SearchTree> = None;

    while !game.is_terminal(&state) {
        let mut tree = match reused.take() {
            Some(t) => t,
            None => SearchTree::new(game, guide, state.clone(), config.root_noise, rng)?,
        };
        for _ in 0..config.simulations {
            tree.simulate(game, guide, scorer, config.c);
        }
        stats.merge(tree.stats());
        tree.reset_stats();

        let tau = config.temperature.at(moves.len());
        let root = tree.root();
        let pi = search_policy(root, tau);
        examples.push(TrainingExample {
            encoded: game.encode(&root.state).expect("game vocabulary covers its own symbols"),
            legal: root.edges.iter().map(|e| e.index as u32).collect(),
            pi: pi.clone(),
            e: 0.0,
        });
        let choice = sample(&pi, rng);
        let action = root.edges[choice].action;
        moves.push(MoveRecord {
            state: game.state_label(&root.state),
            action,
            label: game.action_label(&action),
            pi: root
                .edges
                .iter()
                .zip(&pi)
                .filter(|(_, &p)| p > 0.0)
                .map(|(e, &p)| (game.action_label(&e.action), p))
                .collect(),
        });
        let next = game.step(&state, &action)?;
        if config.reuse_subtree && tree.advance(game, guide, choice) {
            reused = Some(tree);
        }
        state = next;
    }

    let pipeline = game.realized_pipeline(&state).filter(|p| !p.is_empty());
    let (e, status) = match &pipeline {
        Some(p) => {
            let r = scorer.score(p);
            (r.score, Some(r.status))
        }
        None => (0.0, None),
    };
    for ex in &mut examples {
        ex.e = e;
    }
    Ok(Episode { pipeline, e, status, examples, moves, stats })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::evaluator::{EvaluationResult, Evaluator, SurrogateEvaluator, SurrogateSpec};
    use crate::game::GameConfig;
    use crate::grammar::parse_grammar;
    use crate::metafeatures::MetaFeatures;
    use crate::task::TaskSpec;

    fn edge(q: f64, prior: f64, n: u32) -> Edge {
        Edge { action: Action::Finish, index: 0, prior, n, w: q * f64::from(n), child: None }
    }

    #[test]
    fn ucb_hand_values() {
        assert_eq!(ucb(&edge(0.5, 0.25, 3), 16, 1.0), 0.75);
        assert_eq!(ucb(&edge(0.0, 0.25, 0), 0, 1.0), 0.0);
        assert_eq!(ucb(&edge(0.0, 0.9, 0), 0, 1.41), 0.0);
        assert_eq!(ucb(&edge(0.3, 0.5, 2), 9, 0.0), 0.3);
    }

    #[test]
    fn policy_temperatures() {
        assert_eq!(visit_policy(&[2.0, 2.0], 1.0), vec![0.5, 0.5]);
        assert_eq!(visit_policy(&[3.0, 1.0], 0.0), vec![1.0, 0.0]);
        assert_eq!(visit_policy(&[2.0, 2.0], 0.0), vec![1.0, 0.0]);
        let p = visit_policy(&[9.0, 1.0], 0.5);
        assert!((p[0] - 81.0 / 82.0).abs() < 1e-15 && (p[1] - 1.0 / 82.0).abs() < 1e-15);
    }

    struct Fixed(Vec<(String, f64)>);

    impl Evaluator for Fixed {
        fn identity(&self) -> String {
            "fixed".into()
        }
        fn evaluate(&self, pipeline: &[String]) -> EvaluationResult {
            let name = &pipeline[0];
            EvaluationResult::ok(self.0.iter().find(|(n, _)| n == name).map_or(0.0, |(_, v)| *v))
        }
    }

    fn two_arm_game() -> Game {
        let g = Arc::new(parse_grammar("<S> ::= lo | hi").unwrap());
        Game::new(g, GameConfig::default())
    }

    fn start(game: &Game) -> GameState {
        game.initial_state(MetaFeatures::surrogate(1), TaskSpec::classification())
    }

    fn visits_after(sims: usize) -> Vec<u32> {
        let game = two_arm_game();
        let ev = Fixed(vec![("lo".into(), 0.2), ("hi".into(), 0.9)]);
        let config = SearchConfig { c: 1.0, simulations: sims, ..SearchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = run_search(&game, &UniformGuide, &mut &ev, start(&game), &config, &mut rng).unwrap();
        tree.root().edges.iter().map(|e| e.n).collect()
    }

    #[test]
    fn better_arm_gets_more_visits() {
        for sims in [100, 1000] {
            let v = visits_after(sims);
            assert!(v[1] > v[0], "{v:?}");
            assert!(f64::from(v[1]) / sims as f64 > 0.5);
            assert_eq!(v.iter().sum::<u32>() as usize, sims);
        }
    }

    #[test]
    fn root_total_counts_simulations_and_conservation_holds() {
        let g = Arc::new(parse_grammar(
            "<S> ::= <E> | <DC> <E>\n<DC> ::= c1 | c2\n<E> ::= e1 | e2 | e3",
        ).unwrap());
        let game = Game::new(g.clone(), GameConfig::default());
        let ev = SurrogateEvaluator::new(SurrogateSpec::new(4), &g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = SearchConfig { simulations: 37, ..SearchConfig::default() };
        let tree = run_search(&game, &UniformGuide, &mut &ev, start(&game), &config, &mut rng).unwrap();
        assert_eq!(tree.root().total_n, 37);
        for node in tree.nodes() {
            let sum: u32 = node.edges.iter().map(|e| e.n).sum();
            assert_eq!(sum, node.total_n);
            for e in node.edges.iter().filter(|e| e.n > 0) {
                assert!((0.0..=1.0).contains(&e.q()));
            }
        }
        // Visits into a child equal the simulations that passed through it.
        for node in tree.nodes() {
            for e in &node.edges {
                if let Some(c) = e.child {
                    let child = tree.node(c);
                    if !child.terminal && child.expanded {
                        assert_eq!(child.total_n + 1, e.n);
                    }
                }
            }
        }
    }

    #[test]
    fn single_action_gives_one_hot_policy() {
        let g = Arc::new(parse_grammar("<S> ::= <A>\n<A> ::= x").unwrap());
        let game = Game::new(g.clone(), GameConfig::default());
        let ev = SurrogateEvaluator::new(SurrogateSpec::new(4), &g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for sims in [1, 5, 50] {
            let config = SearchConfig { simulations: sims, ..SearchConfig::default() };
            let tree = run_search(&game, &UniformGuide, &mut &ev, start(&game), &config, &mut rng).unwrap();
            assert_eq!(search_policy(tree.root(), 1.0), vec![1.0]);
        }
        let ep = run_episode(&game, &UniformGuide, &mut &ev, start(&game), &SearchConfig::default(), &mut rng).unwrap();
        assert_eq!(ep.pipeline.unwrap(), ["x"]);
        assert_eq!(ep.examples.len(), 2);
        assert!(ep.examples.iter().all(|x| x.e == ep.e && x.pi == vec![1.0]));
    }

    #[test]
    fn failures_back_up_zero() {
        struct Broken;
        impl Evaluator for Broken {
            fn identity(&self) -> String {
                "broken".into()
            }
            fn evaluate(&self, _: &[String]) -> EvaluationResult {
                EvaluationResult::error("down")
            }
        }
        let game = two_arm_game();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = SearchConfig { simulations: 10, ..SearchConfig::default() };
        let tree = run_search(&game, &UniformGuide, &mut &Broken, start(&game), &config, &mut rng).unwrap();
        assert!(tree.root().edges.iter().all(|e| e.w == 0.0));
        assert_eq!(tree.stats().failures, 2);
    }

    #[test]
    fn terminal_root_is_rejected() {
        let game = two_arm_game();
        let done = game.step(&start(&game), &Action::Rule { rule: 0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = run_search(&game, &UniformGuide, &mut &Fixed(vec![]), done, &SearchConfig::default(), &mut rng);
        assert!(matches!(r, Err(SearchError::TerminalRoot)));
    }

    #[test]
    fn zero_network_matches_uniform_guide() {
        use crate::network::{ModelParams, ModelShape};
        let g = Arc::new(parse_grammar("<S> ::= <E> | <DC> <E>\n<DC> ::= c1 | c2\n<E> ::= e1 | e2 | e3").unwrap());
        let game = Game::new(g.clone(), GameConfig::default());
        let shape = ModelShape::new(game.vocabulary().len(), 4, 6, game.action_space_size());
        let net = NetworkGuide::new(Arc::new(ModelParams::zeros(shape)), &game).unwrap();
        let s = start(&game);
        let legal = game.legal_actions(&s);
        assert_eq!(net.evaluate(&game, &s, &legal), UniformGuide.evaluate(&game, &s, &legal));
    }

    #[test]
    fn subtree_reuse_keeps_statistics() {
        let g = Arc::new(parse_grammar("<S> ::= <E> | <DC> <E>\n<DC> ::= c1 | c2\n<E> ::= e1 | e2 | e3").unwrap());
        let game = Game::new(g.clone(), GameConfig::default());
        let ev = SurrogateEvaluator::new(SurrogateSpec::new(4), &g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = SearchConfig { simulations: 20, reuse_subtree: true, ..SearchConfig::default() };
        let ep = run_episode(&game, &UniformGuide, &mut &ev, start(&game), &config, &mut rng).unwrap();
        assert!(ep.pipeline.is_some());
        let mut tree = run_search(&game, &UniformGuide, &mut &ev, start(&game), &config, &mut rng).unwrap();
        let best = (0..tree.root().edges.len()).max_by_key(|&i| tree.root().edges[i].n).unwrap();
        let visits = tree.root().edges[best].n;
        assert!(tree.advance(&game, &UniformGuide, best));
        assert_eq!(tree.root().total_n + 1, visits);
    }
}
