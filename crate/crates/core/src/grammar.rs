//! Context-free pipeline grammars and leftmost derivations.
//!
//! A grammar file holds one rule set per line:
//!
//! ```text
//! # comment
//! <S>  ::= <E> | <DC> <E>
//! <DC> ::= SkImputer | MissingIndicator
//! <E>  ::= GaussianNB | LinearSVC
//! ```
//!
//! Nonterminals are wrapped in `<>`, terminals are bare identifiers over
//! `[A-Za-z0-9_.-]`. The lhs of the first rule is the start symbol. Rule ids
//! are positional in file order and index the policy head of the network, so
//! reordering a grammar file changes the action vocabulary.

use std::collections::{HashMap, HashSet};
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type RuleId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Terminal(usize),
    Nonterminal(usize),
}

impl Symbol {
    pub fn is_terminal(self) -> bool {
        matches!(self, Symbol::Terminal(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductionRule {
    pub id: RuleId,
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
}

/// Position of a primitive inside a linear pipeline.
///
/// Terminals produced directly by `<DC>` (or `<DataCleaning>`) are cleaners,
/// terminals produced by `<DT>` (or `<DataTransformation>`) are transforms,
/// everything else is an estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cleaner,
    Transform,
    Estimator,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: invalid symbol `{token}`")]
    InvalidSymbol { line: usize, token: String },
    #[error("line {line}: empty alternative in rule for <{lhs}>")]
    EmptyAlternative { line: usize, lhs: String },
    #[error("line {line}: duplicate rule <{lhs}> ::= {rhs}")]
    DuplicateRule { line: usize, lhs: String, rhs: String },
    #[error("line {line}: nonterminal <{name}> has no rules")]
    NoRules { line: usize, name: String },
    #[error("line {line}: `{name}` is used both as a terminal and as a nonterminal")]
    NamespaceClash { line: usize, name: String },
    #[error("line {line}: nonterminal <{name}> derives no terminal string")]
    Unproductive { line: usize, name: String },
    #[error("grammar has no rules")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("rule {rule} (<{rule_lhs}>) is not applicable: leftmost nonterminal is {found}")]
pub struct NotApplicable {
    pub rule: RuleId,
    pub rule_lhs: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("enumeration exceeded {limit} pipelines")]
pub struct EnumerationOverflow {
    pub limit: usize,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    terminals: Vec<String>,
    nonterminals: Vec<String>,
    rules: Vec<ProductionRule>,
    start: usize,
    by_lhs: Vec<Vec<RuleId>>,
    min_yield: Vec<usize>,
    roles: Vec<Role>,
}

impl PartialEq for Grammar {
    fn eq(&self, other: &Self) -> bool {
        self.terminals == other.terminals
            && self.nonterminals == other.nonterminals
            && self.rules == other.rules
            && self.start == other.start
    }
}

impl Eq for Grammar {}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn nonterminal_name(token: &str) -> Option<&str> {
    token.strip_prefix('<')?.strip_suffix('>')
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
    first_line: Vec<usize>,
}

impl Interner {
    fn intern(&mut self, name: &str, line: usize) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.first_line.push(line);
        i
    }
}

pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    let mut terms = Interner::default();
    let mut nts = Interner::default();
    let mut rules: Vec<ProductionRule> = Vec::new();
    let mut seen: HashSet<(usize, Vec<Symbol>)> = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (lhs_tok, rhs_text) = content.split_once("::=").ok_or(GrammarError::Syntax {
            line,
            message: "expected `<LHS> ::= alternatives`".into(),
        })?;
        let lhs_tok = lhs_tok.trim();
        let lhs_name = nonterminal_name(lhs_tok)
            .filter(|n| valid_name(n))
            .ok_or_else(|| GrammarError::Syntax {
                line,
                message: format!("left-hand side `{lhs_tok}` is not a nonterminal"),
            })?;
        let lhs = nts.intern(lhs_name, line);

        for alt in rhs_text.split('|') {
            let mut rhs = Vec::new();
            for token in alt.split_whitespace() {
                let sym = if let Some(name) = nonterminal_name(token) {
                    if !valid_name(name) {
                        return Err(GrammarError::InvalidSymbol { line, token: token.into() });
                    }
                    Symbol::Nonterminal(nts.intern(name, line))
                } else if valid_name(token) {
                    Symbol::Terminal(terms.intern(token, line))
                } else {
                    return Err(GrammarError::InvalidSymbol { line, token: token.into() });
                };
                rhs.push(sym);
            }
            if rhs.is_empty() {
                return Err(GrammarError::EmptyAlternative { line, lhs: lhs_name.into() });
            }
            if !seen.insert((lhs, rhs.clone())) {
                let rhs = alt.split_whitespace().collect::<Vec<_>>().join(" ");
                return Err(GrammarError::DuplicateRule { line, lhs: lhs_name.into(), rhs });
            }
            rules.push(ProductionRule { id: rules.len(), lhs, rhs });
        }
    }

    if rules.is_empty() {
        return Err(GrammarError::Empty);
    }
    for (name, &i) in &terms.index {
        if nts.index.contains_key(name) {
            let line = terms.first_line[i].max(nts.first_line[nts.index[name]]);
            return Err(GrammarError::NamespaceClash { line, name: name.clone() });
        }
    }

    Grammar::from_parts(terms.names, nts.names, rules, 0).map_err(|e| match e {
        // Attach the line where the offending nonterminal first appeared.
        GrammarError::NoRules { name, .. } => {
            let line = nts.first_line[nts.index[&name]];
            GrammarError::NoRules { line, name }
        }
        GrammarError::Unproductive { name, .. } => {
            let line = nts.first_line[nts.index[&name]];
            GrammarError::Unproductive { line, name }
        }
        other => other,
    })
}

impl Grammar {
    fn from_parts(
        terminals: Vec<String>,
        nonterminals: Vec<String>,
        rules: Vec<ProductionRule>,
        start: usize,
    ) -> Result<Self, GrammarError> {
        let mut by_lhs = vec![Vec::new(); nonterminals.len()];
        for r in &rules {
            by_lhs[r.lhs].push(r.id);
        }
        if let Some(nt) = by_lhs.iter().position(Vec::is_empty) {
            return Err(GrammarError::NoRules { line: 0, name: nonterminals[nt].clone() });
        }

        // Least number of terminals each nonterminal can derive (fixpoint).
        let mut min_yield = vec![usize::MAX; nonterminals.len()];
        loop {
            let mut changed = false;
            for r in &rules {
                let mut total = 0usize;
                for s in &r.rhs {
                    let y = match *s {
                        Symbol::Terminal(_) => 1,
                        Symbol::Nonterminal(n) => min_yield[n],
                    };
                    total = total.saturating_add(y);
                }
                if total < min_yield[r.lhs] {
                    min_yield[r.lhs] = total;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(nt) = min_yield.iter().position(|&y| y == usize::MAX) {
            return Err(GrammarError::Unproductive { line: 0, name: nonterminals[nt].clone() });
        }

        let mut roles = vec![None; terminals.len()];
        for r in &rules {
            let role = match nonterminals[r.lhs].as_str() {
                "DC" | "DataCleaning" => Role::Cleaner,
                "DT" | "DataTransformation" => Role::Transform,
                _ => Role::Estimator,
            };
            for s in &r.rhs {
                if let Symbol::Terminal(t) = *s {
                    roles[t].get_or_insert(role);
                }
            }
        }
        let roles = roles.into_iter().map(|r| r.unwrap_or(Role::Estimator)).collect();

        Ok(Grammar { terminals, nonterminals, rules, start, by_lhs, min_yield, roles })
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn rules(&self) -> &[ProductionRule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> &ProductionRule {
        &self.rules[id]
    }

    pub fn start(&self) -> Symbol {
        Symbol::Nonterminal(self.start)
    }

    pub fn rules_for(&self, nonterminal: usize) -> &[RuleId] {
        &self.by_lhs[nonterminal]
    }

    pub fn role(&self, terminal: usize) -> Role {
        self.roles[terminal]
    }

    pub fn terminal_index(&self, name: &str) -> Option<usize> {
        self.terminals.iter().position(|t| t == name)
    }

    /// Least number of terminals the symbol can derive.
    pub fn min_yield(&self, s: Symbol) -> usize {
        match s {
            Symbol::Terminal(_) => 1,
            Symbol::Nonterminal(n) => self.min_yield[n],
        }
    }

    pub fn symbol_name(&self, s: Symbol) -> String {
        match s {
            Symbol::Terminal(t) => self.terminals[t].clone(),
            Symbol::Nonterminal(n) => format!("<{}>", self.nonterminals[n]),
        }
    }

    pub fn rule_label(&self, id: RuleId) -> String {
        let r = &self.rules[id];
        let rhs: Vec<String> = r.rhs.iter().map(|&s| self.symbol_name(s)).collect();
        format!("<{}> ::= {}", self.nonterminals[r.lhs], rhs.join(" "))
    }

    /// Hex SHA-256 of the canonical serialization. Grammars that are
    /// structurally equal share a fingerprint regardless of comments or
    /// whitespace in the source file.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rules applicable to the leftmost nonterminal of `d`, in grammar order.
    pub fn applicable_rules(&self, d: &Derivation) -> &[RuleId] {
        match d.leftmost_nonterminal() {
            Some((_, nt)) => &self.by_lhs[nt],
            None => &[],
        }
    }

    pub fn apply_rule(&self, d: &Derivation, rule: RuleId) -> Result<Derivation, NotApplicable> {
        let r = self.rules.get(rule);
        let lhs_name = r
            .map(|r| self.nonterminals[r.lhs].clone())
            .unwrap_or_else(|| "?".into());
        match (d.leftmost_nonterminal(), r) {
            (Some((pos, nt)), Some(r)) if r.lhs == nt => {
                let mut symbols = Vec::with_capacity(d.symbols.len() + r.rhs.len() - 1);
                symbols.extend_from_slice(&d.symbols[..pos]);
                symbols.extend_from_slice(&r.rhs);
                symbols.extend_from_slice(&d.symbols[pos + 1..]);
                let mut applied = d.applied.clone();
                applied.push(rule);
                Ok(Derivation { symbols, applied })
            }
            (found, _) => Err(NotApplicable {
                rule,
                rule_lhs: lhs_name,
                found: found
                    .map(|(_, nt)| format!("<{}>", self.nonterminals[nt]))
                    .unwrap_or_else(|| "none (derivation is complete)".into()),
            }),
        }
    }

    /// Replays a rule sequence from the start symbol.
    pub fn replay(&self, applied: &[RuleId]) -> Result<Derivation, NotApplicable> {
        applied
            .iter()
            .try_fold(Derivation::start(self), |d, &r| self.apply_rule(&d, r))
    }

    /// Upper bound on leftmost derivation length for a string of at most
    /// `max_terminals` terminals; bounds chains of unit productions.
    pub fn max_derivation_steps(&self, max_terminals: usize) -> usize {
        2 * max_terminals.max(1) * (self.nonterminals.len() + 1)
    }

    /// Complete leftmost derivations whose terminal count is at most
    /// `max_terminals`, in lexicographic order of their rule-id sequences.
    pub fn enumerate_derivations(
        &self,
        max_terminals: usize,
        limit: usize,
    ) -> Result<Vec<Derivation>, EnumerationOverflow> {
        let mut out = Vec::new();
        let max_steps = self.max_derivation_steps(max_terminals);
        self.enumerate_from(&Derivation::start(self), max_terminals, max_steps, limit, &mut out)?;
        Ok(out)
    }

    fn enumerate_from(
        &self,
        d: &Derivation,
        max_terminals: usize,
        max_steps: usize,
        limit: usize,
        out: &mut Vec<Derivation>,
    ) -> Result<(), EnumerationOverflow> {
        if d.is_complete() {
            if out.len() >= limit {
                return Err(EnumerationOverflow { limit });
            }
            out.push(d.clone());
            return Ok(());
        }
        if d.applied.len() >= max_steps {
            return Ok(());
        }
        for &r in self.applicable_rules(d) {
            let next = self.apply_rule(d, r).expect("applicable rule");
            if self.min_terminals(&next.symbols) <= max_terminals {
                self.enumerate_from(&next, max_terminals, max_steps, limit, out)?;
            }
        }
        Ok(())
    }

    /// Least number of terminals a sentential form can still derive.
    pub fn min_terminals(&self, symbols: &[Symbol]) -> usize {
        symbols.iter().map(|&s| self.min_yield(s)).sum()
    }

    /// Distinct terminal strings of the capped language, as terminal indices.
    pub fn enumerate_pipelines_capped(
        &self,
        max_terminals: usize,
        limit: usize,
    ) -> Result<Vec<Vec<usize>>, EnumerationOverflow> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for d in self.enumerate_derivations(max_terminals, limit)? {
            let p = d.terminal_indices();
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        Ok(out)
    }

    pub fn enumerate_pipelines(&self, max_terminals: usize) -> Vec<Vec<usize>> {
        self.enumerate_pipelines_capped(max_terminals, usize::MAX)
            .expect("unbounded enumeration")
    }

    /// Membership test for a terminal string (memoized recursive descent).
    pub fn recognizes(&self, pipeline: &[usize]) -> bool {
        if pipeline.is_empty() {
            return false;
        }
        let mut memo = HashMap::new();
        self.derives(Symbol::Nonterminal(self.start), pipeline, 0, pipeline.len(), &mut memo)
    }

    pub fn recognizes_names<S: AsRef<str>>(&self, pipeline: &[S]) -> bool {
        let idx: Option<Vec<usize>> =
            pipeline.iter().map(|n| self.terminal_index(n.as_ref())).collect();
        idx.is_some_and(|p| self.recognizes(&p))
    }

    fn derives(
        &self,
        s: Symbol,
        input: &[usize],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize, usize), Option<bool>>,
    ) -> bool {
        let nt = match s {
            Symbol::Terminal(t) => return j == i + 1 && input[i] == t,
            Symbol::Nonterminal(n) => n,
        };
        match memo.get(&(nt, i, j)) {
            Some(Some(v)) => return *v,
            // In progress: a unit cycle, which cannot add a derivation.
            Some(None) => return false,
            None => {}
        }
        memo.insert((nt, i, j), None);
        let mut result = false;
        for &r in &self.by_lhs[nt] {
            if self.sequence_derives(&self.rules[r].rhs, input, i, j, memo) {
                result = true;
                break;
            }
        }
        memo.insert((nt, i, j), Some(result));
        result
    }

    fn sequence_derives(
        &self,
        seq: &[Symbol],
        input: &[usize],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize, usize), Option<bool>>,
    ) -> bool {
        let Some((&first, rest)) = seq.split_first() else {
            return i == j;
        };
        let rest_min = self.min_terminals(rest);
        if j < i + 1 + rest_min {
            return false;
        }
        if rest.is_empty() {
            return self.derives(first, input, i, j, memo);
        }
        (i + 1..=j - rest_min).any(|k| {
            self.derives(first, input, i, k, memo) && self.sequence_derives(rest, input, k, j, memo)
        })
    }
}

impl fmt::Display for Grammar {
    /// Canonical grammar-file form: consecutive rules sharing a lhs are
    /// joined on one line with `|`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut i = 0;
        while i < self.rules.len() {
            let lhs = self.rules[i].lhs;
            write!(f, "<{}> ::=", self.nonterminals[lhs])?;
            let mut first = true;
            while i < self.rules.len() && self.rules[i].lhs == lhs {
                if !first {
                    write!(f, " |")?;
                }
                for &s in &self.rules[i].rhs {
                    write!(f, " {}", self.symbol_name(s))?;
                }
                first = false;
                i += 1;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// A sentential form together with the rules that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Derivation {
    pub symbols: Vec<Symbol>,
    pub applied: Vec<RuleId>,
}

impl Derivation {
    pub fn start(g: &Grammar) -> Self {
        Derivation { symbols: vec![g.start()], applied: Vec::new() }
    }

    pub fn leftmost_nonterminal(&self) -> Option<(usize, usize)> {
        self.symbols.iter().enumerate().find_map(|(i, s)| match *s {
            Symbol::Nonterminal(n) => Some((i, n)),
            Symbol::Terminal(_) => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        is_complete(&self.symbols)
    }

    pub fn terminal_count(&self) -> usize {
        self.symbols.iter().filter(|s| s.is_terminal()).count()
    }

    /// Terminal indices in order; nonterminals are skipped.
    pub fn terminal_indices(&self) -> Vec<usize> {
        self.symbols
            .iter()
            .filter_map(|s| match *s {
                Symbol::Terminal(t) => Some(t),
                Symbol::Nonterminal(_) => None,
            })
            .collect()
    }
}

pub fn is_complete(symbols: &[Symbol]) -> bool {
    symbols.iter().all(|s| s.is_terminal())
}
