//! Context-free grammars, leftmost derivations and expression fitting for the
//! equation-discovery environment.
//!
//! Grammar files hold one rule per line (`LHS -> sym sym ...`); symbols that
//! appear on some left-hand side are nonterminals, everything else must be a
//! recognised terminal: an operator, a function name, a parenthesis, the
//! variable `x` or a numeric literal. Rule indices follow line order and are
//! the action indices of the environment.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Nonterminal(usize),
    Terminal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    rules: Vec<Rule>,
    start: usize,
}

fn terminal_known(tok: &str) -> bool {
    matches!(
        tok,
        "+" | "-" | "*" | "/" | "(" | ")" | "x" | "sin" | "cos" | "exp" | "log"
    ) || tok.parse::<f64>().map(|v| v.is_finite()).unwrap_or(false)
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw: Vec<(usize, String, Vec<String>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, rhs) = line.split_once("->").ok_or_else(|| Error::GrammarParse {
                line: lineno,
                msg: "expected `LHS -> symbols`".into(),
            })?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.split_whitespace().count() != 1 {
                return Err(Error::GrammarParse {
                    line: lineno,
                    msg: format!("left-hand side must be a single symbol, got `{lhs}`"),
                });
            }
            let rhs: Vec<String> = rhs.split_whitespace().map(str::to_owned).collect();
            if rhs.is_empty() {
                return Err(Error::GrammarParse {
                    line: lineno,
                    msg: "empty right-hand side".into(),
                });
            }
            raw.push((lineno, lhs.to_owned(), rhs));
        }
        if raw.is_empty() {
            return Err(Error::GrammarParse {
                line: 0,
                msg: "grammar has no rules".into(),
            });
        }

        let mut nonterminals: Vec<String> = Vec::new();
        for (_, lhs, _) in &raw {
            if !nonterminals.contains(lhs) {
                nonterminals.push(lhs.clone());
            }
        }
        let nt_index: HashMap<&str, usize> = nonterminals
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        let mut terminals: Vec<String> = Vec::new();
        let mut rules = Vec::with_capacity(raw.len());
        for (lineno, lhs, rhs) in &raw {
            let mut syms = Vec::with_capacity(rhs.len());
            for tok in rhs {
                if let Some(&n) = nt_index.get(tok.as_str()) {
                    syms.push(Symbol::Nonterminal(n));
                } else if terminal_known(tok) {
                    let t = match terminals.iter().position(|t| t == tok) {
                        Some(t) => t,
                        None => {
                            terminals.push(tok.clone());
                            terminals.len() - 1
                        }
                    };
                    syms.push(Symbol::Terminal(t));
                } else {
                    return Err(Error::GrammarParse {
                        line: *lineno,
                        msg: format!("unknown symbol category for `{tok}`"),
                    });
                }
            }
            rules.push(Rule {
                lhs: nt_index[lhs.as_str()],
                rhs: syms,
            });
        }

        let grammar = Grammar {
            nonterminals,
            terminals,
            rules,
            start: 0,
        };
        grammar.check_reachable(&raw)?;
        Ok(grammar)
    }

    fn check_reachable(&self, raw: &[(usize, String, Vec<String>)]) -> Result<()> {
        let mut seen = HashSet::from([self.start]);
        let mut stack = vec![self.start];
        while let Some(n) = stack.pop() {
            for rule in self.rules.iter().filter(|r| r.lhs == n) {
                for sym in &rule.rhs {
                    if let Symbol::Nonterminal(m) = *sym {
                        if seen.insert(m) {
                            stack.push(m);
                        }
                    }
                }
            }
        }
        for (n, name) in self.nonterminals.iter().enumerate() {
            if !seen.contains(&n) {
                let line = raw.iter().find(|(_, l, _)| l == name).map_or(0, |r| r.0);
                return Err(Error::GrammarParse {
                    line,
                    msg: format!("nonterminal `{name}` is unreachable from the start symbol"),
                });
            }
        }
        Ok(())
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn symbol_name(&self, sym: Symbol) -> &str {
        match sym {
            Symbol::Nonterminal(n) => &self.nonterminals[n],
            Symbol::Terminal(t) => &self.terminals[t],
        }
    }

    pub fn rule_text(&self, index: usize) -> String {
        let rule = &self.rules[index];
        let rhs: Vec<&str> = rule.rhs.iter().map(|s| self.symbol_name(*s)).collect();
        format!("{} -> {}", self.nonterminals[rule.lhs], rhs.join(" "))
    }

    /// Boolean mask over rules whose left-hand side is `nonterminal`.
    pub fn rules_for(&self, nonterminal: usize) -> Vec<bool> {
        self.rules.iter().map(|r| r.lhs == nonterminal).collect()
    }

    /// Finds the leftmost derivation producing `expr`, if the grammar can.
    ///
    /// The search follows the expression tree: a rule matches a node when its
    /// right-hand side has the node's shape. At most `max_rules` rules are used.
    pub fn derive(&self, expr: &Expression, max_rules: usize) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        self.derive_node(self.start, expr, &mut out, max_rules, 0)
            .then_some(out)
    }

    fn derive_node(
        &self,
        nt: usize,
        expr: &Expression,
        out: &mut Vec<usize>,
        budget: usize,
        unit_depth: usize,
    ) -> bool {
        if out.len() >= budget || unit_depth > self.nonterminals.len() + 2 {
            return false;
        }
        for (idx, rule) in self.rules.iter().enumerate() {
            if rule.lhs != nt {
                continue;
            }
            let mark = out.len();
            out.push(idx);
            let ok = match (RuleShape::of(self, rule), expr) {
                (Some(RuleShape::Var), Expression::Var) => true,
                (Some(RuleShape::Const(c)), Expression::Const(v)) => c == *v,
                (Some(RuleShape::Unit(n)), e) => self.derive_node(n, e, out, budget, unit_depth + 1),
                (Some(RuleShape::Unary(op, n)), Expression::Unary(eop, inner)) if op == *eop => {
                    self.derive_node(n, inner, out, budget, 0)
                }
                (Some(RuleShape::Binary(l, op, r)), Expression::Binary(eop, a, b)) if op == *eop => {
                    self.derive_node(l, a, out, budget, 0) && self.derive_node(r, b, out, budget, 0)
                }
                _ => false,
            };
            if ok {
                return true;
            }
            out.truncate(mark);
        }
        false
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rules.len() {
            writeln!(f, "{}", self.rule_text(i))?;
        }
        Ok(())
    }
}

pub fn parse_grammar(text: &str) -> Result<Grammar> {
    Grammar::parse(text)
}

/// Structural reading of a rule's right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RuleShape {
    Var,
    Const(f64),
    Unit(usize),
    Unary(UnaryOp, usize),
    Binary(usize, BinaryOp, usize),
}

impl RuleShape {
    fn of(g: &Grammar, rule: &Rule) -> Option<RuleShape> {
        use Symbol::*;
        let t = |s: &Symbol| match s {
            Terminal(i) => Some(g.terminals[*i].as_str()),
            Nonterminal(_) => None,
        };
        match rule.rhs.as_slice() {
            [Nonterminal(n)] => Some(RuleShape::Unit(*n)),
            [s @ Terminal(_)] => {
                let tok = t(s)?;
                if tok == "x" {
                    Some(RuleShape::Var)
                } else {
                    tok.parse::<f64>().ok().map(RuleShape::Const)
                }
            }
            [Nonterminal(l), op @ Terminal(_), Nonterminal(r)] => {
                BinaryOp::from_token(t(op)?).map(|op| RuleShape::Binary(*l, op, *r))
            }
            [f @ Terminal(_), open @ Terminal(_), Nonterminal(n), close @ Terminal(_)]
                if t(open) == Some("(") && t(close) == Some(")") =>
            {
                UnaryOp::from_token(t(f)?).map(|op| RuleShape::Unary(op, *n))
            }
            [open @ Terminal(_), Nonterminal(n), close @ Terminal(_)]
                if t(open) == Some("(") && t(close) == Some(")") =>
            {
                Some(RuleShape::Unit(*n))
            }
            _ => None,
        }
    }
}

/// A partial leftmost derivation.
#[derive(Debug, Clone)]
pub struct Derivation {
    grammar: Arc<Grammar>,
    form: Vec<Symbol>,
    applied: Vec<usize>,
}

impl PartialEq for Derivation {
    fn eq(&self, other: &Self) -> bool {
        self.applied == other.applied && self.form == other.form
    }
}

impl Derivation {
    pub fn new(grammar: Arc<Grammar>) -> Self {
        let start = grammar.start;
        Derivation {
            grammar,
            form: vec![Symbol::Nonterminal(start)],
            applied: Vec::new(),
        }
    }

    pub fn from_rules(grammar: Arc<Grammar>, rules: &[usize]) -> Result<Self> {
        rules
            .iter()
            .try_fold(Derivation::new(grammar), |d, &r| d.apply_rule(r))
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn sentential_form(&self) -> &[Symbol] {
        &self.form
    }

    pub fn applied_rules(&self) -> &[usize] {
        &self.applied
    }

    pub fn leftmost_nonterminal(&self) -> Option<usize> {
        self.form.iter().find_map(|s| match s {
            Symbol::Nonterminal(n) => Some(*n),
            Symbol::Terminal(_) => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.leftmost_nonterminal().is_none()
    }

    pub fn apply_rule(&self, rule_index: usize) -> Result<Derivation> {
        let rule = self
            .grammar
            .rules
            .get(rule_index)
            .ok_or_else(|| Error::Grammar(format!("rule index {rule_index} out of range")))?;
        let pos = self
            .form
            .iter()
            .position(|s| matches!(s, Symbol::Nonterminal(_)))
            .ok_or_else(|| Error::Grammar("derivation is already complete".into()))?;
        let Symbol::Nonterminal(nt) = self.form[pos] else {
            unreachable!()
        };
        if rule.lhs != nt {
            return Err(Error::Grammar(format!(
                "rule `{}` does not apply to leftmost nonterminal `{}`",
                self.grammar.rule_text(rule_index),
                self.grammar.nonterminals[nt]
            )));
        }
        let mut form = Vec::with_capacity(self.form.len() + rule.rhs.len());
        form.extend_from_slice(&self.form[..pos]);
        form.extend_from_slice(&rule.rhs);
        form.extend_from_slice(&self.form[pos + 1..]);
        let mut applied = self.applied.clone();
        applied.push(rule_index);
        Ok(Derivation {
            grammar: Arc::clone(&self.grammar),
            form,
            applied,
        })
    }

    pub fn text(&self) -> String {
        let toks: Vec<&str> = self.form.iter().map(|s| self.grammar.symbol_name(*s)).collect();
        toks.join(" ")
    }

    /// Builds the expression tree from the derivation tree (not by re-parsing
    /// the sentential form, so nesting follows rule application order).
    pub fn to_expression(&self) -> Result<Expression> {
        if !self.is_complete() {
            return Err(Error::Grammar("derivation is incomplete".into()));
        }
        let mut pos = 0;
        let expr = self.build(&mut pos)?;
        debug_assert_eq!(pos, self.applied.len());
        Ok(expr)
    }

    fn build(&self, pos: &mut usize) -> Result<Expression> {
        let idx = *self
            .applied
            .get(*pos)
            .ok_or_else(|| Error::Grammar("derivation ended early".into()))?;
        *pos += 1;
        let rule = &self.grammar.rules[idx];
        let shape = RuleShape::of(&self.grammar, rule).ok_or_else(|| {
            Error::Grammar(format!(
                "rule `{}` has no expression reading",
                self.grammar.rule_text(idx)
            ))
        })?;
        Ok(match shape {
            RuleShape::Var => Expression::Var,
            RuleShape::Const(c) => Expression::Const(c),
            RuleShape::Unit(_) => self.build(pos)?,
            RuleShape::Unary(op, _) => Expression::Unary(op, Box::new(self.build(pos)?)),
            RuleShape::Binary(_, op, _) => {
                let l = self.build(pos)?;
                let r = self.build(pos)?;
                Expression::Binary(op, Box::new(l), Box::new(r))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "+" => BinaryOp::Add,
            "-" => BinaryOp::Sub,
            "*" => BinaryOp::Mul,
            "/" => BinaryOp::Div,
            _ => return None,
        })
    }

    fn token(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Sin,
    Cos,
    Exp,
    Log,
}

impl UnaryOp {
    fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            _ => return None,
        })
    }

    fn token(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Var,
    Const(f64),
    Unary(UnaryOp, Box<Expression>),
    Binary(BinaryOp, Box<Expression>, Box<Expression>),
}

impl Expression {
    /// Evaluates at `x`. Non-finite results (division by zero, log of a
    /// non-positive number, overflow) come back as NaN or infinity and
    /// propagate through enclosing nodes.
    pub fn evaluate(&self, x: f64) -> f64 {
        match self {
            Expression::Var => x,
            Expression::Const(c) => *c,
            Expression::Unary(op, a) => {
                let v = a.evaluate(x);
                match op {
                    UnaryOp::Sin => v.sin(),
                    UnaryOp::Cos => v.cos(),
                    UnaryOp::Exp => v.exp(),
                    UnaryOp::Log if v > 0.0 => v.ln(),
                    UnaryOp::Log => f64::NAN,
                }
            }
            Expression::Binary(op, a, b) => {
                let (l, r) = (a.evaluate(x), b.evaluate(x));
                match op {
                    BinaryOp::Add => l + r,
                    BinaryOp::Sub => l - r,
                    BinaryOp::Mul => l * r,
                    BinaryOp::Div if r == 0.0 => f64::NAN,
                    BinaryOp::Div => l / r,
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expression::Var | Expression::Const(_) => 1,
            Expression::Unary(_, a) => 1 + a.depth(),
            Expression::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Parses infix notation with the usual precedence (`+ -` < `* /`),
    /// function calls `sin(..)`, `cos(..)`, `exp(..)`, `log(..)`, the variable
    /// `x` and numeric literals. Used for target pools.
    pub fn parse(text: &str) -> Result<Expression> {
        let toks = tokenize(text)?;
        let mut p = ExprParser { toks, pos: 0 };
        let e = p.sum()?;
        if p.pos != p.toks.len() {
            return Err(Error::Grammar(format!(
                "unexpected `{}` in expression `{text}`",
                p.toks[p.pos]
            )));
        }
        Ok(e)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Var => write!(f, "x"),
            Expression::Const(c) => write!(f, "{c}"),
            Expression::Unary(op, a) => write!(f, "{}({a})", op.token()),
            Expression::Binary(op, a, b) => write!(f, "({a} {} {b})", op.token()),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if "+-*/()".contains(c) {
            out.push(c.to_string());
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let s = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            out.push(chars[s..i].iter().collect());
        } else if c.is_ascii_alphabetic() {
            let s = i;
            while i < chars.len() && chars[i].is_ascii_alphabetic() {
                i += 1;
            }
            out.push(chars[s..i].iter().collect());
        } else {
            return Err(Error::Grammar(format!("unexpected character `{c}` in `{text}`")));
        }
    }
    Ok(out)
}

struct ExprParser {
    toks: Vec<String>,
    pos: usize,
}

impl ExprParser {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Grammar(format!(
                "expected `{tok}`, found `{}`",
                self.peek().unwrap_or("end of input")
            )))
        }
    }

    fn sum(&mut self) -> Result<Expression> {
        let mut lhs = self.product()?;
        while let Some(op @ ("+" | "-")) = self.peek() {
            let op = BinaryOp::from_token(op).unwrap();
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expression::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expression> {
        let mut lhs = self.atom()?;
        while let Some(op @ ("*" | "/")) = self.peek() {
            let op = BinaryOp::from_token(op).unwrap();
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expression::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expression> {
        let tok = self
            .peek()
            .ok_or_else(|| Error::Grammar("unexpected end of expression".into()))?
            .to_owned();
        self.pos += 1;
        if tok == "(" {
            let e = self.sum()?;
            self.expect(")")?;
            return Ok(e);
        }
        if tok == "x" {
            return Ok(Expression::Var);
        }
        if let Some(op) = UnaryOp::from_token(&tok) {
            self.expect("(")?;
            let e = self.sum()?;
            self.expect(")")?;
            return Ok(Expression::Unary(op, Box::new(e)));
        }
        tok.parse::<f64>()
            .map(Expression::Const)
            .map_err(|_| Error::Grammar(format!("unexpected token `{tok}`")))
    }
}

/// Point measurements with strictly increasing, finite `xs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Grammar("dataset xs and ys differ in length".into()));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Grammar("dataset xs must be strictly increasing".into()));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Grammar("dataset values must be finite".into()));
        }
        Ok(Dataset { xs, ys })
    }

    /// Evaluates `expr` at `xs`; `None` when any prediction is non-finite.
    pub fn from_expression(expr: &Expression, xs: &[f64]) -> Option<Self> {
        let ys: Vec<f64> = xs.iter().map(|&x| expr.evaluate(x)).collect();
        Dataset::new(xs.to_vec(), ys).ok()
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// NRMSE of predictions against `ys`: RMSE divided by the (population)
/// standard deviation of `ys`, or by 1 when that is below 1e-12. Any
/// non-finite prediction yields `+inf`.
pub fn nrmse_values(predictions: &[f64], ys: &[f64]) -> f64 {
    if predictions.iter().any(|p| !p.is_finite()) || predictions.len() != ys.len() || ys.is_empty() {
        return f64::INFINITY;
    }
    let mse = predictions
        .iter()
        .zip(ys)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / ys.len() as f64;
    let sd = std_dev(ys);
    let denom = if sd < 1e-12 { 1.0 } else { sd };
    mse.sqrt() / denom
}

pub fn nrmse(expr: &Expression, data: &Dataset) -> f64 {
    let preds: Vec<f64> = data.xs.iter().map(|&x| expr.evaluate(x)).collect();
    nrmse_values(&preds, &data.ys)
}

const SAMPLE_RETRIES: usize = 100;

/// Draws `n_points` distinct xs uniformly from `x_range` and evaluates `expr`
/// on them, redrawing when any value is non-finite.
pub fn sample_dataset(
    expr: &Expression,
    n_points: usize,
    x_range: (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    if n_points < 2 {
        return Err(Error::Grammar("a dataset needs at least 2 points".into()));
    }
    let (lo, hi) = x_range;
    if !(lo < hi) {
        return Err(Error::Grammar(format!("empty x range [{lo}, {hi}]")));
    }
    for _ in 0..SAMPLE_RETRIES {
        let xs = sample_xs(n_points, x_range, rng);
        if let Some(d) = Dataset::from_expression(expr, &xs) {
            return Ok(d);
        }
    }
    Err(Error::Grammar(format!(
        "could not sample a finite dataset for `{expr}` on [{lo}, {hi}]"
    )))
}

pub fn sample_xs(n_points: usize, (lo, hi): (f64, f64), rng: &mut dyn RngCore) -> Vec<f64> {
    let mut xs: Vec<f64> = Vec::with_capacity(n_points);
    while xs.len() < n_points {
        xs.push(rng.gen_range(lo..=hi));
        xs.sort_by(f64::total_cmp);
        xs.dedup();
    }
    xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOY: &str = "S -> S + S\nS -> x\nS -> 1";

    fn toy() -> Arc<Grammar> {
        Arc::new(Grammar::parse(TOY).unwrap())
    }

    #[test]
    fn parses_toy_grammar() {
        let g = Grammar::parse(TOY).unwrap();
        assert_eq!(g.rule_count(), 3);
        assert_eq!(g.nonterminals(), ["S"]);
        assert_eq!(g.terminals(), ["+", "x", "1"]);
        assert_eq!(g.start(), 0);
    }

    #[test]
    fn parse_errors_name_the_line() {
        match Grammar::parse("S ->").unwrap_err() {
            Error::GrammarParse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        match Grammar::parse("S -> x\nS -> x % x").unwrap_err() {
            Error::GrammarParse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains('%'));
            }
            e => panic!("unexpected {e}"),
        }
        match Grammar::parse("S -> x\nT -> x").unwrap_err() {
            Error::GrammarParse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("unreachable"));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(Grammar::parse("# only a comment\n").is_err());
    }

    #[test]
    fn print_reparses_identically() {
        let text = include_str!("../data/grammar_default.txt");
        let g = Grammar::parse(text).unwrap();
        assert_eq!(Grammar::parse(&g.to_string()).unwrap(), g);
    }

    #[test]
    fn leftmost_application() {
        let d = Derivation::new(toy());
        let d = d.apply_rule(0).unwrap();
        assert_eq!(d.text(), "S + S");
        let d = d.apply_rule(1).unwrap();
        assert_eq!(d.text(), "x + S");
        let d = d.apply_rule(2).unwrap();
        assert_eq!(d.text(), "x + 1");
        assert!(d.is_complete());
        assert!(d.apply_rule(1).is_err());
    }

    #[test]
    fn inapplicable_rule_is_rejected() {
        let g = Arc::new(Grammar::parse("S -> T + T\nT -> x\nT -> 1").unwrap());
        let d = Derivation::new(g);
        assert!(d.apply_rule(1).is_err());
        assert!(d.apply_rule(7).is_err());
    }

    #[test]
    fn expression_follows_derivation_nesting() {
        let g = Arc::new(Grammar::parse(include_str!("../data/grammar_default.txt")).unwrap());
        // S -> S + S, S -> x, S -> S * S, S -> x, S -> x
        let d = Derivation::from_rules(g.clone(), &[0, 3, 1, 3, 3]).unwrap();
        assert_eq!(d.text(), "x + x * x");
        assert_eq!(d.to_expression().unwrap().to_string(), "(x + (x * x))");
        // S -> S * S, S -> S + S, x, x, x reads as (x + x) * x.
        let d = Derivation::from_rules(g.clone(), &[1, 0, 3, 3, 3]).unwrap();
        assert_eq!(d.text(), "x + x * x");
        assert_eq!(d.to_expression().unwrap().to_string(), "((x + x) * x)");
        assert!(Derivation::from_rules(g, &[0, 3]).unwrap().to_expression().is_err());
    }

    #[test]
    fn evaluation_edge_cases() {
        let e = Expression::parse("x + 1").unwrap();
        assert_eq!(e.evaluate(2.0), 3.0);
        assert!(!Expression::parse("1 / x").unwrap().evaluate(0.0).is_finite());
        assert_eq!(Expression::parse("sin(x)").unwrap().evaluate(0.0), 0.0);
        assert!(Expression::parse("log(x)").unwrap().evaluate(-1.0).is_nan());
        assert!(!Expression::parse("exp(exp(exp(x)))").unwrap().evaluate(10.0).is_finite());
    }

    #[test]
    fn nrmse_constant_predictor() {
        // rmse = sqrt(5/3), population std of [0,1,2] = sqrt(2/3)
        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]).unwrap();
        let v = nrmse(&Expression::Const(0.0), &data);
        assert!((v - 1.5811388300841898).abs() < 1e-12);
        assert!((v - (2.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nrmse_sentinels() {
        let data = Dataset::new(vec![-1.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]).unwrap();
        // zero spread falls back to a unit denominator
        assert_eq!(nrmse(&Expression::Const(3.0), &data), 2.0);
        assert_eq!(nrmse(&Expression::parse("1 / x").unwrap(), &data), f64::INFINITY);
    }

    #[test]
    fn constant_one_against_x_plus_one() {
        // ys = [1,2,3]; errors [0,1,2]; rmse = sqrt(5/3); std = sqrt(2/3)
        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]).unwrap();
        let v = nrmse(&Expression::Const(1.0), &data);
        assert!((v - 1.5811388300841898).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_exact() {
        let e = Expression::parse("x + 1").unwrap();
        let a = sample_dataset(&e, 3, (0.0, 2.0), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_dataset(&e, 3, (0.0, 2.0), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.xs().iter().zip(a.ys()) {
            assert_eq!(*y, x + 1.0);
        }
        assert_eq!(nrmse(&e, &a), 0.0);
    }

    #[test]
    fn sampling_retries_and_gives_up() {
        let log = Expression::parse("log(x)").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Half the range is valid: retries find an all-positive draw for 2 points.
        let d = sample_dataset(&log, 2, (-1.0, 1.0), &mut rng).unwrap();
        assert!(d.xs().iter().all(|&x| x > 0.0));
        // 40 points all positive has probability 2^-40 per try.
        assert!(sample_dataset(&log, 40, (-1.0, 1.0), &mut rng).is_err());
        assert!(sample_dataset(&log, 1, (0.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn derives_targets() {
        let g = Arc::new(Grammar::parse(include_str!("../data/grammar_default.txt")).unwrap());
        let e = Expression::parse("x * x + 2").unwrap();
        let rules = g.derive(&e, 10).unwrap();
        let d = Derivation::from_rules(g.clone(), &rules).unwrap();
        assert_eq!(d.to_expression().unwrap(), e);
        assert!(g.derive(&Expression::parse("exp(x)").unwrap(), 10).is_none());
        assert!(g.derive(&e, 3).is_none());
    }
}
