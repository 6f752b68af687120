//! Symbolic loss expressions.
//!
//! A [`LossExpr`] is a straight-line program over three input slots
//! (`yhat`, `y`, `one`). Node `k` writes slot `k + 3` and may read any slot
//! below that, so every expression is acyclic by construction. The value of
//! the expression is the value of the last node.
//!
//! Evaluation uses guarded arithmetic: `Log` and `Reciprocal` are offset by a
//! smoothing constant, and every node's magnitude is clamped into
//! `[xi, 1/xi]` with its sign kept. A node whose raw value falls outside that
//! band blocks the gradient.
//!
//! Text form is a prefix S-expression, e.g. `(sq (add yhat (neg y)))`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slot holding the prediction.
pub const YHAT: usize = 0;
/// Slot holding the label.
pub const Y: usize = 1;
/// Slot holding the constant 1.
pub const ONE: usize = 2;
/// Number of input slots preceding the first node.
pub const N_INPUTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("expression has no operator nodes")]
    Empty,
    #[error("node {node}: operand slot {slot} is not defined before it")]
    DanglingOperand { node: usize, slot: usize },
    #[error("node {node}: binary operator needs two distinct operands, got slot {slot} twice")]
    RepeatedOperand { node: usize, slot: usize },
    #[error("node {node}: operator `{head}` takes {expected} operand(s)")]
    OperandCount {
        node: usize,
        head: &'static str,
        expected: usize,
    },
    #[error("at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("at byte {pos}: unknown operator `{head}`")]
    UnknownHead { pos: usize, head: String },
    #[error("at byte {pos}: `{head}` takes {expected} operand(s), found {found}")]
    Arity {
        pos: usize,
        head: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<ExprError>,
    },
}

/// Primitive operators available to loss expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Multi,
    Max,
    Min,
    Neg,
    Identical,
    Log,
    Square,
    Reciprocal,
}

impl Operator {
    pub const ALL: [Operator; 9] = [
        Operator::Add,
        Operator::Multi,
        Operator::Max,
        Operator::Min,
        Operator::Neg,
        Operator::Identical,
        Operator::Log,
        Operator::Square,
        Operator::Reciprocal,
    ];

    pub fn arity(self) -> usize {
        match self {
            Operator::Add | Operator::Multi | Operator::Max | Operator::Min => 2,
            _ => 1,
        }
    }

    /// Head keyword used in the text form.
    pub fn head(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Multi => "mul",
            Operator::Max => "max",
            Operator::Min => "min",
            Operator::Neg => "neg",
            Operator::Identical => "id",
            Operator::Log => "log",
            Operator::Square => "sq",
            Operator::Reciprocal => "rec",
        }
    }

    pub fn from_head(head: &str) -> Option<Self> {
        Operator::ALL.into_iter().find(|op| op.head() == head)
    }

    /// Log and Reciprocal read the smoothing coefficient.
    pub fn is_smoothing_site(self) -> bool {
        matches!(self, Operator::Log | Operator::Reciprocal)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.head())
    }
}

/// Numeric guards used during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeMathConfig {
    /// Clamp floor; the ceiling is `1 / xi`.
    pub xi: f64,
    /// Offset added at Log and Reciprocal sites.
    pub epsilon: f64,
}

impl Default for SafeMathConfig {
    fn default() -> Self {
        Self {
            xi: 1e-6,
            epsilon: 1e-6,
        }
    }
}

impl SafeMathConfig {
    /// Returns `None` unless `0 < xi <= epsilon <= 1`.
    pub fn new(xi: f64, epsilon: f64) -> Option<Self> {
        (xi > 0.0 && xi <= epsilon && epsilon <= 1.0).then_some(Self { xi, epsilon })
    }

    /// Same clamp floor, different smoothing coefficient (raised to `xi` if smaller).
    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self {
            xi: self.xi,
            epsilon: epsilon.clamp(self.xi, 1.0),
        }
    }
}

/// One operator application. `rhs` is `None` for unary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    pub op: Operator,
    pub lhs: usize,
    pub rhs: Option<usize>,
}

impl Node {
    pub fn unary(op: Operator, arg: usize) -> Self {
        Self {
            op,
            lhs: arg,
            rhs: None,
        }
    }

    pub fn binary(op: Operator, lhs: usize, rhs: usize) -> Self {
        Self {
            op,
            lhs,
            rhs: Some(rhs),
        }
    }

    fn operands(&self) -> impl Iterator<Item = usize> {
        std::iter::once(self.lhs).chain(self.rhs)
    }
}

/// A well-formed loss expression. See the module docs for the slot layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LossExpr {
    nodes: Vec<Node>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Forward values kept for the reverse sweep.
struct Trace {
    /// Clamped value of every slot (inputs first).
    vals: Vec<f64>,
    /// Whether node k's raw value sat inside the clamp band.
    live: Vec<bool>,
}

impl LossExpr {
    pub fn new(nodes: Vec<Node>) -> Result<Self, ExprError> {
        if nodes.is_empty() {
            return Err(ExprError::Empty);
        }
        for (k, node) in nodes.iter().enumerate() {
            let expected = node.op.arity();
            if node.rhs.is_some() as usize + 1 != expected {
                return Err(ExprError::OperandCount {
                    node: k,
                    head: node.op.head(),
                    expected,
                });
            }
            for slot in node.operands() {
                if slot >= k + N_INPUTS {
                    return Err(ExprError::DanglingOperand { node: k, slot });
                }
            }
            if node.rhs == Some(node.lhs) {
                return Err(ExprError::RepeatedOperand {
                    node: k,
                    slot: node.lhs,
                });
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Slot written by the last node.
    pub fn root_slot(&self) -> usize {
        self.nodes.len() + N_INPUTS - 1
    }

    fn reachable(&self) -> Vec<bool> {
        let n_slots = self.nodes.len() + N_INPUTS;
        let mut seen = vec![false; n_slots];
        seen[n_slots - 1] = true;
        for k in (0..self.nodes.len()).rev() {
            if seen[k + N_INPUTS] {
                for s in self.nodes[k].operands() {
                    seen[s] = true;
                }
            }
        }
        seen
    }

    /// Whether the root reads `yhat` through any path.
    pub fn depends_on_yhat(&self) -> bool {
        self.reachable()[YHAT]
    }

    /// Number of Log and Reciprocal nodes that feed the root.
    pub fn smoothing_sites(&self) -> usize {
        let seen = self.reachable();
        self.nodes
            .iter()
            .enumerate()
            .filter(|(k, n)| seen[k + N_INPUTS] && n.op.is_smoothing_site())
            .count()
    }

    /// Tree-shaped form: unreachable nodes dropped, shared nodes expanded,
    /// nodes in post-order. Two expressions print identically iff their
    /// canonical forms are equal.
    pub fn canonical(&self) -> LossExpr {
        fn emit(expr: &LossExpr, slot: usize, out: &mut Vec<Node>) -> usize {
            if slot < N_INPUTS {
                return slot;
            }
            let node = expr.nodes[slot - N_INPUTS];
            let lhs = emit(expr, node.lhs, out);
            let rhs = node.rhs.map(|r| emit(expr, r, out));
            out.push(Node {
                op: node.op,
                lhs,
                rhs,
            });
            out.len() - 1 + N_INPUTS
        }
        let mut out = Vec::new();
        emit(self, self.root_slot(), &mut out);
        LossExpr { nodes: out }
    }

    /// Structural equality of the expressions the two roots denote.
    pub fn structurally_eq(&self, other: &LossExpr) -> bool {
        self.canonical() == other.canonical()
    }

    fn forward(&self, yhat: f64, y: f64, cfg: &SafeMathConfig) -> Trace {
        let lo = cfg.xi;
        let hi = 1.0 / cfg.xi;
        let eps = cfg.epsilon;
        let mut vals = Vec::with_capacity(self.nodes.len() + N_INPUTS);
        vals.extend_from_slice(&[yhat, y, 1.0]);
        let mut live = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let a = vals[node.lhs];
            let b = node.rhs.map(|r| vals[r]).unwrap_or(0.0);
            let raw = apply(node.op, a, b, eps);
            let mag = raw.abs();
            let inside = (lo..=hi).contains(&mag);
            live.push(inside);
            vals.push(if inside {
                raw
            } else if mag.is_nan() {
                lo
            } else {
                sign(raw) * mag.clamp(lo, hi)
            });
        }
        Trace { vals, live }
    }

    pub fn eval(&self, yhat: f64, y: f64, cfg: &SafeMathConfig) -> f64 {
        let trace = self.forward(yhat, y, cfg);
        trace.vals[self.root_slot()]
    }

    /// Derivative of [`eval`](Self::eval) with respect to `yhat`.
    pub fn grad_yhat(&self, yhat: f64, y: f64, cfg: &SafeMathConfig) -> f64 {
        self.eval_with_grad(yhat, y, cfg).1
    }

    /// Value and `d value / d yhat` from a single forward and reverse sweep.
    pub fn eval_with_grad(&self, yhat: f64, y: f64, cfg: &SafeMathConfig) -> (f64, f64) {
        let trace = self.forward(yhat, y, cfg);
        let vals = &trace.vals;
        let eps = cfg.epsilon;
        let mut adj = vec![0.0; vals.len()];
        adj[self.root_slot()] = 1.0;
        for (k, node) in self.nodes.iter().enumerate().rev() {
            let g = adj[k + N_INPUTS];
            if g == 0.0 || !trace.live[k] {
                continue;
            }
            let a = vals[node.lhs];
            match (node.op, node.rhs) {
                (Operator::Add, Some(r)) => {
                    adj[node.lhs] += g;
                    adj[r] += g;
                }
                (Operator::Multi, Some(r)) => {
                    adj[node.lhs] += g * vals[r];
                    adj[r] += g * a;
                }
                (Operator::Max, Some(r)) => {
                    let to = if a >= vals[r] { node.lhs } else { r };
                    adj[to] += g;
                }
                (Operator::Min, Some(r)) => {
                    let to = if a <= vals[r] { node.lhs } else { r };
                    adj[to] += g;
                }
                (Operator::Neg, _) => adj[node.lhs] -= g,
                (Operator::Identical, _) => adj[node.lhs] += g,
                (Operator::Log, _) => adj[node.lhs] += g / (a.abs() + eps),
                (Operator::Square, _) => adj[node.lhs] += 2.0 * a * g,
                (Operator::Reciprocal, _) => {
                    let d = a.abs() + eps;
                    adj[node.lhs] -= g / (d * d);
                }
                _ => unreachable!("arity checked at construction"),
            }
        }
        (vals[self.root_slot()], adj[YHAT])
    }

    /// Smallest distance, over every node that feeds the root and varies
    /// with `yhat`, from the current point to a place where the expression
    /// is not smooth: a Max/Min tie between operands with different slopes,
    /// a Log/Reciprocal argument crossing zero, or a node's unclamped value
    /// touching a clamp bound (measured in log space for the bounds).
    pub fn kink_distance(&self, yhat: f64, y: f64, cfg: &SafeMathConfig) -> f64 {
        let trace = self.forward(yhat, y, cfg);
        let vals = &trace.vals;
        let seen = self.reachable();
        // d/dyhat of every slot after clamping.
        let mut tangent = vec![0.0; vals.len()];
        tangent[YHAT] = 1.0;
        let mut best = f64::INFINITY;
        for (k, node) in self.nodes.iter().enumerate() {
            let (a, ta) = (vals[node.lhs], tangent[node.lhs]);
            let (b, tb) = node.rhs.map_or((0.0, 0.0), |r| (vals[r], tangent[r]));
            let d = a.abs() + cfg.epsilon;
            let raw_t = match node.op {
                Operator::Add => ta + tb,
                Operator::Multi => ta * b + a * tb,
                Operator::Max if a >= b => ta,
                Operator::Min if a <= b => ta,
                Operator::Max | Operator::Min => tb,
                Operator::Neg => -ta,
                Operator::Identical => ta,
                Operator::Log => ta / d,
                Operator::Square => 2.0 * a * ta,
                Operator::Reciprocal => -ta / (d * d),
            };
            if trace.live[k] {
                tangent[k + N_INPUTS] = raw_t;
            }
            if !seen[k + N_INPUTS] || (ta == 0.0 && tb == 0.0) {
                continue;
            }
            match node.op {
                Operator::Max | Operator::Min if a != b || ta != tb => best = best.min((a - b).abs()),
                Operator::Log | Operator::Reciprocal => best = best.min(a.abs()),
                _ => {}
            }
            if raw_t != 0.0 {
                let l = apply(node.op, a, b, cfg.epsilon).abs().ln();
                best = best.min((l - cfg.xi.ln()).abs()).min((l + cfg.xi.ln()).abs());
            }
        }
        best
    }
}

/// Unclamped value of one operator application.
fn apply(op: Operator, a: f64, b: f64, eps: f64) -> f64 {
    match op {
        Operator::Add => a + b,
        Operator::Multi => a * b,
        Operator::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
        Operator::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
        Operator::Neg => -a,
        Operator::Identical => a,
        Operator::Log => sign(a) * (a.abs() + eps).ln(),
        Operator::Square => a * a,
        Operator::Reciprocal => sign(a) / (a.abs() + eps),
    }
}

impl fmt::Display for LossExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write_slot(expr: &LossExpr, slot: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match slot {
                YHAT => f.write_str("yhat"),
                Y => f.write_str("y"),
                ONE => f.write_str("one"),
                _ => {
                    let node = expr.nodes[slot - N_INPUTS];
                    write!(f, "({} ", node.op.head())?;
                    write_slot(expr, node.lhs, f)?;
                    if let Some(r) = node.rhs {
                        f.write_str(" ")?;
                        write_slot(expr, r, f)?;
                    }
                    f.write_str(")")
                }
            }
        }
        write_slot(self, self.root_slot(), f)
    }
}

impl LossExpr {
    /// Prefix text form; inverse of [`LossExpr::parse`] up to canonicalisation.
    pub fn serialize(&self) -> String {
        self.to_string()
    }

    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let mut parser = Parser {
            src: text,
            pos: 0,
            nodes: Vec::new(),
        };
        parser.skip_ws();
        let start = parser.pos;
        let slot = parser.term()?;
        parser.skip_ws();
        if parser.pos != text.len() {
            return Err(parser.syntax("trailing input after expression"));
        }
        if slot < N_INPUTS {
            return Err(ExprError::Syntax {
                pos: start,
                msg: "expression must apply at least one operator".into(),
            });
        }
        Ok(LossExpr {
            nodes: parser.nodes,
        })
    }
}

impl FromStr for LossExpr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossExpr::parse(s)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    nodes: Vec<Node>,
}

impl Parser<'_> {
    fn syntax(&self, msg: &str) -> ExprError {
        ExprError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn word(&mut self) -> &str {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| !c.is_ascii_whitespace() && c != b'(' && c != b')')
        {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn term(&mut self) -> Result<usize, ExprError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b')') => Err(self.syntax("unexpected `)`")),
            Some(b'(') => {
                let open = self.pos;
                self.pos += 1;
                self.skip_ws();
                let head_pos = self.pos;
                let head = self.word();
                if head.is_empty() {
                    return Err(self.syntax("expected operator name"));
                }
                let op = Operator::from_head(head).ok_or_else(|| ExprError::UnknownHead {
                    pos: head_pos,
                    head: head.to_string(),
                })?;
                let mut args = Vec::with_capacity(2);
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        None => {
                            return Err(ExprError::Syntax {
                                pos: open,
                                msg: "unclosed `(`".into(),
                            })
                        }
                        _ => args.push(self.term()?),
                    }
                }
                if args.len() != op.arity() {
                    return Err(ExprError::Arity {
                        pos: open,
                        head: op.head(),
                        expected: op.arity(),
                        found: args.len(),
                    });
                }
                let node = match args[..] {
                    [a] => Node::unary(op, a),
                    [a, b] if a == b => {
                        return Err(ExprError::Syntax {
                            pos: open,
                            msg: format!("`{}` needs two distinct operands", op.head()),
                        })
                    }
                    [a, b] => Node::binary(op, a, b),
                    _ => unreachable!(),
                };
                self.nodes.push(node);
                Ok(self.nodes.len() - 1 + N_INPUTS)
            }
            Some(_) => {
                let pos = self.pos;
                match self.word() {
                    "yhat" => Ok(YHAT),
                    "y" => Ok(Y),
                    "one" => Ok(ONE),
                    other => Err(ExprError::Syntax {
                        pos,
                        msg: format!("unknown atom `{other}` (expected yhat, y or one)"),
                    }),
                }
            }
        }
    }
}

/// Parses a loss-list file: one expression per line, `#` starts a comment
/// line, blank lines ignored.
pub fn parse_loss_list(text: &str) -> Result<Vec<LossExpr>, ExprError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| {
            LossExpr::parse(l.trim()).map_err(|e| ExprError::Line {
                line: i + 1,
                source: Box::new(e),
            })
        })
        .collect()
}
