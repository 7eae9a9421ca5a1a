//! Infix expressions over indexed vector variables.
//!
//! Plants, control laws, Lyapunov candidates and gains are written as text in
//! configuration files and parsed against an [`Env`] that declares which
//! variables exist and how long each one is:
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := factor (("*" | "/") factor)*
//! factor := "-"? atom ("^" factor)?
//! atom   := number | name "[" integer "]" | name | func "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! `-a^b` reads as `-(a^b)`, `^` is right-associative and indices are 0-based.
//! A bare `name` is only allowed for variables of dimension one.

mod parser;
mod program;
mod scalar;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use program::Program;
pub use scalar::Scalar;

/// Declared free variables, in binding order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Env {
    vars: Vec<VarDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDecl {
    pub name: String,
    pub dim: usize,
}

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable. Panics on a duplicate name or zero dimension, which
    /// are programming errors rather than input errors.
    pub fn var(mut self, name: &str, dim: usize) -> Self {
        assert!(dim > 0, "variable `{name}` must have positive dimension");
        assert!(self.slot(name).is_none(), "variable `{name}` declared twice");
        self.vars.push(VarDecl {
            name: name.to_string(),
            dim,
        });
        self
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn vars(&self) -> &[VarDecl] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Abs,
    Exp,
    Ln,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    /// (minimum, maximum) number of arguments.
    fn arity(self) -> (usize, usize) {
        match self {
            Func::Abs | Func::Exp | Func::Ln => (1, 1),
            Func::Min | Func::Max => (2, usize::MAX),
        }
    }
}

/// Expression tree. Variables are referenced by slot in the owning [`Env`].
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var { slot: usize, index: usize },
    Neg(Box<Node>),
    Binary { op: BinOp, lhs: Box<Node>, rhs: Box<Node> },
    Pow { base: Box<Node>, exp: Box<Node> },
    Call { func: Func, args: Vec<Node> },
}

impl Node {
    pub fn var(slot: usize, index: usize) -> Node {
        Node::Var { slot, index }
    }

    pub fn binary(op: BinOp, lhs: Node, rhs: Node) -> Node {
        Node::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn add(lhs: Node, rhs: Node) -> Node {
        Node::binary(BinOp::Add, lhs, rhs)
    }

    pub fn sub(lhs: Node, rhs: Node) -> Node {
        Node::binary(BinOp::Sub, lhs, rhs)
    }

    pub fn mul(lhs: Node, rhs: Node) -> Node {
        Node::binary(BinOp::Mul, lhs, rhs)
    }

    pub fn div(lhs: Node, rhs: Node) -> Node {
        Node::binary(BinOp::Div, lhs, rhs)
    }

    /// Replaces variable references. `map` returns `Some(replacement)` for a
    /// reference that should be swapped out and `None` to keep it.
    pub fn substitute(&self, map: &dyn Fn(usize, usize) -> Option<Node>) -> Node {
        match self {
            Node::Const(c) => Node::Const(*c),
            Node::Var { slot, index } => map(*slot, *index).unwrap_or(Node::Var {
                slot: *slot,
                index: *index,
            }),
            Node::Neg(inner) => Node::Neg(Box::new(inner.substitute(map))),
            Node::Binary { op, lhs, rhs } => {
                Node::binary(*op, lhs.substitute(map), rhs.substitute(map))
            }
            Node::Pow { base, exp } => Node::Pow {
                base: Box::new(base.substitute(map)),
                exp: Box::new(exp.substitute(map)),
            },
            Node::Call { func, args } => Node::Call {
                func: *func,
                args: args.iter().map(|a| a.substitute(map)).collect(),
            },
        }
    }

    /// Calls `visit` on every variable reference.
    pub fn for_each_var(&self, visit: &mut dyn FnMut(usize, usize)) {
        match self {
            Node::Const(_) => {}
            Node::Var { slot, index } => visit(*slot, *index),
            Node::Neg(inner) => inner.for_each_var(visit),
            Node::Binary { lhs, rhs, .. } => {
                lhs.for_each_var(visit);
                rhs.for_each_var(visit);
            }
            Node::Pow { base, exp } => {
                base.for_each_var(visit);
                exp.for_each_var(visit);
            }
            Node::Call { args, .. } => args.iter().for_each(|a| a.for_each_var(visit)),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Node::Const(_) | Node::Var { .. } => 1,
            Node::Neg(inner) => 1 + inner.size(),
            Node::Binary { lhs, rhs, .. } => 1 + lhs.size() + rhs.size(),
            Node::Pow { base, exp } => 1 + base.size() + exp.size(),
            Node::Call { args, .. } => 1 + args.iter().map(Node::size).sum::<usize>(),
        }
    }

    fn check(&self, env: &Env) -> Result<(), ExprError> {
        let mut err = None;
        self.for_each_var(&mut |slot, index| {
            if err.is_some() {
                return;
            }
            match env.vars.get(slot) {
                None => {
                    err = Some(ExprError::UnknownVariable {
                        name: format!("#{slot}"),
                        column: 0,
                    })
                }
                Some(decl) if index >= decl.dim => {
                    err = Some(ExprError::IndexOutOfRange {
                        name: decl.name.clone(),
                        index,
                        dim: decl.dim,
                        column: 0,
                    })
                }
                _ => {}
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.check_calls()
    }

    fn check_calls(&self) -> Result<(), ExprError> {
        match self {
            Node::Const(_) | Node::Var { .. } => Ok(()),
            Node::Neg(inner) => inner.check_calls(),
            Node::Binary { lhs, rhs, .. } => {
                lhs.check_calls()?;
                rhs.check_calls()
            }
            Node::Pow { base, exp } => {
                base.check_calls()?;
                exp.check_calls()
            }
            Node::Call { func, args } => {
                let (lo, hi) = func.arity();
                if args.len() < lo || args.len() > hi {
                    return Err(ExprError::ArityMismatch {
                        func: func.name().to_string(),
                        expected: arity_text(lo, hi),
                        found: args.len(),
                        column: 0,
                    });
                }
                args.iter().try_for_each(Node::check_calls)
            }
        }
    }
}

fn arity_text(lo: usize, hi: usize) -> String {
    if lo == hi {
        lo.to_string()
    } else {
        format!("at least {lo}")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at column {column}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        column: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("unknown variable `{name}` at column {column}")]
    UnknownVariable { name: String, column: usize },
    #[error("index {index} out of range for `{name}` of dimension {dim} (column {column})")]
    IndexOutOfRange {
        name: String,
        index: usize,
        dim: usize,
        column: usize,
    },
    #[error("`{func}` takes {expected} argument(s), got {found} (column {column})")]
    ArityMismatch {
        func: String,
        expected: String,
        found: usize,
        column: usize,
    },
    #[error("component {component}: {source}")]
    Component {
        component: usize,
        #[source]
        source: Box<ExprError>,
    },
    #[error("binding for `{name}` has length {found}, expected {expected}")]
    Binding {
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    DivisionByZero,
    LogOfNonPositive,
    /// Negative base with a non-integer exponent, or zero to a negative power.
    Power,
    /// A sampling period outside a control law's validity interval.
    Period,
}

/// Evaluation hit a guarded node.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error ({kind:?}) in `{node}`")]
pub struct DomainError {
    pub kind: DomainKind,
    /// The offending subexpression, printed.
    pub node: String,
}

/// A single scalar expression with its compiled evaluation program.
#[derive(Debug, Clone)]
pub struct Expression {
    root: Node,
    env: Arc<Env>,
    program: Program,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.env == other.env
    }
}

impl Expression {
    pub fn parse(source: &str, env: &Env) -> Result<Self, ExprError> {
        let root = parser::parse(source, env)?;
        Ok(Self::compile(root, Arc::new(env.clone())))
    }

    pub fn from_node(root: Node, env: &Env) -> Result<Self, ExprError> {
        Self::from_node_shared(root, Arc::new(env.clone()))
    }

    fn from_node_shared(root: Node, env: Arc<Env>) -> Result<Self, ExprError> {
        root.check(&env)?;
        Ok(Self::compile(root, env))
    }

    fn compile(root: Node, env: Arc<Env>) -> Self {
        let program = Program::compile(&root, &env);
        Self { root, env, program }
    }

    pub fn node(&self) -> &Node {
        &self.root
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    /// Evaluates with one slice per declared variable, in declaration order.
    /// Slice lengths are trusted; use [`VectorExpression::evaluate`] for
    /// checked name-based bindings.
    pub fn eval(&self, vars: &[&[f64]]) -> Result<f64, DomainError> {
        self.program.eval(vars)
    }

    pub fn eval_with<S: Scalar>(&self, vars: &[&[S]]) -> Result<S, DomainError> {
        self.program.eval(vars)
    }

    /// True if any reference to variable `slot` occurs.
    pub fn references(&self, slot: usize) -> bool {
        let mut found = false;
        self.root.for_each_var(&mut |s, _| found |= s == slot);
        found
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Printed(&self.root, &self.env))
    }
}

/// Prints a node against an environment. The output reparses to the same tree.
pub struct Printed<'a>(pub &'a Node, pub &'a Env);

impl fmt::Display for Printed<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let env = self.1;
        match self.0 {
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var { slot, index } => match env.vars.get(*slot) {
                Some(decl) if decl.dim == 1 && *index == 0 => write!(f, "{}", decl.name),
                Some(decl) => write!(f, "{}[{index}]", decl.name),
                None => write!(f, "#{slot}[{index}]"),
            },
            Node::Neg(inner) => write!(f, "-({})", Printed(inner, env)),
            Node::Binary { op, lhs, rhs } => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({} {sym} {})", Printed(lhs, env), Printed(rhs, env))
            }
            Node::Pow { base, exp } => {
                write!(f, "({})^({})", Printed(base, env), Printed(exp, env))
            }
            Node::Call { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", Printed(a, env))?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Several expressions sharing one environment, evaluated together.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorExpression {
    components: Vec<Expression>,
    env: Arc<Env>,
}

impl VectorExpression {
    pub fn parse<S: AsRef<str>>(sources: &[S], env: &Env) -> Result<Self, ExprError> {
        let shared = Arc::new(env.clone());
        let components = sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                parser::parse(s.as_ref(), env)
                    .map(|root| Expression::compile(root, shared.clone()))
                    .map_err(|e| ExprError::Component {
                        component: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(components, shared)
    }

    pub fn from_nodes(nodes: Vec<Node>, env: &Env) -> Result<Self, ExprError> {
        let shared = Arc::new(env.clone());
        let components = nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                Expression::from_node_shared(n, shared.clone()).map_err(|e| {
                    ExprError::Component {
                        component: i,
                        source: Box::new(e),
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(components, shared)
    }

    fn assemble(components: Vec<Expression>, env: Arc<Env>) -> Result<Self, ExprError> {
        if components.is_empty() {
            return Err(ExprError::Syntax {
                column: 0,
                expected: vec!["at least one component".into()],
                found: "none".into(),
            });
        }
        Ok(Self { components, env })
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn components(&self) -> &[Expression] {
        &self.components
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.components.iter().map(Expression::node)
    }

    /// Positional evaluation into `out` (length `output_dim`).
    pub fn eval_into(&self, vars: &[&[f64]], out: &mut [f64]) -> Result<(), DomainError> {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(vars)?;
        }
        Ok(())
    }

    pub fn eval(&self, vars: &[&[f64]]) -> Result<Vec<f64>, DomainError> {
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(vars, &mut out)?;
        Ok(out)
    }

    pub fn eval_with<S: Scalar>(&self, vars: &[&[S]]) -> Result<Vec<S>, DomainError> {
        self.components.iter().map(|c| c.eval_with(vars)).collect()
    }

    /// Name-based evaluation with dimension checks.
    pub fn evaluate(&self, bindings: &HashMap<&str, Vec<f64>>) -> Result<Vec<f64>, EvalError> {
        let mut vars: Vec<&[f64]> = Vec::with_capacity(self.env.len());
        for decl in self.env.vars() {
            let v = bindings.get(decl.name.as_str()).ok_or_else(|| ExprError::Binding {
                name: decl.name.clone(),
                expected: decl.dim,
                found: 0,
            })?;
            if v.len() != decl.dim {
                return Err(ExprError::Binding {
                    name: decl.name.clone(),
                    expected: decl.dim,
                    found: v.len(),
                }
                .into());
            }
            vars.push(v);
        }
        Ok(self.eval(&vars)?)
    }

    pub fn references(&self, slot: usize) -> bool {
        self.components.iter().any(|c| c.references(slot))
    }
}

impl fmt::Display for VectorExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Binding(#[from] ExprError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}
