use super::{BinOp, DomainError, DomainKind, Env, Func, Node, Printed, Scalar};

#[derive(Debug, Clone, PartialEq)]
enum Instr {
    Const(f64),
    Load { slot: usize, index: usize },
    Neg,
    Add,
    Sub,
    Mul,
    /// Guarded ops carry an index into `Program::guards` for error reporting.
    Div(usize),
    Pow(usize),
    Ln(usize),
    Abs,
    Exp,
    Min(usize),
    Max(usize),
}

/// Postfix stack program compiled from a [`Node`] tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    code: Vec<Instr>,
    guards: Vec<String>,
    depth: usize,
}

impl Program {
    pub(super) fn compile(root: &Node, env: &Env) -> Self {
        let mut p = Program {
            code: Vec::with_capacity(root.size()),
            guards: Vec::new(),
            depth: 0,
        };
        let mut depth = 0;
        p.emit(root, env, &mut depth);
        p
    }

    fn push(&mut self, instr: Instr, depth: &mut usize, pops: usize) {
        *depth = *depth + 1 - pops;
        self.depth = self.depth.max(*depth);
        self.code.push(instr);
    }

    fn guard(&mut self, node: &Node, env: &Env) -> usize {
        self.guards.push(Printed(node, env).to_string());
        self.guards.len() - 1
    }

    fn emit(&mut self, node: &Node, env: &Env, depth: &mut usize) {
        match node {
            Node::Const(c) => self.push(Instr::Const(*c), depth, 0),
            Node::Var { slot, index } => self.push(
                Instr::Load {
                    slot: *slot,
                    index: *index,
                },
                depth,
                0,
            ),
            Node::Neg(inner) => {
                self.emit(inner, env, depth);
                self.push(Instr::Neg, depth, 1);
            }
            Node::Binary { op, lhs, rhs } => {
                self.emit(lhs, env, depth);
                self.emit(rhs, env, depth);
                let instr = match op {
                    BinOp::Add => Instr::Add,
                    BinOp::Sub => Instr::Sub,
                    BinOp::Mul => Instr::Mul,
                    BinOp::Div => Instr::Div(self.guard(node, env)),
                };
                self.push(instr, depth, 2);
            }
            Node::Pow { base, exp } => {
                self.emit(base, env, depth);
                self.emit(exp, env, depth);
                let g = self.guard(node, env);
                self.push(Instr::Pow(g), depth, 2);
            }
            Node::Call { func, args } => {
                for a in args {
                    self.emit(a, env, depth);
                }
                let instr = match func {
                    Func::Abs => Instr::Abs,
                    Func::Exp => Instr::Exp,
                    Func::Ln => Instr::Ln(self.guard(node, env)),
                    Func::Min => Instr::Min(args.len()),
                    Func::Max => Instr::Max(args.len()),
                };
                self.push(instr, depth, args.len());
            }
        }
    }

    fn fail(&self, kind: DomainKind, guard: usize) -> DomainError {
        DomainError {
            kind,
            node: self.guards[guard].clone(),
        }
    }

    pub fn eval<S: Scalar>(&self, vars: &[&[S]]) -> Result<S, DomainError> {
        let mut stack: Vec<S> = Vec::with_capacity(self.depth);
        for instr in &self.code {
            match *instr {
                Instr::Const(c) => stack.push(S::from_f64(c)),
                Instr::Load { slot, index } => stack.push(vars[slot][index]),
                Instr::Neg => {
                    let a = stack.pop().unwrap();
                    stack.push(-a);
                }
                Instr::Abs => {
                    let a = stack.pop().unwrap();
                    stack.push(a.abs());
                }
                Instr::Exp => {
                    let a = stack.pop().unwrap();
                    stack.push(a.exp());
                }
                Instr::Ln(g) => {
                    let a = stack.pop().unwrap();
                    if !(a.to_f64() > 0.0) {
                        return Err(self.fail(DomainKind::LogOfNonPositive, g));
                    }
                    stack.push(a.ln());
                }
                Instr::Add | Instr::Sub | Instr::Mul | Instr::Div(_) | Instr::Pow(_) => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    let r = match *instr {
                        Instr::Add => a + b,
                        Instr::Sub => a - b,
                        Instr::Mul => a * b,
                        Instr::Div(g) => {
                            if b.is_zero() {
                                return Err(self.fail(DomainKind::DivisionByZero, g));
                            }
                            a / b
                        }
                        Instr::Pow(g) => power(a, b).ok_or_else(|| self.fail(DomainKind::Power, g))?,
                        _ => unreachable!(),
                    };
                    stack.push(r);
                }
                Instr::Min(n) | Instr::Max(n) => {
                    let at = stack.len() - n;
                    let is_min = matches!(instr, Instr::Min(_));
                    let mut acc = stack[at];
                    for &v in &stack[at + 1..] {
                        let take = if is_min { v < acc } else { v > acc };
                        if take {
                            acc = v;
                        }
                    }
                    stack.truncate(at);
                    stack.push(acc);
                }
            }
        }
        Ok(stack.pop().expect("compiled program leaves one value"))
    }
}

/// `base^exp` with integer exponents taken exactly; a non-integer exponent
/// needs a non-negative base, and zero cannot be raised to a negative power.
pub(crate) fn power<S: Scalar>(base: S, exp: S) -> Option<S> {
    let p = exp.to_f64();
    let b = base.to_f64();
    if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        if b == 0.0 && p < 0.0 {
            return None;
        }
        return Some(base.powi(p as i32));
    }
    if b < 0.0 || (b == 0.0 && p < 0.0) {
        return None;
    }
    if b == 0.0 {
        return Some(S::from_f64(0.0));
    }
    Some(base.powf(exp))
}
