use super::{BinOp, Env, ExprError, Func, Node};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

struct Lexed {
    tok: Tok,
    col: usize,
    /// Source text of a numeric literal, for index parsing.
    text: String,
}

fn lex(src: &str) -> Result<Vec<Lexed>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Lexed {
                tok,
                col: start,
                text: c.to_string(),
            });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                column: start,
                expected: vec!["number".into()],
                found: format!("`{text}`"),
            })?;
            out.push(Lexed {
                tok: Tok::Num(v),
                col: start,
                text,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Lexed {
                tok: Tok::Ident(text.clone()),
                col: start,
                text,
            });
            continue;
        }
        return Err(ExprError::Syntax {
            column: start,
            expected: vec!["operator, number, name or parenthesis".into()],
            found: format!("`{c}`"),
        });
    }
    out.push(Lexed {
        tok: Tok::End,
        col: chars.len(),
        text: String::new(),
    });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Lexed>,
    pos: usize,
    env: &'a Env,
}

pub(super) fn parse(src: &str, env: &Env) -> Result<Node, ExprError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
        env,
    };
    let node = p.expr()?;
    if p.peek() != &Tok::End {
        return Err(p.unexpected(&["operator", "end of input"]));
    }
    Ok(node)
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn col(&self) -> usize {
        self.toks[self.pos].col
    }

    fn bump(&mut self) -> &Lexed {
        let t = &self.toks[self.pos];
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> ExprError {
        ExprError::Syntax {
            column: self.col(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.peek().describe(),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ExprError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&[what]))
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn factor(&mut self) -> Result<Node, ExprError> {
        let negate = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        let literal = matches!(self.peek(), Tok::Num(_));
        let atom = self.atom()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let exp = self.factor()?;
            let pow = Node::Pow {
                base: Box::new(atom),
                exp: Box::new(exp),
            };
            return Ok(if negate { Node::Neg(Box::new(pow)) } else { pow });
        }
        Ok(match (negate, atom) {
            // a signed literal is a negative constant, so printed constants reparse
            (true, Node::Const(c)) if literal => Node::Const(-c),
            (true, atom) => Node::Neg(Box::new(atom)),
            (false, atom) => atom,
        })
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let col = self.col();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Node::Const(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    if *self.peek() == Tok::LParen {
                        return self.call(func, col);
                    }
                }
                self.variable(&name, col)
            }
            _ => Err(self.unexpected(&["number", "name", "`(`", "`-`"])),
        }
    }

    fn call(&mut self, func: Func, col: usize) -> Result<Node, ExprError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.expr()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen, "`,` or `)`")?;
        let (lo, hi) = func.arity();
        if args.len() < lo || args.len() > hi {
            return Err(ExprError::ArityMismatch {
                func: func.name().to_string(),
                expected: super::arity_text(lo, hi),
                found: args.len(),
                column: col,
            });
        }
        Ok(Node::Call { func, args })
    }

    fn variable(&mut self, name: &str, col: usize) -> Result<Node, ExprError> {
        let slot = self.env.slot(name).ok_or_else(|| ExprError::UnknownVariable {
            name: name.to_string(),
            column: col,
        })?;
        let dim = self.env.vars()[slot].dim;
        if *self.peek() != Tok::LBracket {
            if dim == 1 {
                return Ok(Node::var(slot, 0));
            }
            return Err(self.unexpected(&["`[`"]));
        }
        self.bump();
        let idx_col = self.col();
        let index = match self.peek() {
            Tok::Num(_) => {
                let text = self.bump().text.clone();
                text.parse::<usize>().map_err(|_| ExprError::Syntax {
                    column: idx_col,
                    expected: vec!["non-negative integer index".into()],
                    found: format!("`{text}`"),
                })?
            }
            _ => return Err(self.unexpected(&["integer index"])),
        };
        self.expect(Tok::RBracket, "`]`")?;
        if index >= dim {
            return Err(ExprError::IndexOutOfRange {
                name: name.to_string(),
                index,
                dim,
                column: idx_col,
            });
        }
        Ok(Node::var(slot, index))
    }
}
