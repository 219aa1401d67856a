//! Reverse-mode automatic differentiation over a flat tape.
//!
//! The tape records every scalar operation of a loss computation; `backward`
//! walks it once in reverse and accumulates adjoints. The op vocabulary is
//! exactly what the training objectives need: arithmetic, exp/ln, tanh,
//! sigmoid, sqrt. Batch statistics (mean, Pearson) are composed from these
//! primitives in `stats`.

/// Handle into a [`Tape`]. Copyable; only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    /// Leaf with a tracked gradient (model parameter or probed input).
    Input,
    /// Leaf with no gradient (data, labels, hyperparameters).
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
}

struct Node {
    value: f64,
    adjoint: f64,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
    }

    /// Drop all nodes but keep the allocation, so one tape can be reused
    /// across mini-batches.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: f64, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            adjoint: 0.0,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: f64) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, Op::Const)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> f64 {
        self.nodes[v.0].adjoint
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].value + self.nodes[b.0].value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].value - self.nodes[b.0].value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].value * self.nodes[b.0].value, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].value / self.nodes[b.0].value, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(-self.nodes[a.0].value, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].value.exp(), Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].value.ln(), Op::Ln(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].value.tanh(), Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(crate::nn::sigmoid(self.nodes[a.0].value), Op::Sigmoid(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].value.sqrt(), Op::Sqrt(a.0))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = self.constant(c);
        self.add(a, c)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let c = self.constant(c);
        self.mul(a, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Sum of a slice of vars. Errors out only by panicking on an empty
    /// slice, which every caller rules out.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mean(&mut self, vars: &[Var]) -> Var {
        let s = self.sum(vars);
        self.mul_const(s, 1.0 / vars.len() as f64)
    }

    /// Reverse pass seeding d(loss)/d(loss) = 1. Adjoints of earlier
    /// backward calls are cleared first.
    pub fn backward(&mut self, loss: Var) {
        for n in &mut self.nodes {
            n.adjoint = 0.0;
        }
        self.nodes[loss.0].adjoint = 1.0;
        for i in (0..=loss.0).rev() {
            let adj = self.nodes[i].adjoint;
            if adj == 0.0 {
                continue;
            }
            match self.nodes[i].op {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    self.nodes[a].adjoint += adj;
                    self.nodes[b].adjoint += adj;
                }
                Op::Sub(a, b) => {
                    self.nodes[a].adjoint += adj;
                    self.nodes[b].adjoint -= adj;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a].value, self.nodes[b].value);
                    self.nodes[a].adjoint += adj * vb;
                    self.nodes[b].adjoint += adj * va;
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.nodes[a].value, self.nodes[b].value);
                    self.nodes[a].adjoint += adj / vb;
                    self.nodes[b].adjoint -= adj * va / (vb * vb);
                }
                Op::Neg(a) => self.nodes[a].adjoint -= adj,
                Op::Exp(a) => self.nodes[a].adjoint += adj * self.nodes[i].value,
                Op::Ln(a) => self.nodes[a].adjoint += adj / self.nodes[a].value,
                Op::Tanh(a) => {
                    let t = self.nodes[i].value;
                    self.nodes[a].adjoint += adj * (1.0 - t * t);
                }
                Op::Sigmoid(a) => {
                    let s = self.nodes[i].value;
                    self.nodes[a].adjoint += adj * s * (1.0 - s);
                }
                Op::Sqrt(a) => {
                    self.nodes[a].adjoint += adj * 0.5 / self.nodes[i].value;
                }
            }
        }
    }
}

/// Pearson correlation of two equal-length batches on the tape, with the
/// zero-variance guard: if either population std falls below `STD_EPS` the
/// result is a constant 0 carrying no gradient.
pub fn pearson_var(tape: &mut Tape, a: &[Var], b: &[Var]) -> Var {
    assert!(a.len() == b.len() && a.len() >= 2, "pearson needs two equal batches of len >= 2");
    let ma = tape.mean(a);
    let mb = tape.mean(b);
    let mut cov_terms = Vec::with_capacity(a.len());
    let mut va_terms = Vec::with_capacity(a.len());
    let mut vb_terms = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let da = tape.sub(ai, ma);
        let db = tape.sub(bi, mb);
        cov_terms.push(tape.mul(da, db));
        va_terms.push(tape.square(da));
        vb_terms.push(tape.square(db));
    }
    let cov = tape.mean(&cov_terms);
    let var_a = tape.mean(&va_terms);
    let var_b = tape.mean(&vb_terms);
    if tape.value(var_a).sqrt() < STD_EPS || tape.value(var_b).sqrt() < STD_EPS {
        return tape.constant(0.0);
    }
    let sa = tape.sqrt(var_a);
    let sb = tape.sqrt(var_b);
    let denom = tape.mul(sa, sb);
    tape.div(cov, denom)
}

/// Binary cross-entropy of probabilities `p` in (0,1) against labels `y`.
pub fn bce_var(tape: &mut Tape, p: &[Var], y: &[f64]) -> Var {
    assert_eq!(p.len(), y.len());
    let mut terms = Vec::with_capacity(p.len());
    let one = tape.constant(1.0);
    for (&pi, &yi) in p.iter().zip(y) {
        let ln_p = tape.ln(pi);
        let q = tape.sub(one, pi);
        let ln_q = tape.ln(q);
        let t1 = tape.mul_const(ln_p, yi);
        let t2 = tape.mul_const(ln_q, 1.0 - yi);
        let s = tape.add(t1, t2);
        terms.push(tape.neg(s));
    }
    tape.mean(&terms)
}

/// Stds below this are treated as zero variance in the Pearson guard.
pub const STD_EPS: f64 = 1e-8;
