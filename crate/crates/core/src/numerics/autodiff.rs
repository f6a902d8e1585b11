//! Reverse-mode automatic differentiation over a flat scalar tape.
//!
//! Every node records its kind, its value, and for each parent the local
//! partial derivative `∂node/∂parent`. Nodes are appended in evaluation
//! order, so a single reverse sweep over the node list accumulates adjoints.
//!
//! ```
//! use heartbrain::numerics::autodiff::Tape;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.input(3.0);
//! let y = tape.mul(x, x);
//! let grads = tape.gradient(y);
//! assert_eq!(tape.value(y), 9.0);
//! assert_eq!(grads.wrt(x), 6.0);
//! ```
//!
//! Large fused operations (the Gaussian-process marginal likelihood, for
//! instance) are pushed as [`OpKind::Custom`] nodes carrying their own
//! analytic partials.

use super::NumericsError;
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Pow,
    Tanh,
    Softplus,
    Sum,
    Dot,
    /// `a * c + d` for constants `c`, `d`.
    Affine,
    Custom,
}

impl OpKind {
    /// Look up an elementary op by name. Leaves and fused kinds cannot be
    /// requested this way.
    pub fn from_name(name: &str) -> Result<Self, NumericsError> {
        Ok(match name {
            "+" | "add" => OpKind::Add,
            "-" | "sub" => OpKind::Sub,
            "*" | "mul" => OpKind::Mul,
            "/" | "div" => OpKind::Div,
            "neg" => OpKind::Neg,
            "exp" => OpKind::Exp,
            "log" | "ln" => OpKind::Log,
            "pow" => OpKind::Pow,
            "tanh" => OpKind::Tanh,
            "softplus" => OpKind::Softplus,
            "sum" => OpKind::Sum,
            "dot" => OpKind::Dot,
            other => return Err(NumericsError::UnsupportedOp(other.to_string())),
        })
    }
}

/// Flat computation record. Parents of node `i` live in
/// `parents[offsets[i]..offsets[i + 1]]` with matching `partials`.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    kinds: Vec<OpKind>,
    values: Vec<T>,
    offsets: Vec<usize>,
    parents: Vec<usize>,
    partials: Vec<T>,
}

/// Adjoints produced by one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    adjoints: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> T {
        self.adjoints[v.0]
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<T> {
        vars.iter().map(|v| self.adjoints[v.0]).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.adjoints
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            kinds: Vec::new(),
            values: Vec::new(),
            offsets: vec![0],
            parents: Vec::new(),
            partials: Vec::new(),
        }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        Self {
            kinds: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            offsets,
            parents: Vec::with_capacity(edges),
            partials: Vec::with_capacity(edges),
        }
    }

    /// Drop all nodes but keep the allocations.
    pub fn clear(&mut self) {
        self.kinds.clear();
        self.values.clear();
        self.offsets.truncate(1);
        self.parents.clear();
        self.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> T {
        self.values[v.0]
    }

    pub fn values(&self, vs: &[Var]) -> Vec<T> {
        vs.iter().map(|v| self.values[v.0]).collect()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.kinds[v.0]
    }

    /// Parents of `v` paired with their local partials.
    pub fn edges(&self, v: Var) -> impl Iterator<Item = (Var, T)> + '_ {
        let range = self.offsets[v.0]..self.offsets[v.0 + 1];
        self.parents[range.clone()]
            .iter()
            .zip(&self.partials[range])
            .map(|(&p, &d)| (Var(p), d))
    }

    #[inline]
    fn finish(&mut self, kind: OpKind, value: T) -> Var {
        self.kinds.push(kind);
        self.values.push(value);
        self.offsets.push(self.parents.len());
        Var(self.values.len() - 1)
    }

    #[inline]
    fn edge(&mut self, parent: Var, partial: T) {
        debug_assert!(parent.0 < self.values.len());
        self.parents.push(parent.0);
        self.partials.push(partial);
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: T) -> Var {
        self.finish(OpKind::Input, value)
    }

    pub fn inputs(&mut self, values: &[T]) -> Vec<Var> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    /// Leaf whose gradient is always reported as zero.
    pub fn constant(&mut self, value: T) -> Var {
        self.finish(OpKind::Constant, value)
    }

    pub fn constants(&mut self, values: &[T]) -> Vec<Var> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0] + self.values[b.0];
        self.edge(a, T::one());
        self.edge(b, T::one());
        self.finish(OpKind::Add, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0] - self.values[b.0];
        self.edge(a, T::one());
        self.edge(b, -T::one());
        self.finish(OpKind::Sub, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0], self.values[b.0]);
        self.edge(a, vb);
        self.edge(b, va);
        self.finish(OpKind::Mul, va * vb)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0], self.values[b.0]);
        let inv = T::one() / vb;
        self.edge(a, inv);
        self.edge(b, -va * inv * inv);
        self.finish(OpKind::Div, va * inv)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.values[a.0];
        self.edge(a, -T::one());
        self.finish(OpKind::Neg, v)
    }

    /// `a * scale + shift` with constant `scale` and `shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.values[a.0] * scale + shift;
        self.edge(a, scale);
        self.finish(OpKind::Affine, v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.affine(a, c, T::zero())
    }

    pub fn shift(&mut self, a: Var, c: T) -> Var {
        self.affine(a, T::one(), c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].exp();
        self.edge(a, v);
        self.finish(OpKind::Exp, v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.values[a.0];
        self.edge(a, T::one() / va);
        self.finish(OpKind::Log, va.ln())
    }

    /// `a^b` with both operands on the tape. The partial w.r.t. `b` uses
    /// `ln a` and is only meaningful for `a > 0`.
    pub fn pow(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0], self.values[b.0]);
        let v = va.powf(vb);
        let da = if vb == T::zero() {
            T::zero()
        } else {
            vb * va.powf(vb - T::one())
        };
        let db = if va > T::zero() { v * va.ln() } else { T::zero() };
        self.edge(a, da);
        self.edge(b, db);
        self.finish(OpKind::Pow, v)
    }

    /// `a^p` for a constant exponent.
    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let va = self.values[a.0];
        let da = if p == T::zero() {
            T::zero()
        } else {
            p * va.powf(p - T::one())
        };
        self.edge(a, da);
        self.finish(OpKind::Pow, va.powf(p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].tanh();
        self.edge(a, T::one() - v * v);
        self.finish(OpKind::Tanh, v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.values[a.0];
        self.edge(a, super::special::sigmoid(va));
        self.finish(OpKind::Softplus, super::special::softplus(va))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = T::zero();
        for &x in xs {
            acc = acc + self.values[x.0];
            self.edge(x, T::one());
        }
        self.finish(OpKind::Sum, acc)
    }

    /// Inner product. Panics on length mismatch; use [`Tape::apply`] for a
    /// checked variant.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b) {
            let (vx, vy) = (self.values[x.0], self.values[y.0]);
            acc = acc + vx * vy;
            self.edge(x, vy);
            self.edge(y, vx);
        }
        self.finish(OpKind::Dot, acc)
    }

    /// `Σ a_k b_k + c`, one node.
    pub fn dot_plus(&mut self, a: &[Var], b: &[Var], c: Var) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let mut acc = self.values[c.0];
        for (&x, &y) in a.iter().zip(b) {
            let (vx, vy) = (self.values[x.0], self.values[y.0]);
            acc = acc + vx * vy;
            self.edge(x, vy);
            self.edge(y, vx);
        }
        self.edge(c, T::one());
        self.finish(OpKind::Dot, acc)
    }

    /// Node with caller-supplied value and local partials.
    pub fn custom(&mut self, value: T, parents: &[Var], partials: &[T]) -> Var {
        assert_eq!(parents.len(), partials.len());
        for (&p, &d) in parents.iter().zip(partials) {
            self.edge(p, d);
        }
        self.finish(OpKind::Custom, value)
    }

    /// Checked dispatch by kind, used when the op is chosen at run time.
    pub fn apply(&mut self, kind: OpKind, args: &[Var]) -> Result<Var, NumericsError> {
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(NumericsError::Arity {
                    op: kind,
                    expected: n,
                    got: args.len(),
                })
            }
        };
        Ok(match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(args[0], args[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(args[0], args[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(args[0], args[1])
            }
            OpKind::Div => {
                arity(2)?;
                self.div(args[0], args[1])
            }
            OpKind::Pow => {
                arity(2)?;
                self.pow(args[0], args[1])
            }
            OpKind::Neg => {
                arity(1)?;
                self.neg(args[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(args[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.ln(args[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(args[0])
            }
            OpKind::Softplus => {
                arity(1)?;
                self.softplus(args[0])
            }
            OpKind::Sum => self.sum(args),
            OpKind::Dot => {
                if args.len() % 2 != 0 {
                    return Err(NumericsError::Arity {
                        op: kind,
                        expected: args.len() + 1,
                        got: args.len(),
                    });
                }
                let (a, b) = args.split_at(args.len() / 2);
                self.dot(a, b)
            }
            OpKind::Input | OpKind::Constant | OpKind::Affine | OpKind::Custom => {
                return Err(NumericsError::UnsupportedOp(format!("{kind:?}")))
            }
        })
    }

    /// Reverse sweep seeded at `output` with adjoint 1.
    pub fn gradient(&self, output: Var) -> Gradients<T> {
        let mut adjoints = vec![T::zero(); output.0 + 1];
        adjoints[output.0] = T::one();
        for i in (0..=output.0).rev() {
            let adj = adjoints[i];
            if adj == T::zero() {
                continue;
            }
            for k in self.offsets[i]..self.offsets[i + 1] {
                let p = self.parents[k];
                adjoints[p] = adjoints[p] + adj * self.partials[k];
            }
        }
        for (i, kind) in self.kinds[..=output.0].iter().enumerate() {
            if *kind == OpKind::Constant && i != output.0 {
                adjoints[i] = T::zero();
            }
        }
        adjoints.resize(self.values.len(), T::zero());
        Gradients { adjoints }
    }
}

/// Value and gradient of a scalar function built on a fresh tape.
pub fn value_and_grad<T, F>(f: F, inputs: &[T]) -> Result<(T, Vec<T>), NumericsError>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars = tape.inputs(inputs);
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradient(out);
    Ok((tape.value(out), grads.collect(&vars)))
}

/// Gradient of a scalar function built on a fresh tape.
pub fn grad<T, F>(f: F, inputs: &[T]) -> Result<Vec<T>, NumericsError>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    value_and_grad(f, inputs).map(|(_, g)| g)
}
