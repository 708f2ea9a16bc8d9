//! A minimal reverse-mode gradient tape over [`Tensor`] values.
//!
//! The tape records each primitive operation together with its computed
//! value. [`Tape::gradients`] walks the record once in reverse order and
//! accumulates adjoints for the requested variables only; variables that were
//! never asked for are absent from the result, and tracked variables with no
//! influence on the output come back as zeros.
//!
//! The recorded KL divergence applies a 1e-12 floor inside its logarithms so
//! that training losses stay finite; the pure `tensor::kl_divergence`
//! function reports infinity honestly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_at, softmax_t, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine { w: Var, x: Var, b: Var },
    Relu { z: Var },
    SoftmaxT { z: Var, temperature: f64 },
    KlDivergence { p: Var, q: Var },
    CrossEntropy { logits: Var, y: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Index { a: Var, i: usize },
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// Records a leaf value. Cheap: the tensor buffer is shared, not copied.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::affine(self.value(w), self.value(x), self.value(b))?;
        Ok(self.push(Op::Affine { w, x, b }, value))
    }

    pub fn relu(&mut self, z: Var) -> Var {
        let value = crate::tensor::relu(self.value(z));
        self.push(Op::Relu { z }, value)
    }

    pub fn softmax_t(&mut self, z: Var, temperature: f64) -> Result<Var> {
        let value = softmax_t(self.value(z), temperature)?;
        Ok(self.push(Op::SoftmaxT { z, temperature }, value))
    }

    /// KL divergence of `q` (target) from `p` (prediction), with a 1e-12
    /// floor inside the logs.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pt, qt) = (self.value(p), self.value(q));
        if pt.len() != qt.len() {
            return Err(Error::ShapeMismatch {
                op: "tape kl_divergence",
                detail: format!("p has {} entries, q has {}", pt.len(), qt.len()),
            });
        }
        let mut total = 0.0;
        for (&pi, &qi) in pt.data().iter().zip(qt.data()) {
            if qi > 0.0 {
                total += qi * (qi.max(KL_FLOOR) / pi.max(KL_FLOOR)).ln();
            }
        }
        let value = Tensor::from_raw(vec![1], vec![total]);
        Ok(self.push(Op::KlDivergence { p, q }, value))
    }

    pub fn cross_entropy(&mut self, logits: Var, y: usize) -> Result<Var> {
        let lt = self.value(logits);
        if y >= lt.len() {
            return Err(Error::IndexOutOfRange { index: y, len: lt.len() });
        }
        let value = Tensor::from_raw(vec![1], vec![-log_softmax_at(lt.data(), y)]);
        Ok(self.push(Op::CrossEntropy { logits, y }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("tape add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("tape sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let data: Vec<f64> = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_raw(at.shape().to_vec(), data);
        Ok(self.push(op, value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale { a, factor }, value)
    }

    /// Selects a single coordinate as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let at = self.value(a);
        if i >= at.len() {
            return Err(Error::IndexOutOfRange { index: i, len: at.len() });
        }
        let value = Tensor::from_raw(vec![1], vec![at.get(i)]);
        Ok(self.push(Op::Index { a, i }, value))
    }

    /// Reverse pass from a scalar `output`, returning adjoints for each
    /// variable in `tracked`.
    pub fn gradients(&self, output: Var, tracked: &[Var]) -> Result<HashMap<Var, Tensor>> {
        if output.0 >= self.values.len() {
            return Err(Error::Usage("output variable is not on this tape".into()));
        }
        if !self.values[output.0].is_scalar() {
            return Err(Error::Usage("gradients require a scalar output".into()));
        }
        for &v in tracked {
            if v.0 >= self.values.len() {
                return Err(Error::Usage("tracked variable is not on this tape".into()));
            }
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.values.len()];
        adjoints[output.0] = Some(Tensor::from_raw(vec![1], vec![1.0]));

        for idx in (0..=output.0).rev() {
            let Some(grad) = adjoints[idx].take() else { continue };
            self.backward_step(idx, &grad, &mut adjoints);
            // Re-store so chained reads (e.g. tracked intermediates) still work.
            adjoints[idx] = Some(grad);
        }

        let mut out = HashMap::new();
        for &v in tracked {
            let g = adjoints[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape().to_vec()));
            out.insert(v, g);
        }
        Ok(out)
    }

    fn backward_step(&self, idx: usize, grad: &Tensor, adjoints: &mut [Option<Tensor>]) {
        let accumulate = |adjoints: &mut [Option<Tensor>], var: Var, delta: Vec<f64>| {
            let shape = self.values[var.0].shape().to_vec();
            match &mut adjoints[var.0] {
                Some(existing) => {
                    let buf = existing.data_mut();
                    for (e, d) in buf.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot => *slot = Some(Tensor::from_raw(shape, delta)),
            }
        };

        match &self.ops[idx] {
            Op::Input => {}
            Op::Affine { w, x, b } => {
                let wt = self.value(*w);
                let xt = self.value(*x);
                let (m, n) = (wt.rows(), wt.cols());
                let g = grad.data();
                let mut gw = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gw[i * n + j] = g[i] * xt.get(j);
                    }
                }
                let mut gx = vec![0.0; n];
                let wd = wt.data();
                for i in 0..m {
                    let gi = g[i];
                    if gi != 0.0 {
                        let row = &wd[i * n..(i + 1) * n];
                        for j in 0..n {
                            gx[j] += row[j] * gi;
                        }
                    }
                }
                accumulate(adjoints, *w, gw);
                accumulate(adjoints, *x, gx);
                accumulate(adjoints, *b, g.to_vec());
            }
            Op::Relu { z } => {
                let zt = self.value(*z);
                let delta: Vec<f64> = zt
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(adjoints, *z, delta);
            }
            Op::SoftmaxT { z, temperature } => {
                let y = self.value(Var(idx)).data().to_vec();
                let g = grad.data();
                let dot: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                let delta: Vec<f64> = y
                    .iter()
                    .zip(g)
                    .map(|(&yi, &gi)| yi * (gi - dot) / temperature)
                    .collect();
                accumulate(adjoints, *z, delta);
            }
            Op::KlDivergence { p, q } => {
                let g = grad.get(0);
                let pt = self.value(*p);
                let qt = self.value(*q);
                let dp: Vec<f64> = pt
                    .data()
                    .iter()
                    .zip(qt.data())
                    .map(|(&pi, &qi)| if qi > 0.0 { -g * qi / pi.max(KL_FLOOR) } else { 0.0 })
                    .collect();
                let dq: Vec<f64> = pt
                    .data()
                    .iter()
                    .zip(qt.data())
                    .map(|(&pi, &qi)| {
                        if qi > 0.0 {
                            g * ((qi.max(KL_FLOOR) / pi.max(KL_FLOOR)).ln() + 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(adjoints, *p, dp);
                accumulate(adjoints, *q, dq);
            }
            Op::CrossEntropy { logits, y } => {
                let g = grad.get(0);
                let probs = softmax_t(self.value(*logits), 1.0).expect("finite logits");
                let delta: Vec<f64> = probs
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| g * (pi - if i == *y { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(adjoints, *logits, delta);
            }
            Op::Add { a, b } => {
                accumulate(adjoints, *a, grad.data().to_vec());
                accumulate(adjoints, *b, grad.data().to_vec());
            }
            Op::Sub { a, b } => {
                accumulate(adjoints, *a, grad.data().to_vec());
                accumulate(adjoints, *b, grad.data().iter().map(|g| -g).collect());
            }
            Op::Scale { a, factor } => {
                accumulate(adjoints, *a, grad.data().iter().map(|g| g * factor).collect());
            }
            Op::Index { a, i } => {
                let mut delta = vec![0.0; self.values[a.0].len()];
                delta[*i] = grad.get(0);
                accumulate(adjoints, *a, delta);
            }
        }
    }
}
