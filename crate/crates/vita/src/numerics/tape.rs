//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! A [`Tape`] owns an append-only list of nodes; a [`Var`] is a handle to a
//! node plus its forward value. Every operation records, per parent, a
//! closure mapping the output gradient to that parent's gradient
//! contribution. `backward` walks the tape in reverse, which is a valid
//! topological order because parents always precede children.
//!
//! Shapes are validated with panics (programmer errors); domain contracts
//! such as positivity live in the public ops that wrap these primitives.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;

use super::tensor::Tensor;

type GradFn = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    parents: Vec<(usize, GradFn)>,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape { nodes: RefCell::new(Vec::new()) })
    }

    fn push(&self, parents: Vec<(usize, GradFn)>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents });
        nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register an input tensor. Leaves keep their gradients after `backward`.
    pub fn leaf(self: &Rc<Self>, value: Tensor) -> Var {
        let index = self.push(Vec::new());
        Var { tape: Rc::clone(self), index, value: Rc::new(value) }
    }
}

/// Differentiable tensor handle on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    index: usize,
    value: Rc<Tensor>,
}

/// Gradients of a scalar with respect to tape nodes. Only leaf gradients
/// are retained; intermediate gradients are dropped as they are consumed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.grads[v.index].as_ref()
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.grads[v.index].take()
    }
}

fn same_tape(a: &Var, b: &Var) {
    assert!(Rc::ptr_eq(&a.tape, &b.tape), "vars belong to different tapes");
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn tape(&self) -> Rc<Tape> {
        Rc::clone(&self.tape)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    fn unary(&self, value: Tensor, gf: GradFn) -> Var {
        let index = self.tape.push(vec![(self.index, gf)]);
        Var { tape: Rc::clone(&self.tape), index, value: Rc::new(value) }
    }

    fn binary(&self, other: &Var, value: Tensor, ga: GradFn, gb: GradFn) -> Var {
        same_tape(self, other);
        let index = self.tape.push(vec![(self.index, ga), (other.index, gb)]);
        Var { tape: Rc::clone(&self.tape), index, value: Rc::new(value) }
    }

    pub fn add(&self, other: &Var) -> Var {
        let value = self.value.zip_map(&other.value, |a, b| a + b);
        self.binary(other, value, Box::new(|g| g.clone()), Box::new(|g| g.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value.zip_map(&other.value, |a, b| a - b);
        self.binary(other, value, Box::new(|g| g.clone()), Box::new(|g| g.map(|x| -x)))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value.zip_map(&other.value, |a, b| a * b);
        let a = Rc::clone(&self.value);
        let b = Rc::clone(&other.value);
        self.binary(
            other,
            value,
            Box::new(move |g| g.zip_map(&b, |g, b| g * b)),
            Box::new(move |g| g.zip_map(&a, |g, a| g * a)),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value.zip_map(&other.value, |a, b| a / b);
        let a = Rc::clone(&self.value);
        let b = Rc::clone(&other.value);
        let b2 = Rc::clone(&other.value);
        self.binary(
            other,
            value,
            Box::new(move |g| g.zip_map(&b, |g, b| g / b)),
            Box::new(move |g| {
                let mut out = g.zip_map(&a, |g, a| g * a);
                out = out.zip_map(&b2, |x, b| -x / (b * b));
                out
            }),
        )
    }

    pub fn neg(&self) -> Var {
        self.unary(self.value.map(|x| -x), Box::new(|g| g.map(|x| -x)))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(self.value.map(|x| x + c), Box::new(|g| g.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(self.value.map(|x| x * c), Box::new(move |g| g.map(|x| x * c)))
    }

    pub fn exp(&self) -> Var {
        let value = self.value.map(f64::exp);
        let y = Rc::new(value.clone());
        self.unary(value, Box::new(move |g| g.zip_map(&y, |g, y| g * y)))
    }

    pub fn ln(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(f64::ln), Box::new(move |g| g.zip_map(&x, |g, x| g / x)))
    }

    pub fn sin(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(f64::sin), Box::new(move |g| g.zip_map(&x, |g, x| g * x.cos())))
    }

    pub fn sqr(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(|x| x * x), Box::new(move |g| g.zip_map(&x, |g, x| 2.0 * g * x)))
    }

    pub fn recip(&self) -> Var {
        let value = self.value.map(|x| 1.0 / x);
        let y = Rc::new(value.clone());
        self.unary(value, Box::new(move |g| g.zip_map(&y, |g, y| -g * y * y)))
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let x = Rc::clone(&self.value);
        self.unary(
            self.value.map(|v| v.clamp(lo, hi)),
            Box::new(move |g| g.zip_map(&x, |g, x| if x > lo && x < hi { g } else { 0.0 })),
        )
    }

    /// Elementwise `max(x, c)`; gradient passes through where `x > c`.
    pub fn max_scalar(&self, c: f64) -> Var {
        let x = Rc::clone(&self.value);
        self.unary(
            self.value.map(|v| v.max(c)),
            Box::new(move |g| g.zip_map(&x, |g, x| if x > c { g } else { 0.0 })),
        )
    }

    /// Elementwise multiply by a constant tensor (no gradient to the constant).
    pub fn mul_const(&self, t: &Tensor) -> Var {
        let value = self.value.zip_map(t, |a, b| a * b);
        let t = t.clone();
        self.unary(value, Box::new(move |g| g.zip_map(&t, |g, t| g * t)))
    }

    /// GELU with the exact normal CDF: `y = x * Phi(x)`.
    pub fn gelu(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary(
            self.value.map(gelu_scalar),
            Box::new(move |g| {
                g.zip_map(&x, |g, x| g * (normal_cdf(x) + x * normal_pdf(x)))
            }),
        )
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let value = self.value.matmul(&other.value);
        let a = Rc::clone(&self.value);
        let b = Rc::clone(&other.value);
        self.binary(
            other,
            value,
            Box::new(move |g| g.matmul(&b.transpose())),
            Box::new(move |g| a.transpose().matmul(g)),
        )
    }

    pub fn transpose(&self) -> Var {
        self.unary(self.value.transpose(), Box::new(|g| g.transpose()))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var {
        let back = self.value.shape().to_vec();
        self.unary(self.value.reshape(shape), Box::new(move |g| g.reshape(back.clone())))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        let full = self.value.shape().to_vec();
        self.unary(
            self.value.slice_rows(start, len),
            Box::new(move |g| {
                let mut out = Tensor::zeros(full.clone());
                let c = out.ncols();
                out.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                out
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let full = self.value.shape().to_vec();
        self.unary(
            self.value.slice_cols(start, len),
            Box::new(move |g| {
                let mut out = Tensor::zeros(full.clone());
                let c = out.ncols();
                for i in 0..g.nrows() {
                    for j in 0..len {
                        out.data_mut()[i * c + start + j] = g.at2(i, j);
                    }
                }
                out
            }),
        )
    }

    /// Stack rank-2 vars vertically.
    pub fn concat_rows(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = Rc::clone(&parts[0].tape);
        let c = parts[0].value.ncols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut parents: Vec<(usize, GradFn)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            same_tape(&parts[0], p);
            assert_eq!(p.value.ncols(), c, "concat_rows column mismatch");
            let r = p.value.nrows();
            data.extend_from_slice(p.value.data());
            let (start, len) = (offset, r);
            parents.push((p.index, Box::new(move |g: &Tensor| g.slice_rows(start, len))));
            rows += r;
            offset += r;
        }
        let index = tape.push(parents);
        Var { tape, index, value: Rc::new(Tensor::new(vec![rows, c], data)) }
    }

    /// Stack two rank-2 vars side by side.
    pub fn concat_cols(&self, other: &Var) -> Var {
        same_tape(self, other);
        let r = self.value.nrows();
        assert_eq!(other.value.nrows(), r, "concat_cols row mismatch");
        let (ca, cb) = (self.value.ncols(), other.value.ncols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&self.value.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&other.value.data()[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(vec![r, ca + cb], data);
        self.binary(
            other,
            value,
            Box::new(move |g| g.slice_cols(0, ca)),
            Box::new(move |g| g.slice_cols(ca, cb)),
        )
    }

    /// Sum of all elements, as a one-element var.
    pub fn sum_all(&self) -> Var {
        let shape = self.value.shape().to_vec();
        self.unary(
            Tensor::scalar(self.value.sum()),
            Box::new(move |g| Tensor::full(shape.clone(), g.item())),
        )
    }

    /// Add a rank-1 vector to every row of a rank-2 var.
    pub fn add_row(&self, row: &Var) -> Var {
        same_tape(self, row);
        let (r, c) = (self.value.nrows(), self.value.ncols());
        assert_eq!(row.value.len(), c, "add_row length mismatch");
        let mut value = self.value.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                value.data_mut()[i * c + j] += row.value.data()[j];
            }
        }
        self.binary(
            row,
            value,
            Box::new(|g| g.clone()),
            Box::new(move |g| {
                let mut out = Tensor::zeros(vec![c]);
                for i in 0..g.nrows() {
                    for j in 0..c {
                        out.data_mut()[j] += g.at2(i, j);
                    }
                }
                out
            }),
        )
    }

    /// Multiply every row of a rank-2 var by a rank-1 vector.
    pub fn mul_row(&self, row: &Var) -> Var {
        same_tape(self, row);
        let (r, c) = (self.value.nrows(), self.value.ncols());
        assert_eq!(row.value.len(), c, "mul_row length mismatch");
        let mut value = self.value.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                value.data_mut()[i * c + j] *= row.value.data()[j];
            }
        }
        let a = Rc::clone(&self.value);
        let v = Rc::clone(&row.value);
        self.binary(
            row,
            value,
            Box::new(move |g| {
                let mut out = g.clone();
                let c = out.ncols();
                for i in 0..out.nrows() {
                    for j in 0..c {
                        out.data_mut()[i * c + j] *= v.data()[j];
                    }
                }
                out
            }),
            Box::new(move |g| {
                let mut out = Tensor::zeros(vec![c]);
                for i in 0..g.nrows() {
                    for j in 0..c {
                        out.data_mut()[j] += g.at2(i, j) * a.at2(i, j);
                    }
                }
                out
            }),
        )
    }

    /// Softmax along the last axis of a rank-2 var (per row), with the
    /// usual max-subtraction for stability.
    pub fn softmax_rows(&self) -> Var {
        let value = softmax_rows_raw(&self.value);
        let y = Rc::new(value.clone());
        self.unary(
            value,
            Box::new(move |g| {
                let (r, c) = (y.nrows(), y.ncols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..c {
                        out.set2(i, j, y.at2(i, j) * (g.at2(i, j) - dot));
                    }
                }
                out
            }),
        )
    }

    /// Layer normalization over the last axis with affine gain and bias.
    /// Variance is the population variance of each row; `eps` sits inside
    /// the square root so constant rows normalize to zero.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Var {
        same_tape(self, gain);
        same_tape(self, bias);
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let (r, c) = (self.value.nrows(), self.value.ncols());
        assert!(c >= 2, "layer_norm needs last-axis length >= 2");
        assert_eq!(gain.value.len(), c);
        assert_eq!(bias.value.len(), c);

        let mut xhat = Tensor::zeros(vec![r, c]);
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.value.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                xhat.set2(i, j, (row[j] - mean) * inv);
            }
        }
        let mut value = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            for j in 0..c {
                value.set2(i, j, gain.value.data()[j] * xhat.at2(i, j) + bias.value.data()[j]);
            }
        }

        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gain_v = Rc::clone(&gain.value);
        let xhat_x = Rc::clone(&xhat);
        let xhat_g = Rc::clone(&xhat);
        let inv_x = Rc::clone(&inv_std);

        let gx: GradFn = Box::new(move |g| {
            let (r, c) = (g.nrows(), g.ncols());
            let mut out = Tensor::zeros(vec![r, c]);
            for i in 0..r {
                let mut sum_gg = 0.0;
                let mut sum_ggx = 0.0;
                for j in 0..c {
                    let gg = g.at2(i, j) * gain_v.data()[j];
                    sum_gg += gg;
                    sum_ggx += gg * xhat_x.at2(i, j);
                }
                let mean_gg = sum_gg / c as f64;
                let mean_ggx = sum_ggx / c as f64;
                for j in 0..c {
                    let gg = g.at2(i, j) * gain_v.data()[j];
                    out.set2(i, j, inv_x[i] * (gg - mean_gg - xhat_x.at2(i, j) * mean_ggx));
                }
            }
            out
        });
        let ggain: GradFn = Box::new(move |g| {
            let (r, c) = (g.nrows(), g.ncols());
            let mut out = Tensor::zeros(vec![c]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j] += g.at2(i, j) * xhat_g.at2(i, j);
                }
            }
            out
        });
        let gbias: GradFn = Box::new(move |g| {
            let (r, c) = (g.nrows(), g.ncols());
            let mut out = Tensor::zeros(vec![c]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j] += g.at2(i, j);
                }
            }
            out
        });

        let index = self
            .tape
            .push(vec![(self.index, gx), (gain.index, ggain), (bias.index, gbias)]);
        Var { tape: Rc::clone(&self.tape), index, value: Rc::new(value) }
    }

    /// Reverse pass from a scalar var. Returns leaf gradients.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.value.len(), 1, "backward requires a scalar loss");
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.index] = Some(Tensor::full(self.value.shape().to_vec(), 1.0));

        for i in (0..=self.index).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            if node.parents.is_empty() {
                continue; // leaf: keep its gradient
            }
            let g = grads[i].take().unwrap();
            for (parent, gf) in &node.parents {
                let contrib = gf(&g);
                match &mut grads[*parent] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

/// Exact-CDF GELU on a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Row softmax on a plain tensor (shared by forward pass and tests).
pub fn softmax_rows_raw(x: &Tensor) -> Tensor {
    let (r, c) = (x.nrows(), x.ncols());
    let mut out = Tensor::zeros(vec![r, c]);
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let base = i * c;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out.data_mut()[base + j] = e;
            sum += e;
        }
        for j in 0..c {
            out.data_mut()[base + j] /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &Rc<Tape>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(data))
    }

    #[test]
    fn grad_of_square_sum() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![3.0, 4.0]);
        let loss = x.sqr().sum_all();
        assert_eq!(loss.item(), 25.0);
        let grads = loss.backward();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn grad_through_matmul() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, 0.3, 0.7, 0.1]));
        let loss = a.matmul(&b).sum_all();
        let grads = loss.backward();
        // d(sum(AB))/dA = ones @ B^T, d(sum(AB))/dB = A^T @ ones
        for (got, want) in grads.wrt(&a).unwrap().data().iter().zip([0.8, 0.8, 0.8, 0.8]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in grads.wrt(&b).unwrap().data().iter().zip([4.0, 4.0, 6.0, 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = leaf(&tape, vec![2.0]);
        // loss = x*x + x => grad = 2x + 1 = 5
        let loss = x.mul(&x).add(&x).sum_all();
        let grads = loss.backward();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = x.softmax_rows();
        for i in 0..2 {
            let s: f64 = (0..3).map(|j| y.value().at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let cat = Var::concat_rows(&[a.clone(), b.clone()]);
        assert_eq!(cat.value().shape(), &[2, 2]);
        let loss = cat.slice_rows(1, 1).sum_all();
        let grads = loss.backward();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[1.0, 1.0]);
    }
}
