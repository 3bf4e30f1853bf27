use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Real;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Real> Graph<'_, T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), value, &[a, b], move |c, s| {
            s.add(a, c.grad);
            s.add(b, c.grad);
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        self.push("sub", self.shape(a).to_vec(), value, &[a, b], move |c, s| {
            s.add(a, c.grad);
            if let Some(gb) = s.get(b) {
                gb.iter_mut().zip(c.grad).for_each(|(d, &g)| *d -= g);
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), value, &[a, b], move |c, s| {
            let (va, vb) = (c.value(a), c.value(b));
            if let Some(ga) = s.get(a) {
                for ((d, &g), &y) in ga.iter_mut().zip(c.grad).zip(vb) {
                    *d += g * y;
                }
            }
            if let Some(gb) = s.get(b) {
                for ((d, &g), &x) in gb.iter_mut().zip(c.grad).zip(va) {
                    *d += g * x;
                }
            }
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x / y).collect();
        self.push("div", self.shape(a).to_vec(), value, &[a, b], move |c, s| {
            let vb = c.value(b);
            if let Some(ga) = s.get(a) {
                for ((d, &g), &y) in ga.iter_mut().zip(c.grad).zip(vb) {
                    *d += g / y;
                }
            }
            if let Some(gb) = s.get(b) {
                for (((d, &g), &y), &q) in gb.iter_mut().zip(c.grad).zip(vb).zip(c.out) {
                    *d -= g * q / y;
                }
            }
        })
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.select_binary("minimum", a, b, |x, y| x <= y)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.select_binary("maximum", a, b, |x, y| x >= y)
    }

    fn select_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        take_a: fn(T, T) -> bool,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        if self.tracking_branches() {
            let keys: Vec<u64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| take_a(x, y) as u64).collect();
            self.note_branches(keys);
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| if take_a(x, y) { x } else { y })
            .collect();
        self.push(op, self.shape(a).to_vec(), value, &[a, b], move |c, s| {
            let (va, vb) = (c.value(a), c.value(b));
            if let Some(ga) = s.get(a) {
                for i in 0..ga.len() {
                    if take_a(va[i], vb[i]) {
                        ga[i] += c.grad[i];
                    }
                }
            }
            if let Some(gb) = s.get(b) {
                for i in 0..gb.len() {
                    if !take_a(va[i], vb[i]) {
                        gb[i] += c.grad[i];
                    }
                }
            }
        })
    }

    /// `x + b` with `b` broadcast along the last dimension of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(b) != [d] {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} does not match last dim of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let vb = self.value(b);
        let value = self.value(x).chunks(d).flat_map(|row| row.iter().zip(vb).map(|(&v, &w)| v + w)).collect();
        self.push("add_row", self.shape(x).to_vec(), value, &[x, b], move |c, s| {
            s.add(x, c.grad);
            if let Some(gb) = s.get(b) {
                for row in c.grad.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
            }
        })
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(shape_err("scale_by", format!("scale must be scalar, got {:?}", self.shape(s))));
        }
        let k = self.value(s)[0];
        let value = self.value(x).iter().map(|&v| v * k).collect();
        self.push("scale_by", self.shape(x).to_vec(), value, &[x, s], move |c, sink| {
            let k = c.value(s)[0];
            if let Some(gx) = sink.get(x) {
                gx.iter_mut().zip(c.grad).for_each(|(d, &g)| *d += g * k);
            }
            let vx = c.value(x);
            if let Some(gs) = sink.get(s) {
                let mut acc = T::ZERO;
                for (&g, &v) in c.grad.iter().zip(vx) {
                    acc += g * v;
                }
                gs[0] += acc;
            }
        })
    }

    pub fn mul_const(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::lit(k);
        let value = self.value(x).iter().map(|&v| v * k).collect();
        self.push("mul_const", self.shape(x).to_vec(), value, &[x], move |c, s| {
            if let Some(gx) = s.get(x) {
                gx.iter_mut().zip(c.grad).for_each(|(d, &g)| *d += g * k);
            }
        })
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::lit(k);
        let value = self.value(x).iter().map(|&v| v + k).collect();
        self.push("add_const", self.shape(x).to_vec(), value, &[x], move |c, s| s.add(x, c.grad))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_const(x, -1.0)
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative given (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(op, self.shape(x).to_vec(), value, &[x], move |c, s| {
            let vx = c.value(x);
            if let Some(gx) = s.get(x) {
                for i in 0..gx.len() {
                    gx[i] += c.grad[i] * df(vx[i], c.out[i]);
                }
            }
        })
    }

    fn note_signs(&mut self, x: Var) {
        if self.tracking_branches() {
            let keys: Vec<u64> = self.value(x).iter().map(|&v| (v >= T::ZERO) as u64 + 2 * (v > T::ZERO) as u64).collect();
            self.note_branches(keys);
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.note_signs(x);
        self.unary(
            "relu",
            x,
            |v| if v > T::ZERO { v } else { T::ZERO },
            |v, _| if v > T::ZERO { T::ONE } else { T::ZERO },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.note_signs(x);
        let k = T::lit(slope);
        self.unary(
            "leaky_relu",
            x,
            move |v| if v >= T::ZERO { v } else { k * v },
            move |v, _| if v >= T::ZERO { T::ONE } else { k },
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, |v, _| {
            let cdf = T::lit(0.5) * (T::ONE + (v * T::lit(INV_SQRT_2)).erf());
            let pdf = T::lit(INV_SQRT_2PI) * (T::lit(-0.5) * v * v).exp();
            cdf + v * pdf
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::ONE - y))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.note_signs(x);
        self.unary("abs", x, |v| v.abs(), |v, _| if v >= T::ZERO { T::ONE } else { -T::ONE })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |v, _| T::lit(2.0) * v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![total], &[x], move |c, s| {
            let g = c.grad[0];
            if let Some(gx) = s.get(x) {
                gx.iter_mut().for_each(|d| *d += g);
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x) as f64;
        let s = self.sum(x)?;
        self.mul_const(s, 1.0 / n)
    }

    /// `sum(x * w)` against a constant weight tensor; used to build scalar
    /// test objectives that do not cancel by symmetry.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.numel(x) {
            return Err(shape_err("dot_const", format!("{} weights for {:?}", w.len(), self.shape(x))));
        }
        let mut acc = T::ZERO;
        for (&a, &b) in self.value(x).iter().zip(w) {
            acc += a * b;
        }
        let w = w.to_vec();
        self.push("dot_const", vec![1], vec![acc], &[x], move |c, s| {
            let g = c.grad[0];
            if let Some(gx) = s.get(x) {
                gx.iter_mut().zip(&w).for_each(|(d, &wi)| *d += g * wi);
            }
        })
    }
}

pub(crate) fn gelu<T: Real>(v: T) -> T {
    T::lit(0.5) * v * (T::ONE + (v * T::lit(INV_SQRT_2)).erf())
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn leaky_relu_negative_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(y), &[-0.2, 0.0, 3.0]);
    }

    #[test]
    fn gelu_saturates() {
        assert_eq!(gelu(40.0f64), 40.0);
        assert!(gelu(-40.0f64).abs() < 1e-300);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn scale_by_gradient_is_dot() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad());
        let s = g.input(&Tensor::scalar(0.5).with_requires_grad());
        let y = g.scale_by(x, s).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap(), &[6.0]);
        assert_eq!(grads.get(x).unwrap(), &[0.5; 3]);
    }
}
