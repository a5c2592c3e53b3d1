//! Uniform access to every trainable tensor of a model, by stable name.
//!
//! Optimisers, gradient clipping, checkpoint archives and the finite-difference
//! tests all walk parameters through [`ParamSet`] in visit order.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

pub trait ParamSet: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.data.fill(0.0));
        z
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((String::from(name), t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn add_assign(&mut self, other: &Self) {
        let mut src = Vec::new();
        other.visit(&mut |_, t| src.push(t));
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            for (a, b) in t.data.iter_mut().zip(&src[i].data) {
                *a += b;
            }
            i += 1;
        });
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v *= s));
    }

    fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |_, t| acc += t.data.iter().map(|v| v * v).sum::<f64>());
        acc
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    /// Bitwise equality over every tensor.
    fn bit_eq(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape == tb.shape
                    && ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
