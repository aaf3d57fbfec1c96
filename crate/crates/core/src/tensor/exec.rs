//! Executor abstraction: one forward implementation, two evaluation modes.
//!
//! [`Graph`](super::Graph) records every application for a later backward
//! pass; [`Eager`] just computes, so intermediates are freed as soon as the
//! last handle drops. Model code is written once against this trait.

use std::rc::Rc;

use super::kernels;
use super::{Element, Tensor};
use crate::error::Result;
use crate::params::{ParamId, ParamSet};

pub trait Exec<E: Element> {
    type H: Clone;

    /// Introduce a constant (non-differentiable) tensor.
    fn lit(&mut self, v: Tensor<E>) -> Self::H;

    /// Introduce a parameter leaf that participates in the backward pass.
    fn param(&mut self, set: &ParamSet<E>, id: ParamId) -> Self::H;

    fn value<'a>(&'a self, h: &'a Self::H) -> &'a Tensor<E>;

    fn affine(&mut self, x: &Self::H, w: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn matmul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn transpose(&mut self, x: &Self::H) -> Result<Self::H>;
    fn softmax(&mut self, x: &Self::H) -> Result<Self::H>;
    fn layer_norm(&mut self, x: &Self::H, eps: f64) -> Result<Self::H>;
    fn scan(&mut self, a: &Self::H, b: &Self::H, h0: &Self::H) -> Result<Self::H>;
    /// Fused diagonal selective recurrence with readout:
    /// y_i[c] = Σ_s c_i[s] · h_i[c,s], h_i[c,s] = decay_i[c]·h_{i-1}[c,s] + dx_i[c]·b_i[s],
    /// visited back-to-front when `reverse` is set.
    fn selective_scan(
        &mut self,
        decay: &Self::H,
        dx: &Self::H,
        b_sel: &Self::H,
        c_sel: &Self::H,
        reverse: bool,
    ) -> Result<Self::H>;
    fn silu(&mut self, x: &Self::H) -> Result<Self::H>;
    fn softplus(&mut self, x: &Self::H) -> Result<Self::H>;
    fn exp(&mut self, x: &Self::H) -> Result<Self::H>;
    fn mul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn scale(&mut self, x: &Self::H, c: f64) -> Result<Self::H>;
    fn add_const(&mut self, x: &Self::H, c: f64) -> Result<Self::H>;
    fn cross_entropy(&mut self, logits: &Self::H, targets: &[usize]) -> Result<Self::H>;
    fn embed(&mut self, table: &Self::H, ids: &[usize]) -> Result<Self::H>;
    fn slice_cols(&mut self, x: &Self::H, start: usize, width: usize) -> Result<Self::H>;
    fn concat_cols(&mut self, parts: &[Self::H]) -> Result<Self::H>;
    fn rotary(&mut self, x: &Self::H, base: f64) -> Result<Self::H>;
    fn repeat_each(&mut self, x: &Self::H, n: usize) -> Result<Self::H>;
    fn tile_last(&mut self, x: &Self::H, times: usize) -> Result<Self::H>;
    fn sum_groups(&mut self, x: &Self::H, n: usize) -> Result<Self::H>;
    fn reverse_rows(&mut self, x: &Self::H) -> Result<Self::H>;
    fn broadcast_rows(&mut self, x: &Self::H, rows: usize) -> Result<Self::H>;
    fn sum_all(&mut self, x: &Self::H) -> Result<Self::H>;
}

/// Non-recording executor. Handles are reference-counted values, so large
/// intermediates (attention score matrices in particular) die early.
#[derive(Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Eager
    }

    pub fn unwrap(h: Rc<Tensor<impl Element>>) -> Tensor<impl Element> {
        Rc::try_unwrap(h).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl<E: Element> Exec<E> for Eager {
    type H = Rc<Tensor<E>>;

    fn lit(&mut self, v: Tensor<E>) -> Self::H {
        Rc::new(v)
    }

    fn param(&mut self, set: &ParamSet<E>, id: ParamId) -> Self::H {
        Rc::new(set.get(id).clone())
    }

    fn value<'a>(&'a self, h: &'a Self::H) -> &'a Tensor<E> {
        h
    }

    fn affine(&mut self, x: &Self::H, w: &Self::H, b: &Self::H) -> Result<Self::H> {
        kernels::affine(x, w, b).map(Rc::new)
    }
    fn matmul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        kernels::matmul(a, b).map(Rc::new)
    }
    fn transpose(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::transpose(x).map(Rc::new)
    }
    fn softmax(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::softmax(x).map(Rc::new)
    }
    fn layer_norm(&mut self, x: &Self::H, eps: f64) -> Result<Self::H> {
        kernels::layer_norm(x, eps).map(Rc::new)
    }
    fn scan(&mut self, a: &Self::H, b: &Self::H, h0: &Self::H) -> Result<Self::H> {
        kernels::scan(a, b, h0).map(Rc::new)
    }
    fn selective_scan(
        &mut self,
        decay: &Self::H,
        dx: &Self::H,
        b_sel: &Self::H,
        c_sel: &Self::H,
        reverse: bool,
    ) -> Result<Self::H> {
        let (y, _) = kernels::selective_scan(decay, dx, b_sel, c_sel, reverse, false)?;
        Ok(Rc::new(y))
    }
    fn silu(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::silu(x).map(Rc::new)
    }
    fn softplus(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::softplus(x).map(Rc::new)
    }
    fn exp(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::exp(x).map(Rc::new)
    }
    fn mul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        kernels::mul(a, b).map(Rc::new)
    }
    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        kernels::add(a, b).map(Rc::new)
    }
    fn scale(&mut self, x: &Self::H, c: f64) -> Result<Self::H> {
        kernels::scale(x, c).map(Rc::new)
    }
    fn add_const(&mut self, x: &Self::H, c: f64) -> Result<Self::H> {
        kernels::add_const(x, c).map(Rc::new)
    }
    fn cross_entropy(&mut self, logits: &Self::H, targets: &[usize]) -> Result<Self::H> {
        kernels::cross_entropy(logits, targets).map(Rc::new)
    }
    fn embed(&mut self, table: &Self::H, ids: &[usize]) -> Result<Self::H> {
        kernels::embed(table, ids).map(Rc::new)
    }
    fn slice_cols(&mut self, x: &Self::H, start: usize, width: usize) -> Result<Self::H> {
        kernels::slice_cols(x, start, width).map(Rc::new)
    }
    fn concat_cols(&mut self, parts: &[Self::H]) -> Result<Self::H> {
        let refs: Vec<&Tensor<E>> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::concat_cols(&refs).map(Rc::new)
    }
    fn rotary(&mut self, x: &Self::H, base: f64) -> Result<Self::H> {
        kernels::rotary(x, base).map(Rc::new)
    }
    fn repeat_each(&mut self, x: &Self::H, n: usize) -> Result<Self::H> {
        kernels::repeat_each(x, n).map(Rc::new)
    }
    fn tile_last(&mut self, x: &Self::H, times: usize) -> Result<Self::H> {
        kernels::tile_last(x, times).map(Rc::new)
    }
    fn sum_groups(&mut self, x: &Self::H, n: usize) -> Result<Self::H> {
        kernels::sum_groups(x, n).map(Rc::new)
    }
    fn reverse_rows(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::reverse_rows(x).map(Rc::new)
    }
    fn broadcast_rows(&mut self, x: &Self::H, rows: usize) -> Result<Self::H> {
        kernels::broadcast_rows(x, rows).map(Rc::new)
    }
    fn sum_all(&mut self, x: &Self::H) -> Result<Self::H> {
        kernels::sum_all(x).map(Rc::new)
    }
}
