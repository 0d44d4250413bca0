use crate::numcore::{Scalar, Tensor};

/// Named traversal over a parameter collection.
///
/// Names are stable and unique; they key checkpoints, optimizer moments, and
/// graph gradients.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}
