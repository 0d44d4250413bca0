use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{matmul_kernel, Graph, NodeId, Scalar, Tensor};

/// Low-rank additive update `s * A B` for one frozen matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `in x r`
    pub a: Tensor<T>,
    /// `r x out`, zero at initialization.
    pub b: Tensor<T>,
    pub rank: usize,
    pub scale: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` is Gaussian and `B` is zero, so the adapter starts neutral.
    /// The scale is `1 / rank`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("model.lora_rank", "rank must be positive"));
        }
        Ok(LoraAdapter {
            a: Tensor::randn(&[input, rank], (1.0 / input as f64).sqrt(), rng),
            b: Tensor::zeros(&[rank, output]),
            rank,
            scale: 1.0 / rank as f64,
        })
    }

    /// The dense update `s * A B`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        let (i, r) = self.a.dims2()?;
        let (r2, o) = self.b.dims2()?;
        if r != r2 {
            return Err(Error::dim("lora", self.a.shape(), self.b.shape()));
        }
        let s = T::of(self.scale);
        let d = matmul_kernel(self.a.data(), self.b.data(), i, r, o)
            .into_iter()
            .map(|v| v * s)
            .collect();
        Tensor::new(vec![i, o], d)
    }
}

/// `base + s * A B`.
pub fn lora_merge<T: Scalar>(base: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let delta = adapter.delta()?;
    if delta.shape() != base.shape() {
        return Err(Error::dim("lora_merge", base.shape(), delta.shape()));
    }
    let data = base.data().iter().zip(delta.data()).map(|(&w, &d)| w + d).collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Node ids of a bound adapter.
#[derive(Clone, Copy, Debug)]
pub struct LoraNodes {
    pub a: NodeId,
    pub b: NodeId,
    pub scale: f64,
}

/// `x W` plus the adapter path `s (x A) B` when present.
pub fn adapted_linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, lora: Option<&LoraNodes>) -> Result<NodeId> {
    let base = g.matmul(x, w)?;
    match lora {
        None => Ok(base),
        Some(l) => {
            let xa = g.matmul(x, l.a)?;
            let xab = g.matmul(xa, l.b)?;
            let scaled = g.scale(xab, T::of(l.scale));
            g.add(base, scaled)
        }
    }
}
