//! Small CPU neural-network toolkit: autodiff tape, parameters, Adam, checkpoints.

pub mod params;
pub mod tape;

pub use params::{conv_init, linear_init, Adam, AdamConfig, ParamSet};
pub use tape::{cst, Grads, Graph, Scalar, Var};

use rand_chacha::ChaCha8Rng;

/// A same-padded stride-1 convolution registered in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize, k: usize) -> Self {
        let (w, b) = conv_init(rng, out, inp, k);
        Self {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), b),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, b)
    }

    /// Convolution followed by ReLU.
    pub fn forward_relu<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let y = self.forward(g, ps, x);
        g.relu(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize) -> Self {
        let (w, b) = linear_init(rng, inp, out);
        Self {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), b),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, b)
    }
}
