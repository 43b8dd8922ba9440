//! Learnable layer parameter containers shared by the reasoning module and
//! the segmentation backbone.
//!
//! Each container knows how to bind its tensors onto a tape for one forward
//! pass, pull gradients back off the tape afterwards, and walk its tensors
//! by stable name for the optimizer and checkpoints.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{BnMode, Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Attributes of a named parameter tensor.
#[derive(Clone, Copy, Debug)]
pub struct ParamMeta {
    /// Updated by the optimizer (running statistics are not).
    pub learnable: bool,
    /// Excluded from weight decay (batchnorm scale/shift).
    pub no_decay: bool,
}

impl ParamMeta {
    pub const WEIGHT: ParamMeta = ParamMeta {
        learnable: true,
        no_decay: false,
    };
    pub const NORM: ParamMeta = ParamMeta {
        learnable: true,
        no_decay: true,
    };
    pub const STATE: ParamMeta = ParamMeta {
        learnable: false,
        no_decay: true,
    };
}

/// Walk every tensor of a parameter tree with a stable dotted name.
pub trait ParamWalk<T: Scalar> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>));
}

/// Zero the gradient buffers of every learnable tensor.
pub fn zero_grads<T: Scalar>(params: &mut impl ParamWalk<T>) {
    params.for_each_mut("", &mut |_, meta, t| {
        if meta.learnable {
            t.zero_grad();
        }
    });
}

// ── Convolution layer ───────────────────────────────────────────────────

/// A conv kernel with optional bias; padding is pinned to (k-1)/2.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dVars {
    pub kernel: VarId,
    pub bias: Option<VarId>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn init(c_in: usize, c_out: usize, k: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        let kernel = Tensor::xavier_uniform(vec![c_out, c_in, k, k], fan_in, fan_out, rng).with_grad();
        let bias = with_bias.then(|| Tensor::zeros(vec![c_out]).with_grad());
        Conv2d { kernel, bias }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape[3]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Conv2dVars> {
        Ok(Conv2dVars {
            kernel: tape.leaf(&self.kernel)?,
            bias: match &self.bias {
                Some(b) => Some(tape.leaf(b)?),
                None => None,
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId, vars: &Conv2dVars) -> Result<VarId> {
        tape.conv2d(x, vars.kernel, vars.bias, (self.kernel_size() - 1) / 2)
    }

    pub fn absorb_grads(&mut self, vars: &Conv2dVars, tape: &Tape<T>, scale: T) {
        if let Some(g) = tape.grad(vars.kernel) {
            self.kernel.accumulate_grad(g, scale);
        }
        if let (Some(b), Some(bid)) = (self.bias.as_mut(), vars.bias) {
            if let Some(g) = tape.grad(bid) {
                b.accumulate_grad(g, scale);
            }
        }
    }
}

impl<T: Scalar> ParamWalk<T> for Conv2d<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        f(&format!("{prefix}.kernel"), ParamMeta::WEIGHT, &self.kernel);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), ParamMeta::WEIGHT, b);
        }
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        f(&format!("{prefix}.kernel"), ParamMeta::WEIGHT, &mut self.kernel);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), ParamMeta::WEIGHT, b);
        }
    }
}

// ── Batch normalization layer ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2dVars {
    pub gamma: VarId,
    pub beta: VarId,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(vec![channels], T::ONE).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::ONE),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BatchNorm2dVars> {
        Ok(BatchNorm2dVars {
            gamma: tape.leaf(&self.gamma)?,
            beta: tape.leaf(&self.beta)?,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: VarId,
        vars: &BatchNorm2dVars,
        mode: BnMode,
    ) -> Result<VarId> {
        let (momentum, eps) = (self.momentum, self.eps);
        tape.batchnorm2d(
            x,
            vars.gamma,
            vars.beta,
            mode,
            &mut self.running_mean.data,
            &mut self.running_var.data,
            momentum,
            eps,
        )
    }

    pub fn absorb_grads(&mut self, vars: &BatchNorm2dVars, tape: &Tape<T>, scale: T) {
        if let Some(g) = tape.grad(vars.gamma) {
            self.gamma.accumulate_grad(g, scale);
        }
        if let Some(g) = tape.grad(vars.beta) {
            self.beta.accumulate_grad(g, scale);
        }
    }
}

impl<T: Scalar> ParamWalk<T> for BatchNorm2d<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        f(&format!("{prefix}.gamma"), ParamMeta::NORM, &self.gamma);
        f(&format!("{prefix}.beta"), ParamMeta::NORM, &self.beta);
        f(&format!("{prefix}.running_mean"), ParamMeta::STATE, &self.running_mean);
        f(&format!("{prefix}.running_var"), ParamMeta::STATE, &self.running_var);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), ParamMeta::NORM, &mut self.gamma);
        f(&format!("{prefix}.beta"), ParamMeta::NORM, &mut self.beta);
        f(&format!("{prefix}.running_mean"), ParamMeta::STATE, &mut self.running_mean);
        f(&format!("{prefix}.running_var"), ParamMeta::STATE, &mut self.running_var);
    }
}

/// Collect (name, shape) pairs, mainly for checkpoint tests.
pub fn param_names<T: Scalar>(params: &impl ParamWalk<T>) -> Vec<String> {
    let mut names = Vec::new();
    params.for_each("", &mut |name, _, _| names.push(name.to_string()));
    names
}

/// Count learnable scalars.
pub fn param_count<T: Scalar>(params: &impl ParamWalk<T>) -> usize {
    let mut n = 0;
    params.for_each("", &mut |_, meta, t| {
        if meta.learnable {
            n += t.numel();
        }
    });
    n
}

impl From<std::convert::Infallible> for Error {
    fn from(x: std::convert::Infallible) -> Self {
        match x {}
    }
}
