//! Pre-projection feature enhancement: channel self-attention, 1x1 channel
//! reduction C -> S, and spatial self-attention.
//!
//! Both attention blocks are residual with a learnable scale initialized to
//! zero, so a freshly initialized pipeline is exactly
//! `relu(conv1x1(X))` - the reduction alone.

use rand::Rng;

use crate::error::Result;
use crate::layers::{Conv2d, Conv2dVars, ParamMeta, ParamWalk};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Learnable state for the enhancement pipeline.
#[derive(Clone, Debug)]
pub struct EnhanceParams<T: Scalar> {
    /// Channel-attention residual scale, initialized to 0.
    pub gamma_c: Tensor<T>,
    /// 1x1 reduction C -> S, with bias.
    pub reduce: Conv2d<T>,
    /// Spatial-attention query/key (S -> ceil(S/8)) and value (S -> S)
    /// 1x1 kernels, bias-free.
    pub query: Conv2d<T>,
    pub key: Conv2d<T>,
    pub value: Conv2d<T>,
    /// Spatial-attention residual scale, initialized to 0.
    pub gamma_s: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct EnhanceVars {
    pub gamma_c: VarId,
    pub reduce: Conv2dVars,
    pub query: Conv2dVars,
    pub key: Conv2dVars,
    pub value: Conv2dVars,
    pub gamma_s: VarId,
}

/// Output of one attention block plus its row-stochastic attention map.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub out: VarId,
    /// The softmax-normalized map M (rows sum to 1).
    pub map: VarId,
}

pub fn qk_channels(node_dim: usize) -> usize {
    node_dim.div_ceil(8)
}

impl<T: Scalar> EnhanceParams<T> {
    pub fn init(channels: usize, node_dim: usize, rng: &mut impl Rng) -> Self {
        if channels < node_dim {
            log::warn!("reduce_dim: input channels {channels} below node dimension {node_dim}");
        }
        let qk = qk_channels(node_dim);
        EnhanceParams {
            gamma_c: Tensor::zeros(vec![1]).with_grad(),
            reduce: Conv2d::init(channels, node_dim, 1, true, rng),
            query: Conv2d::init(node_dim, qk, 1, false, rng),
            key: Conv2d::init(node_dim, qk, 1, false, rng),
            value: Conv2d::init(node_dim, node_dim, 1, false, rng),
            gamma_s: Tensor::zeros(vec![1]).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<EnhanceVars> {
        Ok(EnhanceVars {
            gamma_c: tape.leaf(&self.gamma_c)?,
            reduce: self.reduce.bind(tape)?,
            query: self.query.bind(tape)?,
            key: self.key.bind(tape)?,
            value: self.value.bind(tape)?,
            gamma_s: tape.leaf(&self.gamma_s)?,
        })
    }

    pub fn absorb_grads(&mut self, vars: &EnhanceVars, tape: &Tape<T>, scale: T) {
        if let Some(g) = tape.grad(vars.gamma_c) {
            self.gamma_c.accumulate_grad(g, scale);
        }
        self.reduce.absorb_grads(&vars.reduce, tape, scale);
        self.query.absorb_grads(&vars.query, tape, scale);
        self.key.absorb_grads(&vars.key, tape, scale);
        self.value.absorb_grads(&vars.value, tape, scale);
        if let Some(g) = tape.grad(vars.gamma_s) {
            self.gamma_s.accumulate_grad(g, scale);
        }
    }
}

impl<T: Scalar> ParamWalk<T> for EnhanceParams<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        f(&format!("{prefix}.gamma_c"), ParamMeta::WEIGHT, &self.gamma_c);
        self.reduce.for_each(&format!("{prefix}.reduce"), f);
        self.query.for_each(&format!("{prefix}.query"), f);
        self.key.for_each(&format!("{prefix}.key"), f);
        self.value.for_each(&format!("{prefix}.value"), f);
        f(&format!("{prefix}.gamma_s"), ParamMeta::WEIGHT, &self.gamma_s);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma_c"), ParamMeta::WEIGHT, &mut self.gamma_c);
        self.reduce.for_each_mut(&format!("{prefix}.reduce"), f);
        self.query.for_each_mut(&format!("{prefix}.query"), f);
        self.key.for_each_mut(&format!("{prefix}.key"), f);
        self.value.for_each_mut(&format!("{prefix}.value"), f);
        f(&format!("{prefix}.gamma_s"), ParamMeta::WEIGHT, &mut self.gamma_s);
    }
}

/// Channel self-attention with a zero-initialized residual scale:
/// `gamma_c * reshape(softmax_rows(F F^T) F) + X` where F = X flattened
/// to C x (H*W).
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    gamma_c: VarId,
) -> Result<AttentionOut> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, vec![c, h * w])?;
    let flat_t = tape.transpose2(flat)?;
    let logits = tape.matmul(flat, flat_t)?;
    let map = tape.softmax_axis(logits, 1)?;
    let mixed = tape.matmul(map, flat)?;
    let mixed = tape.reshape(mixed, vec![c, h, w])?;
    let scaled = tape.scalar_mul(gamma_c, mixed)?;
    let out = tape.add(scaled, x)?;
    Ok(AttentionOut { out, map })
}

/// 1x1 convolution C -> S followed by ReLU.
pub fn reduce_dim<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    reduce: &Conv2d<T>,
    vars: &Conv2dVars,
) -> Result<VarId> {
    let y = reduce.forward(tape, x, vars)?;
    tape.relu(y)
}

/// Position self-attention over all H*W locations with a zero-initialized
/// residual scale: `gamma_s * reshape(V M^T) + X` with
/// M = softmax_rows(Q^T K).
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    params: &EnhanceParams<T>,
    vars: &EnhanceVars,
) -> Result<AttentionOut> {
    let shape = tape.shape(x).to_vec();
    let (s, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let q = params.query.forward(tape, x, &vars.query)?;
    let k = params.key.forward(tape, x, &vars.key)?;
    let v = params.value.forward(tape, x, &vars.value)?;
    let qk = tape.shape(q)[0];
    let q_mat = tape.reshape(q, vec![qk, hw])?;
    let k_mat = tape.reshape(k, vec![qk, hw])?;
    let v_mat = tape.reshape(v, vec![s, hw])?;
    let q_t = tape.transpose2(q_mat)?;
    let logits = tape.matmul(q_t, k_mat)?;
    let map = tape.softmax_axis(logits, 1)?;
    let map_t = tape.transpose2(map)?;
    let mixed = tape.matmul(v_mat, map_t)?;
    let mixed = tape.reshape(mixed, vec![s, h, w])?;
    let scaled = tape.scalar_mul(vars.gamma_s, mixed)?;
    let out = tape.add(scaled, x)?;
    Ok(AttentionOut { out, map })
}

/// Full enhancement pipeline: channel attention, then reduction, then
/// spatial attention. Returns the S-channel enhanced map.
pub fn enhance<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    params: &EnhanceParams<T>,
    vars: &EnhanceVars,
) -> Result<VarId> {
    let ca = channel_attention(tape, x, vars.gamma_c)?;
    let red = reduce_dim(tape, ca.out, &params.reduce, &vars.reduce)?;
    Ok(spatial_attention(tape, red, params, vars)?.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream_rng, Stream};

    fn rng() -> rand_chacha::ChaCha8Rng {
        stream_rng(11, Stream::ParamInit, 0)
    }

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    #[test]
    fn zero_gamma_is_exact_identity() {
        let mut r = rng();
        let params = EnhanceParams::<f64>::init(3, 3, &mut r);
        let x = rand_tensor(vec![3, 2, 2], &mut r);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let out = channel_attention(&mut tape, xid, vars.gamma_c).unwrap();
        assert_eq!(tape.data(out.out), x.data.as_slice());

        let sp = spatial_attention(&mut tape, xid, &params, &vars).unwrap();
        assert_eq!(tape.data(sp.out), x.data.as_slice());
    }

    #[test]
    fn single_channel_attention_scales_input() {
        // C = 1: M = [[1]], output = (1 + gamma_c) * X.
        let mut r = rng();
        let x = rand_tensor(vec![1, 3, 2], &mut r);
        let mut tape = Tape::new();
        let gamma = tape
            .leaf(&Tensor::from_vec(vec![1], vec![0.5]).unwrap().with_grad())
            .unwrap();
        let xid = tape.leaf(&x).unwrap();
        let out = channel_attention(&mut tape, xid, gamma).unwrap();
        assert_eq!(tape.data(out.map), &[1.0]);
        for (o, xi) in tape.data(out.out).iter().zip(&x.data) {
            assert!((o - 1.5 * xi).abs() < 1e-14);
        }
    }

    #[test]
    fn single_position_spatial_attention() {
        // H = W = 1: M = [[1]], output = gamma_s * v + X.
        let mut r = rng();
        let mut params = EnhanceParams::<f64>::init(4, 4, &mut r);
        params.gamma_s = Tensor::from_vec(vec![1], vec![0.25]).unwrap().with_grad();
        let x = rand_tensor(vec![4, 1, 1], &mut r);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let sp = spatial_attention(&mut tape, xid, &params, &vars).unwrap();
        assert_eq!(tape.data(sp.map), &[1.0]);

        let v = params.value.forward(&mut tape, xid, &vars.value).unwrap();
        let expect: Vec<f64> = tape
            .data(v)
            .iter()
            .zip(&x.data)
            .map(|(vv, xv)| 0.25 * vv + xv)
            .collect();
        for (o, e) in tape.data(sp.out).iter().zip(&expect) {
            assert!((o - e).abs() < 1e-14);
        }
    }

    #[test]
    fn reduce_dim_identity_and_constant_kernels() {
        let mut r = rng();
        let x = rand_tensor(vec![2, 3, 3], &mut r);
        // Identity kernel, zero bias: output = relu(X).
        let mut reduce = Conv2d::<f64>::init(2, 2, 1, true, &mut r);
        reduce.kernel = Tensor::from_vec(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap().with_grad();
        reduce.bias = Some(Tensor::zeros(vec![2]).with_grad());
        let mut tape = Tape::new();
        let vars = reduce.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let y = reduce_dim(&mut tape, xid, &reduce, &vars).unwrap();
        let expect: Vec<f64> = x.data.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(tape.data(y), expect.as_slice());

        // Zero kernel, bias b >= 0: constant b per channel.
        let mut reduce = Conv2d::<f64>::init(2, 2, 1, true, &mut r);
        reduce.kernel = Tensor::zeros(vec![2, 2, 1, 1]).with_grad();
        reduce.bias = Some(Tensor::from_vec(vec![2], vec![0.3, 0.9]).unwrap().with_grad());
        let mut tape = Tape::new();
        let vars = reduce.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let y = reduce_dim(&mut tape, xid, &reduce, &vars).unwrap();
        let d = tape.data(y);
        assert!(d[..9].iter().all(|&v| v == 0.3));
        assert!(d[9..].iter().all(|&v| v == 0.9));
    }

    #[test]
    fn bottleneck_reduction_shape() {
        let mut r = rng();
        let params = EnhanceParams::<f32>::init(1024, 64, &mut r);
        let x = Tensor::<f32>::uniform(vec![1024, 14, 14], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let y = reduce_dim(&mut tape, xid, &params.reduce, &vars.reduce).unwrap();
        assert_eq!(tape.shape(y), &[64, 14, 14]);
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let mut r = rng();
        let mut params = EnhanceParams::<f64>::init(5, 4, &mut r);
        params.gamma_c = Tensor::from_vec(vec![1], vec![0.7]).unwrap().with_grad();
        params.gamma_s = Tensor::from_vec(vec![1], vec![-0.4]).unwrap().with_grad();
        let x = rand_tensor(vec![5, 3, 3], &mut r);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let ca = channel_attention(&mut tape, xid, vars.gamma_c).unwrap();
        let red = reduce_dim(&mut tape, ca.out, &params.reduce, &vars.reduce).unwrap();
        let sp = spatial_attention(&mut tape, red, &params, &vars).unwrap();
        for (map, n) in [(ca.map, 5), (sp.map, 9)] {
            let d = tape.data(map);
            for row in 0..n {
                let s: f64 = d[row * n..(row + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row {row} sums to {s}");
                assert!(d[row * n..(row + 1) * n].iter().all(|&v| v > 0.0));
            }
        }
    }
}
