//! Fully-connected graph reasoning over selected node features.
//!
//! Adjacency is pairwise similarity between linearly transformed node
//! features, softmax-normalized per row so every output node is a convex
//! combination of transformed inputs. One graph-convolution layer
//! aggregates by the normalized adjacency, mixes channels, and applies
//! ReLU. No biases and no internal residual; residual mixing happens at
//! fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{ParamMeta, ParamWalk};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Learnable state of one pyramid branch: three node-wise S x S linear maps
/// and the S x S mixing weight, plus the branch's sampling stride.
#[derive(Clone, Debug)]
pub struct GraphBranch<T: Scalar> {
    pub delta: usize,
    pub rho: Tensor<T>,
    pub phi: Tensor<T>,
    pub mu: Tensor<T>,
    pub weight: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphBranchVars {
    pub rho: VarId,
    pub phi: VarId,
    pub mu: VarId,
    pub weight: VarId,
}

impl<T: Scalar> GraphBranch<T> {
    pub fn init(node_dim: usize, delta: usize, rng: &mut impl Rng) -> Self {
        let square = || vec![node_dim, node_dim];
        GraphBranch {
            delta,
            rho: Tensor::xavier_uniform(square(), node_dim, node_dim, rng).with_grad(),
            phi: Tensor::xavier_uniform(square(), node_dim, node_dim, rng).with_grad(),
            mu: Tensor::xavier_uniform(square(), node_dim, node_dim, rng).with_grad(),
            weight: Tensor::xavier_uniform(square(), node_dim, node_dim, rng).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<GraphBranchVars> {
        Ok(GraphBranchVars {
            rho: tape.leaf(&self.rho)?,
            phi: tape.leaf(&self.phi)?,
            mu: tape.leaf(&self.mu)?,
            weight: tape.leaf(&self.weight)?,
        })
    }

    pub fn absorb_grads(&mut self, vars: &GraphBranchVars, tape: &Tape<T>, scale: T) {
        for (t, id) in [
            (&mut self.rho, vars.rho),
            (&mut self.phi, vars.phi),
            (&mut self.mu, vars.mu),
            (&mut self.weight, vars.weight),
        ] {
            if let Some(g) = tape.grad(id) {
                t.accumulate_grad(g, scale);
            }
        }
    }
}

impl<T: Scalar> ParamWalk<T> for GraphBranch<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        f(&format!("{prefix}.rho"), ParamMeta::WEIGHT, &self.rho);
        f(&format!("{prefix}.phi"), ParamMeta::WEIGHT, &self.phi);
        f(&format!("{prefix}.mu"), ParamMeta::WEIGHT, &self.mu);
        f(&format!("{prefix}.weight"), ParamMeta::WEIGHT, &self.weight);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        f(&format!("{prefix}.rho"), ParamMeta::WEIGHT, &mut self.rho);
        f(&format!("{prefix}.phi"), ParamMeta::WEIGHT, &mut self.phi);
        f(&format!("{prefix}.mu"), ParamMeta::WEIGHT, &mut self.mu);
        f(&format!("{prefix}.weight"), ParamMeta::WEIGHT, &mut self.weight);
    }
}

/// Row-normalized adjacency over node features Z (S x N):
/// softmax_rows((rho Z)^T (phi Z)), an N x N row-stochastic matrix.
pub fn build_adjacency<T: Scalar>(
    tape: &mut Tape<T>,
    z: VarId,
    vars: &GraphBranchVars,
) -> Result<VarId> {
    let shape = tape.shape(z);
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::invalid(
            "build_adjacency",
            format!("expected S x N node features with N >= 1, got {shape:?}"),
        ));
    }
    let rho_z = tape.matmul(vars.rho, z)?;
    let phi_z = tape.matmul(vars.phi, z)?;
    let rho_z_t = tape.transpose2(rho_z)?;
    let logits = tape.matmul(rho_z_t, phi_z)?;
    tape.softmax_axis(logits, 1)
}

/// One graph-convolution layer: relu((A_norm (mu Z)^T W)^T), output S x N.
pub fn graph_convolve<T: Scalar>(
    tape: &mut Tape<T>,
    z: VarId,
    a_norm: VarId,
    vars: &GraphBranchVars,
) -> Result<VarId> {
    let zs = tape.shape(z).to_vec();
    let as_ = tape.shape(a_norm).to_vec();
    if zs.len() != 2 || as_.len() != 2 || as_[0] != as_[1] || as_[0] != zs[1] {
        return Err(Error::ShapeMismatch {
            op: "graph_convolve",
            lhs: zs,
            rhs: as_,
        });
    }
    let mu_z = tape.matmul(vars.mu, z)?;
    let mu_z_t = tape.transpose2(mu_z)?;
    let agg = tape.matmul(a_norm, mu_z_t)?;
    let mixed = tape.matmul(agg, vars.weight)?;
    let mixed_t = tape.transpose2(mixed)?;
    tape.relu(mixed_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream_rng, Stream};

    fn identity_branch(s: usize, delta: usize) -> GraphBranch<f64> {
        let mut eye = Tensor::zeros(vec![s, s]);
        for i in 0..s {
            eye.data[i * s + i] = 1.0;
        }
        GraphBranch {
            delta,
            rho: eye.clone().with_grad(),
            phi: eye.clone().with_grad(),
            mu: eye.clone().with_grad(),
            weight: eye.with_grad(),
        }
    }

    #[test]
    fn singleton_graph_adjacency_is_one() {
        let branch = identity_branch(3, 1);
        let mut tape = Tape::new();
        let vars = branch.bind(&mut tape).unwrap();
        let z = tape
            .leaf(&Tensor::from_vec(vec![3, 1], vec![0.2, -0.4, 0.9]).unwrap())
            .unwrap();
        let a = build_adjacency(&mut tape, z, &vars).unwrap();
        assert_eq!(tape.data(a), &[1.0]);
    }

    #[test]
    fn identical_features_give_uniform_rows() {
        let mut r = stream_rng(9, Stream::ParamInit, 0);
        let branch = GraphBranch::<f64>::init(4, 2, &mut r);
        let col = [0.3, -0.7, 0.1, 0.9];
        let n = 5;
        let mut z = Tensor::zeros(vec![4, n]);
        for s in 0..4 {
            for j in 0..n {
                z.data[s * n + j] = col[s];
            }
        }
        let mut tape = Tape::new();
        let vars = branch.bind(&mut tape).unwrap();
        let zid = tape.leaf(&z).unwrap();
        let a = build_adjacency(&mut tape, zid, &vars).unwrap();
        for &v in tape.data(a) {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_two_node_adjacency() {
        // rho = phi = I, Z = I2: logits are the identity, rows of the
        // softmax are [e/(e+1), 1/(e+1)] and its mirror.
        let branch = identity_branch(2, 1);
        let mut tape = Tape::new();
        let vars = branch.bind(&mut tape).unwrap();
        let z = tape
            .leaf(&Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let a = build_adjacency(&mut tape, z, &vars).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let expect = [hi, lo, lo, hi];
        for (got, want) in tape.data(a).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((hi - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn single_node_convolution_is_relu() {
        let branch = identity_branch(3, 1);
        let mut tape = Tape::new();
        let vars = branch.bind(&mut tape).unwrap();
        let z = tape
            .leaf(&Tensor::from_vec(vec![3, 1], vec![0.5, -0.2, 1.5]).unwrap())
            .unwrap();
        let a = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let out = graph_convolve(&mut tape, z, a, &vars).unwrap();
        assert_eq!(tape.data(out), &[0.5, 0.0, 1.5]);
    }

    #[test]
    fn uniform_adjacency_on_constant_field() {
        // All node features equal v, uniform adjacency, mu = W = I:
        // every output column is relu(v).
        let branch = identity_branch(2, 1);
        let n = 4;
        let mut tape = Tape::new();
        let vars = branch.bind(&mut tape).unwrap();
        let mut z = Tensor::zeros(vec![2, n]);
        for j in 0..n {
            z.data[j] = 0.8;
            z.data[n + j] = -0.3;
        }
        let zid = tape.leaf(&z).unwrap();
        let a = tape.constant(vec![n, n], vec![1.0 / n as f64; n * n]).unwrap();
        let out = graph_convolve(&mut tape, zid, a, &vars).unwrap();
        for j in 0..n {
            assert!((tape.data(out)[j] - 0.8).abs() < 1e-15);
            assert_eq!(tape.data(out)[n + j], 0.0);
        }
    }

    #[test]
    fn convolve_rejects_mismatched_adjacency() {
        let branch = identity_branch(2, 1);
        let mut tape = Tape::new();
        let vars = branch.bind(&mut tape).unwrap();
        let z = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let a = tape.constant(vec![2, 2], vec![0.25; 4]).unwrap();
        assert!(graph_convolve(&mut tape, z, a, &vars).is_err());
    }
}
