//! Saliency-aware projection: build a saliency map from channel-pooled
//! features, pick one argmax pixel per delta-strided block as a graph node,
//! and gather node feature columns.
//!
//! Selection is hard argmax and carries no gradient; gradient reaches the
//! feature map only through the gathered columns.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Conv2dVars, ParamMeta, ParamWalk};
use crate::tape::{PoolMode, Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Saliency head: 7x7 convolution collapsing [max-pool, avg-pool] channel
/// pair to one map, followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct SaliencyParams<T: Scalar> {
    pub conv: Conv2d<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct SaliencyVars {
    pub conv: Conv2dVars,
}

impl<T: Scalar> SaliencyParams<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        SaliencyParams {
            conv: Conv2d::init(2, 1, 7, true, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<SaliencyVars> {
        Ok(SaliencyVars {
            conv: self.conv.bind(tape)?,
        })
    }

    pub fn absorb_grads(&mut self, vars: &SaliencyVars, tape: &Tape<T>, scale: T) {
        self.conv.absorb_grads(&vars.conv, tape, scale);
    }
}

impl<T: Scalar> ParamWalk<T> for SaliencyParams<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        self.conv.for_each(&format!("{prefix}.conv"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        self.conv.for_each_mut(&format!("{prefix}.conv"), f);
    }
}

/// Node selection for one pyramid stride: per-block argmax coordinates over
/// the saliency map, in row-major block order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSet {
    pub delta: usize,
    pub coords: Vec<(usize, usize)>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Saliency map in (0, 1): sigmoid(conv7x7([max_pool_c(X), avg_pool_c(X)])).
/// Output shape is H x W.
pub fn attention_map<T: Scalar>(
    tape: &mut Tape<T>,
    x_enh: VarId,
    params: &SaliencyParams<T>,
    vars: &SaliencyVars,
) -> Result<VarId> {
    let shape = tape.shape(x_enh).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mx = tape.channel_pool(x_enh, PoolMode::Max)?;
    let av = tape.channel_pool(x_enh, PoolMode::Avg)?;
    let stacked = tape.concat_channels(&[mx, av])?;
    let conv = params.conv.forward(tape, stacked, &vars.conv)?;
    let act = tape.sigmoid(conv)?;
    tape.reshape(act, vec![h, w])
}

/// Partition an H x W map into ceil(H/delta) x ceil(W/delta) blocks and pick
/// the argmax pixel of each (ties to smallest row, then smallest column).
pub fn select_nodes<T: Scalar>(map: &Tensor<T>, delta: usize) -> Result<NodeSet> {
    if map.shape.len() != 2 {
        return Err(Error::invalid(
            "select_nodes",
            format!("expected an H x W map, got {:?}", map.shape),
        ));
    }
    let (h, w) = (map.shape[0], map.shape[1]);
    if delta == 0 || delta > h.max(w) {
        return Err(Error::invalid(
            "select_nodes",
            format!("stride {delta} outside [1, max({h}, {w})]"),
        ));
    }
    let grid_h = h.div_ceil(delta);
    let grid_w = w.div_ceil(delta);
    let mut coords = Vec::with_capacity(grid_h * grid_w);
    for bi in 0..grid_h {
        let r0 = bi * delta;
        let r1 = (r0 + delta).min(h);
        for bj in 0..grid_w {
            let c0 = bj * delta;
            let c1 = (c0 + delta).min(w);
            let mut best = (r0, c0);
            let mut best_val = map.data[r0 * w + c0];
            for r in r0..r1 {
                for c in c0..c1 {
                    let v = map.data[r * w + c];
                    // Strict comparison in row-major scan keeps the
                    // lexicographically smallest coordinate on ties.
                    if v > best_val {
                        best_val = v;
                        best = (r, c);
                    }
                }
            }
            coords.push(best);
        }
    }
    Ok(NodeSet {
        delta,
        coords,
        grid_h,
        grid_w,
    })
}

/// Gather node feature columns from the enhanced map: column j is
/// `X_enh[:, coords[j]]`.
pub fn gather_features<T: Scalar>(
    tape: &mut Tape<T>,
    x_enh: VarId,
    nodes: &NodeSet,
) -> Result<VarId> {
    tape.gather_pixels(x_enh, &nodes.coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream_rng, Stream};

    #[test]
    fn constant_input_gives_constant_interior() {
        // Zero padding breaks translation invariance within 3 pixels of the
        // border, so constancy is asserted on the interior.
        let mut r = stream_rng(3, Stream::ParamInit, 0);
        let params = SaliencyParams::<f64>::init(&mut r);
        let x = Tensor::full(vec![4, 16, 16], 0.37);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let a = attention_map(&mut tape, xid, &params, &vars).unwrap();
        assert_eq!(tape.shape(a), &[16, 16]);
        let d = tape.data(a);
        let first = d[3 * 16 + 3];
        for r in 3..13 {
            for c in 3..13 {
                assert!((d[r * 16 + c] - first).abs() < 1e-12, "({r},{c})");
            }
        }
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_kernel_map_is_sigmoid_of_bias() {
        let mut r = stream_rng(4, Stream::ParamInit, 0);
        let mut params = SaliencyParams::<f64>::init(&mut r);
        params.conv.kernel = Tensor::zeros(vec![1, 2, 7, 7]).with_grad();
        params.conv.bias = Some(Tensor::from_vec(vec![1], vec![-0.3]).unwrap().with_grad());
        let x = Tensor::uniform(vec![3, 5, 5], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xid = tape.leaf(&x).unwrap();
        let a = attention_map(&mut tape, xid, &params, &vars).unwrap();
        let expect = 1.0 / (1.0 + (0.3f64).exp());
        assert!(tape.data(a).iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn four_by_four_quadrants() {
        // delta = 2 on a 4x4 map: one node per quadrant, each the argmax.
        let map = Tensor::from_vec(
            vec![4, 4],
            vec![
                0.1, 0.9, 0.2, 0.3, //
                0.4, 0.5, 0.8, 0.1, //
                0.7, 0.2, 0.0, 0.6, //
                0.3, 0.1, 0.5, 0.4,
            ],
        )
        .unwrap();
        let nodes = select_nodes(&map, 2).unwrap();
        assert_eq!(nodes.len(), 4);
        assert_eq!(nodes.grid_h, 2);
        assert_eq!(nodes.coords, vec![(0, 1), (1, 2), (2, 0), (2, 3)]);
    }

    #[test]
    fn stride_one_enumerates_every_pixel() {
        let map = Tensor::<f64>::zeros(vec![3, 5]);
        let nodes = select_nodes(&map, 1).unwrap();
        assert_eq!(nodes.len(), 15);
        let expect: Vec<(usize, usize)> = (0..3).flat_map(|r| (0..5).map(move |c| (r, c))).collect();
        assert_eq!(nodes.coords, expect);
    }

    #[test]
    fn fourteen_square_node_counts() {
        let map = Tensor::<f64>::zeros(vec![14, 14]);
        assert_eq!(select_nodes(&map, 2).unwrap().len(), 49);
        assert_eq!(select_nodes(&map, 4).unwrap().len(), 16);
        assert_eq!(select_nodes(&map, 7).unwrap().len(), 4);
    }

    #[test]
    fn invalid_strides_rejected() {
        let map = Tensor::<f64>::zeros(vec![4, 4]);
        assert!(select_nodes(&map, 0).is_err());
        assert!(select_nodes(&map, 5).is_err());
    }

    #[test]
    fn ties_break_to_smallest_row_then_column() {
        let map = Tensor::from_vec(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let nodes = select_nodes(&map, 2).unwrap();
        assert_eq!(nodes.coords, vec![(0, 0)]);
    }

    #[test]
    fn gather_constant_and_single_block() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(vec![3, 4, 4], 2.75);
        let xid = tape.leaf(&x).unwrap();
        let map = Tensor::uniform(vec![4, 4], 0.0, 1.0, &mut stream_rng(5, Stream::DataGen, 0));
        let nodes = select_nodes(&map, 2).unwrap();
        let z = gather_features(&mut tape, xid, &nodes).unwrap();
        assert_eq!(tape.shape(z), &[3, 4]);
        assert!(tape.data(z).iter().all(|&v| v == 2.75));

        // Single forced block: the one column equals the argmax pixel value.
        let map = Tensor::from_vec(vec![2, 2], vec![0.1, 0.8, 0.3, 0.2]).unwrap();
        let nodes = select_nodes(&map, 2).unwrap();
        assert_eq!(nodes.coords, vec![(0, 1)]);
        let feat = Tensor::from_vec(vec![1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let fid = tape.leaf(&feat).unwrap();
        let z = gather_features(&mut tape, fid, &nodes).unwrap();
        assert_eq!(tape.data(z), &[20.0]);
    }

    #[test]
    fn gather_backward_marks_selected_pixels_once() {
        let mut r = stream_rng(6, Stream::DataGen, 0);
        let map = Tensor::uniform(vec![6, 5], 0.0, 1.0, &mut r);
        let nodes = select_nodes(&map, 2).unwrap();
        let x = Tensor::uniform(vec![3, 6, 5], -1.0, 1.0, &mut r).with_grad();
        let mut tape = Tape::new();
        let xid = tape.leaf(&x).unwrap();
        let z = gather_features(&mut tape, xid, &nodes).unwrap();
        let loss = tape.sum_all(z).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(xid).unwrap();
        // Exactly |N| ones per channel, at the selected coordinates.
        for ch in 0..3 {
            let slab = &g[ch * 30..(ch + 1) * 30];
            assert_eq!(slab.iter().filter(|&&v| v == 1.0).count(), nodes.len());
            assert_eq!(slab.iter().filter(|&&v| v == 0.0).count(), 30 - nodes.len());
        }
    }
}
