//! Pyramid global context reasoning: the plug-and-play module that
//! enhances a feature map, samples saliency-selected nodes at K strides,
//! runs graph convolution per stride, reprojects each branch back to
//! coordinate space, and fuses all scales with the original map.
//!
//! The output shape always equals the input shape, so the module can be
//! dropped into any backbone location whose spatial extent fits the
//! configured strides.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{channel_attention, reduce_dim, spatial_attention, EnhanceParams, EnhanceVars};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, graph_convolve, GraphBranch, GraphBranchVars};
use crate::layers::{BatchNorm2d, BatchNorm2dVars, Conv2d, Conv2dVars, ParamMeta, ParamWalk};
use crate::saliency::{attention_map, gather_features, select_nodes, NodeSet, SaliencyParams, SaliencyVars};
use crate::tape::{BnMode, Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters of the reasoning module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PGCRConfig {
    /// Channel count of the feature map at the attachment point.
    pub channels: usize,
    /// Node feature dimension S.
    pub node_dim: usize,
    /// Sampling strides, one pyramid branch each; distinct positive values.
    pub deltas: Vec<usize>,
}

impl PGCRConfig {
    /// Bottleneck defaults: S = 64, strides 2/4/7 on 1024 channels.
    pub fn default_bottleneck() -> Self {
        PGCRConfig {
            channels: 1024,
            node_dim: 64,
            deltas: vec![2, 4, 7],
        }
    }

    pub fn scale_count(&self) -> usize {
        self.deltas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.node_dim == 0 {
            return Err(Error::invalid("pgcr_config", "channels and node_dim must be positive"));
        }
        if self.deltas.is_empty() {
            return Err(Error::invalid("pgcr_config", "at least one stride required"));
        }
        for (i, &d) in self.deltas.iter().enumerate() {
            if d == 0 {
                return Err(Error::invalid("pgcr_config", "strides must be positive"));
            }
            if self.deltas[..i].contains(&d) {
                return Err(Error::invalid("pgcr_config", format!("duplicate stride {d}")));
            }
        }
        Ok(())
    }

    /// Check the strides against a concrete attachment extent.
    pub fn validate_extent(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let min_side = h.min(w);
        for &d in &self.deltas {
            if d > min_side {
                return Err(Error::invalid(
                    "pgcr_config",
                    format!("stride {d} exceeds min spatial extent {min_side} ({h}x{w})"),
                ));
            }
        }
        Ok(())
    }
}

/// Fusion stage state: 1x1 convolution (K*S + C -> C) + batchnorm.
#[derive(Clone, Debug)]
pub struct FusionParams<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub conv: Conv2dVars,
    pub bn: BatchNorm2dVars,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(config: &PGCRConfig, rng: &mut impl Rng) -> Self {
        let concat_c = config.scale_count() * config.node_dim + config.channels;
        FusionParams {
            conv: Conv2d::init(concat_c, config.channels, 1, true, rng),
            bn: BatchNorm2d::new(config.channels),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<FusionVars> {
        Ok(FusionVars {
            conv: self.conv.bind(tape)?,
            bn: self.bn.bind(tape)?,
        })
    }

    pub fn absorb_grads(&mut self, vars: &FusionVars, tape: &Tape<T>, scale: T) {
        self.conv.absorb_grads(&vars.conv, tape, scale);
        self.bn.absorb_grads(&vars.bn, tape, scale);
    }
}

impl<T: Scalar> ParamWalk<T> for FusionParams<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        self.conv.for_each(&format!("{prefix}.conv"), f);
        self.bn.for_each(&format!("{prefix}.bn"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        self.conv.for_each_mut(&format!("{prefix}.conv"), f);
        self.bn.for_each_mut(&format!("{prefix}.bn"), f);
    }
}

/// Complete learnable state of the module.
#[derive(Clone, Debug)]
pub struct PgcrParams<T: Scalar> {
    pub config: PGCRConfig,
    pub enhance: EnhanceParams<T>,
    pub saliency: SaliencyParams<T>,
    pub branches: Vec<GraphBranch<T>>,
    pub fusion: FusionParams<T>,
}

#[derive(Clone, Debug)]
pub struct PgcrVars {
    pub enhance: EnhanceVars,
    pub saliency: SaliencyVars,
    pub branches: Vec<GraphBranchVars>,
    pub fusion: FusionVars,
}

impl<T: Scalar> PgcrParams<T> {
    pub fn init(config: PGCRConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let enhance = EnhanceParams::init(config.channels, config.node_dim, rng);
        let saliency = SaliencyParams::init(rng);
        let branches = config
            .deltas
            .iter()
            .map(|&d| GraphBranch::init(config.node_dim, d, rng))
            .collect();
        let fusion = FusionParams::init(&config, rng);
        Ok(PgcrParams {
            config,
            enhance,
            saliency,
            branches,
            fusion,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<PgcrVars> {
        Ok(PgcrVars {
            enhance: self.enhance.bind(tape)?,
            saliency: self.saliency.bind(tape)?,
            branches: self
                .branches
                .iter()
                .map(|b| b.bind(tape))
                .collect::<Result<_>>()?,
            fusion: self.fusion.bind(tape)?,
        })
    }

    pub fn absorb_grads(&mut self, vars: &PgcrVars, tape: &Tape<T>, scale: T) {
        self.enhance.absorb_grads(&vars.enhance, tape, scale);
        self.saliency.absorb_grads(&vars.saliency, tape, scale);
        for (b, v) in self.branches.iter_mut().zip(&vars.branches) {
            b.absorb_grads(v, tape, scale);
        }
        self.fusion.absorb_grads(&vars.fusion, tape, scale);
    }

    /// Full module forward pass. Returns the fused C x H x W map and the
    /// bound parameter handles for gradient extraction.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: VarId, mode: BnMode) -> Result<(VarId, PgcrVars)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "pgcr_forward",
                lhs: vec![self.config.channels],
                rhs: shape,
            });
        }
        let (h, w) = (shape[1], shape[2]);
        self.config.validate_extent(h, w)?;

        let vars = self.bind(tape)?;

        // Enhancement: channel attention -> C-to-S reduction -> spatial attention.
        let ca = channel_attention(tape, x, vars.enhance.gamma_c)?;
        let red = reduce_dim(tape, ca.out, &self.enhance.reduce, &vars.enhance.reduce)?;
        let x_enh = spatial_attention(tape, red, &self.enhance, &vars.enhance)?.out;

        // One saliency map shared across all strides.
        let map = attention_map(tape, x_enh, &self.saliency, &vars.saliency)?;
        let map_value = tape.value(map).clone();

        let mut branch_maps = Vec::with_capacity(self.branches.len());
        for (branch, bvars) in self.branches.iter().zip(&vars.branches) {
            let nodes = select_nodes(&map_value, branch.delta)?;
            let z = gather_features(tape, x_enh, &nodes)?;
            let adj = build_adjacency(tape, z, bvars)?;
            let z_out = graph_convolve(tape, z, adj, bvars)?;
            branch_maps.push(reproject_branch(tape, z_out, &nodes, h, w)?);
        }

        let fused = fuse_multiscale(tape, &branch_maps, x, &mut self.fusion, &vars.fusion, mode)?;
        Ok((fused, vars))
    }
}

impl<T: Scalar> ParamWalk<T> for PgcrParams<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<T>)) {
        self.enhance.for_each(&format!("{prefix}.enhance"), f);
        self.saliency.for_each(&format!("{prefix}.saliency"), f);
        for (i, b) in self.branches.iter().enumerate() {
            b.for_each(&format!("{prefix}.branch{i}"), f);
        }
        self.fusion.for_each(&format!("{prefix}.fusion"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<T>)) {
        self.enhance.for_each_mut(&format!("{prefix}.enhance"), f);
        self.saliency.for_each_mut(&format!("{prefix}.saliency"), f);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}.branch{i}"), f);
        }
        self.fusion.for_each_mut(&format!("{prefix}.fusion"), f);
    }
}

/// Lay node feature columns back onto the block grid (row-major block
/// order) and bilinearly upsample to H x W.
pub fn reproject_branch<T: Scalar>(
    tape: &mut Tape<T>,
    z_out: VarId,
    nodes: &NodeSet,
    h: usize,
    w: usize,
) -> Result<VarId> {
    let shape = tape.shape(z_out).to_vec();
    if shape.len() != 2 || shape[1] != nodes.grid_h * nodes.grid_w {
        return Err(Error::ShapeMismatch {
            op: "reproject_branch",
            lhs: shape,
            rhs: vec![nodes.grid_h, nodes.grid_w],
        });
    }
    let s = shape[0];
    let grid = tape.reshape(z_out, vec![s, nodes.grid_h, nodes.grid_w])?;
    tape.bilinear_up(grid, h, w)
}

/// Concatenate the K reprojected branch maps with the original X and fuse
/// through conv1x1 + batchnorm + ReLU back to C channels.
pub fn fuse_multiscale<T: Scalar>(
    tape: &mut Tape<T>,
    branch_maps: &[VarId],
    x: VarId,
    fusion: &mut FusionParams<T>,
    vars: &FusionVars,
    mode: BnMode,
) -> Result<VarId> {
    let mut parts: Vec<VarId> = branch_maps.to_vec();
    parts.push(x);
    let stacked = tape.concat_channels(&parts)?;
    let mixed = fusion.conv.forward(tape, stacked, &vars.conv)?;
    let normed = fusion.bn.forward(tape, mixed, &vars.bn, mode)?;
    tape.relu(normed)
}

/// Convenience free function mirroring [`PgcrParams::forward`].
pub fn pgcr_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    params: &mut PgcrParams<T>,
    mode: BnMode,
) -> Result<VarId> {
    Ok(params.forward(tape, x, mode)?.0)
}
