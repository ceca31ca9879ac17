//! Fusion of patch features and spot coordinates into the conditioning vector.
//!
//! Feature path: layer norm, linear, GELU, dropout, linear. Coordinate path:
//! sinusoidal encoding, linear, layer norm. The two outputs are concatenated
//! and projected to `d_model`.

use rand::Rng as _;

use crate::autograd::{randn, Graph, Mat, ParamId, ParamStore, Var};
use crate::rng::Rng;
use crate::{Error, Result};

pub const DEFAULT_PE_DIM: usize = 64;

/// Fused conditioning vector for one spot.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding(pub Vec<f64>);

/// Sinusoidal encoding of a 2-D coordinate.
///
/// For each axis, frequency `i` in `0..pe_dim/4` contributes
/// `sin(c * w_i), cos(c * w_i)` with `w_i = 10000^(-4i/pe_dim)`; the x block
/// comes first.
pub fn sinusoidal_encode(coords: [f64; 2], pe_dim: usize) -> Result<Vec<f64>> {
    if !pe_dim.is_multiple_of(4) || pe_dim < 4 {
        return Err(Error::Invalid(format!(
            "pe_dim must be a positive multiple of 4, got {pe_dim}"
        )));
    }
    let per_axis = pe_dim / 4;
    let mut out = Vec::with_capacity(pe_dim);
    for c in coords {
        for i in 0..per_axis {
            let w = 1.0 / 10000f64.powf(4.0 * i as f64 / pe_dim as f64);
            out.push((c * w).sin());
            out.push((c * w).cos());
        }
    }
    Ok(out)
}

/// Parameter handles of the fusion module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub feature_dim: usize,
    pub pe_dim: usize,
    pub d_model: usize,
    feat_gain: ParamId,
    feat_bias: ParamId,
    feat_w1: ParamId,
    feat_b1: ParamId,
    feat_w2: ParamId,
    feat_b2: ParamId,
    coord_w: ParamId,
    coord_b: ParamId,
    coord_gain: ParamId,
    coord_bias: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl FusionParams {
    pub fn register(
        store: &mut ParamStore,
        feature_dim: usize,
        pe_dim: usize,
        d_model: usize,
        rng: &mut Rng,
        init_std: f64,
    ) -> Self {
        let mut linear = |name: &str, rows: usize, cols: usize| {
            let w = store.add(format!("cond.{name}.w"), randn(rng, rows, cols, init_std));
            let b = store.add(format!("cond.{name}.b"), Mat::zeros((1, cols)));
            (w, b)
        };
        let (feat_w1, feat_b1) = linear("feat1", feature_dim, d_model);
        let (feat_w2, feat_b2) = linear("feat2", d_model, d_model);
        let (coord_w, coord_b) = linear("coord", pe_dim, pe_dim);
        let (proj_w, proj_b) = linear("proj", d_model + pe_dim, d_model);
        FusionParams {
            feature_dim,
            pe_dim,
            d_model,
            feat_gain: store.add("cond.feat_norm.gain", Mat::ones((1, feature_dim))),
            feat_bias: store.add("cond.feat_norm.bias", Mat::zeros((1, feature_dim))),
            feat_w1,
            feat_b1,
            feat_w2,
            feat_b2,
            coord_w,
            coord_b,
            coord_gain: store.add("cond.coord_norm.gain", Mat::ones((1, pe_dim))),
            coord_bias: store.add("cond.coord_norm.bias", Mat::zeros((1, pe_dim))),
            proj_w,
            proj_b,
        }
    }

    pub fn from_store(store: &ParamStore, feature_dim: usize, pe_dim: usize, d_model: usize) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        Ok(FusionParams {
            feature_dim,
            pe_dim,
            d_model,
            feat_gain: id("cond.feat_norm.gain")?,
            feat_bias: id("cond.feat_norm.bias")?,
            feat_w1: id("cond.feat1.w")?,
            feat_b1: id("cond.feat1.b")?,
            feat_w2: id("cond.feat2.w")?,
            feat_b2: id("cond.feat2.b")?,
            coord_w: id("cond.coord.w")?,
            coord_b: id("cond.coord.b")?,
            coord_gain: id("cond.coord_norm.gain")?,
            coord_bias: id("cond.coord_norm.bias")?,
            proj_w: id("cond.proj.w")?,
            proj_b: id("cond.proj.b")?,
        })
    }
}

/// Layer norm with learnable gain and bias.
pub(crate) fn affine_norm(g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let n = g.layer_norm(x);
    let gain = g.param(gain);
    let bias = g.param(bias);
    let scaled = g.mul_row(n, gain);
    g.add_row(scaled, bias)
}

/// Inverted dropout; a no-op unless `train_mode` and `rate > 0`.
pub(crate) fn dropout(g: &mut Graph, x: Var, rate: f64, train_mode: bool, rng: &mut Rng) -> Var {
    if !train_mode || rate <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Mat::from_shape_simple_fn(g.shape(x), || if rng.random::<f64>() < rate { 0.0 } else { keep });
    let mask = g.constant(mask);
    g.mul(x, mask)
}

/// Record the fusion of one spot's features and coordinates; returns a
/// `1 × d_model` node.
pub fn fuse_on(
    g: &mut Graph,
    params: &FusionParams,
    features: Var,
    coords: [f64; 2],
    dropout_rate: f64,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Var> {
    if g.shape(features) != (1, params.feature_dim) {
        return Err(Error::Shape(format!(
            "features have shape {:?}, expected (1, {})",
            g.shape(features),
            params.feature_dim
        )));
    }
    let x = affine_norm(g, features, params.feat_gain, params.feat_bias);
    let x = g.linear(x, params.feat_w1, params.feat_b1);
    let x = g.gelu(x);
    let x = dropout(g, x, dropout_rate, train_mode, rng);
    let feat = g.linear(x, params.feat_w2, params.feat_b2);

    let pe = sinusoidal_encode(coords, params.pe_dim)?;
    let pe = g.constant(Mat::from_shape_vec((1, params.pe_dim), pe).expect("pe length"));
    let c = g.linear(pe, params.coord_w, params.coord_b);
    let coord = affine_norm(g, c, params.coord_gain, params.coord_bias);

    let joint = g.concat_cols(&[feat, coord]);
    Ok(g.linear(joint, params.proj_w, params.proj_b))
}

/// Convenience wrapper returning the fused vector directly.
pub fn fuse(
    store: &ParamStore,
    params: &FusionParams,
    features: &[f64],
    coords: [f64; 2],
    dropout_rate: f64,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<ConditionEmbedding> {
    let mut g = Graph::new(store);
    let f = Mat::from_shape_vec((1, features.len()), features.to_vec()).expect("1 x len");
    let f = g.constant(f);
    let h = fuse_on(&mut g, params, f, coords, dropout_rate, train_mode, rng)?;
    Ok(ConditionEmbedding(g.value(h).iter().copied().collect()))
}
