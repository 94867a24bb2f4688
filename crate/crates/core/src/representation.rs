//! Feature extraction: a small convolutional backbone shared by query
//! images and exemplar crops, scale embeddings for exemplars, and the
//! self-similarity module.
//!
//! The backbone downsamples by a total stride of 4 using three 3x3
//! conv+relu stages; the first two stages are followed by 2x2 average
//! pooling (an odd-kernel strided convolution cannot produce an integral
//! output size on even inputs, so downsampling happens in the pooling).
//! Query maps go through a 1x1 projection to `d` channels; exemplar crops
//! are globally pooled and linearly mapped to a `d`-vector.
//!
//! Exemplars receive their scale embedding *before* the self-similarity
//! module runs, so attention sees scale-aware exemplar tokens.

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, TensorId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Total spatial downsampling factor of the backbone.
pub const STRIDE: usize = 4;

/// Static shape configuration of the feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Image channels.
    pub channels_in: usize,
    /// Output channels of the three conv stages.
    pub widths: [usize; 3],
    /// Shared embedding width; must be even (the attention MLP uses d/2).
    pub d: usize,
    /// Number of scale levels.
    pub l_total: usize,
    /// Initial value of the self-similarity residual ratio.
    pub gamma_init: f64,
    /// Side length exemplar crops are resized to before feature extraction.
    pub exemplar_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels_in: 1,
            widths: [8, 16, 32],
            d: 32,
            l_total: 20,
            gamma_init: 0.0,
            exemplar_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding width d={} must be positive and even",
                self.d
            )));
        }
        if self.l_total == 0 {
            return Err(Error::Config("l_total must be >= 1".into()));
        }
        if self.exemplar_size % STRIDE != 0 || self.exemplar_size == 0 {
            return Err(Error::Config(format!(
                "exemplar size {} must be a positive multiple of the stride {STRIDE}",
                self.exemplar_size
            )));
        }
        Ok(())
    }
}

/// A query feature map `F(X)` on the tape, `[d, h, w]`, plus the stride
/// that relates it to image coordinates.
#[derive(Debug, Clone, Copy)]
pub struct FeatureField {
    pub id: TensorId,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

fn uniform_init(rng: &mut StdRng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

// Conv stages start with a small positive bias: with relu stages a
// zero-bias channel whose weights sum negative over the non-negative
// activations of the previous stage is dead from birth.
fn conv_param(name: &str, co: usize, ci: usize, k: usize, rng: &mut StdRng) -> (Parameter, Parameter) {
    let bound = 1.0 / ((ci * k * k) as f64).sqrt();
    let w = Parameter::new(
        format!("{name}.weight"),
        vec![co, ci, k, k],
        uniform_init(rng, co * ci * k * k, bound),
        true,
    );
    let b = Parameter::new(format!("{name}.bias"), vec![co], vec![0.05; co], false);
    (w, b)
}

/// Build the backbone parameter set (shared trunk plus the two heads).
pub fn backbone_parameters(cfg: &BackboneConfig, seed: u64) -> Vec<Parameter> {
    let mut rng = StdRng::seed_from_u64(seed);
    let [w0, w1, w2] = cfg.widths;
    let mut params = Vec::new();
    let (w, b) = conv_param("backbone.conv0", w0, cfg.channels_in, 3, &mut rng);
    params.extend([w, b]);
    let (w, b) = conv_param("backbone.conv1", w1, w0, 3, &mut rng);
    params.extend([w, b]);
    let (w, b) = conv_param("backbone.conv2", w2, w1, 3, &mut rng);
    params.extend([w, b]);
    let (w, b) = conv_param("backbone.query_proj", cfg.d, w2, 1, &mut rng);
    params.extend([w, b]);
    let bound = 1.0 / (w2 as f64).sqrt();
    params.push(Parameter::new(
        "backbone.exemplar_proj.weight",
        vec![cfg.d, w2],
        uniform_init(&mut rng, cfg.d * w2, bound),
        true,
    ));
    params.push(Parameter::new(
        "backbone.exemplar_proj.bias",
        vec![cfg.d],
        vec![0.0; cfg.d],
        false,
    ));
    params
}

/// Scale-embedding table, `[l_total, d]`, uniform in [-0.1, 0.1).
pub fn scale_embedding_parameter(cfg: &BackboneConfig, seed: u64) -> Parameter {
    let mut rng = StdRng::seed_from_u64(seed);
    Parameter::new(
        "scale_embed.table",
        vec![cfg.l_total, cfg.d],
        uniform_init(&mut rng, cfg.l_total * cfg.d, 0.1),
        false,
    )
}

/// Self-similarity parameters: q/k/v projections plus the residual ratio.
pub fn attention_parameters(cfg: &BackboneConfig, seed: u64) -> Vec<Parameter> {
    let mut rng = StdRng::seed_from_u64(seed);
    let d = cfg.d;
    let bound = 1.0 / (d as f64).sqrt();
    let mut params = Vec::new();
    for name in ["attn.wq", "attn.wk", "attn.wv"] {
        params.push(Parameter::new(name, vec![d, d], uniform_init(&mut rng, d * d, bound), true));
    }
    params.push(Parameter::new("attn.gamma", vec![1], vec![cfg.gamma_init], false));
    params
}

/// Tape-side handles to the backbone parameters.
#[derive(Debug, Clone)]
pub struct BackboneBinding {
    pub conv_w: [TensorId; 3],
    pub conv_b: [TensorId; 3],
    pub query_proj_w: TensorId,
    pub query_proj_b: TensorId,
    pub exemplar_proj_w: TensorId,
    pub exemplar_proj_b: TensorId,
}

/// Tape-side handles to the self-similarity parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBinding {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub gamma: TensorId,
}

/// Shared conv trunk: three 3x3 conv+relu stages, 2x2 mean pooling after
/// the first two. Input spatial dims must be multiples of 4.
fn backbone_trunk(tape: &mut Tape, image: TensorId, bind: &BackboneBinding) -> Result<TensorId> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch { op: "backbone", lhs: shape, rhs: vec![] });
    }
    let (h, w) = (shape[1], shape[2]);
    if h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::Config(format!(
            "backbone input {h}x{w} must have spatial dims divisible by {STRIDE}"
        )));
    }
    let mut x = image;
    for stage in 0..3 {
        x = tape.conv2d(x, bind.conv_w[stage], bind.conv_b[stage], 1, 1)?;
        x = tape.relu(x);
        if stage < 2 {
            x = tape.avg_pool2(x)?;
        }
    }
    Ok(x)
}

/// Extract the query feature map `F(X)`, `[d, h/4, w/4]`.
pub fn extract_query_features(
    tape: &mut Tape,
    image: TensorId,
    bind: &BackboneBinding,
) -> Result<FeatureField> {
    let trunk = backbone_trunk(tape, image, bind)?;
    let proj = tape.conv2d(trunk, bind.query_proj_w, bind.query_proj_b, 1, 0)?;
    let s = tape.shape(proj).to_vec();
    Ok(FeatureField { id: proj, h: s[1], w: s[2], stride: STRIDE })
}

/// Extract an exemplar feature vector `F(Z)`, `[d]`, from a crop already
/// resized to the configured exemplar size.
pub fn extract_exemplar_feature(
    tape: &mut Tape,
    crop: TensorId,
    bind: &BackboneBinding,
    cfg: &BackboneConfig,
) -> Result<TensorId> {
    let s = tape.shape(crop).to_vec();
    if s.len() != 3 || s[1] != cfg.exemplar_size || s[2] != cfg.exemplar_size {
        return Err(Error::Contract(format!(
            "exemplar crop must be [c, {0}, {0}], got {s:?}",
            cfg.exemplar_size
        )));
    }
    let trunk = backbone_trunk(tape, crop, bind)?;
    let pooled = tape.global_avg_pool(trunk)?;
    let mapped = tape.matvec(bind.exemplar_proj_w, pooled)?;
    tape.add(mapped, bind.exemplar_proj_b)
}

/// Quantized exemplar-to-image size ratio:
/// `min(l_total - 1, floor((h_z/(2 h_x) + w_z/(2 w_x)) * l_total))`.
pub fn scale_level(h_z: usize, w_z: usize, h_x: usize, w_x: usize, l_total: usize) -> usize {
    debug_assert!(h_z > 0 && w_z > 0 && h_x > 0 && w_x > 0 && l_total > 0);
    let ratio = h_z as f64 / (2.0 * h_x as f64) + w_z as f64 / (2.0 * w_x as f64);
    let level = (ratio * l_total as f64).floor() as usize;
    level.min(l_total - 1)
}

/// Add the embedding row for `level` to an exemplar feature vector.
pub fn apply_scale_embedding(
    tape: &mut Tape,
    feature: TensorId,
    level: usize,
    table: TensorId,
) -> Result<TensorId> {
    let l_total = tape.shape(table)[0];
    if level >= l_total {
        return Err(Error::Contract(format!(
            "scale level {level} out of range for table of {l_total} levels"
        )));
    }
    let row = tape.row_to_vec(table, level)?;
    tape.add(feature, row)
}

/// Single-head self-attention over the joint set of query-position and
/// exemplar tokens, blended back residually with the learnable ratio
/// gamma. With gamma == 0 the output equals the input exactly.
pub fn self_similarity(
    tape: &mut Tape,
    field: FeatureField,
    exemplar_vecs: &[TensorId],
    bind: &AttentionBinding,
) -> Result<(FeatureField, Vec<TensorId>)> {
    if exemplar_vecs.is_empty() {
        return Err(Error::Contract("self_similarity needs at least one exemplar vector".into()));
    }
    let d = tape.shape(field.id)[0];
    let hw = field.h * field.w;

    let field_tokens = tape.field_to_tokens(field.id)?;
    let z_mat = tape.stack_rows(exemplar_vecs)?;
    let tokens = tape.concat_rows(field_tokens, z_mat)?;

    let q = tape.matmul(tokens, bind.wq)?;
    let k = tape.matmul(tokens, bind.wk)?;
    let v = tape.matmul(tokens, bind.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax(scaled)?;
    let mixed = tape.matmul(attn, v)?;
    let delta = tape.scale_by_scalar(mixed, bind.gamma)?;
    let updated = tape.add(tokens, delta)?;

    let field_rows = tape.slice_rows(updated, 0, hw)?;
    let new_field = tape.tokens_to_field(field_rows, field.h, field.w)?;
    let mut new_vecs = Vec::with_capacity(exemplar_vecs.len());
    for i in 0..exemplar_vecs.len() {
        new_vecs.push(tape.row_to_vec(updated, hw + i)?);
    }
    Ok((
        FeatureField { id: new_field, h: field.h, w: field.w, stride: field.stride },
        new_vecs,
    ))
}
