//! Model assembly: configuration, the parameter registry, input
//! preparation, and the end-to-end forward pass.
//!
//! Exemplar processing order: backbone features, then scale embedding
//! (when enabled), then the self-similarity update (when enabled), then
//! the similarity metric. Images whose sides are not multiples of the
//! backbone stride are zero-padded on the bottom/right before entering
//! the network; ground-truth densities are padded the same way.

use crate::counting::{counter_forward, fuse, CounterBinding, FusionMode};
use crate::error::{Error, Result};
use crate::losses::{assign_labels, LabelRule, SimilarityLabels};
use crate::matching::{
    aggregate_exemplars, bilinear_similarity, dynamic_similarity, AttentionMlpBinding, MetricBinding,
};
use crate::representation::{
    self, apply_scale_embedding, extract_exemplar_feature, extract_query_features, scale_level,
    self_similarity, AttentionBinding, BackboneBinding, BackboneConfig, STRIDE,
};
use crate::synthetic::CountingTask;
use crate::tensor::{Parameter, Tape, TensorId};
use std::collections::BTreeMap;

/// Full model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionMode,
    /// Similarity-map supervision (the similarity loss term).
    pub sl: bool,
    /// Self-similarity module.
    pub ss: bool,
    /// Scale embedding.
    pub se: bool,
    /// Dynamic similarity metric (channel attention).
    pub dsm: bool,
    pub label_rule: LabelRule,
    /// Ground-truth density kernel width in pixels.
    pub sigma: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fusion: FusionMode::XS,
            sl: false,
            ss: false,
            se: false,
            dsm: false,
            label_rule: LabelRule::AtLeastOne,
            sigma: 1.0,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    /// The plain bilinear-matching configuration.
    pub fn bmnet() -> Self {
        ModelConfig::default()
    }

    /// All four extensions enabled.
    pub fn bmnet_plus() -> Self {
        ModelConfig { sl: true, ss: true, se: true, dsm: true, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(())
    }
}

const SEED_BACKBONE: u64 = 0x01;
const SEED_METRIC: u64 = 0x02;
const SEED_MLP: u64 = 0x03;
const SEED_ATTN: u64 = 0x04;
const SEED_EMBED: u64 = 0x05;
const SEED_COUNTER: u64 = 0x06;

fn group_seed(init_seed: u64, group: u64) -> u64 {
    let mut s = init_seed ^ group.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s ^ (s >> 31)
}

/// All learnable state of one model, keyed by parameter name.
///
/// Only the parameters the configuration actually uses are allocated, so
/// checkpoints of a plain bilinear model contain no attention weights.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Initialize parameters for `config` (deterministic in
    /// `config.init_seed`).
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let seed = config.init_seed;
        let mut params = representation::backbone_parameters(bb, group_seed(seed, SEED_BACKBONE));
        params.extend(crate::matching::metric_parameters(bb.d, group_seed(seed, SEED_METRIC)));
        if config.dsm {
            params.extend(crate::matching::attention_mlp_parameters(bb.d, group_seed(seed, SEED_MLP)));
        }
        if config.ss {
            params.extend(representation::attention_parameters(bb, group_seed(seed, SEED_ATTN)));
        }
        if config.se {
            params.push(representation::scale_embedding_parameter(bb, group_seed(seed, SEED_EMBED)));
        }
        params.extend(crate::counting::counter_parameters(
            config.fusion.channels(bb.d),
            group_seed(seed, SEED_COUNTER),
        ));

        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(ModelParams { config: config.clone(), params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for p in &self.params {
            if !p.value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter {} after {context}", p.name),
                });
            }
        }
        Ok(())
    }

    /// Lease every parameter onto a tape.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        let ids: Vec<TensorId> = self.params.iter().map(|p| tape.param(p)).collect();
        let id = |name: &str| -> TensorId { ids[*self.index.get(name).expect(name)] };
        let backbone = BackboneBinding {
            conv_w: [id("backbone.conv0.weight"), id("backbone.conv1.weight"), id("backbone.conv2.weight")],
            conv_b: [id("backbone.conv0.bias"), id("backbone.conv1.bias"), id("backbone.conv2.bias")],
            query_proj_w: id("backbone.query_proj.weight"),
            query_proj_b: id("backbone.query_proj.bias"),
            exemplar_proj_w: id("backbone.exemplar_proj.weight"),
            exemplar_proj_b: id("backbone.exemplar_proj.bias"),
        };
        let metric = MetricBinding {
            p: id("metric.p"),
            q: id("metric.q"),
            b_x: id("metric.b_x"),
            b_z: id("metric.b_z"),
        };
        let mlp = self.config.dsm.then(|| AttentionMlpBinding {
            w1: id("metric.mlp.w1"),
            b1: id("metric.mlp.b1"),
            w2: id("metric.mlp.w2"),
            b2: id("metric.mlp.b2"),
        });
        let attn = self.config.ss.then(|| AttentionBinding {
            wq: id("attn.wq"),
            wk: id("attn.wk"),
            wv: id("attn.wv"),
            gamma: id("attn.gamma"),
        });
        let scale_table = self.config.se.then(|| id("scale_embed.table"));
        let counter = CounterBinding {
            convs: (0..4)
                .map(|i| (id(&format!("counter.conv{i}.weight")), id(&format!("counter.conv{i}.bias"))))
                .chain(std::iter::once((id("counter.out.weight"), id("counter.out.bias"))))
                .collect(),
        };
        ModelBinding { ids, backbone, metric, mlp, attn, scale_table, counter }
    }

    /// Pull gradients off a tape into the parameter accumulators, scaled.
    pub fn accumulate_from_tape(&mut self, tape: &Tape, binding: &ModelBinding, scale: f64) {
        for (p, &id) in self.params.iter_mut().zip(&binding.ids) {
            if let Some(g) = tape.grad(id) {
                p.accumulate_grad(g, scale);
            }
        }
    }

    /// Merge gradient vectors produced by [`collect_gradients`] workers.
    pub fn accumulate_raw(&mut self, grads: &[Option<Vec<f64>>], scale: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(g, scale);
            }
        }
    }
}

/// Extract per-parameter gradients from a tape without touching the
/// parameter store (usable from worker threads).
pub fn collect_gradients(tape: &Tape, binding: &ModelBinding) -> Vec<Option<Vec<f64>>> {
    binding.ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
}

/// Tape-side handles to the full parameter set.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub ids: Vec<TensorId>,
    pub backbone: BackboneBinding,
    pub metric: MetricBinding,
    pub mlp: Option<AttentionMlpBinding>,
    pub attn: Option<AttentionBinding>,
    pub scale_table: Option<TensorId>,
    pub counter: CounterBinding,
}

/// An exemplar crop resized for the backbone plus its scale level.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExemplar {
    pub crop: Vec<f64>,
    pub channels: usize,
    pub size: usize,
    pub level: usize,
}

/// Round up to the next multiple of the backbone stride.
pub fn padded_extent(n: usize) -> usize {
    n.div_ceil(STRIDE) * STRIDE
}

/// Zero-pad `[c,h,w]` data on the bottom/right to `(target_h, target_w)`.
pub fn pad_spatial(data: &[f64], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    assert!(th >= h && tw >= w);
    if th == h && tw == w {
        return data.to_vec();
    }
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * th + y) * tw;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

/// Affine map from image range [0,1] to the backbone's input range
/// [-1,1]. Non-negative inputs feeding relu conv stages leave channels
/// with negative weight sums dead from birth; centering avoids that.
fn center(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Crop a box out of a task image and resize it (nearest neighbor) to the
/// exemplar input size.
fn crop_and_resize(task: &CountingTask, bbox: &[f64; 4], size: usize) -> PreparedExemplar {
    let x0 = bbox[0].floor().max(0.0) as usize;
    let y0 = bbox[1].floor().max(0.0) as usize;
    let x1 = (bbox[2].ceil() as usize).clamp(x0 + 1, task.w);
    let y1 = (bbox[3].ceil() as usize).clamp(y0 + 1, task.h);
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut crop = vec![0.0; task.c * size * size];
    for c in 0..task.c {
        for ty in 0..size {
            let sy = y0 + (ty * ch) / size;
            for tx in 0..size {
                let sx = x0 + (tx * cw) / size;
                crop[(c * size + ty) * size + tx] =
                    center(task.image[(c * task.h + sy) * task.w + sx]);
            }
        }
    }
    PreparedExemplar { crop, channels: task.c, size, level: 0 }
}

/// Everything the forward pass needs for one task, precomputed: the padded
/// image, resized exemplar crops with scale levels, the padded ground
/// truth density, and similarity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInputs {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub exemplars: Vec<PreparedExemplar>,
    pub gt_density: Vec<f64>,
    pub gt_count: usize,
    pub labels: SimilarityLabels,
    pub category_id: u32,
}

/// Prepare a task with its first `n_exemplars` boxes.
pub fn prepare_task(task: &CountingTask, n_exemplars: usize, cfg: &ModelConfig) -> Result<TaskInputs> {
    if n_exemplars == 0 || n_exemplars > task.exemplar_boxes.len() {
        return Err(Error::Contract(format!(
            "requested {n_exemplars} exemplars but task has {}",
            task.exemplar_boxes.len()
        )));
    }
    let (th, tw) = (padded_extent(task.h), padded_extent(task.w));
    // zero-pad in image space first, then center the whole plane
    let image: Vec<f64> = pad_spatial(&task.image, task.c, task.h, task.w, th, tw)
        .iter()
        .map(|&v| center(v))
        .collect();

    let exemplars: Vec<PreparedExemplar> = task.exemplar_boxes[..n_exemplars]
        .iter()
        .map(|bbox| {
            let mut ex = crop_and_resize(task, bbox, cfg.backbone.exemplar_size);
            let h_z = ((bbox[3] - bbox[1]).round() as usize).max(1);
            let w_z = ((bbox[2] - bbox[0]).round() as usize).max(1);
            ex.level = scale_level(h_z, w_z, task.h, task.w, cfg.backbone.l_total);
            ex
        })
        .collect();

    let gt = crate::synthetic::render_density_gt(task, cfg.sigma)?;
    let gt_density = pad_spatial(&gt.data, 1, task.h, task.w, th, tw);

    let (h_x, w_x) = (th / STRIDE, tw / STRIDE);
    let labels = assign_labels(&task.dots, h_x, w_x, STRIDE, cfg.label_rule);

    Ok(TaskInputs {
        c: task.c,
        h: th,
        w: tw,
        image,
        exemplars,
        gt_density,
        gt_count: task.gt_count(),
        labels,
        category_id: task.category_id,
    })
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Density map `[h, w]` at (padded) query resolution.
    pub density: TensorId,
    /// Per-exemplar similarity maps `[h_x, w_x]`.
    pub per_exemplar: Vec<TensorId>,
    /// Aggregated similarity map `[h_x, w_x]`.
    pub similarity: TensorId,
    pub field_h: usize,
    pub field_w: usize,
}

/// Run the model end to end on prepared inputs.
pub fn forward(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    inputs: &TaskInputs,
) -> Result<ForwardOutput> {
    let image = tape.constant(vec![inputs.c, inputs.h, inputs.w], inputs.image.clone())?;
    let mut field = extract_query_features(tape, image, &binding.backbone)?;

    let mut z_vecs = Vec::with_capacity(inputs.exemplars.len());
    for ex in &inputs.exemplars {
        let crop = tape.constant(vec![ex.channels, ex.size, ex.size], ex.crop.clone())?;
        let mut v = extract_exemplar_feature(tape, crop, &binding.backbone, &cfg.backbone)?;
        if let Some(table) = binding.scale_table {
            v = apply_scale_embedding(tape, v, ex.level, table)?;
        }
        z_vecs.push(v);
    }

    if let Some(attn) = &binding.attn {
        let (new_field, new_vecs) = self_similarity(tape, field, &z_vecs, attn)?;
        field = new_field;
        z_vecs = new_vecs;
    }

    let mut per_exemplar = Vec::with_capacity(z_vecs.len());
    for &z in &z_vecs {
        let s = match &binding.mlp {
            Some(mlp) => dynamic_similarity(tape, &field, z, &binding.metric, mlp)?,
            None => bilinear_similarity(tape, &field, z, &binding.metric)?,
        };
        per_exemplar.push(s);
    }
    let similarity = aggregate_exemplars(tape, &per_exemplar)?;

    let z_mean = match cfg.fusion {
        FusionMode::XZ | FusionMode::XZS => {
            let mut acc = z_vecs[0];
            for &z in &z_vecs[1..] {
                acc = tape.add(acc, z)?;
            }
            Some(tape.scale(acc, 1.0 / z_vecs.len() as f64))
        }
        _ => None,
    };

    let fused = fuse(tape, &field, z_mean, similarity, cfg.fusion)?;
    let density = counter_forward(tape, fused, &binding.counter)?;

    Ok(ForwardOutput { density, per_exemplar, similarity, field_h: field.h, field_w: field.w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{category_spec, generate_task};

    fn sample_task(seed: u64) -> CountingTask {
        generate_task(&category_spec(1), (4, 8), (64, 64), seed, None).unwrap()
    }

    #[test]
    fn init_allocates_only_configured_groups() {
        let bmnet = ModelParams::init(&ModelConfig::bmnet()).unwrap();
        assert!(bmnet.get("attn.wq").is_none());
        assert!(bmnet.get("metric.mlp.w1").is_none());
        assert!(bmnet.get("scale_embed.table").is_none());
        assert!(bmnet.get("metric.p").is_some());

        let plus = ModelParams::init(&ModelConfig::bmnet_plus()).unwrap();
        assert!(plus.get("attn.wq").is_some());
        assert!(plus.get("metric.mlp.w1").is_some());
        assert!(plus.get("scale_embed.table").is_some());
        assert!(plus.num_values() > bmnet.num_values());
    }

    #[test]
    fn shared_groups_share_initialization_across_configs() {
        let a = ModelParams::init(&ModelConfig::bmnet()).unwrap();
        let b = ModelParams::init(&ModelConfig { ss: true, ..ModelConfig::bmnet() }).unwrap();
        for name in ["backbone.conv0.weight", "metric.p", "counter.conv0.weight"] {
            assert_eq!(a.get(name).unwrap().value, b.get(name).unwrap().value);
        }
    }

    #[test]
    fn forward_produces_full_resolution_density() {
        let cfg = ModelConfig::bmnet();
        let params = ModelParams::init(&cfg).unwrap();
        let task = sample_task(5);
        let inputs = prepare_task(&task, task.exemplar_boxes.len().min(3), &cfg).unwrap();
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let out = forward(&mut tape, &binding, &cfg, &inputs).unwrap();
        assert_eq!(tape.shape(out.density), &[64, 64]);
        assert_eq!(tape.shape(out.similarity), &[16, 16]);
        assert!(tape.data(out.density).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gamma_zero_self_similarity_matches_plain_model() {
        let base = ModelConfig::bmnet();
        let with_ss = ModelConfig { ss: true, ..base.clone() };
        assert_eq!(base.backbone.gamma_init, 0.0);

        let p_base = ModelParams::init(&base).unwrap();
        let p_ss = ModelParams::init(&with_ss).unwrap();

        let task = sample_task(9);
        let inputs = prepare_task(&task, 2, &base).unwrap();

        let mut t1 = Tape::new();
        let b1 = p_base.bind(&mut t1);
        let o1 = forward(&mut t1, &b1, &base, &inputs).unwrap();

        let mut t2 = Tape::new();
        let b2 = p_ss.bind(&mut t2);
        let o2 = forward(&mut t2, &b2, &with_ss, &inputs).unwrap();

        for (a, b) in t1.data(o1.density).iter().zip(t2.data(o2.density)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in t1.data(o1.similarity).iter().zip(t2.data(o2.similarity)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_backward_populates_every_parameter() {
        // gamma must be nonzero: at gamma == 0 the attention projections
        // sit behind a closed residual gate and correctly get zero grads
        let mut cfg = ModelConfig::bmnet_plus();
        cfg.backbone.gamma_init = 0.5;
        let mut params = ModelParams::init(&cfg).unwrap();
        let task = sample_task(11);
        let inputs = prepare_task(&task, 2, &cfg).unwrap();

        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let out = forward(&mut tape, &binding, &cfg, &inputs).unwrap();
        let gt = tape.constant(vec![inputs.h, inputs.w], inputs.gt_density.clone()).unwrap();
        let count_l = crate::losses::counting_loss(&mut tape, out.density, gt).unwrap();
        let sim_l = crate::losses::similarity_loss(&mut tape, &out.per_exemplar, &inputs.labels).unwrap();
        let total = crate::losses::total_loss(&mut tape, count_l, sim_l, 0.1).unwrap();
        tape.backward(total).unwrap();
        params.accumulate_from_tape(&tape, &binding, 1.0);

        for p in params.iter() {
            let g = p.grad.as_ref().unwrap_or_else(|| panic!("no grad for {}", p.name));
            assert!(g.iter().any(|&v| v != 0.0), "all-zero grad for {}", p.name);
        }
    }

    #[test]
    fn prepare_task_pads_odd_sizes_to_stride_multiples() {
        let mut task = sample_task(13);
        // shrink to a 62x61 crop of the original image
        let (nh, nw) = (60, 60);
        let mut img = vec![0.0; nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                img[y * nw + x] = task.image[y * task.w + x];
            }
        }
        task.h = nh;
        task.w = nw;
        task.image = img;
        task.dots.retain(|&(x, y)| x < (nw - 4) as f64 && y < (nh - 4) as f64);
        task.exemplar_boxes.retain(|b| b[2] < nw as f64 && b[3] < nh as f64);
        if task.exemplar_boxes.is_empty() || task.dots.is_empty() {
            return; // fixture degenerated; other seeds cover this path
        }

        let mut odd = task.clone();
        odd.h = 58;
        odd.w = 57;
        let mut img2 = vec![0.0; 58 * 57];
        for y in 0..58 {
            for x in 0..57 {
                img2[y * 57 + x] = task.image[y * task.w + x];
            }
        }
        odd.image = img2;
        odd.dots.retain(|&(x, y)| x < 53.0 && y < 54.0);
        odd.exemplar_boxes.retain(|b| b[2] < 57.0 && b[3] < 58.0);
        if odd.exemplar_boxes.is_empty() || odd.dots.is_empty() {
            return;
        }

        let cfg = ModelConfig::bmnet();
        let inputs = prepare_task(&odd, 1, &cfg).unwrap();
        assert_eq!((inputs.h, inputs.w), (60, 60));
        assert_eq!(inputs.image.len(), 60 * 60);
        assert_eq!(inputs.gt_density.len(), 60 * 60);

        // forward runs on the padded inputs
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let out = forward(&mut tape, &binding, &cfg, &inputs).unwrap();
        assert_eq!(tape.shape(out.density), &[60, 60]);
    }
}
