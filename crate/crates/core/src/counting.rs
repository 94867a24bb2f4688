//! The counter head: fuse query features with the similarity map and
//! regress a non-negative density map at full query resolution.
//!
//! Counter layout for the stride-4 backbone: two 3x3 conv+relu stages at
//! feature resolution, then two (x2 bilinear upsample, 3x3 conv+relu)
//! stages back to image resolution, and a final 1x1 conv+relu. The final
//! relu enforces non-negative densities.

use crate::error::{Error, Result};
use crate::representation::FeatureField;
use crate::tensor::{Parameter, Tape, TensorId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

/// How features are combined before entering the counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Similarity map only.
    SOnly,
    /// Query features + tiled exemplar vector.
    XZ,
    /// Query features + tiled exemplar vector + similarity map.
    XZS,
    /// Query features + similarity map (the default).
    XS,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::SOnly, FusionMode::XZ, FusionMode::XZS, FusionMode::XS];

    /// Counter input channels for embedding width `d`.
    pub fn channels(&self, d: usize) -> usize {
        match self {
            FusionMode::SOnly => 1,
            FusionMode::XZ => 2 * d,
            FusionMode::XZS => 2 * d + 1,
            FusionMode::XS => d + 1,
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "s_only" => Ok(FusionMode::SOnly),
            "xz" => Ok(FusionMode::XZ),
            "xzs" => Ok(FusionMode::XZS),
            "xs" => Ok(FusionMode::XS),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected one of s, xz, xzs, xs)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::SOnly => "s",
            FusionMode::XZ => "xz",
            FusionMode::XZS => "xzs",
            FusionMode::XS => "xs",
        }
    }
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::XS
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Channel-wise concatenation of the counter inputs according to `mode`.
///
/// `z_mean` is the mean exemplar vector, only consulted by the XZ/XZS
/// modes (it is tiled over the spatial grid).
pub fn fuse(
    tape: &mut Tape,
    field: &FeatureField,
    z_mean: Option<TensorId>,
    similarity: TensorId,
    mode: FusionMode,
) -> Result<TensorId> {
    let (h, w) = (field.h, field.w);
    let s3 = tape.reshape(similarity, vec![1, h, w])?;
    match mode {
        FusionMode::SOnly => Ok(s3),
        FusionMode::XS => tape.concat_channels(&[field.id, s3]),
        FusionMode::XZ | FusionMode::XZS => {
            let z = z_mean.ok_or_else(|| {
                Error::Contract("fusion modes xz/xzs require an exemplar vector".into())
            })?;
            let tiled = tape.tile_spatial(z, h, w)?;
            if mode == FusionMode::XZ {
                tape.concat_channels(&[field.id, tiled])
            } else {
                tape.concat_channels(&[field.id, tiled, s3])
            }
        }
    }
}

/// Counter widths: conv0, conv1 at feature resolution, then one width per
/// upsample stage, then the final 1x1 projection to a single channel.
pub const COUNTER_WIDTHS: [usize; 4] = [32, 32, 16, 8];

/// Build counter parameters for `in_channels` fused input channels.
pub fn counter_parameters(in_channels: usize, seed: u64) -> Vec<Parameter> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    let [w0, w1, w2, w3] = COUNTER_WIDTHS;
    let chain = [(in_channels, w0, 3), (w0, w1, 3), (w1, w2, 3), (w2, w3, 3)];
    let mut params = Vec::new();
    for (i, (ci, co, k)) in chain.into_iter().enumerate() {
        params.push(Parameter::new(
            format!("counter.conv{i}.weight"),
            vec![co, ci, k, k],
            uniform(co * ci * k * k, ci * k * k),
            true,
        ));
        // small positive bias keeps relu stages alive at initialization
        params.push(Parameter::new(format!("counter.conv{i}.bias"), vec![co], vec![0.05; co], false));
    }
    // The output layer starts with nearly zero predicted mass. Initial
    // mass above the ground-truth count puts uniform downward pressure on
    // the shared output bias; with momentum that overshoots until every
    // pre-activation is negative and the final relu dies with zero
    // gradient everywhere. Starting below any plausible count keeps the
    // early pressure upward, which cannot kill the relu.
    params.push(Parameter::new(
        "counter.out.weight",
        vec![1, w3, 1, 1],
        uniform(w3, w3).iter().map(|v| v * 0.01).collect(),
        true,
    ));
    params.push(Parameter::new("counter.out.bias", vec![1], vec![5e-4], false));
    params
}

/// Tape-side handles to the counter parameters, in forward order.
#[derive(Debug, Clone)]
pub struct CounterBinding {
    pub convs: Vec<(TensorId, TensorId)>,
}

/// Regress a density map from fused features: output `[r*h, r*w]` for a
/// `[c,h,w]` input (r = backbone stride = 4), all entries >= 0.
pub fn counter_forward(tape: &mut Tape, fused: TensorId, bind: &CounterBinding) -> Result<TensorId> {
    if bind.convs.len() != 5 {
        return Err(Error::Contract(format!(
            "counter expects 5 conv layers, got {}",
            bind.convs.len()
        )));
    }
    let mut x = fused;
    // conv0, conv1 at feature resolution
    for i in 0..2 {
        x = tape.conv2d(x, bind.convs[i].0, bind.convs[i].1, 1, 1)?;
        x = tape.relu(x);
    }
    // two upsample+conv stages
    for i in 2..4 {
        x = tape.bilinear_upsample(x, 2)?;
        x = tape.conv2d(x, bind.convs[i].0, bind.convs[i].1, 1, 1)?;
        x = tape.relu(x);
    }
    // final 1x1 projection, relu keeps the density non-negative
    x = tape.conv2d(x, bind.convs[4].0, bind.convs[4].1, 1, 0)?;
    x = tape.relu(x);
    let s = tape.shape(x).to_vec();
    tape.reshape(x, vec![s[1], s[2]])
}

/// A density map pulled off the tape, with its integral cached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    pub predicted_count: f64,
}

impl DensityMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w);
        let predicted_count = data.iter().sum();
        DensityMap { h, w, data, predicted_count }
    }

    pub fn from_tape(tape: &Tape, id: TensorId) -> Self {
        let s = tape.shape(id);
        assert_eq!(s.len(), 2, "density map must be 2-D");
        DensityMap::new(s[0], s[1], tape.data(id).to_vec())
    }
}

/// Integral of a density map (elementwise sum).
pub fn integrate(map: &DensityMap) -> f64 {
    map.data.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::FeatureField;

    fn field_of(tape: &mut Tape, d: usize, h: usize, w: usize) -> FeatureField {
        let data: Vec<f64> = (0..d * h * w).map(|i| (i % 5) as f64 * 0.2).collect();
        let id = tape.constant(vec![d, h, w], data).unwrap();
        FeatureField { id, h, w, stride: 4 }
    }

    #[test]
    fn fusion_channel_arithmetic() {
        let d = 32;
        let mut tape = Tape::new();
        let field = field_of(&mut tape, d, 4, 4);
        let s = tape.constant(vec![4, 4], vec![0.1; 16]).unwrap();
        let z = tape.constant(vec![d], vec![0.2; d]).unwrap();

        let xs = fuse(&mut tape, &field, None, s, FusionMode::XS).unwrap();
        assert_eq!(tape.shape(xs), &[33, 4, 4]);
        let only = fuse(&mut tape, &field, None, s, FusionMode::SOnly).unwrap();
        assert_eq!(tape.shape(only), &[1, 4, 4]);
        let xzs = fuse(&mut tape, &field, Some(z), s, FusionMode::XZS).unwrap();
        assert_eq!(tape.shape(xzs), &[65, 4, 4]);
        let xz = fuse(&mut tape, &field, Some(z), s, FusionMode::XZ).unwrap();
        assert_eq!(tape.shape(xz), &[64, 4, 4]);

        assert!(fuse(&mut tape, &field, None, s, FusionMode::XZ).is_err());
    }

    fn binding(tape: &mut Tape, params: &[Parameter]) -> CounterBinding {
        let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect();
        CounterBinding { convs: ids.chunks(2).map(|c| (c[0], c[1])).collect() }
    }

    #[test]
    fn zero_counter_gives_zero_density() {
        let mut params = counter_parameters(3, 50);
        for p in &mut params {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bind = binding(&mut tape, &params);
        let fused = tape.constant(vec![3, 4, 4], vec![0.7; 48]).unwrap();
        let density = counter_forward(&mut tape, fused, &bind).unwrap();
        assert!(tape.data(density).iter().all(|&v| v == 0.0));
        let map = DensityMap::from_tape(&tape, density);
        assert_eq!(map.predicted_count, 0.0);
    }

    #[test]
    fn counter_output_is_stride_times_input_and_non_negative() {
        let params = counter_parameters(3, 51);
        let mut tape = Tape::new();
        let bind = binding(&mut tape, &params);
        let data: Vec<f64> = (0..3 * 4 * 4).map(|i| ((i as f64) * 0.37).sin()).collect();
        let fused = tape.constant(vec![3, 4, 4], data).unwrap();
        let density = counter_forward(&mut tape, fused, &bind).unwrap();
        assert_eq!(tape.shape(density), &[16, 16]);
        assert!(tape.data(density).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn integrate_examples() {
        let zero = DensityMap::new(2, 2, vec![0.0; 4]);
        assert_eq!(integrate(&zero), 0.0);

        // discretized unit-mass gaussian (sigma = 1, +-4 sigma window)
        let sigma: f64 = 1.0;
        let mut kernel = Vec::new();
        for dy in -4i32..=4 {
            for dx in -4i32..=4 {
                let r2 = (dx * dx + dy * dy) as f64;
                kernel.push((-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma));
            }
        }
        let blob = DensityMap::new(9, 9, kernel);
        assert!((integrate(&blob) - 1.0).abs() < 1e-3);

        // linearity
        let a = DensityMap::new(1, 3, vec![0.5, 1.5, 2.0]);
        let b = DensityMap::new(1, 3, vec![0.25, 0.25, 0.5]);
        let summed = DensityMap::new(1, 3, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect());
        assert!((integrate(&summed) - (integrate(&a) + integrate(&b))).abs() < 1e-9);
    }

    #[test]
    fn predicted_count_matches_integral() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.421).fract()).collect();
        let map = DensityMap::new(8, 8, data);
        assert!((map.predicted_count - integrate(&map)).abs() < 1e-9);
    }
}
