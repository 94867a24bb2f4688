//! Self-verification: finite-difference gradient checks for every
//! differentiable operation plus exact identity/oracle reductions.
//!
//! Everything here runs sequentially on one core with small seeded
//! inputs; the whole suite finishes in seconds.

use crate::counting::{counter_forward, CounterBinding};
use crate::error::Result;
use crate::losses::{similarity_loss, Label, SimilarityLabels};
use crate::matching::{bilinear_similarity, dynamic_similarity, AttentionMlpBinding, MetricBinding};
use crate::representation::{self_similarity, AttentionBinding, FeatureField};
use crate::tensor::{grad_check_with_corruption, CheckInput, Tape, TensorId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

/// Tolerance for finite-difference gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Epsilon for central differences.
pub const GRAD_EPSILON: f64 = 1e-5;

/// Result of one verification check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Max relative gradient error, or max absolute deviation for
    /// identity/oracle checks.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

fn rand_vec(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Weighted sum reduction so gradient checks see non-uniform adjoints.
fn weighted_sum(tape: &mut Tape, y: TensorId, seed: u64) -> Result<TensorId> {
    let n = tape.data(y).len();
    let mut rng = StdRng::seed_from_u64(seed);
    let w = tape.constant(tape.shape(y).to_vec(), rand_vec(&mut rng, n, -1.0, 1.0))?;
    let h = tape.hadamard(y, w)?;
    Ok(tape.sum(h))
}

struct Suite<'a> {
    outcomes: Vec<CheckOutcome>,
    corrupt: Option<&'a str>,
}

impl<'a> Suite<'a> {
    fn grad<F>(&mut self, name: &str, inputs: Vec<CheckInput>, build: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    {
        let corrupt = self.corrupt == Some(name);
        let value = grad_check_with_corruption(build, &inputs, GRAD_EPSILON, corrupt)?;
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            value,
            tolerance: GRAD_TOLERANCE,
            passed: value < GRAD_TOLERANCE,
        });
        Ok(())
    }

    fn exact(&mut self, name: &str, value: f64, tolerance: f64) {
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }
}

/// Run the full verification suite. `corrupt` perturbs the analytic
/// gradient of the named check so its failure path can be exercised.
pub fn run_all_checks(corrupt: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut suite = Suite { outcomes: Vec::new(), corrupt };
    let mut rng = StdRng::seed_from_u64(0x5EED);

    // ── primitive operations ────────────────────────────────────────
    {
        let a = CheckInput::new(vec![3, 4], rand_vec(&mut rng, 12, -1.0, 1.0));
        let b = CheckInput::new(vec![4, 2], rand_vec(&mut rng, 8, -1.0, 1.0));
        suite.grad("matmul", vec![a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, c, 1)
        })?;
    }
    {
        let m = CheckInput::new(vec![3, 5], rand_vec(&mut rng, 15, -1.0, 1.0));
        let v = CheckInput::new(vec![5], rand_vec(&mut rng, 5, -1.0, 1.0));
        suite.grad("matvec", vec![m, v], |t, ids| {
            let y = t.matvec(ids[0], ids[1])?;
            weighted_sum(t, y, 2)
        })?;
    }
    {
        let x = CheckInput::new(vec![2, 5, 5], rand_vec(&mut rng, 50, -1.0, 1.0));
        let k = CheckInput::new(vec![3, 2, 3, 3], rand_vec(&mut rng, 54, -0.5, 0.5));
        let b = CheckInput::new(vec![3], rand_vec(&mut rng, 3, -0.5, 0.5));
        suite.grad("conv2d", vec![x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            weighted_sum(t, y, 3)
        })?;
    }
    {
        let x = CheckInput::new(vec![3, 4, 4], rand_vec(&mut rng, 48, -1.0, 1.0));
        suite.grad("global_avg_pool", vec![x], |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            weighted_sum(t, y, 4)
        })?;
    }
    {
        let x = CheckInput::new(vec![2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0));
        suite.grad("avg_pool2", vec![x], |t, ids| {
            let y = t.avg_pool2(ids[0])?;
            weighted_sum(t, y, 5)
        })?;
    }
    {
        let x = CheckInput::new(vec![2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0));
        suite.grad("bilinear_upsample", vec![x], |t, ids| {
            let y = t.bilinear_upsample(ids[0], 2)?;
            weighted_sum(t, y, 6)
        })?;
    }
    {
        // keep relu inputs away from the kink
        let data: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        suite.grad("relu", vec![CheckInput::new(vec![16], data)], |t, ids| {
            let y = t.relu(ids[0]);
            weighted_sum(t, y, 7)
        })?;
    }
    {
        let x = CheckInput::new(vec![10], rand_vec(&mut rng, 10, -2.0, 2.0));
        suite.grad("tanh", vec![x], |t, ids| {
            let y = t.tanh(ids[0]);
            weighted_sum(t, y, 8)
        })?;
    }
    {
        let a = CheckInput::new(vec![6], rand_vec(&mut rng, 6, -1.0, 1.0));
        let b = CheckInput::new(vec![6], rand_vec(&mut rng, 6, -1.0, 1.0));
        suite.grad("add", vec![a, b], |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            weighted_sum(t, y, 9)
        })?;
    }
    {
        let a = CheckInput::new(vec![6], rand_vec(&mut rng, 6, -1.0, 1.0));
        let b = CheckInput::new(vec![6], rand_vec(&mut rng, 6, -1.0, 1.0));
        suite.grad("hadamard", vec![a, b], |t, ids| {
            let y = t.hadamard(ids[0], ids[1])?;
            weighted_sum(t, y, 10)
        })?;
    }
    {
        let x = CheckInput::new(vec![5], rand_vec(&mut rng, 5, -1.0, 1.0));
        let s = CheckInput::new(vec![1], vec![rng.gen_range(-1.0..1.0)]);
        suite.grad("scale_by_scalar", vec![x, s], |t, ids| {
            let y = t.scale_by_scalar(ids[0], ids[1])?;
            weighted_sum(t, y, 11)
        })?;
    }
    {
        let m = CheckInput::new(vec![4, 3], rand_vec(&mut rng, 12, -1.0, 1.0));
        let v = CheckInput::new(vec![3], rand_vec(&mut rng, 3, -1.0, 1.0));
        suite.grad("add_row_broadcast", vec![m, v], |t, ids| {
            let y = t.add_row_broadcast(ids[0], ids[1])?;
            weighted_sum(t, y, 12)
        })?;
    }
    {
        let x = CheckInput::new(vec![3, 5], rand_vec(&mut rng, 15, -2.0, 2.0));
        suite.grad("softmax", vec![x], |t, ids| {
            let y = t.softmax(ids[0])?;
            weighted_sum(t, y, 13)
        })?;
    }
    {
        // reshape/transpose/concat/stack/slice/tile exercised together
        let a = CheckInput::new(vec![2, 3], rand_vec(&mut rng, 6, -1.0, 1.0));
        let v1 = CheckInput::new(vec![3], rand_vec(&mut rng, 3, -1.0, 1.0));
        let v2 = CheckInput::new(vec![3], rand_vec(&mut rng, 3, -1.0, 1.0));
        suite.grad("shape_ops", vec![a, v1, v2], |t, ids| {
            let at = t.transpose(ids[0])?;
            let back = t.transpose(at)?;
            let stacked = t.stack_rows(&[ids[1], ids[2]])?;
            let joined = t.concat_rows(back, stacked)?;
            let sliced = t.slice_rows(joined, 1, 3)?;
            let field = t.tokens_to_field(sliced, 1, 3)?;
            let tokens = t.field_to_tokens(field)?;
            let row = t.row_to_vec(tokens, 0)?;
            let tiled = t.tile_spatial(row, 2, 2)?;
            let flat = t.reshape(tiled, vec![3 * 4])?;
            weighted_sum(t, flat, 14)
        })?;
    }

    // ── composite modules ───────────────────────────────────────────
    {
        let d = 6;
        let (h, w) = (2, 2);
        let field = CheckInput::new(vec![d, h, w], rand_vec(&mut rng, d * h * w, -1.0, 1.0));
        let z1 = CheckInput::new(vec![d], rand_vec(&mut rng, d, -1.0, 1.0));
        let z2 = CheckInput::new(vec![d], rand_vec(&mut rng, d, -1.0, 1.0));
        let wq = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.4, 0.4));
        let wk = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.4, 0.4));
        let wv = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.4, 0.4));
        let gamma = CheckInput::new(vec![1], vec![0.7]);
        suite.grad("attention", vec![field, z1, z2, wq, wk, wv, gamma], move |t, ids| {
            let field = FeatureField { id: ids[0], h, w, stride: 4 };
            let bind = AttentionBinding { wq: ids[3], wk: ids[4], wv: ids[5], gamma: ids[6] };
            let (f, zs) = self_similarity(t, field, &[ids[1], ids[2]], &bind)?;
            let ft = t.field_to_tokens(f.id)?;
            let zm = t.stack_rows(&zs)?;
            let all = t.concat_rows(ft, zm)?;
            let flat = t.reshape(all, vec![(h * w + 2) * d])?;
            weighted_sum(t, flat, 15)
        })?;
    }
    {
        let d = 5;
        let (h, w) = (3, 3);
        let field = CheckInput::new(vec![d, h, w], rand_vec(&mut rng, d * h * w, -1.0, 1.0));
        let z = CheckInput::new(vec![d], rand_vec(&mut rng, d, -1.0, 1.0));
        let p = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.7, 0.7));
        let q = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.7, 0.7));
        let bx = CheckInput::new(vec![d], rand_vec(&mut rng, d, -0.5, 0.5));
        let bz = CheckInput::new(vec![d], rand_vec(&mut rng, d, -0.5, 0.5));
        suite.grad("bilinear_metric", vec![field, z, p, q, bx, bz], move |t, ids| {
            let field = FeatureField { id: ids[0], h, w, stride: 4 };
            let metric = MetricBinding { p: ids[2], q: ids[3], b_x: ids[4], b_z: ids[5] };
            let s = bilinear_similarity(t, &field, ids[1], &metric)?;
            weighted_sum(t, s, 16)
        })?;
    }
    {
        let d = 6;
        let (h, w) = (2, 3);
        let hidden = d / 2;
        let field = CheckInput::new(vec![d, h, w], rand_vec(&mut rng, d * h * w, -1.0, 1.0));
        let z = CheckInput::new(vec![d], rand_vec(&mut rng, d, -1.0, 1.0));
        let p = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.7, 0.7));
        let q = CheckInput::new(vec![d, d], rand_vec(&mut rng, d * d, -0.7, 0.7));
        let bx = CheckInput::new(vec![d], rand_vec(&mut rng, d, -0.5, 0.5));
        let bz = CheckInput::new(vec![d], rand_vec(&mut rng, d, -0.5, 0.5));
        let w1 = CheckInput::new(vec![hidden, d], rand_vec(&mut rng, hidden * d, -0.6, 0.6));
        let b1 = CheckInput::new(vec![hidden], rand_vec(&mut rng, hidden, -0.3, 0.3));
        let w2 = CheckInput::new(vec![d, hidden], rand_vec(&mut rng, d * hidden, -0.6, 0.6));
        let b2 = CheckInput::new(vec![d], rand_vec(&mut rng, d, -0.3, 0.3));
        suite.grad(
            "dynamic_metric",
            vec![field, z, p, q, bx, bz, w1, b1, w2, b2],
            move |t, ids| {
                let field = FeatureField { id: ids[0], h, w, stride: 4 };
                let metric = MetricBinding { p: ids[2], q: ids[3], b_x: ids[4], b_z: ids[5] };
                let mlp = AttentionMlpBinding { w1: ids[6], b1: ids[7], w2: ids[8], b2: ids[9] };
                let s = dynamic_similarity(t, &field, ids[1], &metric, &mlp)?;
                weighted_sum(t, s, 17)
            },
        )?;
    }
    {
        // down-scaled counter: same layer structure, small widths
        let chain: [(usize, usize, usize); 5] =
            [(3, 4, 3), (4, 4, 3), (4, 2, 3), (2, 2, 3), (2, 1, 1)];
        let mut inputs = vec![CheckInput::new(vec![3, 4, 4], rand_vec(&mut rng, 48, -1.0, 1.0))];
        for (ci, co, k) in chain {
            inputs.push(CheckInput::new(
                vec![co, ci, k, k],
                rand_vec(&mut rng, co * ci * k * k, -0.4, 0.4),
            ));
            inputs.push(CheckInput::new(vec![co], rand_vec(&mut rng, co, 0.05, 0.3)));
        }
        suite.grad("counter", inputs, |t, ids| {
            let bind = CounterBinding {
                convs: ids[1..].chunks(2).map(|c| (c[0], c[1])).collect(),
            };
            let y = counter_forward(t, ids[0], &bind)?;
            weighted_sum(t, y, 18)
        })?;
    }
    {
        let pred = CheckInput::new(vec![4, 4], rand_vec(&mut rng, 16, 0.0, 1.0));
        let gt = CheckInput::detached(vec![4, 4], rand_vec(&mut rng, 16, 0.0, 1.0));
        suite.grad("counting_loss", vec![pred, gt], |t, ids| {
            crate::losses::counting_loss(t, ids[0], ids[1])
        })?;
    }
    {
        let map = CheckInput::new(vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let labels = SimilarityLabels {
            labels: vec![
                Label::Positive,
                Label::Negative,
                Label::Negative,
                Label::Positive,
                Label::Negative,
                Label::Ignored,
                Label::Negative,
                Label::Negative,
                Label::Positive,
                Label::Negative,
                Label::Ignored,
                Label::Negative,
            ],
            h: 3,
            w: 4,
            r: 4,
        };
        suite.grad("similarity_loss", vec![map], move |t, ids| {
            similarity_loss(t, &[ids[0]], &labels)
        })?;
    }

    // ── identity reductions and oracles ─────────────────────────────
    {
        // bilinear metric with P = Q = I, b = 0 equals the inner product
        let mut worst = 0.0f64;
        for trial in 0..50 {
            let mut trial_rng = StdRng::seed_from_u64(10_000 + trial);
            let (d, h, w) = (6, 3, 4);
            let fdata = rand_vec(&mut trial_rng, d * h * w, -2.0, 2.0);
            let zdata = rand_vec(&mut trial_rng, d, -2.0, 2.0);
            let mut tape = Tape::new();
            let mut eye = vec![0.0; d * d];
            for i in 0..d {
                eye[i * d + i] = 1.0;
            }
            let metric = MetricBinding {
                p: tape.constant(vec![d, d], eye.clone())?,
                q: tape.constant(vec![d, d], eye)?,
                b_x: tape.constant(vec![d], vec![0.0; d])?,
                b_z: tape.constant(vec![d], vec![0.0; d])?,
            };
            let fid = tape.constant(vec![d, h, w], fdata.clone())?;
            let field = FeatureField { id: fid, h, w, stride: 4 };
            let z = tape.constant(vec![d], zdata.clone())?;
            let s = bilinear_similarity(&mut tape, &field, z, &metric)?;
            for y in 0..h {
                for x in 0..w {
                    let dot: f64 = (0..d).map(|c| fdata[(c * h + y) * w + x] * zdata[c]).sum();
                    worst = worst.max((dot - tape.data(s)[y * w + x]).abs());
                }
            }
        }
        suite.exact("identity_reduction", worst, 1e-12);
    }
    {
        // stabilized similarity loss vs direct closed-form evaluation
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let mut trial_rng = StdRng::seed_from_u64(20_000 + trial);
            let n = 10;
            let scores = rand_vec(&mut trial_rng, n, -10.0, 10.0);
            let labels: Vec<Label> = (0..n)
                .map(|i| {
                    if i == 0 {
                        Label::Positive
                    } else if trial_rng.gen_bool(0.4) {
                        Label::Positive
                    } else {
                        Label::Negative
                    }
                })
                .collect();
            let p: f64 = scores
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == Label::Positive)
                .map(|(s, _)| s.exp())
                .sum();
            let q: f64 = scores
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == Label::Negative)
                .map(|(s, _)| s.exp())
                .sum();
            let oracle = -(p / (p + q)).ln();
            let sl = SimilarityLabels { labels, h: 2, w: 5, r: 4 };
            let mut tape = Tape::new();
            let map = tape.constant(vec![2, 5], scores)?;
            let loss = similarity_loss(&mut tape, &[map], &sl)?;
            worst = worst.max((tape.data(loss)[0] - oracle).abs());
        }
        suite.exact("snr_oracle", worst, 1e-10);
    }
    {
        // symmetric one-pos-one-neg case returns ln 2
        let mut tape = Tape::new();
        let map = tape.constant(vec![1, 2], vec![1.3, 1.3])?;
        let sl = SimilarityLabels {
            labels: vec![Label::Positive, Label::Negative],
            h: 1,
            w: 2,
            r: 4,
        };
        let loss = similarity_loss(&mut tape, &[map], &sl)?;
        let dev = (tape.data(loss)[0] - std::f64::consts::LN_2).abs();
        suite.exact("snr_symmetric", dev, 1e-12);
    }
    {
        // softmax rows sum to one and shift invariance holds
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let mut trial_rng = StdRng::seed_from_u64(30_000 + trial);
            let vals = rand_vec(&mut trial_rng, 7, -5.0, 5.0);
            let mut tape = Tape::new();
            let x = tape.constant(vec![7], vals.clone())?;
            let s = tape.softmax(x)?;
            worst = worst.max((tape.data(s).iter().sum::<f64>() - 1.0).abs());
            let shifted: Vec<f64> = vals.iter().map(|v| v + 311.0).collect();
            let xs = tape.constant(vec![7], shifted)?;
            let ss = tape.softmax(xs)?;
            for (a, b) in tape.data(s).to_vec().iter().zip(tape.data(ss)) {
                worst = worst.max((a - b).abs());
            }
        }
        suite.exact("softmax_normalization", worst, 1e-12);
    }
    {
        // 1x1 identity kernel convolution is bit-exact
        let mut trial_rng = StdRng::seed_from_u64(40_000);
        let data = rand_vec(&mut trial_rng, 2 * 4 * 4, -3.0, 3.0);
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 4, 4], data.clone())?;
        let mut kdata = vec![0.0; 2 * 2];
        kdata[0] = 1.0; // out0 <- in0
        kdata[3] = 1.0; // out1 <- in1
        let k = tape.constant(vec![2, 2, 1, 1], kdata)?;
        let b = tape.constant(vec![2], vec![0.0, 0.0])?;
        let y = tape.conv2d(x, k, b, 1, 0)?;
        let exact = tape.data(y).iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
        suite.exact("conv_identity", if exact { 0.0 } else { 1.0 }, 0.0);
    }
    {
        // corner-aligned upsampling preserves corners
        let mut trial_rng = StdRng::seed_from_u64(50_000);
        let data = rand_vec(&mut trial_rng, 3 * 3, -2.0, 2.0);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, 3], data.clone())?;
        let y = tape.bilinear_upsample(x, 3)?;
        let out = tape.data(y);
        let (oh, ow) = (9, 9);
        let corners = [
            (out[0], data[0]),
            (out[ow - 1], data[2]),
            (out[(oh - 1) * ow], data[6]),
            (out[oh * ow - 1], data[8]),
        ];
        let worst = corners.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        suite.exact("upsample_corners", worst, 1e-12);
    }

    Ok(suite.outcomes)
}
