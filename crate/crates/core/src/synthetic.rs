//! Seeded generation of desk-scale counting tasks.
//!
//! Each category is a shape family (disc / ring / bar / cross / blob) with
//! a size and intensity band; instances get per-task jitter in scale,
//! orientation, and intensity. Tasks carry dot annotations at instance
//! centers and up to three exemplar boxes (tight bounding boxes dilated by
//! one pixel), each enclosing exactly one dot. Categories never cross
//! split boundaries.

use crate::counting::DensityMap;
use crate::error::{Error, Result};
use crate::parallel;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

/// Shape family of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeFamily {
    Disc,
    Ring,
    Bar,
    Cross,
    Blob,
}

impl ShapeFamily {
    const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Disc,
        ShapeFamily::Ring,
        ShapeFamily::Bar,
        ShapeFamily::Cross,
        ShapeFamily::Blob,
    ];

    /// Membership test in normalized, orientation-corrected coordinates
    /// (the shape spans roughly the unit disc).
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Disc => u * u + v * v <= 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.3025..=1.0).contains(&r2) // inner radius 0.55
            }
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
            ShapeFamily::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.35) || (v.abs() <= 1.0 && u.abs() <= 0.35)
            }
            ShapeFamily::Blob => {
                // triangle (0,-1), (0.95,0.75), (-0.95,0.75)
                let (ax, ay) = (0.0, -1.0);
                let (bx, by) = (0.95, 0.75);
                let (cx, cy) = (-0.95, 0.75);
                let sign = |x0: f64, y0: f64, x1: f64, y1: f64| -> f64 {
                    (u - x1) * (y0 - y1) - (x0 - x1) * (v - y1)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx, cy);
                let d3 = sign(cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Rendering recipe for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category_id: u32,
    pub family: ShapeFamily,
    /// Half-extent range in pixels before per-instance jitter.
    pub base_size: (f64, f64),
    pub orientation: (f64, f64),
    pub intensity: (f64, f64),
    pub texture_seed: u64,
}

/// Deterministic category table: family cycles with the id, the size and
/// intensity band switches with the variant group.
pub fn category_spec(category_id: u32) -> CategorySpec {
    let family = ShapeFamily::ALL[(category_id as usize) % ShapeFamily::ALL.len()];
    let variant = (category_id as usize / ShapeFamily::ALL.len()) % 2;
    let (base_size, intensity) = if variant == 0 {
        ((3.0, 4.2), (0.55, 0.8))
    } else {
        ((4.2, 5.6), (0.75, 1.0))
    };
    CategorySpec {
        category_id,
        family,
        base_size,
        orientation: (0.0, std::f64::consts::PI),
        intensity,
        texture_seed: (category_id as u64).wrapping_mul(7919).wrapping_add(17),
    }
}

/// One counting problem: a single-channel image in [0,1], dot annotations
/// at instance centers, and exemplar boxes. `gt_count()` is the number of
/// dots by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingTask {
    pub category_id: u32,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major `[c,h,w]` pixel data in [0,1].
    pub image: Vec<f64>,
    /// Instance centers as (x, y) pixel coordinates.
    pub dots: Vec<(f64, f64)>,
    /// Half-open pixel boxes `[x0, y0, x1, y1]`, each enclosing exactly
    /// one dot.
    pub exemplar_boxes: Vec<[f64; 4]>,
}

impl CountingTask {
    pub fn gt_count(&self) -> usize {
        self.dots.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Instance {
    cx: f64,
    cy: f64,
    size: f64,
    orientation: f64,
    intensity: f64,
}

const BG_NOISE: f64 = 0.12;
const PLACE_RETRIES: usize = 300;
const LAYOUT_RETRIES: usize = 10;

fn splitmix(mut s: u64) -> u64 {
    s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    s ^ (s >> 31)
}

/// Stable per-task seed stream.
pub fn derive_seed(base: u64, category: u32, index: usize) -> u64 {
    splitmix(
        base ^ (category as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

fn place_instances(
    rng: &mut StdRng,
    spec: &CategorySpec,
    count: usize,
    h: usize,
    w: usize,
) -> Option<Vec<Instance>> {
    let base_mid = 0.5 * (spec.base_size.0 + spec.base_size.1);
    let mut placed: Vec<Instance> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACE_RETRIES {
            let size = rng.gen_range(spec.base_size.0..spec.base_size.1)
                * rng.gen_range(0.6..1.4);
            let margin = size + 1.5;
            if 2.0 * margin >= w as f64 || 2.0 * margin >= h as f64 {
                continue;
            }
            let cx = rng.gen_range(margin..w as f64 - margin);
            let cy = rng.gen_range(margin..h as f64 - margin);
            // no center closer than one base size
            if placed
                .iter()
                .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() >= base_mid)
            {
                placed.push(Instance {
                    cx,
                    cy,
                    size,
                    orientation: rng.gen_range(spec.orientation.0..spec.orientation.1),
                    intensity: rng.gen_range(spec.intensity.0..spec.intensity.1),
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// Paint an instance, returning its tight pixel bounding box
/// (x0, y0, x1, y1), half-open.
fn render_instance(
    image: &mut [f64],
    h: usize,
    w: usize,
    inst: &Instance,
    family: ShapeFamily,
) -> (usize, usize, usize, usize) {
    let reach = inst.size + 1.0;
    let y_lo = (inst.cy - reach).floor().max(0.0) as usize;
    let y_hi = ((inst.cy + reach).ceil() as usize).min(h);
    let x_lo = (inst.cx - reach).floor().max(0.0) as usize;
    let x_hi = ((inst.cx + reach).ceil() as usize).min(w);
    let (sin, cos) = inst.orientation.sin_cos();
    let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            let dx = px as f64 + 0.5 - inst.cx;
            let dy = py as f64 + 0.5 - inst.cy;
            let u = (dx * cos + dy * sin) / inst.size;
            let v = (-dx * sin + dy * cos) / inst.size;
            if family.contains(u, v) {
                let idx = py * w + px;
                if inst.intensity > image[idx] {
                    image[idx] = inst.intensity;
                }
                bbox.0 = bbox.0.min(px);
                bbox.1 = bbox.1.min(py);
                bbox.2 = bbox.2.max(px + 1);
                bbox.3 = bbox.3.max(py + 1);
            }
        }
    }
    if bbox.0 == usize::MAX {
        // degenerate mask; fall back to the center pixel
        let px = (inst.cx as usize).min(w - 1);
        let py = (inst.cy as usize).min(h - 1);
        bbox = (px, py, px + 1, py + 1);
    }
    bbox
}

fn try_layout(
    spec: &CategorySpec,
    distractor: Option<&CategorySpec>,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Option<CountingTask> {
    let mut rng = StdRng::seed_from_u64(seed);
    let instances = place_instances(&mut rng, spec, count, h, w)?;

    let mut image = vec![0.0; h * w];
    for v in image.iter_mut() {
        *v = rng.gen_range(0.0..BG_NOISE);
    }

    let mut boxes = Vec::with_capacity(count);
    for inst in &instances {
        let (x0, y0, x1, y1) = render_instance(&mut image, h, w, inst, spec.family);
        // dilate by one pixel, clamped to the image
        boxes.push([
            x0.saturating_sub(1) as f64,
            y0.saturating_sub(1) as f64,
            (x1 + 1).min(w) as f64,
            (y1 + 1).min(h) as f64,
        ]);
    }
    let dots: Vec<(f64, f64)> = instances.iter().map(|i| (i.cx, i.cy)).collect();

    // optional distractor instances from one other category; their centers
    // are not annotated
    if let Some(dspec) = distractor {
        let n_distract = rng.gen_range(1..=3usize);
        'outer: for _ in 0..n_distract {
            for _ in 0..PLACE_RETRIES {
                let size = rng.gen_range(dspec.base_size.0..dspec.base_size.1);
                let margin = size + 1.5;
                if 2.0 * margin >= w as f64 || 2.0 * margin >= h as f64 {
                    continue 'outer;
                }
                let cx = rng.gen_range(margin..w as f64 - margin);
                let cy = rng.gen_range(margin..h as f64 - margin);
                let clear = instances
                    .iter()
                    .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() >= p.size + size);
                if clear {
                    let inst = Instance {
                        cx,
                        cy,
                        size,
                        orientation: rng.gen_range(dspec.orientation.0..dspec.orientation.1),
                        intensity: rng.gen_range(dspec.intensity.0..dspec.intensity.1),
                    };
                    render_instance(&mut image, h, w, &inst, dspec.family);
                    continue 'outer;
                }
            }
        }
    }

    // exemplars: the first three boxes that enclose exactly one dot; the
    // layout is rejected unless min(3, count) such boxes exist so the
    // exemplar-count sweep always has three boxes to work with
    let exemplar_boxes: Vec<[f64; 4]> = boxes
        .iter()
        .filter(|b| {
            dots.iter()
                .filter(|(x, y)| *x >= b[0] && *x < b[2] && *y >= b[1] && *y < b[3])
                .count()
                == 1
        })
        .take(3)
        .cloned()
        .collect();
    if exemplar_boxes.len() < count.min(3) {
        return None;
    }

    Some(CountingTask {
        category_id: spec.category_id,
        c: 1,
        h,
        w,
        image,
        dots,
        exemplar_boxes,
    })
}

/// Generate one task. Deterministic for a fixed seed; fails with a
/// placement error when the requested count cannot be laid out within the
/// retry budget.
pub fn generate_task(
    spec: &CategorySpec,
    count_range: (usize, usize),
    image_size: (usize, usize),
    seed: u64,
    distractor: Option<&CategorySpec>,
) -> Result<CountingTask> {
    let (min, max) = count_range;
    if min < 1 || max < min {
        return Err(Error::Config(format!("invalid count range [{min}, {max}]")));
    }
    let (h, w) = image_size;
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("image size {h}x{w} too small for shapes")));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let count = rng.gen_range(min..=max);
    for attempt in 0..LAYOUT_RETRIES {
        let layout_seed = splitmix(seed ^ (attempt as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        if let Some(task) = try_layout(spec, distractor, count, h, w, layout_seed) {
            return Ok(task);
        }
    }
    Err(Error::Placement { requested: count, placed: 0 })
}

/// Ground-truth density: one truncated (4 sigma) Gaussian per dot, each
/// renormalized to unit in-image mass, so the integral equals the count.
pub fn render_density_gt(task: &CountingTask, sigma: f64) -> Result<DensityMap> {
    if sigma <= 0.0 {
        return Err(Error::Contract("render_density_gt requires sigma > 0".into()));
    }
    let (h, w) = (task.h, task.w);
    let mut map = vec![0.0; h * w];
    let reach = (4.0 * sigma).ceil() as isize;
    for &(x, y) in &task.dots {
        let cx = x.floor() as isize;
        let cy = y.floor() as isize;
        let mut weights = Vec::new();
        let mut total = 0.0;
        for py in (cy - reach).max(0)..((cy + reach + 1).min(h as isize)) {
            for px in (cx - reach).max(0)..((cx + reach + 1).min(w as isize)) {
                let dx = px as f64 + 0.5 - x;
                let dy = py as f64 + 0.5 - y;
                let r2 = dx * dx + dy * dy;
                if r2 <= (4.0 * sigma) * (4.0 * sigma) {
                    let val = (-r2 / (2.0 * sigma * sigma)).exp();
                    weights.push((py as usize * w + px as usize, val));
                    total += val;
                }
            }
        }
        for (idx, val) in weights {
            map[idx] += val / total;
        }
    }
    Ok(DensityMap::new(h, w, map))
}

/// Category split and volume configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_categories: Vec<u32>,
    pub val_categories: Vec<u32>,
    pub test_categories: Vec<u32>,
    pub tasks_per_category: usize,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub count_range: (usize, usize),
    pub distractors: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_categories: (0..8).collect(),
            val_categories: vec![8],
            test_categories: vec![9],
            tasks_per_category: 10,
            seed: 7,
            image_size: (64, 64),
            count_range: (3, 30),
            distractors: false,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .train_categories
            .iter()
            .chain(&self.val_categories)
            .chain(&self.test_categories)
        {
            if !seen.insert(*id) {
                return Err(Error::Config(format!(
                    "category {id} appears in more than one split"
                )));
            }
        }
        if self.train_categories.is_empty() {
            return Err(Error::Config("train split has no categories".into()));
        }
        if self.tasks_per_category == 0 {
            return Err(Error::Config("tasks_per_category must be >= 1".into()));
        }
        Ok(())
    }
}

fn generate_split(cfg: &SplitConfig, categories: &[u32], sequential: bool) -> Result<Vec<CountingTask>> {
    let jobs: Vec<(u32, usize)> = categories
        .iter()
        .flat_map(|&cat| (0..cfg.tasks_per_category).map(move |i| (cat, i)))
        .collect();
    let gen = |&(cat, idx): &(u32, usize)| -> Result<CountingTask> {
        let spec = category_spec(cat);
        let distractor_spec = cfg.distractors.then(|| category_spec(cat.wrapping_add(1) % 10));
        generate_task(
            &spec,
            cfg.count_range,
            cfg.image_size,
            derive_seed(cfg.seed, cat, idx),
            distractor_spec.as_ref(),
        )
    };
    let results = if sequential {
        parallel::map_ordered_seq(&jobs, gen)
    } else {
        parallel::map_ordered(&jobs, gen)
    };
    results.into_iter().collect()
}

/// Generate the train/val/test task lists. Task generation is
/// embarrassingly parallel; each task owns its derived rng stream, so the
/// output is identical regardless of thread count.
pub fn make_splits(cfg: &SplitConfig) -> Result<(Vec<CountingTask>, Vec<CountingTask>, Vec<CountingTask>)> {
    cfg.validate()?;
    Ok((
        generate_split(cfg, &cfg.train_categories, false)?,
        generate_split(cfg, &cfg.val_categories, false)?,
        generate_split(cfg, &cfg.test_categories, false)?,
    ))
}

/// Sequential reference version of [`make_splits`] (benchmark baseline).
pub fn make_splits_seq(
    cfg: &SplitConfig,
) -> Result<(Vec<CountingTask>, Vec<CountingTask>, Vec<CountingTask>)> {
    cfg.validate()?;
    Ok((
        generate_split(cfg, &cfg.train_categories, true)?,
        generate_split(cfg, &cfg.val_categories, true)?,
        generate_split(cfg, &cfg.test_categories, true)?,
    ))
}
