#![allow(dead_code)]

use agevlm::attention::{AttentionBlock, AttentionConfig};
use agevlm::autograd::{Graph, Var};
use agevlm::data::{generate_synthetic, rasterize_polygon, Dataset, GeneratorConfig, Point};
use agevlm::gradcheck::{grad_check, grad_check_params};
use agevlm::guidance::{aggregate_attention_graph, combined_loss, dice_guidance_graph, BinaryGrid, LossOptions, QuerySpan};
use agevlm::model::{Model, ModelConfig};
use agevlm::params::ParamStore;
use agevlm::tensor::Tensor;
use agevlm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ r` for a fixed random `r`, so that no gradient vanishes by symmetry.
fn weighted(g: &mut Graph<'_>, y: Var, r: &Tensor) -> Result<Var> {
    let w = g.input(r.clone(), false);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Largest relative error of every differentiable operation for one seed.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let (t, k, n) = (3, 4, 5);

    let a = randn(&mut r, &[t, k], 1.0);
    let b = randn(&mut r, &[k, n], 1.0);
    let w = randn(&mut r, &[t, n], 1.0);
    out.push(("matmul", grad_check(&[a.clone(), b.clone()], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted(g, y, &w)
    })?));

    let bt = randn(&mut r, &[n, k], 1.0);
    out.push(("matmul_nt", grad_check(&[a.clone(), bt], |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        weighted(g, y, &w)
    })?));

    let c = randn(&mut r, &[t, k], 1.0);
    let wk = randn(&mut r, &[t, k], 1.0);
    out.push(("add", grad_check(&[a.clone(), c.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted(g, y, &wk)
    })?));
    out.push(("mul", grad_check(&[a.clone(), c.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted(g, y, &wk)
    })?));
    out.push(("scale", grad_check(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        weighted(g, y, &wk)
    })?));

    let bias = randn(&mut r, &[k], 1.0);
    out.push(("add_bias", grad_check(&[a.clone(), bias], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        weighted(g, y, &wk)
    })?));

    out.push(("gelu", grad_check(&[randn(&mut r, &[t, k], 1.5)], |g, v| {
        let y = g.gelu(v[0]);
        weighted(g, y, &wk)
    })?));

    let gain = randn(&mut r, &[k], 1.0);
    let beta = randn(&mut r, &[k], 1.0);
    out.push(("layer_norm", grad_check(&[randn(&mut r, &[t, k], 2.0), gain, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        weighted(g, y, &wk)
    })?));

    let sq = randn(&mut r, &[t, t], 1.0);
    let wsq = randn(&mut r, &[t, t], 1.0);
    for causal in [false, true] {
        let name = if causal { "softmax_causal" } else { "softmax" };
        out.push((name, grad_check(&[sq.clone()], |g, v| {
            let y = g.softmax_rows(v[0], causal)?;
            weighted(g, y, &wsq)
        })?));
    }

    let w2 = randn(&mut r, &[t, 2], 1.0);
    out.push(("slice_cols", grad_check(&[a.clone()], |g, v| {
        let y = g.slice_cols(v[0], 1, 2)?;
        weighted(g, y, &w2)
    })?));
    let wcat = randn(&mut r, &[t, 2 * k], 1.0);
    out.push(("concat_cols", grad_check(&[a.clone(), c.clone()], |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        weighted(g, y, &wcat)
    })?));

    let table = randn(&mut r, &[6, k], 1.0);
    let wg = randn(&mut r, &[4, k], 1.0);
    out.push(("gather_rows", grad_check(&[table], |g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 5])?;
        weighted(g, y, &wg)
    })?));

    let logits = randn(&mut r, &[4, 6], 1.5);
    out.push(("cross_entropy", grad_check(&[logits], |g, v| {
        g.cross_entropy(v[0], &[1, 5, 0, 3], &[true, false, true, true])
    })?));

    let wm = randn(&mut r, &[1, k], 1.0);
    out.push(("mean_rows", grad_check(&[a.clone()], |g, v| {
        let y = g.mean_rows(v[0], 1, 3)?;
        weighted(g, y, &wm)
    })?));

    let wn = randn(&mut r, &[1, 6], 1.0);
    out.push(("normalize_sum", grad_check(&[positive(&mut r, &[1, 6])], |g, v| {
        let y = g.normalize_sum(v[0])?;
        weighted(g, y, &wn)
    })?));

    let mask: Vec<f64> = (0..6).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    out.push(("dice", grad_check(&[positive(&mut r, &[1, 6])], |g, v| {
        g.dice_loss(v[0], &mask, 1e-8)
    })?));

    out.push(("sum", grad_check(&[a.clone()], |g, v| Ok(g.sum(v[0])))?));

    // attention blocks with their projection weights as parameters
    let cfg = AttentionConfig::new(4, 2)?;
    let mut store = ParamStore::new();
    let block = AttentionBlock::register(&mut store, "attn", cfg, 0.5, &mut r);
    let h = randn(&mut r, &[3, 4], 1.0);
    let vis = randn(&mut r, &[5, 4], 1.0);
    let wo = randn(&mut r, &[3, 4], 1.0);
    let self_attn = grad_check_params(&store, |_| true, |g| {
        let x = g.input(h.clone(), false);
        let (y, _) = block.self_attention(g, x)?;
        weighted(g, y, &wo)
    })?;
    out.push(("self_attention", self_attn.max_rel_error));
    let cross = grad_check_params(&store, |_| true, |g| {
        let x = g.input(h.clone(), false);
        let v = g.input(vis.clone(), false);
        let (y, _) = block.cross_attention(g, x, v)?;
        weighted(g, y, &wo)
    })?;
    out.push(("cross_attention", cross.max_rel_error));
    let aggregated = grad_check_params(&store, |_| true, |g| {
        let x = g.input(h.clone(), false);
        let v = g.input(vis.clone(), false);
        let (_, heads) = block.cross_attention(g, x, v)?;
        let p = aggregate_attention_graph(g, &heads, QuerySpan::new(1, 3)?)?;
        let m = BinaryGrid::from_cells(1, 5, vec![0, 1, 1, 0, 0])?;
        dice_guidance_graph(g, p, &m)
    })?;
    out.push(("aggregate_dice", aggregated.max_rel_error));
    Ok(out)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        vocab_size: 24,
        cross_attn_indices: vec![0, 2],
        visual_grid: [4, 4],
        image_size: [16, 16],
        patch_size: 4,
        encoder_width: 6,
        d_ff: 12,
        max_seq_len: 8,
    }
}

/// Smallest shapes that still exercise every parameter group of the
/// combined loss.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 4,
        n_heads: 2,
        vocab_size: 24,
        cross_attn_indices: vec![1],
        visual_grid: [2, 2],
        image_size: [16, 16],
        patch_size: 8,
        encoder_width: 4,
        d_ff: 6,
        max_seq_len: 8,
    }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        image_size: [16, 16],
        grid: [4, 4],
        min_size: 4,
        max_size: 6,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_dataset(seed: u64, count: usize, guided_fraction: f64) -> Dataset {
    let cfg = GeneratorConfig {
        guided_fraction,
        ..tiny_generator()
    };
    generate_synthetic(seed, count, &cfg).unwrap()
}

/// Tiny model at its initialization, except that the zero-initialized
/// cross-attention output and cross-MLP projections get random values so
/// that every path carries gradient.
pub fn perturbed_model(cfg: ModelConfig, seed: u64) -> Model {
    let std = 1.0 / (cfg.d_model as f64).sqrt();
    let mut model = Model::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let noise = Normal::new(0.0, std).unwrap();
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) && p.value.rank() == 2 {
            p.value.data_mut().iter_mut().for_each(|v| *v = noise.sample(&mut r));
        }
    }
    model
}

/// Finite-difference comparison of the full LM + guidance loss against its
/// analytic gradient.
#[derive(Debug, Clone, Copy)]
pub struct CombinedCheck {
    /// Max elementwise relative error.
    pub max_rel: f64,
    /// Elements whose relative error reaches 1e-4.
    pub over: usize,
    pub elements: usize,
    /// Largest |analytic - numeric| among the elements in `over`, in units
    /// of the central-difference resolution `eps * |loss| / h`.
    pub worst_over_resolution: f64,
}

/// Checks every model parameter on a two-sample batch with one guided
/// sample.
pub fn combined_loss_gradient_check(seed: u64) -> Result<CombinedCheck> {
    let model = perturbed_model(gradcheck_config(), seed);
    let cfg = GeneratorConfig {
        grid: [2, 2],
        guided_fraction: 0.25,
        ..tiny_generator()
    };
    let ds = generate_synthetic(seed, 8, &cfg)?;
    let guided = ds.samples.iter().find(|s| s.is_guided()).unwrap();
    let plain = ds.samples.iter().find(|s| !s.is_guided()).unwrap();
    let batch = [guided, plain];
    let opts = LossOptions {
        use_lm_loss: true,
        guidance_active: true,
        answer_only: false,
    };
    let analytic = combined_loss(&model, &batch, opts, true)?;
    let h = agevlm::gradcheck::FD_STEP;
    let resolution = f64::EPSILON * analytic.report.total.abs() / h;
    let mut out = CombinedCheck {
        max_rel: 0.0,
        over: 0,
        elements: 0,
        worst_over_resolution: 0.0,
    };
    let mut work = model.clone();
    for id in 0..model.params.len() {
        let n = model.params.get(id).value.numel();
        let grad = analytic.grads[id].clone().unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in grad.iter().enumerate() {
            let orig = model.params.get(id).value.data()[i];
            work.params.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = combined_loss(&work, &batch, opts, false)?.report.total;
            work.params.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = combined_loss(&work, &batch, opts, false)?.report.total;
            work.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = agevlm::gradcheck::relative_error(a, numeric);
            out.elements += 1;
            out.max_rel = out.max_rel.max(e);
            if e >= 1e-4 {
                out.over += 1;
                let r = (a - numeric).abs() / resolution;
                out.worst_over_resolution = out.worst_over_resolution.max(r);
            }
        }
    }
    Ok(out)
}

/// Group-level outcome of one training step under a schedule row.
#[derive(Debug)]
pub struct RowCheck {
    pub label: String,
    /// Frozen groups with any changed bit.
    pub frozen_changed: Vec<agevlm::training::ParamGroup>,
    /// Trainable groups with no changed element.
    pub trainable_unchanged: Vec<agevlm::training::ParamGroup>,
    pub guidance_loss: f64,
}

impl RowCheck {
    pub fn ok(&self) -> bool {
        self.frozen_changed.is_empty() && self.trainable_unchanged.is_empty()
    }
}

/// Runs one step of `stage` on `data` and compares every parameter group.
pub fn one_step_row_check(
    model: &Model,
    stage: &agevlm::training::StageConfig,
    opt: &agevlm::optim::OptimizerConfig,
    data: &Dataset,
) -> Result<RowCheck> {
    use agevlm::training::{param_group, train_stage, TrainSettings};
    use std::collections::BTreeMap;
    let mut trained = model.clone();
    let settings = TrainSettings {
        seed: 0,
        max_steps: Some(1),
        out_dir: None,
    };
    let outcome = train_stage(&mut trained, stage, opt, data, settings)?;
    // group -> (any changed, trainable)
    let mut groups: BTreeMap<agevlm::training::ParamGroup, bool> = BTreeMap::new();
    for (before, after) in model.params.iter().zip(trained.params.iter()) {
        let g = param_group(&before.name)?;
        let changed = before
            .value
            .data()
            .iter()
            .zip(after.value.data())
            .any(|(a, b)| a.to_bits() != b.to_bits());
        *groups.entry(g).or_insert(false) |= changed;
    }
    let mut check = RowCheck {
        label: stage.label(),
        frozen_changed: Vec::new(),
        trainable_unchanged: Vec::new(),
        guidance_loss: outcome.log[0].report.guidance_loss,
    };
    for (g, changed) in groups {
        match (stage.is_trainable(g), changed) {
            (false, true) => check.frozen_changed.push(g),
            (true, false) => check.trainable_unchanged.push(g),
            _ => {}
        }
    }
    Ok(check)
}

// Brute-force ray casting in integer units of a quarter pixel, so every
// comparison is exact.

fn quarter(p: Point) -> (i64, i64) {
    ((p[0] * 4.0) as i64, (p[1] * 4.0) as i64)
}

fn on_edge(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    cross == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Even-odd point-in-polygon test with boundary points inside; `p` is in
/// quarter-pixel units.
pub fn ray_cast(poly: &[Point], p: (i64, i64)) -> bool {
    let v: Vec<(i64, i64)> = poly.iter().map(|&q| quarter(q)).collect();
    let n = v.len();
    if (0..n).any(|i| on_edge(v[i], v[(i + 1) % n], p)) {
        return true;
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) {
            // crossing x > p.x, multiplied through by (b.y - a.y)
            let lhs = (p.0 - a.0) * (b.1 - a.1);
            let rhs = (b.0 - a.0) * (p.1 - a.1);
            let right = if b.1 > a.1 { rhs > lhs } else { rhs < lhs };
            if right {
                inside = !inside;
            }
        }
    }
    inside
}

fn convex_hull(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    let cross = |o: Point, a: Point, b: Point| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<Point> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn lattice(r: &mut impl Rng, max: f64) -> f64 {
    (r.random_range(0..=(max * 4.0) as i64)) as f64 / 4.0
}

/// Star-shaped polygon with jittered radii; concave for most draws.
fn star(r: &mut impl Rng, size: f64) -> Vec<Point> {
    let n = r.random_range(5..12);
    let c = size / 2.0;
    (0..n)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / n as f64;
            let rad = r.random_range(0.2..1.0) * c;
            let snap = |v: f64| ((v * 4.0).round() / 4.0).clamp(0.0, size);
            [snap(c + rad * theta.cos()), snap(c + rad * theta.sin())]
        })
        .collect()
}

fn is_concave(poly: &[Point]) -> bool {
    let n = poly.len();
    let turns: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b, c) = (poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
            (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        })
        .collect();
    turns.iter().any(|&t| t > 0.0) && turns.iter().any(|&t| t < 0.0)
}

#[derive(Debug)]
pub struct RasterCheck {
    pub polygons: usize,
    pub concave: usize,
    pub mismatches: usize,
}

/// Compares the rasterizer with per-pixel ray casting on `count` random
/// polygons on a 12x12 grid, alternating convex hulls and star shapes.
pub fn raster_oracle_check(seed: u64, count: usize) -> RasterCheck {
    let size = 12usize;
    let mut r = rng(seed);
    let mut out = RasterCheck {
        polygons: 0,
        concave: 0,
        mismatches: 0,
    };
    while out.polygons < count {
        let poly = if out.polygons % 2 == 0 {
            convex_hull((0..8).map(|_| [lattice(&mut r, size as f64), lattice(&mut r, size as f64)]).collect())
        } else {
            star(&mut r, size as f64)
        };
        if poly.len() < 3 {
            continue;
        }
        out.concave += usize::from(is_concave(&poly));
        let grid = rasterize_polygon(&poly, [size, size]).unwrap();
        for i in 0..size {
            for j in 0..size {
                let center = (4 * j as i64 + 2, 4 * i as i64 + 2);
                if grid.get(i, j) != ray_cast(&poly, center) {
                    out.mismatches += 1;
                }
            }
        }
        out.polygons += 1;
    }
    out
}
