use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    rasterize_polygon, Dataset, DatasetManifest, GroundingSample, PlacedShape, Point, QuestionKind,
    ShapeKind, Vocabulary, BOS, EOS, VOCAB_FILE,
};
use crate::error::{Error, Result};
use crate::guidance::{GroundingMask, QuerySpan};
use crate::model::{ImageGrid, IMAGE_CHANNELS};
use crate::tensor::Tensor;

const CIRCLE_SIDES: usize = 16;
const QUADRANT_WORDS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];
const COUNT_WORDS: [&str; 4] = ["zero", "one", "two", "three"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub split: String,
    pub image_size: [usize; 2],
    pub grid: [usize; 2],
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Side length range of a shape's bounding box in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub guided_fraction: f64,
    /// Upper bound of the uniform background noise.
    pub noise: f64,
    /// Visual-grid rows left blank at the top and at the bottom.
    pub pad_rows: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            split: "train".into(),
            image_size: [32, 32],
            grid: [8, 8],
            min_shapes: 1,
            max_shapes: 3,
            min_size: 6,
            max_size: 12,
            guided_fraction: 0.10,
            noise: 0.15,
            pad_rows: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return Err(Error::Config(format!(
                "guided_fraction {} not in [0, 1]",
                self.guided_fraction
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return Err(Error::Config("shape count range must lie in 1..=3".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config("invalid shape size range".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} not in [0, 0.5)", self.noise)));
        }
        let [h, w] = self.image_size;
        let [gh, gw] = self.grid;
        if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
            return Err(Error::Config(format!(
                "grid {gh}x{gw} does not divide image {h}x{w}"
            )));
        }
        let (qh, qw) = self.quadrant_extent();
        if qh < self.min_size + 2 || qw < self.min_size + 2 {
            return Err(Error::Data(format!(
                "grid too small: a {qh}x{qw} quadrant cannot hold a {}-pixel shape",
                self.min_size
            )));
        }
        Ok(())
    }

    fn pad_pixels(&self) -> usize {
        self.pad_rows * self.image_size[0] / self.grid[0]
    }

    /// Usable height and width of one quadrant.
    fn quadrant_extent(&self) -> (usize, usize) {
        let [h, w] = self.image_size;
        let usable = h.saturating_sub(2 * self.pad_pixels());
        (usable / 2, w / 2)
    }
}

struct Layout {
    shapes: Vec<(PlacedShape, usize)>,
}

impl Layout {
    fn count(&self, kind: ShapeKind) -> usize {
        self.shapes.iter().filter(|(s, _)| s.kind == kind).count()
    }
}

fn shape_outline(kind: ShapeKind, x0: f64, y0: f64, s: f64) -> Vec<Point> {
    match kind {
        ShapeKind::Square => vec![[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]],
        ShapeKind::Triangle => vec![[x0 + s / 2.0, y0], [x0 + s, y0 + s], [x0, y0 + s]],
        ShapeKind::Circle => {
            let (cx, cy, r) = (x0 + s / 2.0, y0 + s / 2.0, s / 2.0);
            (0..CIRCLE_SIDES)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / CIRCLE_SIDES as f64;
                    [cx + r * a.cos(), cy + r * a.sin()]
                })
                .collect()
        }
    }
}

fn place_shapes(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Layout {
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let (qh, qw) = cfg.quadrant_extent();
    let top = cfg.pad_pixels();
    let shapes = quadrants[..n]
        .iter()
        .map(|&q| {
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let max = cfg.max_size.min(qh - 2).min(qw - 2);
            let s = rng.random_range(cfg.min_size..=max);
            let qx = (q % 2) * qw;
            let qy = top + (q / 2) * qh;
            let x0 = qx + rng.random_range(1..=qw - s - 1);
            let y0 = qy + rng.random_range(1..=qh - s - 1);
            let vertices = shape_outline(kind, x0 as f64, y0 as f64, s as f64);
            (PlacedShape { kind, vertices }, q)
        })
        .collect();
    Layout { shapes }
}

fn render(cfg: &GeneratorConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Result<ImageGrid> {
    let [h, w] = cfg.image_size;
    let pad = cfg.pad_pixels();
    let mut pixels = vec![0.0; IMAGE_CHANNELS * h * w];
    for c in 0..IMAGE_CHANNELS {
        for y in pad..h - pad {
            for x in 0..w {
                pixels[(c * h + y) * w + x] = rng.random::<f64>() * cfg.noise;
            }
        }
    }
    for (shape, _) in &layout.shapes {
        let fp = rasterize_polygon(&shape.vertices, [h, w])?;
        let c = shape.kind.channel();
        for y in 0..h {
            for x in 0..w {
                if fp.get(y, x) {
                    pixels[(c * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    ImageGrid::new(Tensor::new(vec![IMAGE_CHANNELS, h, w], pixels)?)
}

struct Question {
    kind: QuestionKind,
    queried: ShapeKind,
    prompt: String,
    answer: &'static str,
}

fn ask(layout: &Layout, rng: &mut ChaCha8Rng) -> Question {
    let kinds = [QuestionKind::Where, QuestionKind::HowMany, QuestionKind::IsThere];
    let mut kind = kinds[rng.random_range(0..3)];
    let unique: Vec<ShapeKind> = ShapeKind::ALL
        .into_iter()
        .filter(|&k| layout.count(k) == 1)
        .collect();
    if kind == QuestionKind::Where && unique.is_empty() {
        kind = QuestionKind::HowMany;
    }
    match kind {
        QuestionKind::Where => {
            let queried = unique[rng.random_range(0..unique.len())];
            let quadrant = layout
                .shapes
                .iter()
                .find(|(s, _)| s.kind == queried)
                .map(|(_, q)| *q)
                .expect("unique shape is present");
            Question {
                kind,
                queried,
                prompt: format!("{BOS} where is the {queried}"),
                answer: QUADRANT_WORDS[quadrant],
            }
        }
        QuestionKind::HowMany => {
            let queried = ShapeKind::ALL[rng.random_range(0..3)];
            Question {
                kind,
                queried,
                prompt: format!("{BOS} how many {queried}"),
                answer: COUNT_WORDS[layout.count(queried)],
            }
        }
        QuestionKind::IsThere => {
            let (present, absent): (Vec<ShapeKind>, Vec<ShapeKind>) =
                ShapeKind::ALL.into_iter().partition(|&k| layout.count(k) > 0);
            let want_yes = rng.random_bool(0.5) || absent.is_empty();
            let pool = if want_yes { &present } else { &absent };
            let queried = pool[rng.random_range(0..pool.len())];
            Question {
                kind,
                queried,
                prompt: format!("{BOS} is there a {queried}"),
                answer: if want_yes { "yes" } else { "no" },
            }
        }
    }
}

/// Seeded synthetic dataset. Each image holds one to three shapes, each
/// inside its own quadrant; every sample asks one question about one shape
/// kind. Exactly `round(guided_fraction · count)` samples whose queried shape
/// is present carry a grounding mask.
pub fn generate_synthetic(seed: u64, count: usize, cfg: &GeneratorConfig) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for id in 0..count {
        let layout = place_shapes(cfg, &mut rng);
        let image = render(cfg, &layout, &mut rng)?;
        let q = ask(&layout, &mut rng);
        let prompt = vocab.encode(&q.prompt)?;
        let target = vec![vocab.id(q.answer)?, vocab.id(EOS)?];
        let query_span = QuerySpan::new(prompt.len() - 1, prompt.len())?;
        samples.push(GroundingSample {
            id,
            image,
            prompt,
            target,
            query_span,
            mask: None,
            kind: q.kind,
            queried: q.queried,
            shapes: layout.shapes.into_iter().map(|(s, _)| s).collect(),
        });
    }

    let guided_count = (cfg.guided_fraction * count as f64).round() as usize;
    let mut eligible: Vec<usize> = samples
        .iter()
        .filter(|s| s.shapes.iter().any(|p| p.kind == s.queried))
        .map(|s| s.id)
        .collect();
    if eligible.len() < guided_count {
        return Err(Error::Data(format!(
            "{guided_count} guided samples requested but only {} have the queried shape present",
            eligible.len()
        )));
    }
    eligible.shuffle(&mut rng);
    for &id in &eligible[..guided_count] {
        let sample = &mut samples[id];
        let full = sample.footprint()?;
        sample.mask = Some(GroundingMask::new(full, cfg.grid)?);
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            split: cfg.split.clone(),
            count,
            guided_fraction: cfg.guided_fraction,
            guided_count,
            vocabulary: VOCAB_FILE.into(),
            grid: cfg.grid,
            image_size: cfg.image_size,
            pad_rows: cfg.pad_rows,
            seed,
        },
        vocab,
        samples,
    })
}
