//! Spatial grounding guidance: mask downsampling, head/query aggregation of
//! cross-attention maps, the soft-dice loss, and the combined objective.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::autograd::{Graph, Var};
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Regularizer in both numerator and denominator of the dice ratio.
pub const DICE_EPS: f64 = 1e-8;

/// Row-major grid of 0/1 cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    rows: usize,
    cols: usize,
    cells: Vec<u8>,
}

impl BinaryGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryGrid {
            rows,
            cols,
            cells: vec![0; rows * cols],
        }
    }

    pub fn from_cells(rows: usize, cols: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} grid needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        if let Some(&v) = cells.iter().find(|&&c| c > 1) {
            return Err(Error::NonBinaryMask(v as f64));
        }
        Ok(BinaryGrid { rows, cols, cells })
    }

    /// Builds a grid from real values, rejecting anything other than 0 or 1.
    pub fn from_values(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        let cells = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::NonBinaryMask(other)),
            })
            .collect::<Result<Vec<u8>>>()?;
        BinaryGrid::from_cells(rows, cols, cells)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c] == 1
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.cells[r * self.cols + c] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }

    /// Run lengths alternating zero-runs and one-runs, starting with zeros
    /// (the first run may be empty).
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(rows: usize, cols: usize, runs: &[usize]) -> Result<Self> {
        let mut cells = Vec::with_capacity(rows * cols);
        for (i, &len) in runs.iter().enumerate() {
            cells.extend(std::iter::repeat_n((i % 2) as u8, len));
        }
        if cells.len() != rows * cols {
            return Err(Error::Data(format!(
                "run lengths cover {} cells, grid has {}",
                cells.len(),
                rows * cols
            )));
        }
        BinaryGrid::from_cells(rows, cols, cells)
    }
}

/// Ground-truth region at image resolution and at visual-grid resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundingMask {
    pub full: BinaryGrid,
    pub down: BinaryGrid,
}

impl GroundingMask {
    pub fn new(full: BinaryGrid, grid: [usize; 2]) -> Result<Self> {
        let down = downsample_mask(&full, grid)?;
        Ok(GroundingMask { full, down })
    }
}

/// Half-open prompt token range naming the grounded concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpan {
    pub start: usize,
    pub end: usize,
}

impl QuerySpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::EmptySpan);
        }
        Ok(QuerySpan { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Max-pools `full` onto a `target` grid: a cell is set iff any pixel in
/// its block is set.
pub fn downsample_mask(full: &BinaryGrid, target: [usize; 2]) -> Result<BinaryGrid> {
    let [h, w] = target;
    if h == 0 || w == 0 || full.rows % h != 0 || full.cols % w != 0 {
        return Err(Error::shape(format!(
            "cannot pool {}x{} onto {h}x{w}",
            full.rows, full.cols
        )));
    }
    let (bh, bw) = (full.rows / h, full.cols / w);
    let mut out = BinaryGrid::zeros(h, w);
    for r in 0..full.rows {
        for c in 0..full.cols {
            if full.get(r, c) {
                out.set(r / bh, c / bw, true);
            }
        }
    }
    Ok(out)
}

/// Averages the record over heads and the span's query rows, reshapes to
/// `grid`, and renormalizes to sum to one.
pub fn aggregate_attention(
    record: &AttentionRecord,
    span: QuerySpan,
    grid: [usize; 2],
) -> Result<Tensor> {
    if span.is_empty() {
        return Err(Error::EmptySpan);
    }
    if span.end > record.n_queries() {
        return Err(Error::shape(format!(
            "query span {}..{} beyond {} queries",
            span.start,
            span.end,
            record.n_queries()
        )));
    }
    let n = record.n_keys();
    if grid[0] * grid[1] != n {
        return Err(Error::shape(format!(
            "grid {grid:?} does not cover {n} visual tokens"
        )));
    }
    let mut acc = vec![0.0; n];
    for h in 0..record.n_heads() {
        for q in span.start..span.end {
            for (a, w) in acc.iter_mut().zip(record.row(h, q)) {
                *a += w;
            }
        }
    }
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) {
        return Err(Error::shape("attention map has no mass"));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Tensor::new(vec![grid[0], grid[1]], acc)
}

/// Differentiable counterpart of [`aggregate_attention`] over per-head
/// `[T×N]` weight variables. Returns a `[1×N]` distribution.
pub fn aggregate_attention_graph(g: &mut Graph<'_>, heads: &[Var], span: QuerySpan) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::shape("no attention heads"));
    }
    let mut acc: Option<Var> = None;
    for &h in heads {
        let m = g.mean_rows(h, span.start, span.end)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    let mean = g.scale(acc.expect("non-empty"), 1.0 / heads.len() as f64);
    g.normalize_sum(mean)
}

/// `-ln[(2⟨M′, P⟩ + ε) / (ΣM′ + ΣP + ε)]` with natural log and ε = 1e-8.
pub fn dice_guidance_loss(p: &Tensor, mask: &BinaryGrid) -> Result<f64> {
    check_dice_inputs(p, mask)?;
    let overlap: f64 = p
        .data()
        .iter()
        .zip(mask.cells())
        .map(|(p, &m)| p * m as f64)
        .sum();
    let denom = mask.count() as f64 + p.sum() + DICE_EPS;
    Ok(-((2.0 * overlap + DICE_EPS) / denom).ln())
}

fn check_dice_inputs(p: &Tensor, mask: &BinaryGrid) -> Result<()> {
    if p.numel() != mask.cells().len() {
        return Err(Error::shape(format!(
            "attention map {:?} vs mask {}x{}",
            p.shape(),
            mask.rows(),
            mask.cols()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

pub fn dice_guidance_graph(g: &mut Graph<'_>, p: Var, mask: &BinaryGrid) -> Result<Var> {
    check_dice_inputs(g.value(p), mask)?;
    g.dice_loss(p, &mask.as_f64(), DICE_EPS)
}

/// Sum of `p` over the cells set in `mask`.
pub fn mass_inside(p: &Tensor, mask: &BinaryGrid) -> f64 {
    p.data()
        .iter()
        .zip(mask.cells())
        .filter(|(_, &m)| m == 1)
        .map(|(p, _)| p)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceStatus {
    Inactive,
    NoGuidedSamples,
    Applied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lm_loss: f64,
    pub guidance_loss: f64,
    pub total: f64,
    /// Guided-sample mean of the dice loss, one entry per cross-attention
    /// layer; empty unless guidance was applied.
    pub per_layer_guidance: Vec<f64>,
    pub guided_samples: usize,
    pub batch_size: usize,
    pub status: GuidanceStatus,
}

impl LossReport {
    pub fn guided_fraction(&self) -> f64 {
        self.guided_samples as f64 / self.batch_size as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    pub use_lm_loss: bool,
    pub guidance_active: bool,
    /// Restrict the LM loss to answer tokens.
    pub answer_only: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            use_lm_loss: true,
            guidance_active: false,
            answer_only: false,
        }
    }
}

/// Loss values plus the summed gradient of every trainable parameter.
pub struct BatchLoss {
    pub report: LossReport,
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Next-token inputs, labels and label mask for one sample.
pub fn lm_targets(sample: &GroundingSample, answer_only: bool) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let full: Vec<usize> = sample.prompt.iter().chain(&sample.target).copied().collect();
    let inputs = full[..full.len() - 1].to_vec();
    let labels = full[1..].to_vec();
    let include = (0..labels.len())
        .map(|j| !answer_only || j + 1 >= sample.prompt.len())
        .collect();
    (inputs, labels, include)
}

/// LM loss over every sample plus dice guidance averaged over the guided
/// samples and all cross-attention layers; gradients are summed in sample
/// order.
pub fn combined_loss(
    model: &Model,
    batch: &[&GroundingSample],
    opts: LossOptions,
    with_grads: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let prepared: Vec<_> = batch.iter().map(|s| lm_targets(s, opts.answer_only)).collect();
    let total_tokens: usize = prepared
        .iter()
        .map(|(_, _, inc)| inc.iter().filter(|&&m| m).count())
        .sum();
    if opts.use_lm_loss && total_tokens == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let guided: Vec<bool> = batch
        .iter()
        .map(|s| opts.guidance_active && s.mask.as_ref().is_some_and(|m| !m.down.is_empty()))
        .collect();
    let n_guided = guided.iter().filter(|&&g| g).count();
    let n_layers = model.config().cross_attn_indices.len();

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
    let mut lm_loss = 0.0;
    let mut per_layer = vec![0.0; n_layers];

    for (i, sample) in batch.iter().enumerate() {
        let (inputs, labels, include) = &prepared[i];
        let mut g = model.graph();
        let visual = model.visual_graph(&mut g, &sample.image)?;
        let out = model.decoder_graph(&mut g, inputs, Some(visual))?;

        let mut terms = Vec::new();
        let n_inc = include.iter().filter(|&&m| m).count();
        if opts.use_lm_loss && n_inc > 0 {
            let ce = g.cross_entropy(out.logits, labels, include)?;
            let w = n_inc as f64 / total_tokens as f64;
            lm_loss += w * g.value(ce).data()[0];
            terms.push(g.scale(ce, w));
        }
        if guided[i] {
            let mask = &sample.mask.as_ref().expect("guided sample has a mask").down;
            let weight = 1.0 / (n_guided * n_layers) as f64;
            for (l, (_, heads)) in out.cross_weights.iter().enumerate() {
                let p = aggregate_attention_graph(&mut g, heads, sample.query_span)?;
                let dice = dice_guidance_graph(&mut g, p, mask)?;
                per_layer[l] += g.value(dice).data()[0] / n_guided as f64;
                terms.push(g.scale(dice, weight));
            }
        }
        if !with_grads || terms.is_empty() {
            continue;
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let sample_grads = g.backward(total)?;
        for (pid, grad) in sample_grads.into_param_grads(&g) {
            match &mut grads[pid] {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(grad),
            }
        }
    }

    let status = if !opts.guidance_active {
        GuidanceStatus::Inactive
    } else if n_guided == 0 {
        GuidanceStatus::NoGuidedSamples
    } else {
        GuidanceStatus::Applied
    };
    let guidance_loss = if status == GuidanceStatus::Applied {
        per_layer.iter().sum::<f64>() / n_layers as f64
    } else {
        per_layer.clear();
        0.0
    };
    let lm_loss = if opts.use_lm_loss { lm_loss } else { 0.0 };
    Ok(BatchLoss {
        report: LossReport {
            lm_loss,
            guidance_loss,
            total: lm_loss + guidance_loss,
            per_layer_guidance: per_layer,
            guided_samples: n_guided,
            batch_size: batch.len(),
            status,
        },
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, on: &[(usize, usize)]) -> BinaryGrid {
        let mut g = BinaryGrid::zeros(rows, cols);
        for &(r, c) in on {
            g.set(r, c, true);
        }
        g
    }

    #[test]
    fn downsample_cases() {
        let ones = BinaryGrid::from_cells(32, 32, vec![1; 1024]).unwrap();
        let down = downsample_mask(&ones, [8, 8]).unwrap();
        assert_eq!(down.count(), 64);

        let single = grid(4, 4, &[(0, 0)]);
        let down = downsample_mask(&single, [2, 2]).unwrap();
        assert_eq!(down.cells(), &[1, 0, 0, 0]);

        let zeros = BinaryGrid::zeros(32, 32);
        assert!(downsample_mask(&zeros, [8, 8]).unwrap().is_empty());

        assert!(matches!(
            BinaryGrid::from_values(1, 2, &[0.0, 0.5]),
            Err(Error::NonBinaryMask(v)) if v == 0.5
        ));
    }

    #[test]
    fn rle_round_trip() {
        let g = grid(3, 3, &[(0, 0), (1, 1), (1, 2)]);
        let runs = g.to_rle();
        assert_eq!(runs, vec![0, 1, 3, 2, 3]);
        assert_eq!(BinaryGrid::from_rle(3, 3, &runs).unwrap(), g);
        assert!(BinaryGrid::from_rle(3, 3, &[4]).is_err());
    }

    #[test]
    fn aggregate_hand_average() {
        let weights = Tensor::new(vec![1, 2, 4], vec![0.4, 0.3, 0.2, 0.1, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let rec = AttentionRecord {
            layer_index: 0,
            weights,
            aggregated: None,
        };
        let p = aggregate_attention(&rec, QuerySpan::new(0, 2).unwrap(), [2, 2]).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(matches!(QuerySpan::new(1, 1), Err(Error::EmptySpan)));
    }

    #[test]
    fn aggregate_full_scale_shape() {
        let weights = Tensor::full(&[32, 10, 576], 1.0 / 576.0);
        let rec = AttentionRecord {
            layer_index: 2,
            weights,
            aggregated: None,
        };
        let p = aggregate_attention(&rec, QuerySpan::new(0, 10).unwrap(), [24, 24]).unwrap();
        assert_eq!(p.shape(), &[24, 24]);
        assert!((p.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_reference_values() {
        let mask = grid(2, 2, &[(0, 0)]);
        let concentrated = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(dice_guidance_loss(&concentrated, &mask).unwrap().abs() < 1e-8);

        let uniform = Tensor::full(&[2, 2], 0.25);
        let loss = dice_guidance_loss(&uniform, &mask).unwrap();
        assert!((loss - 1.386_294_346_119_890_7).abs() < 1e-12, "{loss}");
        assert!((loss - 4f64.ln()).abs() < 2e-8);

        let mask2 = grid(2, 2, &[(0, 0), (0, 1)]);
        let off = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        let loss = dice_guidance_loss(&off, &mask2).unwrap();
        assert!((loss - 19.519_293_035_953_808).abs() < 1e-9, "{loss}");

        assert!(matches!(
            dice_guidance_loss(&uniform, &BinaryGrid::zeros(2, 2)),
            Err(Error::EmptyMask)
        ));
    }
}
