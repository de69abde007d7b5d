//! Diagnostics: matched-versus-mismatched similarity of pooled visual and
//! text representations, attention heatmap export, and padding mass.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::guidance::{aggregate_attention, mass_inside, BinaryGrid, QuerySpan};
use crate::model::Model;
use crate::tensor::Tensor;

pub const BIN_WIDTH: f64 = 0.05;
pub const N_BINS: usize = 40;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Probability that a positive score exceeds a negative one, ties counting
/// one half, computed from average ranks.
pub fn rank_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub matched: usize,
    pub mismatched: usize,
}

/// Fixed-width bins over `[-1, 1]`; the last bin is closed on the right.
pub fn histogram(matched: &[f64], mismatched: &[f64]) -> Vec<HistogramBin> {
    let mut bins: Vec<HistogramBin> = (0..N_BINS)
        .map(|k| HistogramBin {
            lo: -1.0 + k as f64 * BIN_WIDTH,
            hi: -1.0 + (k + 1) as f64 * BIN_WIDTH,
            matched: 0,
            mismatched: 0,
        })
        .collect();
    let slot = |c: f64| (((c + 1.0) / BIN_WIDTH).floor() as usize).min(N_BINS - 1);
    for &c in matched {
        bins[slot(c)].matched += 1;
    }
    for &c in mismatched {
        bins[slot(c)].mismatched += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Indexed by pair id.
    pub matched: Vec<f64>,
    pub mismatched: Vec<f64>,
    pub bins: Vec<HistogramBin>,
    pub auc: f64,
}

impl SimilarityReport {
    pub fn from_scores(matched: Vec<f64>, mismatched: Vec<f64>) -> Result<Self> {
        let auc = rank_auc(&matched, &mismatched)?;
        let bins = histogram(&matched, &mismatched);
        Ok(SimilarityReport {
            matched,
            mismatched,
            bins,
            auc,
        })
    }

    pub fn mean_matched(&self) -> f64 {
        mean(&self.matched)
    }

    pub fn mean_mismatched(&self) -> f64 {
        mean(&self.mismatched)
    }

    /// `<dir>/similarity.csv` (pair_id, kind, cosine) and
    /// `<dir>/similarity_summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("pair_id,kind,cosine\n");
        for (i, c) in self.matched.iter().enumerate() {
            csv.push_str(&format!("{i},matched,{c}\n"));
        }
        for (i, c) in self.mismatched.iter().enumerate() {
            csv.push_str(&format!("{i},mismatched,{c}\n"));
        }
        let path = dir.join("similarity.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let summary = serde_json::json!({
            "pairs": self.matched.len(),
            "mean_matched": self.mean_matched(),
            "mean_mismatched": self.mean_mismatched(),
            "auc": self.auc,
            "bins": self.bins,
        });
        let path = dir.join("similarity_summary.json");
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seeded permutation without fixed points (Sattolo's single-cycle shuffle).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Data("a derangement needs at least two items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    Ok(perm)
}

/// Matched cosines `cos(v_i, t_i)` and mismatched `cos(v_π(i), t_i)` for a
/// seeded derangement `π`.
pub fn similarity_from_embeddings(visual: &[Vec<f64>], text: &[Vec<f64>], seed: u64) -> Result<SimilarityReport> {
    if visual.len() != text.len() {
        return Err(Error::Data("visual and text lists differ in length".into()));
    }
    let perm = derangement(visual.len(), seed)?;
    let matched = (0..visual.len())
        .map(|i| cosine_similarity(&visual[i], &text[i]))
        .collect::<Result<Vec<_>>>()?;
    let mismatched = (0..visual.len())
        .map(|i| cosine_similarity(&visual[perm[i]], &text[i]))
        .collect::<Result<Vec<_>>>()?;
    SimilarityReport::from_scores(matched, mismatched)
}

fn column_mean(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = t.matrix_dims();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// Mean-pooled adapter tokens of each sample's image and mean-pooled final
/// hidden states of its prompt and answer, read with that image. Samples are
/// processed in id order, so the result does not depend on input order.
pub fn pooled_embeddings(model: &Model, samples: &[&GroundingSample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by_key(|s| s.id);
    let mut visual = Vec::with_capacity(sorted.len());
    let mut text = Vec::with_capacity(sorted.len());
    for s in sorted {
        let vis = model.encode_image(&s.image)?;
        let tokens: Vec<usize> = s.prompt.iter().chain(&s.target).copied().collect();
        let out = model.forward(&tokens, Some(&vis), false)?;
        visual.push(column_mean(&vis.tokens));
        text.push(column_mean(&out.final_hidden));
    }
    Ok((visual, text))
}

/// Cosine similarity between pooled visual and pooled text representations
/// for true image-text pairs and for deranged pairs.
pub fn similarity_analysis(model: &Model, samples: &[&GroundingSample], seed: u64) -> Result<SimilarityReport> {
    if samples.len() < 2 {
        return Err(Error::Data("similarity analysis needs at least two samples".into()));
    }
    let (visual, text) = pooled_embeddings(model, samples)?;
    similarity_from_embeddings(&visual, &text, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub layer_index: usize,
    pub grid: [usize; 2],
    /// Min-max normalized, row-major.
    pub values: Vec<f64>,
    pub sample_id: usize,
    pub pgm: PathBuf,
    pub csv: PathBuf,
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Binary 8-bit greyscale image.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Aggregates `record` over heads and `span`, then writes `<stem>.pgm` and
/// `<stem>.csv` (raw aggregated values, one grid row per line).
pub fn export_attention_heatmap(
    record: &AttentionRecord,
    span: QuerySpan,
    grid: [usize; 2],
    sample_id: usize,
    stem: &Path,
) -> Result<HeatmapExport> {
    let p = aggregate_attention(record, span, grid)?;
    let values = min_max_normalize(p.data());
    let [h, w] = grid;
    let pgm = stem.with_extension("pgm");
    let csv = stem.with_extension("csv");
    if let Some(dir) = pgm.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&pgm, pgm_bytes(w, h, &values)).map_err(|e| Error::io(&pgm, e))?;
    let rows: Vec<String> = p
        .data()
        .chunks(w)
        .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
        .collect();
    fs::write(&csv, rows.join("\n") + "\n").map_err(|e| Error::io(&csv, e))?;
    Ok(HeatmapExport {
        layer_index: record.layer_index,
        grid,
        values,
        sample_id,
        pgm,
        csv,
    })
}

/// Share of an aggregated attention map that falls on padding.
pub fn padding_attention_mass(p: &Tensor, pad_region: &BinaryGrid) -> Result<f64> {
    if p.numel() != pad_region.cells().len() {
        return Err(Error::shape(format!(
            "attention map {:?} vs pad region {}x{}",
            p.shape(),
            pad_region.rows(),
            pad_region.cols()
        )));
    }
    Ok(mass_inside(p, pad_region))
}
