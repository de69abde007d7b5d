mod common;

use agevlm::attention::AttentionRecord;
use agevlm::guidance::{
    aggregate_attention, combined_loss, dice_guidance_loss, downsample_mask, lm_targets, mass_inside,
    BinaryGrid, GuidanceStatus, LossOptions, QuerySpan,
};
use agevlm::model::Model;
use agevlm::tensor::{cross_entropy, Tensor};
use proptest::prelude::*;

fn unit_weights(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

prop_compose! {
    /// A distribution over `n` cells and a mask that leaves at least one
    /// cell on each side.
    fn map_and_mask()(n in 2usize..40)(
        raw in prop::collection::vec(0.05f64..1.0, n),
        bits in prop::collection::vec(any::<bool>(), n),
        flip in 0..n,
    ) -> (Vec<f64>, Vec<u8>) {
        let mut cells: Vec<u8> = bits.iter().map(|&b| u8::from(b)).collect();
        let n = cells.len();
        cells[flip] = 1;
        cells[(flip + 1) % n] = 0;
        (unit_weights(&raw), cells)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn moving_mass_inside_lowers_dice((p, cells) in map_and_mask(), frac in 0.0f64..1.0) {
        let n = p.len();
        let mask = BinaryGrid::from_cells(1, n, cells.clone()).unwrap();
        let outside: f64 = p.iter().zip(&cells).filter(|(_, &m)| m == 0).map(|(v, _)| v).sum();
        prop_assume!(outside >= 0.01);
        let moved = 0.01 + frac * (outside - 0.01);
        let inside_count = mask.count() as f64;
        let q: Vec<f64> = p
            .iter()
            .zip(&cells)
            .map(|(&v, &m)| if m == 1 { v + moved / inside_count } else { v * (1.0 - moved / outside) })
            .collect();
        let before = dice_guidance_loss(&Tensor::new(vec![1, n], p).unwrap(), &mask).unwrap();
        let after = dice_guidance_loss(&Tensor::new(vec![1, n], q).unwrap(), &mask).unwrap();
        prop_assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn dice_is_positive_when_mass_leaks((p, cells) in map_and_mask()) {
        let n = p.len();
        let mask = BinaryGrid::from_cells(1, n, cells).unwrap();
        let loss = dice_guidance_loss(&Tensor::new(vec![1, n], p).unwrap(), &mask).unwrap();
        prop_assert!(loss > 0.0);
    }

    #[test]
    fn aggregate_sums_to_one_and_ignores_head_order(
        heads in 1usize..5,
        queries in 1usize..4,
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 16), 1..20),
        start in 0usize..4,
    ) {
        let rows = heads * queries;
        prop_assume!(raw.len() >= rows);
        let mut data = Vec::new();
        for r in &raw[..rows] {
            data.extend(unit_weights(r));
        }
        let record = AttentionRecord {
            layer_index: 0,
            weights: Tensor::new(vec![heads, queries, 16], data.clone()).unwrap(),
            aggregated: None,
        };
        let start = start % queries;
        let span = QuerySpan::new(start, queries).unwrap();
        let p = aggregate_attention(&record, span, [4, 4]).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-9);

        let block = queries * 16;
        let reversed: Vec<f64> = data.chunks(block).rev().flatten().copied().collect();
        let swapped = AttentionRecord {
            weights: Tensor::new(vec![heads, queries, 16], reversed).unwrap(),
            ..record
        };
        let q = aggregate_attention(&swapped, span, [4, 4]).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_is_block_max(bits in prop::collection::vec(prop::bool::weighted(0.1), 64), target in prop::sample::select(vec![[1usize, 1], [2, 2], [4, 2], [2, 8], [8, 8]])) {
        let cells: Vec<u8> = bits.iter().map(|&b| u8::from(b)).collect();
        let full = BinaryGrid::from_cells(8, 8, cells).unwrap();
        let down = downsample_mask(&full, target).unwrap();
        let (bh, bw) = (8 / target[0], 8 / target[1]);
        for r in 0..target[0] {
            for c in 0..target[1] {
                let any = (0..bh).any(|i| (0..bw).any(|j| full.get(r * bh + i, c * bw + j)));
                prop_assert_eq!(down.get(r, c), any);
            }
        }
        prop_assert_eq!(down.is_empty(), full.is_empty());
    }

    #[test]
    fn rle_round_trips(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let cells: Vec<u8> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut r, 0..2u8)).collect();
        let grid = BinaryGrid::from_cells(rows, cols, cells).unwrap();
        let back = BinaryGrid::from_rle(rows, cols, &grid.to_rle()).unwrap();
        prop_assert_eq!(back, grid);
    }
}

#[test]
fn uniform_two_by_two_equals_ln_quarter_up_to_epsilon() {
    let mask = BinaryGrid::from_cells(2, 2, vec![1, 0, 0, 0]).unwrap();
    let p = Tensor::full(&[2, 2], 0.25);
    let loss = dice_guidance_loss(&p, &mask).unwrap();
    let exact = -(0.25f64).ln();
    // ε = 1e-8 in numerator and denominator shifts the value by ≈ 1.5e-8.
    let with_eps = -((0.5 + 1e-8) / (2.0 + 1e-8f64)).ln();
    assert!((loss - with_eps).abs() < 1e-15);
    assert!((loss - exact).abs() < 2e-8);
}

#[test]
fn non_binary_mask_is_rejected() {
    assert!(BinaryGrid::from_values(1, 2, &[1.0, 0.5]).is_err());
}

fn guided_pair(seed: u64) -> agevlm::data::Dataset {
    common::tiny_dataset(seed, 8, 0.25)
}

#[test]
fn composition_matches_scripted_oracle() {
    let model = common::perturbed_model(common::tiny_config(), 3);
    let ds = guided_pair(3);
    let s = ds.samples.iter().find(|s| s.is_guided()).unwrap();
    let opts = LossOptions {
        use_lm_loss: true,
        guidance_active: true,
        answer_only: false,
    };
    let report = combined_loss(&model, &[s], opts, false).unwrap().report;

    let (inputs, labels, include) = lm_targets(s, false);
    let visual = model.encode_image(&s.image).unwrap();
    let fwd = model.forward(&inputs, Some(&visual), true).unwrap();
    let lm = cross_entropy(&fwd.logits, &labels, &include).unwrap().data()[0];
    let grid = model.config().visual_grid;
    let mask = &s.mask.as_ref().unwrap().down;
    let per_layer: Vec<f64> = fwd
        .records
        .iter()
        .map(|r| dice_guidance_loss(&aggregate_attention(r, s.query_span, grid).unwrap(), mask).unwrap())
        .collect();
    assert_eq!(per_layer.len(), 2);
    let guidance = per_layer.iter().sum::<f64>() / 2.0;

    assert!((report.lm_loss - lm).abs() < 1e-10);
    assert!((report.guidance_loss - guidance).abs() < 1e-10);
    assert!((report.total - (lm + guidance)).abs() < 1e-10);
    assert_eq!(report.status, GuidanceStatus::Applied);
}

#[test]
fn inactive_guidance_reports_lm_only() {
    let model = common::perturbed_model(common::tiny_config(), 4);
    let ds = guided_pair(4);
    let batch: Vec<_> = ds.samples.iter().take(4).collect();
    let report = combined_loss(&model, &batch, LossOptions::default(), false).unwrap().report;
    assert_eq!(report.total, report.lm_loss);
    assert_eq!(report.guidance_loss, 0.0);
    assert_eq!(report.status, GuidanceStatus::Inactive);
}

#[test]
fn batch_without_guided_samples_is_flagged() {
    let model = common::perturbed_model(common::tiny_config(), 5);
    let ds = guided_pair(5);
    let batch: Vec<_> = ds.samples.iter().filter(|s| !s.is_guided()).take(3).collect();
    let opts = LossOptions {
        guidance_active: true,
        ..LossOptions::default()
    };
    let report = combined_loss(&model, &batch, opts, false).unwrap().report;
    assert_eq!(report.guidance_loss, 0.0);
    assert_eq!(report.total, report.lm_loss);
    assert_eq!(report.status, GuidanceStatus::NoGuidedSamples);
}

fn mean_mass(model: &Model, s: &agevlm::data::GroundingSample) -> f64 {
    let (inputs, _, _) = lm_targets(s, false);
    let visual = model.encode_image(&s.image).unwrap();
    let fwd = model.forward(&inputs, Some(&visual), true).unwrap();
    let mask = &s.mask.as_ref().unwrap().down;
    let grid = model.config().visual_grid;
    fwd.records
        .iter()
        .map(|r| mass_inside(&aggregate_attention(r, s.query_span, grid).unwrap(), mask))
        .sum::<f64>()
        / fwd.records.len() as f64
}

#[test]
fn one_guidance_step_raises_masked_mass() {
    for seed in 0..5 {
        let mut model = Model::new(common::tiny_config(), seed).unwrap();
        let ds = guided_pair(seed);
        let s = ds.samples.iter().find(|s| s.is_guided()).unwrap();
        let opts = LossOptions {
            use_lm_loss: false,
            guidance_active: true,
            answer_only: false,
        };
        let before = mean_mass(&model, s);
        let grads = combined_loss(&model, &[s], opts, true).unwrap().grads;
        for (p, g) in model.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.value.data_mut().iter_mut().zip(g).for_each(|(v, d)| *v -= 1e-2 * d);
            }
        }
        let after = mean_mass(&model, s);
        assert!(after > before, "seed {seed}: {after} !> {before}");
    }
}
