mod oracles;

use oracles::random_segment;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapnet_core::anchors::AnchorSet;
use rapnet_core::data::{oracle_actionness, segment_iou, TemporalSegment};
use rapnet_core::matching::{assign_labels, compute_loss, AnchorGrid, AssignmentResult, Label, LossWeights};
use rapnet_core::model::{encode_cell, Decoded, DecodedBox, ForwardVars};
use rapnet_tensor::{Tape, Tensor};

fn seg(s: f64, e: f64) -> TemporalSegment {
    TemporalSegment::new(s, e).unwrap()
}

fn decoded_with(grid: &AnchorGrid, segs: Vec<Option<TemporalSegment>>) -> Decoded {
    Decoded {
        boxes: grid
            .cells
            .iter()
            .zip(segs)
            .map(|(&cell, segment)| DecodedBox {
                cell,
                center: segment.map_or(0.0, |s| s.center()),
                width: segment.map_or(0.0, |s| s.width()),
                segment,
                score: 0.5,
            })
            .collect(),
        dropped: 0,
    }
}

fn random_grid(rng: &mut impl Rng) -> AnchorGrid {
    // at most 30 cells: T ∈ {4, 8}, one or two levels, one or two anchors
    let levels = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    let t = if levels == 2 && m == 2 { 8 } else { [4, 8][rng.random_range(0..2)] };
    let mut widths: Vec<f64> = (0..levels * m).map(|_| rng.random_range(0.05..0.9)).collect();
    widths.sort_by(f64::total_cmp);
    widths.dedup();
    while widths.len() < levels * m {
        widths.push(widths.last().unwrap() + 0.01);
    }
    let anchors = AnchorSet::new(widths.chunks(m).map(<[f64]>::to_vec).collect()).unwrap();
    let grid = AnchorGrid::new(&anchors, t).unwrap();
    assert!(grid.len() <= 30);
    grid
}

fn check_partition(a: &AssignmentResult, n_gts: usize, cells: usize) {
    let pos = a.labels.iter().filter(|l| matches!(l, Label::Positive { .. })).count();
    assert_eq!(pos, a.n_pos);
    assert_eq!(a.n_pos, n_gts.min(cells));
    assert_eq!(pos + a.n_neg + a.n_ignored(), cells);
    let mut gts: Vec<usize> = a.positives.iter().map(|p| p.gt).collect();
    gts.sort();
    gts.dedup();
    assert_eq!(gts.len(), a.n_pos);
}

#[test]
fn greedy_equals_best_first_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let grid = random_grid(&mut rng);
        let n_gts = rng.random_range(0..=3);
        let gts: Vec<_> = (0..n_gts).map(|_| random_segment(&mut rng)).collect();
        let dec = decoded_with(&grid, (0..grid.len()).map(|_| Some(random_segment(&mut rng))).collect());
        let a = assign_labels(&grid, &dec, &gts, 0.5).unwrap();
        let got: Vec<(usize, usize)> = a.positives.iter().map(|p| (p.index, p.gt)).collect();
        assert_eq!(got, oracles::best_first(&grid.priors, &gts));
        check_partition(&a, gts.len(), grid.len());
    }
}

#[test]
fn contested_anchor_goes_to_the_better_gt() {
    // one level of four cells, anchor width 0.25: priors are the quarters
    let anchors = AnchorSet::new(vec![vec![0.25]]).unwrap();
    let grid = AnchorGrid::new(&anchors, 4).unwrap();
    let g0 = seg(0.25, 0.45); // IoU 0.8 with prior 1
    let g1 = seg(0.3, 0.55); // IoU 2/3 with prior 1, 1/6 with prior 2
    let dec = decoded_with(&grid, vec![None; 4]);
    let a = assign_labels(&grid, &dec, &[g0, g1], 0.5).unwrap();
    assert_eq!(a.labels[1], Label::Positive { gt: 0 });
    assert_eq!(a.labels[2], Label::Positive { gt: 1 });

    // exhaustive check over every injective map from the two gts to the
    // first three cells: the greedy result has the best first-choice IoU
    let grid3: Vec<_> = grid.priors[..3].to_vec();
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0, 0);
    for c0 in 0..3 {
        for c1 in 0..3 {
            if c0 == c1 {
                continue;
            }
            let i0 = segment_iou(&grid3[c0].unwrap(), &g0);
            let i1 = segment_iou(&grid3[c1].unwrap(), &g1);
            let key = (i0.max(i1), i0.min(i1));
            if key > (best.0, best.1) {
                best = (key.0, key.1, c0, c1);
            }
        }
    }
    let got0 = a.positives.iter().find(|p| p.gt == 0).unwrap().index;
    let got1 = a.positives.iter().find(|p| p.gt == 1).unwrap().index;
    assert_eq!((got0, got1), (best.2, best.3));
}

#[test]
fn raising_threshold_only_shrinks_the_ignored_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let grid = random_grid(&mut rng);
        let gts: Vec<_> = (0..rng.random_range(1..=3)).map(|_| random_segment(&mut rng)).collect();
        let dec = decoded_with(&grid, (0..grid.len()).map(|_| Some(random_segment(&mut rng))).collect());
        let mut prev: Option<AssignmentResult> = None;
        for k in 0..=10 {
            let a = assign_labels(&grid, &dec, &gts, k as f64 / 10.0).unwrap();
            if let Some(p) = &prev {
                assert!(a.n_neg >= p.n_neg);
                assert!(a.n_ignored() <= p.n_ignored());
                assert_eq!(a.positives, p.positives);
            }
            prev = Some(a);
        }
    }
}

#[test]
fn iou_against_interval_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let a = random_segment(&mut rng);
        let b = random_segment(&mut rng);
        let expected = oracles::interval_iou((a.start(), a.end()), (b.start(), b.end()));
        let got = segment_iou(&a, &b);
        assert!((got - expected).abs() <= 1e-12);
        assert_eq!(got, segment_iou(&b, &a));
        assert!((0.0..=1.0).contains(&got));
        assert_eq!(segment_iou(&a, &a), 1.0);
    }
}

// ---- loss ----

fn stable_bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

fn huber(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d < 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Toy {
    grid: AnchorGrid,
    heads: Vec<Tensor>,
    actionness: Tensor,
}

fn toy(rng: &mut impl Rng) -> Toy {
    let anchors = AnchorSet::new(vec![vec![0.2], vec![0.45]]).unwrap();
    let grid = AnchorGrid::new(&anchors, 8).unwrap();
    let heads = [8, 4]
        .iter()
        .map(|&t| Tensor::new(vec![3, t], (0..3 * t).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
        .collect();
    let actionness = Tensor::new(vec![1, 8], (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    Toy { grid, heads, actionness }
}

fn record(tape: &mut Tape, toy: &Toy) -> ForwardVars {
    ForwardVars {
        heads: toy.heads.iter().map(|h| tape.input(h.clone()).unwrap()).collect(),
        actionness: tape.input(toy.actionness.clone()).unwrap(),
    }
}

fn decode_toy(toy: &Toy) -> Decoded {
    let mut boxes = Vec::new();
    for (i, cell) in toy.grid.cells.iter().enumerate() {
        let h = &toy.heads[cell.level];
        let t = h.shape()[1];
        let s = (1 << cell.level) as f64 / 8.0;
        let c = (cell.position as f64 + sig(h.data()[t + cell.position])) * s;
        let w = toy.grid.widths[i] * h.data()[2 * t + cell.position].exp();
        boxes.push(DecodedBox {
            cell: *cell,
            center: c,
            width: w,
            segment: TemporalSegment::clamped(c - w / 2.0, c + w / 2.0),
            score: sig(h.data()[cell.position]),
        });
    }
    Decoded { boxes, dropped: 0 }
}

/// Eq. 1 written out term by term over the toy instance.
fn straight_line_total(toy: &Toy, a: &AssignmentResult, gts: &[TemporalSegment], w: LossWeights) -> f64 {
    let (mut cp, mut cn, mut cc, mut cw, mut ci) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, label) in a.labels.iter().enumerate() {
        let cell = toy.grid.cells[i];
        let h = &toy.heads[cell.level];
        let t = h.shape()[1];
        let j = cell.position;
        let (zc, zx, zw) = (h.data()[j], h.data()[t + j], h.data()[2 * t + j]);
        match *label {
            Label::Negative => cn += stable_bce(zc, 0.0),
            Label::Ignored => {}
            Label::Positive { gt } => {
                let g = gts[gt];
                let s = (1 << cell.level) as f64 / 8.0;
                cp += stable_bce(zc, 1.0);
                let target = (g.center() / s - j as f64).clamp(0.0, 1.0);
                cc += stable_bce(zx, target);
                let anchor = toy.grid.widths[i];
                cw += huber(zw, (g.width() / anchor).ln());
                let center = (j as f64 + sig(zx)) * s;
                let width = anchor * zw.exp();
                let ps = (center - width / 2.0).clamp(0.0, 1.0);
                let pe = (center + width / 2.0).clamp(0.0, 1.0);
                let inter = (pe.min(g.end()) - ps.max(g.start())).max(0.0);
                ci += 1.0 - inter / ((pe - ps) + g.width() - inter);
            }
        }
    }
    let np = a.n_pos as f64;
    let nn = a.n_neg as f64;
    let (cp, cc, cw, ci) = if a.n_pos == 0 { (0.0, 0.0, 0.0, 0.0) } else { (cp / np, cc / np, cw / np, ci / np) };
    let cn = if a.n_neg == 0 { 0.0 } else { cn / nn };
    w.conf * (cp + cn) + w.center * cc + w.width * cw + w.iou * ci
}

fn weights() -> LossWeights {
    LossWeights {
        conf: 0.2,
        center: 1.0,
        width: 1.0,
        iou: 1.0,
        actionness: 1.0,
    }
}

#[test]
fn loss_matches_straight_line_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let toy = toy(&mut rng);
        let gts = vec![random_segment(&mut rng)];
        let dec = decode_toy(&toy);
        let a = assign_labels(&toy.grid, &dec, &gts, 0.5).unwrap();
        let mut tape = Tape::new();
        let vars = record(&mut tape, &toy);
        let out = compute_loss(&mut tape, &vars, &toy.grid, &a, &gts, weights()).unwrap();
        let expected = straight_line_total(&toy, &a, &gts, weights());
        assert!((out.breakdown.total - expected).abs() <= 1e-10, "{} vs {}", out.breakdown.total, expected);

        let b = out.breakdown;
        let w = weights();
        assert_eq!(b.total, w.conf * (b.conf_pos + b.conf_neg) + w.center * b.center + w.width * b.width + w.iou * b.iou);
        let act: f64 = toy
            .actionness
            .data()
            .iter()
            .zip(oracle_actionness(&gts, 8))
            .map(|(&z, y)| stable_bce(z, y))
            .sum::<f64>()
            / 8.0;
        assert!((b.actionness - act).abs() <= 1e-12);
        assert_eq!(b.objective, b.total + w.actionness * b.actionness);
    }
}

#[test]
fn hand_computed_confidence_terms() {
    // two cells, one gt: one positive and one negative, all logits zero
    let anchors = AnchorSet::new(vec![vec![0.5]]).unwrap();
    let grid = AnchorGrid::new(&anchors, 2).unwrap();
    let gts = [seg(0.0, 0.5)];
    let dec = decoded_with(&grid, vec![Some(seg(0.0, 0.5)), Some(seg(0.5, 1.0))]);
    let a = assign_labels(&grid, &dec, &gts, 0.5).unwrap();
    assert_eq!((a.n_pos, a.n_neg), (1, 1));
    let mut tape = Tape::new();
    let vars = ForwardVars {
        heads: vec![tape.input(Tensor::zeros(&[3, 2])).unwrap()],
        actionness: tape.input(Tensor::zeros(&[1, 2])).unwrap(),
    };
    let w = LossWeights {
        conf: 0.2,
        center: 0.0,
        width: 0.0,
        iou: 0.0,
        actionness: 0.0,
    };
    let out = compute_loss(&mut tape, &vars, &grid, &a, &gts, w).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((out.breakdown.total - 0.2 * (ln2 + ln2)).abs() < 1e-15);
}

#[test]
fn perfect_prediction_zeroes_geometry_terms() {
    let anchors = AnchorSet::new(vec![vec![0.3]]).unwrap();
    let grid = AnchorGrid::new(&anchors, 4).unwrap();
    let gt = seg(0.3, 0.6); // center 0.45 lies in cell 1
    let (cl, wl) = encode_cell(0, 1, 0.3, 4, &gt).unwrap();
    let mut head = Tensor::zeros(&[3, 4]);
    head.data_mut()[4 + 1] = cl;
    head.data_mut()[8 + 1] = wl;
    let dec = decoded_with(&grid, vec![None, Some(gt), None, None]);
    let a = assign_labels(&grid, &dec, &[gt], 0.5).unwrap();
    assert_eq!(a.labels[1], Label::Positive { gt: 0 });
    let mut tape = Tape::new();
    let vars = ForwardVars {
        heads: vec![tape.input(head).unwrap()],
        actionness: tape.input(Tensor::zeros(&[1, 4])).unwrap(),
    };
    let out = compute_loss(&mut tape, &vars, &grid, &a, &[gt], weights()).unwrap();
    assert!(out.breakdown.iou.abs() < 1e-12);
    assert_eq!(out.breakdown.width, 0.0);
}

#[test]
fn background_clip_has_zero_positive_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toy = toy(&mut rng);
    let dec = decode_toy(&toy);
    let a = assign_labels(&toy.grid, &dec, &[], 0.5).unwrap();
    let mut tape = Tape::new();
    let vars = record(&mut tape, &toy);
    let b = compute_loss(&mut tape, &vars, &toy.grid, &a, &[], weights()).unwrap().breakdown;
    assert_eq!((b.conf_pos, b.center, b.width, b.iou), (0.0, 0.0, 0.0, 0.0));
    assert!(b.conf_neg > 0.0);
}

proptest! {
    #[test]
    fn loss_is_finite_for_any_finite_predictions(seed in 0u64..1000, scale in 1.0f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut toy = toy(&mut rng);
        for h in &mut toy.heads {
            h.scale_in_place(scale);
        }
        let gts: Vec<_> = (0..rng.random_range(1..=3)).map(|_| random_segment(&mut rng)).collect();
        let dec = decode_toy(&toy);
        let a = assign_labels(&toy.grid, &dec, &gts, 0.5).unwrap();
        let mut tape = Tape::new();
        let vars = record(&mut tape, &toy);
        let b = compute_loss(&mut tape, &vars, &toy.grid, &a, &gts, weights()).unwrap().breakdown;
        prop_assert!(b.is_finite());
        prop_assert!((0.0..=1.0).contains(&b.iou));
    }
}
