//! Quantitative evaluation: IoU, Acc@0.5, grounding F1 (all/loc), corpus
//! BLEU@4, and soft-voting VQA accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use crate::vocab::BBox;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground-truth lists have different lengths ({preds} vs {gts})")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("class list is empty")]
    EmptyClassList,
    #[error("instance label {0:?} is not in the class list")]
    UnknownLabel(String),
    #[error("the VQA metric needs exactly 10 reference answers, got {0}")]
    BadReferenceCount(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Intersection over union of two boxes; an empty union scores 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub const IOU_THRESHOLD: f64 = 0.5;

/// Fraction of queries whose predicted box overlaps ground truth with
/// IoU > 0.5; a missing prediction scores 0 for its query.
pub fn acc_at_05(preds: &[Option<BBox>], gts: &[BBox]) -> Result<f64, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    if gts.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.map_or(false, |p| iou(&p, g) > IOU_THRESHOLD))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// A predicted grounding instance; `bbox` is `None` when the decoded bins
/// were disordered (such an instance can never be a true positive).
#[derive(Debug, Clone, PartialEq)]
pub struct PredInstance {
    pub label: String,
    pub bbox: Option<BBox>,
}

/// A ground-truth instance: one object word with one or more boxes; a
/// prediction hits when its IoU with any of them exceeds 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub label: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    /// Multi-label framing: a prediction is correct only with both the right
    /// object word and IoU > 0.5 against some ground-truth box of that word.
    All,
    /// Box quality among correctly predicted object words only.
    Loc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Average {
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<(String, ClassCounts)>,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-class grounding F1 over a corpus of images.
///
/// Within each image and class, predictions match ground-truth instances
/// one-to-one, greedily by descending IoU, counting only pairs above the 0.5
/// gate; leftover predictions are false positives and leftover ground truth
/// false negatives. In `Loc` mode an image's class enters the counts only
/// when that object word appears in both the prediction and the ground
/// truth. Per-class counts accumulate over the corpus and are averaged per
/// `average`; macro averaging skips classes with no instances anywhere.
pub fn grounding_f1(
    preds: &[Vec<PredInstance>],
    gts: &[Vec<GtInstance>],
    classes: &[String],
    mode: F1Mode,
    average: F1Average,
) -> Result<F1Report, MetricsError> {
    if classes.is_empty() {
        return Err(MetricsError::EmptyClassList);
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    let class_index: HashMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut counts = vec![ClassCounts::default(); classes.len()];

    for (pred_img, gt_img) in preds.iter().zip(gts) {
        for inst in pred_img {
            if !class_index.contains_key(inst.label.as_str()) {
                return Err(MetricsError::UnknownLabel(inst.label.clone()));
            }
        }
        for inst in gt_img {
            if !class_index.contains_key(inst.label.as_str()) {
                return Err(MetricsError::UnknownLabel(inst.label.clone()));
            }
        }
        for (ci, class) in classes.iter().enumerate() {
            let p: Vec<&PredInstance> = pred_img.iter().filter(|i| &i.label == class).collect();
            let g: Vec<&GtInstance> = gt_img.iter().filter(|i| &i.label == class).collect();
            if mode == F1Mode::Loc && (p.is_empty() || g.is_empty()) {
                // Only correctly predicted object words are scored.
                continue;
            }
            // All candidate pairs above the gate, best overlap first; ties
            // break by index for determinism.
            let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
            for (pi, pinst) in p.iter().enumerate() {
                if let Some(pb) = pinst.bbox {
                    for (gi, ginst) in g.iter().enumerate() {
                        let best = ginst.boxes.iter().map(|gb| iou(&pb, gb)).fold(0.0, f64::max);
                        if best > IOU_THRESHOLD {
                            pairs.push((pi, gi, best));
                        }
                    }
                }
            }
            pairs.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
            let mut p_used = vec![false; p.len()];
            let mut g_used = vec![false; g.len()];
            let mut tp = 0usize;
            for (pi, gi, _) in pairs {
                if !p_used[pi] && !g_used[gi] {
                    p_used[pi] = true;
                    g_used[gi] = true;
                    tp += 1;
                }
            }
            counts[ci].tp += tp;
            counts[ci].fp += p.len() - tp;
            counts[ci].fn_ += g.len() - tp;
        }
    }

    let (precision, recall, f1) = match average {
        F1Average::Micro => {
            let tp: usize = counts.iter().map(|c| c.tp).sum();
            let fp: usize = counts.iter().map(|c| c.fp).sum();
            let fn_: usize = counts.iter().map(|c| c.fn_).sum();
            prf(tp, fp, fn_)
        }
        F1Average::Macro => {
            let active: Vec<&ClassCounts> =
                counts.iter().filter(|c| c.tp + c.fp + c.fn_ > 0).collect();
            if active.is_empty() {
                (0.0, 0.0, 0.0)
            } else {
                let mut sums = (0.0, 0.0, 0.0);
                for c in &active {
                    let (p, r, f) = prf(c.tp, c.fp, c.fn_);
                    sums.0 += p;
                    sums.1 += r;
                    sums.2 += f;
                }
                let n = active.len() as f64;
                (sums.0 / n, sums.1 / n, sums.2 / n)
            }
        }
    };

    Ok(F1Report {
        precision,
        recall,
        f1,
        per_class: classes.iter().cloned().zip(counts).collect(),
    })
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU@4: geometric mean of modified 1..4-gram precisions with
/// a brevity penalty, no smoothing. One reference per candidate; a zero
/// precision at any order zeroes the score.
pub fn bleu4<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch { preds: candidates.len(), gts: references.len() });
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let c = ngram_counts(cand, n);
            let r = ngram_counts(reference, n);
            for (gram, count) in &c {
                total[n - 1] += count;
                matched[n - 1] += (*count).min(r.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += 0.25 * (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if cand_len < ref_len { (1.0 - ref_len as f64 / cand_len as f64).exp() } else { 1.0 };
    Ok(bp * log_sum.exp())
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// Soft-voting VQA accuracy against exactly ten human answers:
/// `min(matches / 3, 1)` after lowercasing and whitespace normalization.
pub fn vqa_soft_accuracy(pred: &str, answers: &[String]) -> Result<f64, MetricsError> {
    if answers.len() != 10 {
        return Err(MetricsError::BadReferenceCount(answers.len()));
    }
    let pred = normalize_answer(pred);
    let matches = answers.iter().filter(|a| normalize_answer(a) == pred).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = bb(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bb(0.6, 0.7, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_overlap_third() {
        // Intersection 0.1 x 0.2 = 0.02; union 0.06.
        let a = bb(0.0, 0.0, 0.2, 0.2);
        let b = bb(0.1, 0.0, 0.3, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_pixel_grid_oracle() {
        // Monte-Carlo membership count over a fine grid approximates the
        // analytic areas.
        let a = bb(0.05, 0.1, 0.45, 0.8);
        let b = bb(0.2, 0.3, 0.7, 0.6);
        let n = 400usize;
        let mut inter = 0usize;
        let mut union = 0usize;
        for yi in 0..n {
            for xi in 0..n {
                let x = (xi as f64 + 0.5) / n as f64;
                let y = (yi as f64 + 0.5) / n as f64;
                let in_a = a.x_min <= x && x < a.x_max && a.y_min <= y && y < a.y_max;
                let in_b = b.x_min <= x && x < b.x_max && b.y_min <= y && y < b.y_max;
                inter += (in_a && in_b) as usize;
                union += (in_a || in_b) as usize;
            }
        }
        let approx = inter as f64 / union as f64;
        assert!((iou(&a, &b) - approx).abs() < 5e-3, "{} vs {approx}", iou(&a, &b));
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let mut xs = [rng.random::<f64>(), rng.random::<f64>()];
            xs.sort_by(f64::total_cmp);
            let mut ys = [rng.random::<f64>(), rng.random::<f64>()];
            ys.sort_by(f64::total_cmp);
            let a = bb(xs[0], ys[0], xs[1], ys[1]);
            let mut xs2 = [rng.random::<f64>(), rng.random::<f64>()];
            xs2.sort_by(f64::total_cmp);
            let mut ys2 = [rng.random::<f64>(), rng.random::<f64>()];
            ys2.sort_by(f64::total_cmp);
            let b = bb(xs2[0], ys2[0], xs2[1], ys2[1]);
            let ab = iou(&a, &b);
            assert_eq!(ab, iou(&b, &a));
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn acc_extremes_and_fixture() {
        let gts = vec![bb(0.0, 0.0, 0.5, 0.5); 4];
        let same: Vec<Option<BBox>> = gts.iter().cloned().map(Some).collect();
        assert_eq!(acc_at_05(&same, &gts).unwrap(), 1.0);
        let far = vec![Some(bb(0.6, 0.6, 0.9, 0.9)); 4];
        assert_eq!(acc_at_05(&far, &gts).unwrap(), 0.0);
        // 3 of 4 above threshold.
        let mixed = vec![
            Some(gts[0]),
            Some(bb(0.0, 0.0, 0.45, 0.5)), // IoU = 0.9
            Some(gts[2]),
            None,
        ];
        assert_eq!(acc_at_05(&mixed, &gts).unwrap(), 0.75);
        assert!(acc_at_05(&mixed[..3].to_vec(), &gts).is_err());
    }

    fn classes() -> Vec<String> {
        vec!["circle".into(), "square".into()]
    }

    #[test]
    fn f1_perfect_predictions() {
        let gt = vec![vec![
            GtInstance { label: "circle".into(), boxes: vec![bb(0.0, 0.0, 0.3, 0.3)] },
            GtInstance { label: "square".into(), boxes: vec![bb(0.5, 0.5, 0.9, 0.9)] },
        ]];
        let pred = vec![vec![
            PredInstance { label: "circle".into(), bbox: Some(bb(0.0, 0.0, 0.3, 0.3)) },
            PredInstance { label: "square".into(), bbox: Some(bb(0.5, 0.5, 0.9, 0.9)) },
        ]];
        for mode in [F1Mode::All, F1Mode::Loc] {
            for avg in [F1Average::Macro, F1Average::Micro] {
                let r = grounding_f1(&pred, &gt, &classes(), mode, avg).unwrap();
                assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
            }
        }
    }

    #[test]
    fn f1_correct_words_disjoint_boxes_scores_zero() {
        let gt = vec![vec![GtInstance { label: "circle".into(), boxes: vec![bb(0.0, 0.0, 0.3, 0.3)] }]];
        let pred =
            vec![vec![PredInstance { label: "circle".into(), bbox: Some(bb(0.6, 0.6, 0.9, 0.9)) }]];
        for mode in [F1Mode::All, F1Mode::Loc] {
            let r = grounding_f1(&pred, &gt, &classes(), mode, F1Average::Macro).unwrap();
            assert_eq!(r.f1, 0.0, "{mode:?}");
        }
    }

    #[test]
    fn f1_two_image_fixture_hand_enumerated() {
        // Image 1: word + box right. Image 2: word right, box wrong.
        let gt_box = bb(0.1, 0.1, 0.5, 0.5);
        let gts = vec![
            vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }],
            vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }],
        ];
        let preds = vec![
            vec![PredInstance { label: "circle".into(), bbox: Some(gt_box) }],
            vec![PredInstance { label: "circle".into(), bbox: Some(bb(0.6, 0.6, 0.9, 0.9)) }],
        ];
        // Hand enumeration for class "circle": image 1 TP; image 2 FP + FN.
        // P = 1/2, R = 1/2, F1 = 1/2, in both modes (the word is correct in
        // both images, so Loc restricts nothing here).
        for mode in [F1Mode::All, F1Mode::Loc] {
            let r = grounding_f1(&preds, &gts, &classes(), mode, F1Average::Macro).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5), "{mode:?}");
        }
        let counts = &grounding_f1(&preds, &gts, &classes(), F1Mode::All, F1Average::Macro)
            .unwrap()
            .per_class[0];
        assert_eq!(counts.1, ClassCounts { tp: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn f1_loc_ignores_wrongly_worded_images() {
        let gt_box = bb(0.1, 0.1, 0.5, 0.5);
        // Image 1: predicted "square" where GT is "circle" (wrong word).
        // Image 2: "circle" right with the right box.
        let gts = vec![
            vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }],
            vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }],
        ];
        let preds = vec![
            vec![PredInstance { label: "square".into(), bbox: Some(gt_box) }],
            vec![PredInstance { label: "circle".into(), bbox: Some(gt_box) }],
        ];
        // All mode: circle has TP 1 / FN 1; square has FP 1.
        let all = grounding_f1(&preds, &gts, &classes(), F1Mode::All, F1Average::Macro).unwrap();
        assert!(all.f1 < 1.0);
        // Loc mode: image 1 contributes nothing for either class; the rest is
        // perfect.
        let loc = grounding_f1(&preds, &gts, &classes(), F1Mode::Loc, F1Average::Macro).unwrap();
        assert_eq!(loc.f1, 1.0);
    }

    #[test]
    fn f1_duplicate_predictions_are_extra_fps() {
        let gt_box = bb(0.1, 0.1, 0.5, 0.5);
        let gts = vec![vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }]];
        let preds = vec![vec![
            PredInstance { label: "circle".into(), bbox: Some(gt_box) },
            PredInstance { label: "circle".into(), bbox: Some(gt_box) },
        ]];
        let r = grounding_f1(&preds, &gts, &classes(), F1Mode::All, F1Average::Macro).unwrap();
        assert_eq!(r.per_class[0].1, ClassCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn f1_monotone_in_true_positives() {
        let gt_box = bb(0.1, 0.1, 0.5, 0.5);
        let gts = vec![
            vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }],
            vec![GtInstance { label: "circle".into(), boxes: vec![gt_box] }],
        ];
        let worse = vec![vec![PredInstance { label: "circle".into(), bbox: Some(gt_box) }], vec![]];
        let better = vec![
            vec![PredInstance { label: "circle".into(), bbox: Some(gt_box) }],
            vec![PredInstance { label: "circle".into(), bbox: Some(gt_box) }],
        ];
        let a = grounding_f1(&worse, &gts, &classes(), F1Mode::All, F1Average::Macro).unwrap();
        let b = grounding_f1(&better, &gts, &classes(), F1Mode::All, F1Average::Macro).unwrap();
        assert!(b.f1 > a.f1);
        assert!(b.precision >= a.precision);
    }

    #[test]
    fn f1_rejects_bad_inputs() {
        assert_eq!(
            grounding_f1(&[], &[], &[], F1Mode::All, F1Average::Macro).unwrap_err(),
            MetricsError::EmptyClassList
        );
        let gts = vec![vec![GtInstance { label: "dog".into(), boxes: vec![bb(0.0, 0.0, 0.1, 0.1)] }]];
        assert!(matches!(
            grounding_f1(&[vec![]], &gts, &classes(), F1Mode::All, F1Average::Macro),
            Err(MetricsError::UnknownLabel(_))
        ));
    }

    #[test]
    fn bleu_identity_and_zero_overlap() {
        let corpus: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7, 6]];
        assert!((bleu4(&corpus, &corpus).unwrap() - 1.0).abs() < 1e-12);
        let other: Vec<Vec<u32>> = vec![vec![10, 11, 12, 13, 14], vec![20, 21, 22, 23]];
        assert_eq!(bleu4(&other, &corpus).unwrap(), 0.0);
        assert!(bleu4::<u32>(&[], &[]).is_err());
    }

    #[test]
    fn bleu_three_sentence_toy_corpus_matches_hand_tabulation() {
        // Candidates vs references, tokenized as ints:
        //   c1 = [1 2 3 4]      r1 = [1 2 3 4]
        //   c2 = [1 2 3 4 9]    r2 = [1 2 3 4 5]
        //   c3 = [5 6 7 8]      r3 = [5 6 7 8]
        // 1-grams: 4/4 + 4/5 + 4/4 -> 12/13
        // 2-grams: 3/3 + 3/4 + 3/3 -> 9/10
        // 3-grams: 2/2 + 2/3 + 2/2 -> 6/7
        // 4-grams: 1/1 + 1/2 + 1/1 -> 3/4
        // lengths: c = 13, r = 13 -> BP = 1
        let cands: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 9], vec![5, 6, 7, 8]];
        let refs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 5], vec![5, 6, 7, 8]];
        let expected = ((12.0f64 / 13.0).ln() * 0.25
            + (9.0f64 / 10.0).ln() * 0.25
            + (6.0f64 / 7.0).ln() * 0.25
            + (3.0f64 / 4.0).ln() * 0.25)
            .exp();
        let got = bleu4(&cands, &refs).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn bleu_brevity_penalty_kicks_in_for_short_candidates() {
        // Perfect n-gram precision but the middle candidate drops a word:
        //   c2 = [2 3 4 5] vs r2 = [1 2 3 4 5]
        // every candidate n-gram appears in its reference, so all four
        // precisions are 1 and the score is exactly the brevity penalty
        // exp(1 - 13/12).
        let cands: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![2, 3, 4, 5], vec![5, 6, 7, 8]];
        let refs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 5], vec![5, 6, 7, 8]];
        let got = bleu4(&cands, &refs).unwrap();
        let expected = (1.0f64 - 13.0 / 12.0).exp();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn bleu_is_permutation_invariant() {
        let cands: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 9], vec![5, 6, 7, 8]];
        let refs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 5], vec![5, 6, 7, 8]];
        let a = bleu4(&cands, &refs).unwrap();
        let perm = [2usize, 0, 1];
        let cands_p: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        assert_eq!(a, bleu4(&cands_p, &refs_p).unwrap());
    }

    #[test]
    fn vqa_soft_voting_counts() {
        let answers: Vec<String> = (0..10).map(|i| if i < 3 { "two".into() } else { "three".into() }).collect();
        assert_eq!(vqa_soft_accuracy("two", &answers).unwrap(), 1.0);
        assert_eq!(vqa_soft_accuracy("four", &answers).unwrap(), 0.0);
        let one_match: Vec<String> = (0..10).map(|i| if i == 0 { "two".into() } else { "three".into() }).collect();
        assert!((vqa_soft_accuracy("two", &one_match).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(vqa_soft_accuracy("TWO ", &answers).unwrap(), 1.0, "normalization applies");
        assert!(vqa_soft_accuracy("two", &answers[..9]).is_err());
    }
}
