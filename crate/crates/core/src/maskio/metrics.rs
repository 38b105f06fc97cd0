use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::{Error, Result};

/// Pixel counts with foreground as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("masks {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    same_shape(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Overall accuracy `(TP + TN) / total`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::Data("accuracy of empty counts".into()));
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

fn overlap(a: &Mask, b: &Mask) -> Result<(u64, u64, u64)> {
    same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x & y) as u64;
        na += x as u64;
        nb += y as u64;
    }
    Ok((inter, na, nb))
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Two-class mean IoU. A class absent from both prediction and truth scores 1.
pub fn miou_from_counts(c: &ConfusionCounts) -> f64 {
    let class_iou = |tp: u64, fp: u64, fn_: u64| {
        let d = tp + fp + fn_;
        if d == 0 {
            1.0
        } else {
            tp as f64 / d as f64
        }
    };
    let fg = class_iou(c.tp, c.fp, c.fn_);
    let bg = class_iou(c.tn, c.fn_, c.fp);
    0.5 * (fg + bg)
}

pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(miou_from_counts(&confusion(pred, gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub acc: f64,
    pub miou: f64,
    pub iou: f64,
    pub dice: f64,
}

/// Dataset-level `acc` and `miou` come from pooled pixel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub miou: f64,
    pub per_image: Vec<ImageMetrics>,
}

/// Score `(name, pred, gt)` triples; order of `per_image` follows the input.
pub fn evaluate_pairs(pairs: &[(String, Mask, Mask)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no mask pairs to evaluate".into()));
    }
    let scored = pairs
        .par_iter()
        .map(|(name, pred, gt)| {
            let c = confusion(pred, gt)?;
            Ok((
                c,
                ImageMetrics {
                    name: name.clone(),
                    acc: accuracy(&c)?,
                    miou: miou_from_counts(&c),
                    iou: iou(pred, gt)?,
                    dice: dice(pred, gt)?,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = scored.iter().fold(ConfusionCounts::default(), |acc, (c, _)| acc + *c);
    Ok(MetricReport {
        acc: accuracy(&pooled)?,
        miou: miou_from_counts(&pooled),
        per_image: scored.into_iter().map(|(_, m)| m).collect(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(h, w, |r, c| on.contains(&(r, c))).unwrap()
    }

    #[test]
    fn confusion_two_by_two() {
        let gt = mask(2, 2, &[(0, 0), (0, 1)]);
        let pred = mask(2, 2, &[(0, 0), (1, 0)]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(accuracy(&c).unwrap(), 0.5);
    }

    #[test]
    fn perfect_and_complement() {
        let gt = mask(3, 3, &[(0, 0), (1, 1), (2, 0)]);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(accuracy(&c).unwrap(), 1.0);
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        let c = confusion(&gt.complement(), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(accuracy(&c).unwrap(), 0.0);
    }

    #[test]
    fn iou_and_dice_cases() {
        let a = mask(2, 3, &[(0, 0), (0, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(2, 3, &[(1, 0), (1, 1)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let c = mask(2, 3, &[(0, 1), (0, 2)]);
        assert!((iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn empty_mask_conventions() {
        let e = Mask::zeros(2, 2).unwrap();
        let f = Mask::ones(2, 2).unwrap();
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &f).unwrap(), 0.0);
        assert_eq!(dice(&f, &e).unwrap(), 0.0);
    }

    #[test]
    fn miou_hand_cases() {
        let gt = mask(2, 2, &[(0, 0), (0, 1)]);
        let pred = mask(2, 2, &[(0, 0)]);
        assert!((miou(&pred, &gt).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(miou(&gt.complement(), &gt).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Mask::zeros(2, 2).unwrap();
        let b = Mask::zeros(2, 3).unwrap();
        assert!(confusion(&a, &b).is_err());
        assert!(iou(&a, &b).is_err());
        assert!(dice(&a, &b).is_err());
        assert!(miou(&a, &b).is_err());
    }

    #[test]
    fn pooled_report() {
        let gt = mask(2, 2, &[(0, 0), (0, 1)]);
        let pairs = vec![("a".to_string(), gt.clone(), gt.clone()), ("b".to_string(), gt.complement(), gt)];
        let r = evaluate_pairs(&pairs).unwrap();
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.per_image[0].miou, 1.0);
        assert_eq!(r.per_image[1].name, "b");
    }

    fn arb_pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..=1, h * w),
                proptest::collection::vec(0u8..=1, h * w),
            )
                .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
        })
    }

    /// Per-pixel enumeration without shared helpers.
    fn naive(a: &Mask, b: &Mask) -> (f64, f64, f64, f64) {
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..a.height() {
            for c in 0..a.width() {
                match (a.get(r, c), b.get(r, c)) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, false) => tn += 1.0,
                    (false, true) => fn_ += 1.0,
                }
            }
        }
        let ratio = |n: f64, d: f64| if d == 0.0 { 1.0 } else { n / d };
        (
            ratio(tp, tp + fp + fn_),
            ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            (tp + tn) / (tp + fp + tn + fn_),
            0.5 * (ratio(tp, tp + fp + fn_) + ratio(tn, tn + fp + fn_)),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]
        #[test]
        fn matches_enumeration_oracle((a, b) in arb_pair()) {
            let (i, d, acc, m) = naive(&a, &b);
            prop_assert_eq!(iou(&a, &b).unwrap(), i);
            prop_assert_eq!(dice(&a, &b).unwrap(), d);
            prop_assert_eq!(accuracy(&confusion(&a, &b).unwrap()).unwrap(), acc);
            prop_assert_eq!(miou(&a, &b).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn dice_dominates_iou((a, b) in arb_pair()) {
            let (i, d) = (iou(&a, &b).unwrap(), dice(&a, &b).unwrap());
            prop_assert!(d >= i);
            prop_assert_eq!(d == i, i == 0.0 || i == 1.0);
        }

        #[test]
        fn transposition_invariance((a, b) in arb_pair()) {
            let (at, bt) = (a.transpose(), b.transpose());
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&at, &bt).unwrap());
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&at, &bt).unwrap());
            prop_assert_eq!(miou(&a, &b).unwrap(), miou(&at, &bt).unwrap());
            prop_assert_eq!(
                accuracy(&confusion(&a, &b).unwrap()).unwrap(),
                accuracy(&confusion(&at, &bt).unwrap()).unwrap()
            );
        }
    }
}
