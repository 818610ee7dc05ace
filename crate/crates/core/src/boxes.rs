//! Axis-aligned box geometry on plain values.
//!
//! Boxes are `[cx, cy, w, h]` in normalized image coordinates unless a
//! function name says `corners`, in which case they are `[x1, y1, x2, y2]`.
//! These value-level routines back the matcher and the evaluator; the loss
//! module rebuilds the same formulas on tensors and tests against these.

/// `[cx, cy, w, h]`, all in `[0, 1]` for well-formed predictions.
pub type BoxCxcywh = [f64; 4];

/// `[x1, y1, x2, y2]` with `x1 <= x2`, `y1 <= y2` for well-formed boxes.
pub type BoxCorners = [f64; 4];

pub fn to_corners(b: &BoxCxcywh) -> BoxCorners {
    let [cx, cy, w, h] = *b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn area(c: &BoxCorners) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

fn intersection(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    w.max(0.0) * h.max(0.0)
}

/// Intersection over union of two corner-form boxes. Degenerate pairs with
/// zero union yield 0.
pub fn corners_iou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    corners_iou(&to_corners(a), &to_corners(b))
}

/// Generalized IoU of two corner-form boxes: IoU minus the fraction of the
/// smallest enclosing box not covered by the union. Range `[-1, 1]`.
pub fn corners_giou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclosing = ew * eh;
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclosing - union) / enclosing
}

pub fn giou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    corners_giou(&to_corners(a), &to_corners(b))
}

/// GIoU regression penalty, `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss_value(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    1.0 - giou(a, b)
}

/// Mean absolute coordinate difference in cxcywh form.
pub fn l1_box_value(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 4.0
}

pub fn center(b: &BoxCxcywh) -> (f64, f64) {
    (b[0], b[1])
}

/// Euclidean distance between the two box centers.
pub fn center_distance(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Diagonal of the smallest box enclosing both inputs. Used to express a
/// center distance relative to the pair's own spatial extent.
pub fn enclosing_diagonal(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let ca = to_corners(a);
    let cb = to_corners(b);
    let w = ca[2].max(cb[2]) - ca[0].min(cb[0]);
    let h = ca[3].max(cb[3]) - ca[1].min(cb[1]);
    (w * w + h * h).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_conversion() {
        let c = to_corners(&[0.5, 0.5, 0.2, 0.4]);
        assert!((c[0] - 0.4).abs() < 1e-15);
        assert!((c[1] - 0.3).abs() < 1e-15);
        assert!((c[2] - 0.6).abs() < 1e-15);
        assert!((c[3] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = [0.3, 0.4, 0.2, 0.2];
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(giou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_unit_boxes_giou_loss_is_four_thirds() {
        // corner boxes (0,0,1,1) and (2,0,3,1): IoU 0, union 2, hull 3
        let a = [0.5, 0.5, 1.0, 1.0];
        let b = [2.5, 0.5, 1.0, 1.0];
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(giou_loss_value(&a, &b), 4.0 / 3.0);
    }

    #[test]
    fn shifted_unit_boxes_hit_exact_iou_fractions() {
        // unit squares offset by 3/7 in x: IoU = (1 - s)/(1 + s) = 0.4
        let a = [0.5, 0.5, 1.0, 1.0];
        let b = [0.5 + 3.0 / 7.0, 0.5, 1.0, 1.0];
        assert!((iou(&a, &b) - 0.4).abs() < 1e-12);
        // offset 1/3: IoU = (2/3)/(4/3) = 0.5, the matching threshold edge
        let c = [0.5 + 1.0 / 3.0, 0.5, 1.0, 1.0];
        assert!((iou(&a, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_distance_averages_coordinates() {
        let a = [0.5, 0.5, 0.2, 0.2];
        let b = [0.5, 0.5, 0.4, 0.2];
        assert_eq!(l1_box_value(&a, &b), 0.05);
    }

    #[test]
    fn center_distance_is_euclidean() {
        let h = [0.2, 0.2, 0.1, 0.1];
        let o = [0.5, 0.6, 0.3, 0.2];
        assert!((center_distance(&h, &o) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_area_boxes_are_handled() {
        let point = [0.5, 0.5, 0.0, 0.0];
        let b = [0.5, 0.5, 0.2, 0.2];
        assert_eq!(iou(&point, &point), 0.0);
        assert_eq!(iou(&point, &b), 0.0);
        assert!(giou(&point, &b).is_finite());
    }

    fn arb_box() -> impl Strategy<Value = BoxCxcywh> {
        (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.8, 0.01f64..0.8)
            .prop_map(|(cx, cy, w, h)| [cx, cy, w, h])
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            prop_assert!(g <= iou(&a, &b) + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g));
        }

        #[test]
        fn contained_box_iou_is_area_ratio(b in arb_box(), k in 0.1f64..0.9) {
            let inner = [b[0], b[1], b[2] * k, b[3] * k];
            let expect = k * k;
            prop_assert!((iou(&b, &inner) - expect).abs() < 1e-9);
        }
    }
}
