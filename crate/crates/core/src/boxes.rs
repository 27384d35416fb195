//! Box geometry in normalized coordinates.

pub fn cxcywh_to_xyxy(b: &[f64]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(b: &[f64]) -> [f64; 4] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

pub fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - (enclose - union) / enclose
}

pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    iou_xyxy(&cxcywh_to_xyxy(a), &cxcywh_to_xyxy(b))
}

/// True when the box has positive extent and lies inside the unit square.
pub fn is_valid(b: &[f64]) -> bool {
    let [x1, y1, x2, y2] = cxcywh_to_xyxy(b);
    let tol = 1e-9;
    b[2] > 0.0 && b[3] > 0.0 && x1 >= -tol && y1 >= -tol && x2 <= 1.0 + tol && y2 <= 1.0 + tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_unit_iou_and_giou() {
        let b = [0.5, 0.5, 0.2, 0.3];
        assert!((iou(&b, &b) - 1.0).abs() < 1e-12);
        let x = cxcywh_to_xyxy(&b);
        assert!((giou_xyxy(&x, &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        let a = cxcywh_to_xyxy(&[0.2, 0.2, 0.1, 0.1]);
        let b = cxcywh_to_xyxy(&[0.8, 0.8, 0.1, 0.1]);
        assert_eq!(iou_xyxy(&a, &b), 0.0);
        // enclosing box is 0.7 x 0.7, union 0.02
        let expect = -(0.49 - 0.02) / 0.49;
        assert!((giou_xyxy(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn conversions_round_trip() {
        let b = [0.3, 0.6, 0.2, 0.1];
        let back = xyxy_to_cxcywh(&cxcywh_to_xyxy(&b));
        for i in 0..4 {
            assert!((b[i] - back[i]).abs() < 1e-12);
        }
    }
}
