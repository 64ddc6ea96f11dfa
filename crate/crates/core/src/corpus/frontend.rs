//! Context stacking and frame subsampling.

use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::pse::FrameLabels;

/// Concatenates each frame with `context` previous and following frames
/// (edge frames replicated), then keeps every `stride`-th stacked frame.
/// Output is `ceil(T / stride) x (2 * context + 1) * F`.
pub fn frontend(raw: &Tensor, context: usize, stride: usize) -> Tensor {
    assert!(stride >= 1, "stride must be at least 1");
    let (t_len, f) = (raw.rows(), raw.cols());
    let width = (2 * context + 1) * f;
    let out_len = t_len.div_ceil(stride);
    let mut data = Vec::with_capacity(out_len * width);
    for t in (0..t_len).step_by(stride) {
        for offset in 0..=2 * context {
            let src = (t + offset).saturating_sub(context).min(t_len - 1);
            data.extend_from_slice(raw.row(src));
        }
    }
    Tensor::from_parts(vec![out_len, width], data)
}

/// Downsamples labels to match [`frontend`]: each output frame takes the
/// most frequent label row in its stride window, ties going to the row
/// seen first.
pub fn downsample_labels(labels: &FrameLabels, stride: usize) -> FrameLabels {
    assert!(stride >= 1, "stride must be at least 1");
    let t_len = labels.frames();
    let out_len = t_len.div_ceil(stride);
    let mut out = FrameLabels::zeros(out_len, labels.speakers());
    for (o, start) in (0..t_len).step_by(stride).enumerate() {
        let end = (start + stride).min(t_len);
        let mut counts: HashMap<&[u8], (usize, usize)> = HashMap::new();
        for t in start..end {
            let e = counts.entry(labels.row(t)).or_insert((0, t));
            e.0 += 1;
        }
        let best = counts
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .map(|(row, _)| *row)
            .expect("nonempty window");
        for (n, &v) in best.iter().enumerate() {
            out.set(o, n, v == 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, f: usize) -> Tensor {
        Tensor::matrix(t, f, (0..t * f).map(|x| x as f64).collect()).unwrap()
    }

    #[test]
    fn single_frame_is_replicated() {
        let raw = ramp(1, 80);
        let out = frontend(&raw, 3, 6);
        assert_eq!(out.shape(), &[1, 560]);
        for k in 0..7 {
            assert_eq!(&out.row(0)[k * 80..(k + 1) * 80], raw.row(0));
        }
    }

    #[test]
    fn lengths() {
        assert_eq!(frontend(&ramp(13, 80), 3, 1).shape(), &[13, 560]);
        assert_eq!(frontend(&ramp(60, 80), 3, 6).shape(), &[10, 560]);
        assert_eq!(frontend(&ramp(61, 80), 3, 6).shape(), &[11, 560]);
        assert_eq!(frontend(&ramp(5, 4), 3, 1).cols(), 28);
    }

    #[test]
    fn stacking_order() {
        let raw = ramp(10, 1);
        let out = frontend(&raw, 3, 1);
        assert_eq!(out.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(out.row(5), &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(out.row(9), &[6.0, 7.0, 8.0, 9.0, 9.0, 9.0, 9.0]);
        let sub = frontend(&raw, 1, 4);
        assert_eq!(sub.to_rows(), vec![vec![0.0, 0.0, 1.0], vec![3.0, 4.0, 5.0], vec![7.0, 8.0, 9.0]]);
    }

    #[test]
    fn label_majority() {
        let rows = vec![
            vec![1, 0],
            vec![0, 1],
            vec![0, 1],
            vec![1, 1],
            vec![0, 0],
            vec![1, 0],
            vec![0, 1],
        ];
        let l = FrameLabels::from_rows(&rows).unwrap();
        let d = downsample_labels(&l, 3);
        assert_eq!(d.frames(), 3);
        assert_eq!(d.row(0), &[0, 1]);
        // Three distinct rows tie; the first wins.
        assert_eq!(d.row(1), &[1, 1]);
        assert_eq!(d.row(2), &[0, 1]);
        assert_eq!(downsample_labels(&l, 1), l);
    }
}
