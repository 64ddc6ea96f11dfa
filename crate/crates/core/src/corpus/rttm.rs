//! RTTM speaker-segment files.
//!
//! Each line is `SPEAKER <rec> <chan> <onset> <dur> <NA> <NA> <spk> <NA> <NA>`.
//! Blank lines and `;;` comments are skipped, as are lines whose type is
//! not `SPEAKER`.

use std::fmt::Write;

use super::CorpusError;
use crate::pse::FrameLabels;

#[derive(Clone, Debug, PartialEq)]
pub struct RttmSegment {
    pub recording_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker_id: String,
}

fn parse_err(line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Rttm {
        line,
        msg: msg.into(),
    }
}

pub fn rttm_parse(text: &str) -> Result<Vec<RttmSegment>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(";;") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(parse_err(lineno, format!("expected 10 fields, found {}", fields.len())));
        }
        if fields[0] != "SPEAKER" {
            continue;
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(lineno, format!("bad {what} {s:?}")))
        };
        let onset = num(fields[3], "onset")?;
        let duration = num(fields[4], "duration")?;
        if onset < 0.0 {
            return Err(parse_err(lineno, "negative onset"));
        }
        if duration <= 0.0 {
            return Err(parse_err(lineno, "duration must be positive"));
        }
        out.push(RttmSegment {
            recording_id: fields[1].to_string(),
            onset,
            duration,
            speaker_id: fields[7].to_string(),
        });
    }
    Ok(out)
}

/// Renders segments with times at millisecond precision.
pub fn rttm_emit(segments: &[RttmSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        writeln!(
            s,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            seg.recording_id, seg.onset, seg.duration, seg.speaker_id
        )
        .expect("write to string");
    }
    s
}

/// Rasterizes segments: frame `t` is active for a speaker when its center
/// `(t + 0.5) * frame_shift` lies in `[onset, onset + duration)`.
/// `num_frames` defaults to the frame count covering the last segment end.
pub fn rttm_to_frame_labels(
    segments: &[RttmSegment],
    frame_shift: f64,
    speaker_order: &[String],
    num_frames: Option<usize>,
) -> Result<FrameLabels, CorpusError> {
    if !(frame_shift > 0.0) {
        return Err(CorpusError::Config("frame shift must be positive".into()));
    }
    if let Some(first) = segments.first() {
        if let Some(other) = segments.iter().find(|s| s.recording_id != first.recording_id) {
            return Err(CorpusError::Config(format!(
                "mixed recordings {} and {}",
                first.recording_id, other.recording_id
            )));
        }
    }
    let frames = num_frames.unwrap_or_else(|| {
        let end = segments
            .iter()
            .map(|s| s.onset + s.duration)
            .fold(0.0, f64::max);
        (end / frame_shift - 1e-9).ceil().max(0.0) as usize
    });
    let mut labels = FrameLabels::zeros(frames, speaker_order.len());
    for seg in segments {
        let n = speaker_order
            .iter()
            .position(|s| *s == seg.speaker_id)
            .ok_or_else(|| CorpusError::UnknownSpeaker(seg.speaker_id.clone()))?;
        let end = seg.onset + seg.duration;
        let first = ((seg.onset / frame_shift) - 0.5).ceil().max(0.0) as usize;
        for t in first..frames {
            let center = (t as f64 + 0.5) * frame_shift;
            if center >= end {
                break;
            }
            if center >= seg.onset {
                labels.set(t, n, true);
            }
        }
    }
    Ok(labels)
}

/// Converts runs of active frames into segments, one per run and speaker.
pub fn frame_labels_to_rttm(
    labels: &FrameLabels,
    frame_shift: f64,
    recording_id: &str,
    speaker_names: &[String],
) -> Vec<RttmSegment> {
    let mut segs = Vec::new();
    for n in 0..labels.speakers() {
        let mut t = 0;
        while t < labels.frames() {
            if !labels.get(t, n) {
                t += 1;
                continue;
            }
            let start = t;
            while t < labels.frames() && labels.get(t, n) {
                t += 1;
            }
            segs.push(RttmSegment {
                recording_id: recording_id.to_string(),
                onset: start as f64 * frame_shift,
                duration: (t - start) as f64 * frame_shift,
                speaker_id: speaker_names[n].clone(),
            });
        }
    }
    segs.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.speaker_id.cmp(&b.speaker_id)));
    segs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(rec: &str, onset: f64, dur: f64, spk: &str) -> RttmSegment {
        RttmSegment {
            recording_id: rec.into(),
            onset,
            duration: dur,
            speaker_id: spk.into(),
        }
    }

    #[test]
    fn parse_example_line() {
        let segs = rttm_parse("SPEAKER rec 1 0.00 1.50 <NA> <NA> spk1 <NA> <NA>").unwrap();
        assert_eq!(segs, vec![seg("rec", 0.0, 1.5, "spk1")]);
        assert!(rttm_parse("").unwrap().is_empty());
        assert!(rttm_parse(";; comment\n\nSPKR-INFO a 1 <NA> <NA> <NA> unknown x <NA> <NA>\n")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let text = "SPEAKER rec 1 0.00 1.50 <NA> <NA> a <NA> <NA>\nSPEAKER rec 1 x 1.0 <NA> <NA> a <NA> <NA>\n";
        match rttm_parse(text) {
            Err(CorpusError::Rttm { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(rttm_parse("SPEAKER rec 1 0.0"), Err(CorpusError::Rttm { line: 1, .. })));
        assert!(rttm_parse("SPEAKER rec 1 0.0 0.0 <NA> <NA> a <NA> <NA>").is_err());
        assert!(rttm_parse("SPEAKER rec 1 -1.0 1.0 <NA> <NA> a <NA> <NA>").is_err());
    }

    #[test]
    fn emit_formats_three_decimals() {
        let text = rttm_emit(&[seg("r", 1.23456, 0.5, "s")]);
        assert_eq!(text, "SPEAKER r 1 1.235 0.500 <NA> <NA> s <NA> <NA>\n");
    }

    #[test]
    fn one_second_segment_is_100_frames() {
        let l = rttm_to_frame_labels(&[seg("r", 0.0, 1.0, "a")], 0.01, &["a".into()], None).unwrap();
        assert_eq!(l.frames(), 100);
        assert!((0..100).all(|t| l.get(t, 0)));
    }

    #[test]
    fn abutting_segments_leave_no_gap() {
        let segs = [seg("r", 0.0, 0.5, "a"), seg("r", 0.5, 0.5, "a")];
        let l = rttm_to_frame_labels(&segs, 0.01, &["a".into()], None).unwrap();
        assert!((0..100).all(|t| l.get(t, 0)));
    }

    #[test]
    fn overlapping_speakers() {
        let segs = [seg("r", 0.0, 0.6, "a"), seg("r", 0.4, 0.6, "b")];
        let l = rttm_to_frame_labels(&segs, 0.01, &["a".into(), "b".into()], None).unwrap();
        for t in 0..100 {
            assert_eq!(l.get(t, 0), t < 60);
            assert_eq!(l.get(t, 1), t >= 40);
        }
        assert!(matches!(
            rttm_to_frame_labels(&segs, 0.01, &["a".into()], None),
            Err(CorpusError::UnknownSpeaker(_))
        ));
        let mixed = [seg("r", 0.0, 0.6, "a"), seg("q", 0.4, 0.6, "a")];
        assert!(rttm_to_frame_labels(&mixed, 0.01, &["a".into()], None).is_err());
    }

    #[test]
    fn labels_to_rttm_and_back() {
        let l = FrameLabels::from_rows(&[vec![1, 0], vec![1, 1], vec![0, 1], vec![0, 0], vec![1, 0]]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let segs = frame_labels_to_rttm(&l, 0.1, "r", &names);
        assert_eq!(segs.len(), 3);
        let back = rttm_to_frame_labels(&segs, 0.1, &names, Some(5)).unwrap();
        assert_eq!(back, l);
    }

    fn segment_strategy() -> impl Strategy<Value = RttmSegment> {
        (0u32..1_000_000, 1u32..100_000, 0usize..5).prop_map(|(on, dur, spk)| RttmSegment {
            recording_id: "rec1".into(),
            onset: on as f64 / 1000.0,
            duration: dur as f64 / 1000.0,
            speaker_id: format!("spk{spk}"),
        })
    }

    proptest! {
        #[test]
        fn parse_of_emit_is_exact(segs in proptest::collection::vec(segment_strategy(), 100)) {
            prop_assert_eq!(rttm_parse(&rttm_emit(&segs)).unwrap(), segs);
        }
    }
}
