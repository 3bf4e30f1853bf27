//! One JSON object per line: `{"frame":0,"x":..,"y":..,"w":..,"h":..}`.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    frame: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

pub fn save_annotations(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for (frame, b) in boxes.iter().enumerate() {
        let r = Record { frame, x: b.x, y: b.y, w: b.w, h: b.h };
        out.push_str(&serde_json::to_string(&r).expect("plain record"));
        out.push('\n');
    }
    out
}

/// Parse annotations; frame indices must run 0, 1, 2, ... Blank lines are
/// ignored. Line numbers in errors are 1-based.
pub fn load_annotations(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line)
            .map_err(|e| Error::Annotation { line: i + 1, msg: e.to_string() })?;
        if r.frame != boxes.len() {
            return Err(Error::Annotation {
                line: i + 1,
                msg: format!("frame index {} where {} was expected", r.frame, boxes.len()),
            });
        }
        boxes.push(BBox::new(r.x, r.y, r.w, r.h));
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(raw in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4, 0f64..1e3, 0f64..1e3), 0..40)) {
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h)| BBox::new(x, y, w, h)).collect();
            prop_assert_eq!(load_annotations(&save_annotations(&boxes)).unwrap(), boxes);
        }
    }

    #[test]
    fn empty_file() {
        assert!(load_annotations("").unwrap().is_empty());
    }

    #[test]
    fn out_of_order_names_line() {
        let text = "{\"frame\":0,\"x\":1,\"y\":2,\"w\":3,\"h\":4}\n{\"frame\":2,\"x\":1,\"y\":2,\"w\":3,\"h\":4}\n";
        match load_annotations(text) {
            Err(Error::Annotation { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line() {
        let err = load_annotations("{\"frame\":0,\"x\":1}\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
