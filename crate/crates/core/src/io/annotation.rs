//! Plain-text box annotations: one object per line as
//! `class_id cx cy w h [confidence]`, normalized coordinates, whitespace
//! separated. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::boxes::{BBox, GroundTruth};
use crate::eval::Detection;
use crate::network::DEFAULT_NUM_CLASSES;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 5 or 6 fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Present only in detector output.
    pub confidence: Option<f64>,
}

impl Annotation {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn to_ground_truth(&self) -> GroundTruth {
        GroundTruth {
            class_id: self.class_id,
            bbox: self.bbox().clamp_unit(),
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            class_id: self.class_id,
            bbox: self.bbox().clamp_unit(),
            confidence: self.confidence.unwrap_or(1.0),
        }
    }

    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        Self::from_box(gt.class_id, &gt.bbox, None)
    }

    /// The detection's box clipped to the image, with its confidence.
    pub fn from_detection(d: &Detection) -> Self {
        Self::from_box(d.class_id, &d.bbox, Some(d.confidence))
    }

    fn from_box(class_id: usize, b: &BBox, confidence: Option<f64>) -> Self {
        let b = b.clamp_unit();
        let (cx, cy) = b.center();
        Self {
            class_id,
            cx,
            cy,
            w: b.width(),
            h: b.height(),
            confidence,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.class_id >= DEFAULT_NUM_CLASSES {
            return Err(format!("class id {} not in 0..{DEFAULT_NUM_CLASSES}", self.class_id));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err("box has zero size".into());
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("confidence {c} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

fn parse_line(line: usize, text: &str) -> Result<Option<Annotation>, AnnotationError> {
    let body = text.split('#').next().unwrap_or("");
    let fields: Vec<&str> = body.split_whitespace().collect();
    if fields.is_empty() {
        return Ok(None);
    }
    if fields.len() != 5 && fields.len() != 6 {
        return Err(AnnotationError::FieldCount {
            line,
            found: fields.len(),
        });
    }
    let invalid = |reason: String| AnnotationError::Invalid { line, reason };
    let class_id = fields[0]
        .parse::<usize>()
        .map_err(|_| invalid(format!("class id {:?} is not a non-negative integer", fields[0])))?;
    let mut v = [0.0f64; 5];
    for (k, f) in fields[1..].iter().enumerate() {
        v[k] = f
            .parse::<f64>()
            .map_err(|_| invalid(format!("{f:?} is not a number")))?;
    }
    let a = Annotation {
        class_id,
        cx: v[0],
        cy: v[1],
        w: v[2],
        h: v[3],
        confidence: (fields.len() == 6).then_some(v[4]),
    };
    a.validate().map_err(invalid)?;
    Ok(Some(a))
}

/// Parses a whole file; errors carry 1-based line numbers.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, AnnotationError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(a) = parse_line(i + 1, line)? {
            out.push(a);
        }
    }
    Ok(out)
}

/// Shortest decimal forms, so parsing the output gives back the same values.
pub fn format_annotation(a: &Annotation) -> String {
    let mut s = format!("{} {} {} {} {}", a.class_id, a.cx, a.cy, a.w, a.h);
    if let Some(c) = a.confidence {
        let _ = write!(s, " {c}");
    }
    s
}

pub fn format_annotations(items: &[Annotation]) -> String {
    items.iter().map(|a| format_annotation(a) + "\n").collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(&text)
}

pub fn write_annotations(path: &Path, items: &[Annotation]) -> Result<(), AnnotationError> {
    std::fs::write(path, format_annotations(items)).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments() {
        let text = "# header\n0 0.5 0.5 0.2 0.3\n\n2 0.1 0.9 0.05 0.1 0.75 # det\n";
        let a = parse_annotations(text).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].confidence, None);
        assert_eq!(a[1].class_id, 2);
        assert_eq!(a[1].confidence, Some(0.75));
    }

    #[test]
    fn round_trip() {
        let a = Annotation {
            class_id: 1,
            cx: 0.1 + 0.2,
            cy: 1.0 / 3.0,
            w: 0.25,
            h: 1e-3,
            confidence: Some(0.123456789),
        };
        let back = parse_annotations(&format_annotation(&a)).unwrap();
        assert_eq!(back, vec![a]);
    }

    #[test]
    fn errors_name_lines() {
        match parse_annotations("0 0.5 0.5 0.2 0.2\n0 0.5 0.5\n") {
            Err(AnnotationError::FieldCount { line: 2, found: 3 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_annotations("\n\n3 0.5 0.5 0.1 0.1"),
            Err(AnnotationError::Invalid { line: 3, .. })
        ));
        assert!(matches!(
            parse_annotations("0 0.5 x 0.1 0.1"),
            Err(AnnotationError::Invalid { line: 1, .. })
        ));
        assert!(matches!(
            parse_annotations("0 0.5 0.5 1.5 0.1"),
            Err(AnnotationError::Invalid { line: 1, .. })
        ));
    }
}
