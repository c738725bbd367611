//! Image and annotation files.

mod annotation;
mod ppm;

pub use annotation::{
    format_annotation, format_annotations, parse_annotations, read_annotations, write_annotations, Annotation,
    AnnotationError,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, resize_nearest, write_ppm, PpmError};
