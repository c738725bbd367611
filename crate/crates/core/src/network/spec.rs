//! Declarative layer lists and shape propagation.

use crate::tensor::{Activation, Shape};

use super::NetworkError;

/// Anchor priors `(p_w, p_h)` in 13x13 grid-cell units.
pub const DEFAULT_ANCHORS: [(f64, f64); 5] = [
    (1.08, 1.19),
    (3.42, 4.41),
    (6.63, 11.38),
    (9.42, 5.11),
    (16.62, 10.52),
];

pub const DEFAULT_NUM_CLASSES: usize = 3;

pub const CLASS_NAMES: [&str; 3] = ["car", "person", "driver"];

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolutional {
        filters: usize,
        kernel: usize,
        /// Batch norm + leaky when true, bias + linear otherwise.
        batch_norm: bool,
    },
    MaxPool,
    /// Concatenates the outputs of `sources` along channels, in order.
    Route { sources: Vec<usize> },
    Reorg { stride: usize },
    Detection,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional { .. } => "convolutional",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Route { .. } => "route",
            LayerKind::Reorg { .. } => "reorg",
            LayerKind::Detection => "detection",
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            LayerKind::Convolutional { batch_norm: true, .. } => Some(Activation::Leaky),
            LayerKind::Convolutional { batch_norm: false, .. } => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
}

fn conv(filters: usize, kernel: usize) -> LayerKind {
    LayerKind::Convolutional {
        filters,
        kernel,
        batch_norm: true,
    }
}

/// The 31-layer ladder with every filter count divided by `width_div`.
/// Without `first_pool` the maxpool after layer 0 is dropped (30 layers, one
/// less halving) and route sources shift down by one.
fn ladder(width_div: usize, head_filters: usize, first_pool: bool) -> Vec<LayerSpec> {
    let f = |n: usize| n / width_div;
    let mut kinds = vec![
        conv(f(32), 3),
        LayerKind::MaxPool,
        conv(f(64), 3),
        LayerKind::MaxPool,
        conv(f(128), 3),
        conv(f(64), 1),
        conv(f(128), 3),
        LayerKind::MaxPool,
        conv(f(256), 3),
        conv(f(128), 1),
        conv(f(256), 3),
        LayerKind::MaxPool,
        conv(f(512), 3),
        conv(f(256), 1),
        conv(f(512), 3),
        conv(f(256), 1),
        conv(f(512), 3),
        LayerKind::MaxPool,
        conv(f(1024), 3),
        conv(f(512), 1),
        conv(f(1024), 3),
        conv(f(512), 1),
        conv(f(1024), 3),
        conv(f(1024), 3),
        conv(f(1024), 3),
        LayerKind::Route { sources: vec![16] },
        LayerKind::Reorg { stride: 2 },
        LayerKind::Route { sources: vec![26, 24] },
        conv(f(1024), 3),
        LayerKind::Convolutional {
            filters: head_filters,
            kernel: 1,
            batch_norm: false,
        },
        LayerKind::Detection,
    ];
    if !first_pool {
        kinds.remove(1);
        for k in &mut kinds {
            if let LayerKind::Route { sources } = k {
                sources.iter_mut().for_each(|s| *s -= 1);
            }
        }
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(index, kind)| LayerSpec { index, kind })
        .collect()
}

/// The full 416x416 detector.
pub fn iyolo_spec() -> NetworkSpec {
    let anchors = DEFAULT_ANCHORS.to_vec();
    let head = anchors.len() * (5 + DEFAULT_NUM_CLASSES);
    NetworkSpec {
        input_shape: (3, 416, 416),
        layers: ladder(1, head, true),
        anchors,
        num_classes: DEFAULT_NUM_CLASSES,
    }
}

pub const TINY_INPUT: usize = 64;
pub const TINY_GRID: usize = 4;

/// Same topology on a 64x64 input with channel widths divided by 8 and the
/// first maxpool removed, giving a 4x4 grid. Anchor priors are rescaled from
/// the 13-cell grid to the 4-cell grid.
pub fn tiny_spec(num_classes: usize) -> NetworkSpec {
    let scale = TINY_GRID as f64 / 13.0;
    let anchors: Vec<(f64, f64)> = DEFAULT_ANCHORS
        .iter()
        .map(|&(w, h)| (w * scale, h * scale))
        .collect();
    let head = anchors.len() * (5 + num_classes);
    NetworkSpec {
        input_shape: (3, TINY_INPUT, TINY_INPUT),
        layers: ladder(8, head, false),
        anchors,
        num_classes,
    }
}

impl NetworkSpec {
    fn invalid(layer: usize, reason: impl Into<String>) -> NetworkError {
        NetworkError::InvalidSpec {
            layer,
            reason: reason.into(),
        }
    }

    /// Channels per anchor in the raw head: 4 box terms, objectness, classes.
    pub fn entries_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        self.anchors.len() * self.entries_per_anchor()
    }

    /// Checks structural invariants and returns every layer's output shape.
    pub fn validate(&self) -> Result<Vec<Shape>, NetworkError> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Self::invalid(0, "input shape must be non-empty"));
        }
        if self.layers.is_empty() {
            return Err(Self::invalid(0, "no layers"));
        }
        if self.anchors.is_empty() || self.num_classes == 0 {
            return Err(Self::invalid(0, "need at least one anchor and one class"));
        }
        if self.anchors.iter().any(|&(aw, ah)| !(aw > 0.0 && ah > 0.0 && aw.is_finite() && ah.is_finite())) {
            return Err(Self::invalid(0, "anchor sizes must be positive and finite"));
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.index != i {
                return Err(Self::invalid(i, format!("index {} is not contiguous", layer.index)));
            }
            let prev = if i == 0 { self.input_shape } else { shapes[i - 1] };
            let shape = match &layer.kind {
                LayerKind::Convolutional { filters, kernel, .. } => {
                    if *kernel != 1 && *kernel != 3 {
                        return Err(Self::invalid(i, format!("kernel {kernel} not in {{1, 3}}")));
                    }
                    if *filters == 0 {
                        return Err(Self::invalid(i, "zero filters"));
                    }
                    (*filters, prev.1, prev.2)
                }
                LayerKind::MaxPool => {
                    if prev.1 % 2 != 0 || prev.2 % 2 != 0 {
                        return Err(Self::invalid(i, format!("cannot pool odd map {}x{}", prev.1, prev.2)));
                    }
                    (prev.0, prev.1 / 2, prev.2 / 2)
                }
                LayerKind::Reorg { stride } => {
                    if *stride == 0 || prev.1 % stride != 0 || prev.2 % stride != 0 {
                        return Err(Self::invalid(i, format!("map {}x{} not divisible by {stride}", prev.1, prev.2)));
                    }
                    (prev.0 * stride * stride, prev.1 / stride, prev.2 / stride)
                }
                LayerKind::Route { sources } => {
                    if sources.is_empty() {
                        return Err(Self::invalid(i, "route without sources"));
                    }
                    let mut out: Option<Shape> = None;
                    for &s in sources {
                        if s >= i {
                            return Err(Self::invalid(
                                i,
                                format!("route source {s} is not a strictly earlier layer"),
                            ));
                        }
                        let src = shapes[s];
                        out = Some(match out {
                            None => src,
                            Some(acc) => {
                                if (acc.1, acc.2) != (src.1, src.2) {
                                    return Err(Self::invalid(
                                        i,
                                        format!("route spatial mismatch {:?} vs {:?}", acc, src),
                                    ));
                                }
                                (acc.0 + src.0, acc.1, acc.2)
                            }
                        });
                    }
                    out.expect("non-empty sources")
                }
                LayerKind::Detection => {
                    if i != self.layers.len() - 1 {
                        return Err(Self::invalid(i, "detection must be the last layer"));
                    }
                    if !matches!(
                        i.checked_sub(1).map(|p| &self.layers[p].kind),
                        Some(LayerKind::Convolutional { batch_norm: false, .. })
                    ) {
                        return Err(Self::invalid(i, "detection must follow a linear convolution"));
                    }
                    if prev.0 != self.head_channels() {
                        return Err(Self::invalid(
                            i,
                            format!(
                                "head has {} channels, expected {} anchors x (5 + {}) = {}",
                                prev.0,
                                self.anchors.len(),
                                self.num_classes,
                                self.head_channels()
                            ),
                        ));
                    }
                    if prev.1 != prev.2 {
                        return Err(Self::invalid(i, "detection grid must be square"));
                    }
                    prev
                }
            };
            shapes.push(shape);
        }
        if !matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::Detection)) {
            return Err(Self::invalid(self.layers.len() - 1, "last layer must be detection"));
        }
        Ok(shapes)
    }

    /// Input shape of a layer, given the propagated output shapes.
    pub fn layer_input_shape(&self, shapes: &[Shape], index: usize) -> Shape {
        if index == 0 {
            self.input_shape
        } else {
            shapes[index - 1]
        }
    }

    /// Cells per side of the detection grid.
    pub fn grid_size(&self) -> Result<usize, NetworkError> {
        Ok(self.validate()?.last().expect("validated").1)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Convolutional { .. }))
    }

    /// Which layers consume each layer's output.
    pub(crate) fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Route { sources } => {
                    for &s in sources {
                        out[s].push(i);
                    }
                }
                _ if i > 0 => out[i - 1].push(i),
                _ => {}
            }
        }
        out
    }

    /// Human-readable layer table: `Number Layer Filters Size Output`.
    pub fn summary_table(&self) -> Result<String, NetworkError> {
        let shapes = self.validate()?;
        let mut s = format!("{:<7}{:<15}{:<9}{:<8}{}\n", "Number", "Layer", "Filters", "Size", "Output");
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            let (filters, size, output) = match &layer.kind {
                LayerKind::Convolutional { filters, kernel, .. } => (
                    filters.to_string(),
                    format!("{kernel}*{kernel}/1"),
                    format!("{}*{}", shape.1, shape.2),
                ),
                LayerKind::MaxPool => (String::new(), "2*2/2".into(), format!("{}*{}", shape.1, shape.2)),
                _ => (String::new(), String::new(), String::new()),
            };
            s.push_str(&format!(
                "{:<7}{:<15}{:<9}{:<8}{}\n",
                layer.index,
                layer.kind.name(),
                filters,
                size,
                output
            ));
        }
        Ok(s)
    }
}
