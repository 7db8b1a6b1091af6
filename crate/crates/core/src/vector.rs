//! Flat gradient and weight containers with a per-layer segmentation map.

use std::sync::Arc;

use crate::error::{DgcError, Result};

/// One named, contiguous slice of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub extent: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.extent
    }
}

/// Ordered, contiguous, non-overlapping segments covering `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl LayerLayout {
    /// Builds a layout from `(name, extent)` pairs laid out back to back.
    pub fn from_extents<S: Into<String>>(
        extents: impl IntoIterator<Item = (S, usize)>,
    ) -> Result<Self> {
        let mut segments = Vec::new();
        let mut offset = 0usize;
        for (name, extent) in extents {
            let name = name.into();
            if extent == 0 {
                return Err(DgcError::InvalidLayout(format!(
                    "segment `{name}` has zero extent"
                )));
            }
            segments.push(Segment {
                name,
                offset,
                extent,
            });
            offset += extent;
        }
        if segments.is_empty() {
            return Err(DgcError::InvalidLayout("layout has no segments".into()));
        }
        Ok(Self {
            segments,
            len: offset,
        })
    }

    /// A layout made of a single segment.
    pub fn single(name: &str, len: usize) -> Result<Self> {
        Self::from_extents([(name, len)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total element count M.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat 32-bit gradient (or weight) vector tied to a shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f32>,
    layout: Arc<LayerLayout>,
}

impl GradientVector {
    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(values: Vec<f32>, layout: Arc<LayerLayout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(DgcError::LengthMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DgcError::NonFinite { index: i });
        }
        Ok(Self { values, layout })
    }

    /// Wraps values in a fresh single-segment layout.
    pub fn from_flat(values: Vec<f32>) -> Result<Self> {
        let layout = Arc::new(LayerLayout::single("flat", values.len())?);
        Self::from_values(values, layout)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access for single-writer updates. Callers keep values finite.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn same_layout(&self, other: &GradientVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn ensure_same_layout(&self, other: &GradientVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(DgcError::LayoutMismatch)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Euclidean norm with 64-bit accumulation. Empty input gives 0.
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| {
            let x = f64::from(x);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Returns `alpha * x + y`.
pub fn saxpy(alpha: f32, x: &GradientVector, y: &GradientVector) -> Result<GradientVector> {
    x.ensure_same_layout(y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xi, &yi)| alpha * xi + yi)
        .collect();
    Ok(GradientVector {
        values,
        layout: Arc::clone(&y.layout),
    })
}
