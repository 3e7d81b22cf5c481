//! Gradient regularization between the final-exit gradient `g_f` and the
//! self-distillation gradient `g_s`.
//!
//! Both gradients are flattened over one global parameter ordering. When
//! they conflict (`g_f · g_s < 0`), `g_f` is projected onto the normal
//! plane of `g_s` before the two are summed:
//!
//! ```text
//! Proj(g_f) = g_f - (g_f·g_s / ‖g_s‖²) g_s
//! g*        = Proj(g_f) + g_s          if g_f·g_s < 0
//! g*        = g_f + g_s                otherwise
//! ```
//!
//! Only `g_f` is ever projected.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{bail, Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Below this squared norm of `g_s` the projection is skipped.
pub const MIN_NORM_SQ: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Parameter ordering shared by every flattened gradient of one store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<usize>)>) -> Arc<Self> {
        let mut offset = 0;
        let segments = entries
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let s = Segment {
                    name,
                    shape,
                    offset,
                    len,
                };
                offset += len;
                s
            })
            .collect();
        Arc::new(Self {
            segments,
            total: offset,
        })
    }

    /// One anonymous segment of `dim` values.
    pub fn flat(dim: usize) -> Arc<Self> {
        Self::new([("g".to_string(), vec![dim])])
    }

    pub fn of_store<T: Scalar>(store: &ParamStore<T>) -> Arc<Self> {
        Self::new(
            store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec())),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector<T> {
    layout: Arc<Layout>,
    values: Vec<T>,
}

impl<T: Scalar> GradVector<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![T::zero(); layout.total];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.total {
            bail!(
                Dimension,
                "{} values for a layout of {}",
                values.len(),
                layout.total
            );
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn segment_values(&self, name: &str) -> Option<&[T]> {
        self.layout
            .segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if !Arc::ptr_eq(&self.layout, &other.layout) && *self.layout != *other.layout {
            bail!(Contract, "gradient vectors have different layouts");
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: T) {
        for v in &mut self.values {
            *v = *v * c;
        }
    }

    /// Splits the vector back into named tensors.
    pub fn unflatten(&self) -> BTreeMap<String, Tensor<T>> {
        self.layout
            .segments
            .iter()
            .map(|s| {
                let data = self.values[s.offset..s.offset + s.len].to_vec();
                (
                    s.name.clone(),
                    Tensor::new(s.shape.clone(), data).expect("segment shape matches length"),
                )
            })
            .collect()
    }
}

/// Flattens a named gradient map. Parameters missing from the map are
/// zero; names that are not in the layout are an error.
pub fn flatten<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>, layout: &Arc<Layout>) -> Result<GradVector<T>> {
    let mut out = GradVector::zeros(layout.clone());
    for (name, g) in grads {
        let Some(seg) = layout.segment(name) else {
            bail!(Contract, "gradient for unknown parameter {name:?}");
        };
        if g.len() != seg.len {
            bail!(
                Dimension,
                "gradient for {} has {} values, expected {}",
                name,
                g.len(),
                seg.len
            );
        }
        out.values[seg.offset..seg.offset + seg.len].copy_from_slice(g.data());
    }
    Ok(out)
}

/// Flattens tape gradients whose parameter ids follow the store order the
/// layout was built from.
pub fn flatten_tape<T: Scalar>(grads: &Gradients<T>, layout: &Arc<Layout>) -> Result<GradVector<T>> {
    let mut out = GradVector::zeros(layout.clone());
    for (id, g) in grads.touched() {
        let Some(seg) = layout.segments.get(id) else {
            bail!(Contract, "gradient for parameter id {id} outside the layout");
        };
        if g.len() != seg.len {
            bail!(Dimension, "gradient for {} has {} values", seg.name, g.len());
        }
        out.values[seg.offset..seg.offset + seg.len].copy_from_slice(g.data());
    }
    Ok(out)
}

/// Result of one regularization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularized<T> {
    pub g_star: GradVector<T>,
    pub conflicted: bool,
    pub dot: f64,
    pub norm_f: f64,
    pub norm_s: f64,
}

/// Projects `g_f` away from `g_s` when they conflict and returns the
/// combined update direction.
pub fn regularize<T: Scalar>(g_f: &GradVector<T>, g_s: &GradVector<T>) -> Result<Regularized<T>> {
    g_f.check_layout(g_s)?;
    let dot = g_f.dot(g_s);
    let ns2 = g_s.norm_sq();
    let conflicted = dot < 0.0 && ns2 >= MIN_NORM_SQ;
    let g_star = if conflicted {
        let c = dot / ns2;
        let values = g_f
            .values
            .iter()
            .zip(&g_s.values)
            .map(|(&f, &s)| {
                let (f, s) = (f.as_f64(), s.as_f64());
                T::from_f64_lossy((f - c * s) + s)
            })
            .collect();
        GradVector {
            layout: g_f.layout.clone(),
            values,
        }
    } else {
        g_f.add(g_s)?
    };
    Ok(Regularized {
        g_star,
        conflicted,
        dot,
        norm_f: g_f.norm(),
        norm_s: ns2.sqrt(),
    })
}

/// `Proj(g_f)` on its own (no `g_s` added), for diagnostics and tests.
pub fn project<T: Scalar>(g_f: &GradVector<T>, g_s: &GradVector<T>) -> Result<GradVector<T>> {
    g_f.check_layout(g_s)?;
    let dot = g_f.dot(g_s);
    let ns2 = g_s.norm_sq();
    if !(dot < 0.0 && ns2 >= MIN_NORM_SQ) {
        return Ok(g_f.clone());
    }
    let c = dot / ns2;
    let values = g_f
        .values
        .iter()
        .zip(&g_s.values)
        .map(|(&f, &s)| T::from_f64_lossy(f.as_f64() - c * s.as_f64()))
        .collect();
    Ok(GradVector {
        layout: g_f.layout.clone(),
        values,
    })
}

/// One line of the optional per-step conflict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub step: u64,
    pub dot: f64,
    pub norm_f: f64,
    pub norm_s: f64,
    pub conflicted: bool,
}

pub fn append_conflict_log(path: &Path, records: &[ConflictRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
