//! Geometric value types shared by the simulator, the model and the
//! training code. Coordinates are millimetres, forces newtons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
#[cfg(test)]
pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// An ordered set of N points in 3-D. Point order carries identity: row `n`
/// of an input cloud and row `n` of its target describe the same material
/// point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud must contain at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.points.len(), 3]
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range for {} points", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(points)
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }
}

/// Per-point displacement, index-aligned with a companion [`PointCloud`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    deltas: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(deltas: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = deltas.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidArgument(format!("displacement {i} is not finite")));
        }
        Ok(DisplacementField { deltas })
    }

    pub fn zeros(n: usize) -> Self {
        DisplacementField { deltas: vec![[0.0; 3]; n] }
    }

    /// `to - from`, row by row.
    pub fn between(from: &PointCloud, to: &PointCloud) -> Result<Self> {
        if from.len() != to.len() {
            return Err(Error::shape(&from.shape(), &to.shape(), "displacement between clouds"));
        }
        let deltas = from.points().iter().zip(to.points()).map(|(a, b)| sub3(*b, *a)).collect();
        DisplacementField::new(deltas)
    }

    pub fn deltas(&self) -> &[Vec3] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.deltas.len(), 3]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let deltas = indices
            .iter()
            .map(|&i| {
                self.deltas
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range for {} rows", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DisplacementField { deltas })
    }
}

/// Indenter tip start and end coordinates, flattened as `[c_s, c_e]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub start: Vec3,
    pub end: Vec3,
}

impl Condition {
    pub fn new(start: Vec3, end: Vec3) -> Result<Self> {
        if start.iter().chain(end.iter()).any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("condition components must be finite".into()));
        }
        Ok(Condition { start, end })
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.start[0], self.start[1], self.start[2], self.end[0], self.end[1], self.end[2]]
    }

    pub fn from_slice(c: &[f64]) -> Result<Self> {
        if c.len() != 6 {
            return Err(Error::shape(&[c.len()], &[6], "condition vector"));
        }
        Condition::new([c[0], c[1], c[2]], [c[3], c[4], c[5]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Grid index of the indented mass.
    pub location: usize,
    pub direction: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Row of the indented mass inside `Sample::input`.
    pub contact_row: usize,
}

/// One supervised example: `(input, condition) -> (target_displacement, target_force_change)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: PointCloud,
    pub condition: Condition,
    pub target_displacement: DisplacementField,
    pub target_force_change: f64,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(
        input: PointCloud,
        condition: Condition,
        target_displacement: DisplacementField,
        target_force_change: f64,
        meta: SampleMeta,
    ) -> Result<Self> {
        if input.len() != target_displacement.len() {
            return Err(Error::shape(&input.shape(), &target_displacement.shape(), "sample target"));
        }
        if !(target_force_change > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target force change must be positive, got {target_force_change}"
            )));
        }
        if meta.contact_row >= input.len() {
            return Err(Error::InvalidArgument("contact row out of range".into()));
        }
        Ok(Sample { input, condition, target_displacement, target_force_change, meta })
    }

    /// Ground-truth deformed cloud `y = x + target_displacement`.
    pub fn target_cloud(&self) -> PointCloud {
        apply_displacement(&self.input, &self.target_displacement).expect("sample shapes validated at construction")
    }
}

/// `x + d`, row by row.
pub fn apply_displacement(x: &PointCloud, d: &DisplacementField) -> Result<PointCloud> {
    if x.len() != d.len() {
        return Err(Error::shape(&x.shape(), &d.shape(), "apply_displacement"));
    }
    let points = x
        .points()
        .iter()
        .zip(d.deltas())
        .map(|(p, q)| [p[0] + q[0], p[1] + q[1], p[2] + q[2]])
        .collect();
    PointCloud::new(points)
}

/// `(1/N) Σ ‖a_n − b_n‖₂`.
pub fn mean_euclidean_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(&a.shape(), &b.shape(), "mean_euclidean_distance"));
    }
    let mut sum = 0.0;
    for (p, q) in a.points().iter().zip(b.points()) {
        sum += norm3(sub3(*p, *q));
    }
    Ok(sum / a.len() as f64)
}
