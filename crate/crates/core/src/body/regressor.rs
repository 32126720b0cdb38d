use super::Vec3;
use crate::{Error, Result};

pub const DEFAULT_REGRESSOR_SUPPORT: usize = 8;

/// Sparse row-stochastic `K x M` matrix mapping mesh vertices to joints.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    /// Per joint: `(vertex, weight)` pairs, weights summing to one.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub vertex_count: usize,
}

impl JointRegressor {
    pub fn joint_count(&self) -> usize {
        self.rows.len()
    }

    pub fn apply(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        if vertices.len() != self.vertex_count {
            return Err(Error::dim("joint regressor input", self.vertex_count, vertices.len()));
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(v, w)| acc + vertices[v] * w))
            .collect())
    }

    /// Dense row-major `K x M` copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * self.vertex_count];
        for (j, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                out[j * self.vertex_count + v] += w;
            }
        }
        out
    }

    /// One-hot rows picking the given vertices.
    pub fn one_hot(picks: &[usize], vertex_count: usize) -> Self {
        Self {
            rows: picks.iter().map(|&v| vec![(v, 1.0)]).collect(),
            vertex_count,
        }
    }
}

/// For every joint take its `support` nearest template vertices and weight
/// them by inverse distance.
pub fn build_joint_regressor(template_vertices: &[Vec3], template_joints: &[Vec3], support: usize) -> Result<JointRegressor> {
    let m = template_vertices.len();
    if support == 0 {
        return Err(Error::config("regressor support must be positive"));
    }
    if m < support {
        return Err(Error::Degenerate(format!("mesh has {m} vertices, regressor needs {support}")));
    }
    let rows = template_joints
        .iter()
        .map(|j| {
            let mut d: Vec<(usize, f64)> = template_vertices.iter().map(|v| (v - j).norm()).enumerate().collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.truncate(support);
            let inv: Vec<(usize, f64)> = d.iter().map(|&(i, dist)| (i, 1.0 / (dist + 1e-6))).collect();
            let total: f64 = inv.iter().map(|x| x.1).sum();
            inv.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect();
    Ok(JointRegressor { rows, vertex_count: m })
}
