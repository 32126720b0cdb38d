//! The four pre-training loss terms and their weighted sum.
//!
//! Every term is an L1 distance averaged over rows (vertices or joints) and
//! summed over coordinates. The reprojection term compares weak-perspective
//! projections with perspective 2D joints, both mapped to `[-1, 1]`.

use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub vertex: f64,
    pub joint: f64,
    pub regressed_joint: f64,
    pub projection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vertex: 1.0,
            joint: 1.0,
            regressed_joint: 1.0,
            projection: 1.0,
        }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_v: f64,
    pub l_j: f64,
    pub l_j_reg: f64,
    pub l_j_proj: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_v,l_j,l_j_reg,l_j_proj,total,lr";

    pub fn csv_row(&self, step: u64, lr: f64) -> String {
        format!(
            "{step},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.l_v, self.l_j, self.l_j_reg, self.l_j_proj, self.total, lr
        )
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_v += r.l_v;
            m.l_j += r.l_j;
            m.l_j_reg += r.l_j_reg;
            m.l_j_proj += r.l_j_proj;
            m.total += r.total;
        }
        m.l_v /= n;
        m.l_j /= n;
        m.l_j_reg /= n;
        m.l_j_proj /= n;
        m.total /= n;
        m
    }
}

fn rows_of<T: Real>(tape: &Tape<T>, v: Var, cols: usize, context: &'static str, target_len: usize) -> Result<usize> {
    let t = tape.value(v);
    if t.cols() != cols || t.len() != target_len {
        return Err(Error::dim(context, format!("{} values of width {cols}", t.len()), format!("{target_len} targets")));
    }
    Ok(t.rows())
}

/// `(1/M) sum_i |V_i - Vgt_i|_1` for an `M x 3` prediction.
pub fn vertex_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &[T]) -> Result<Var> {
    rows_of(tape, pred, 3, "vertex_loss", gt.len())?;
    tape.l1_rows(pred, gt, None)
}

/// Same form as [`vertex_loss`] over `K` joints.
pub fn joint_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &[T]) -> Result<Var> {
    rows_of(tape, pred, 3, "joint_loss", gt.len())?;
    tape.l1_rows(pred, gt, None)
}

/// Joint loss on `G V` where `regressor` is a `K x M` constant.
pub fn regressed_joint_loss<T: Real>(tape: &mut Tape<T>, vertices: Var, regressor: Var, gt: &[T]) -> Result<Var> {
    let m = tape.value(vertices).rows();
    if tape.value(regressor).cols() != m {
        return Err(Error::dim("regressed_joint_loss", format!("regressor with {m} columns"), tape.value(regressor).cols()));
    }
    let joints = tape.matmul(regressor, vertices)?;
    joint_loss(tape, joints, gt)
}

/// L1 reprojection error over visible joints in `[-1, 1]` coordinates.
///
/// `joints` is `K x 3`, `scale` a `1 x 1` variable, `translation` a `1 x 2`
/// variable in pixels and `joints2d` holds `K` pixel pairs. The sum over
/// visible joints is divided by `K`. Returns `None` alongside the loss when no
/// joint is visible.
pub fn reprojection_loss<T: Real>(
    tape: &mut Tape<T>,
    joints: Var,
    scale: Var,
    translation: Var,
    joints2d: &[T],
    visibility: &[bool],
    image_size: (usize, usize),
) -> Result<Var> {
    let k = tape.value(joints).rows();
    if tape.value(joints).cols() != 3 || joints2d.len() != 2 * k || visibility.len() != k {
        return Err(Error::dim(
            "reprojection_loss",
            format!("{k} joints"),
            format!("{} 2D values, {} flags", joints2d.len(), visibility.len()),
        ));
    }
    if !visibility.iter().any(|v| *v) {
        log::warn!("reprojection loss: no visible joints, term is zero");
    }
    let xy = tape.slice_cols(joints, 0, 2)?;
    let scaled = tape.scale_by(xy, scale)?;
    let projected = tape.add_row(scaled, translation)?;
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    // u_n = u * 2 / W - 1; the -1 shift cancels against the target's.
    let sx = T::of(2.0 / w);
    let sy = T::of(2.0 / h);
    let norm_scale = tape.constant(Tensor::new(vec![1, 2], vec![sx, sy])?);
    let ones = tape.constant(Tensor::full(&[k, 1], T::one()));
    let factor = tape.matmul(ones, norm_scale)?;
    let normalized = tape.mul(projected, factor)?;
    let target: Vec<T> = joints2d.chunks(2).flat_map(|p| [p[0] * sx, p[1] * sy]).collect();
    let weights: Vec<T> = visibility.iter().map(|v| if *v { T::one() } else { T::zero() }).collect();
    tape.l1_rows(normalized, &target, Some(&weights))
}

/// Loss-term variables for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_v: Var,
    pub l_j: Var,
    pub l_j_reg: Var,
    pub l_j_proj: Var,
}

/// Weighted sum of the four terms, plus the unweighted values.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let parts = [
        (terms.l_v, weights.vertex),
        (terms.l_j, weights.joint),
        (terms.l_j_reg, weights.regressed_joint),
        (terms.l_j_proj, weights.projection),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in parts {
        let scaled = tape.scale(v, T::of(w))?;
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("four terms");
    let val = |v: Var| tape.value(v).item().f64();
    let report = LossReport {
        l_v: val(terms.l_v),
        l_j: val(terms.l_j),
        l_j_reg: val(terms.l_j_reg),
        l_j_proj: val(terms.l_j_proj),
        total: val(total),
    };
    Ok((total, report))
}
