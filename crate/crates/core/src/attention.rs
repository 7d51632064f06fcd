//! Single-glimpse soft attention over a grid of cell features.
//!
//! Each cell gets a scalar score from a MUTAN scoring head conditioned on a
//! guide vector (the question feature for VQA, the answer feature for VQG).
//! The pooled feature is the softmax-weighted sum of the cells.

use rand::Rng;

use crate::autodiff::{softmax, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, FusionVars};
use crate::linalg::{Matrix, Vector};
use crate::params::{ArrayRef, Binder, ParamSet};

/// `height × width` cells of dimension `d_v`, stored one cell per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    cells: Matrix,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, cells: Matrix) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("feature grid must be nonempty".into()));
        }
        if cells.rows() != height * width {
            return Err(Error::shape(
                "feature_grid",
                format!("{} cell rows for a {height}x{width} grid", cells.rows()),
            ));
        }
        if !cells.is_finite() {
            return Err(Error::Numeric("feature grid has non-finite entries".into()));
        }
        Ok(Self { height, width, cells })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.cells.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.rows() == 0
    }

    pub fn d_v(&self) -> usize {
        self.cells.cols()
    }

    /// Row-major cell `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> Vector {
        Vector::from_vec(self.cells.row(row * self.width + col).to_vec())
    }

    pub fn cells(&self) -> &Matrix {
        &self.cells
    }
}

/// A scoring head: guide and cell are projected, fused through rank-R
/// slices with one output unit, and scaled by the 1×1 `w_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub head: FusionParams,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        d_guide: usize,
        d_v: usize,
        t: usize,
        t_v: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            head: FusionParams::init_scoring(d_guide, d_v, t, t_v, rank, rng)?,
        })
    }

    pub fn d_guide(&self) -> usize {
        self.head.d_q()
    }

    /// One unnormalized score per cell.
    pub fn scores(&self, grid: &FeatureGrid, guide: &Vector) -> Result<Vec<f64>> {
        self.check(grid, guide)?;
        (0..grid.len())
            .map(|i| {
                let cell = Vector::from_vec(grid.cells.row(i).to_vec());
                Ok(self.head.answer_feature(guide, &cell)?[0])
            })
            .collect()
    }

    fn check(&self, grid: &FeatureGrid, guide: &Vector) -> Result<()> {
        if guide.len() != self.head.d_q() {
            return Err(Error::shape(
                "attend",
                format!("guide has dim {}, head expects {}", guide.len(), self.head.d_q()),
            ));
        }
        if grid.d_v() != self.head.d_v() {
            return Err(Error::shape(
                "attend",
                format!("cells have dim {}, head expects {}", grid.d_v(), self.head.d_v()),
            ));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> AttentionVars {
        AttentionVars {
            head: self.head.bind(b),
            t_v: self.head.t_v(),
        }
    }
}

impl ParamSet for AttentionParams {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        self.head.arrays(prefix)
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.head.arrays_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub pooled: Vector,
    pub weights: Vec<f64>,
}

/// Softmax over `scores`, then `Σ_i w_i · cell_i`.
pub fn pool_with_scores(grid: &FeatureGrid, scores: &[f64]) -> Result<Attended> {
    if scores.len() != grid.len() {
        return Err(Error::shape(
            "pool_with_scores",
            format!("{} scores for {} cells", scores.len(), grid.len()),
        ));
    }
    let weights = softmax(scores);
    let pooled = grid.cells.t_matvec(&Vector::from_vec(weights.clone()))?;
    Ok(Attended { pooled, weights })
}

pub fn attend(grid: &FeatureGrid, guide: &Vector, params: &AttentionParams) -> Result<Attended> {
    let scores = params.scores(grid, guide)?;
    pool_with_scores(grid, &scores)
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionVars {
    head: FusionVars,
    t_v: usize,
}

impl AttentionVars {
    /// Pooled feature on tape. `cells` is the `n × d_v` grid matrix node.
    pub fn attend(&self, tape: &mut Tape, cells: Var, guide: Var) -> Result<Var> {
        let v_tilde = tape.matmul_t(cells, self.head.w_v)?;
        let g_tilde = tape.matvec(self.head.w_q, guide)?;
        let mut scores: Option<Var> = None;
        for &(m, n) in &self.head.slices {
            let c = tape.t_matvec(m, g_tilde)?;
            let n_flat = tape.reshape(n, Shape::Vector(self.t_v))?;
            let s = tape.matvec(v_tilde, n_flat)?;
            let term = tape.mul_scalar(s, c)?;
            scores = Some(match scores {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let scores = scores.ok_or_else(|| Error::Contract("attention head has no slices".into()))?;
        let scale = tape.reshape(self.head.w_a, Shape::Vector(1))?;
        let scores = tape.mul_scalar(scores, scale)?;
        let weights = tape.softmax(scores)?;
        tape.t_matvec(cells, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_tape_gradients;
    use crate::params::Binder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(seed: u64, h: usize, w: usize, d_v: usize) -> FeatureGrid {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid::new(h, w, Matrix::uniform(h * w, d_v, 1.0, &mut r)).unwrap()
    }

    fn params(seed: u64, d_g: usize, d_v: usize) -> AttentionParams {
        AttentionParams::init(d_g, d_v, 3, 2, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn equal_scores_give_the_mean_cell() {
        let g = grid(1, 2, 3, 4);
        let mut p = params(2, 3, 4);
        for s in &mut p.head.slices {
            s.m = Matrix::zeros(3, 1);
        }
        let out = attend(&g, &Vector::from_vec(vec![0.2, -0.4, 1.0]), &p).unwrap();
        let mut mean = Vector::zeros(4);
        for i in 0..g.len() {
            mean = mean.add(&Vector::from_vec(g.cells().row(i).to_vec())).unwrap();
        }
        let mean = mean.scale(1.0 / g.len() as f64);
        assert!(out.pooled.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn saturated_score_selects_its_cell() {
        let g = grid(3, 2, 2, 5);
        let scores = [0.0, 1000.0, 0.0, 0.0];
        let out = pool_with_scores(&g, &scores).unwrap();
        assert!(out.pooled.max_abs_diff(&g.cell(0, 1)) < 1e-9);
    }

    #[test]
    fn random_grid_matches_weighted_sum_oracle() {
        let g = grid(4, 2, 2, 3);
        let p = params(5, 4, 3);
        let guide = Vector::uniform(4, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let out = attend(&g, &guide, &p).unwrap();

        // oracle: score each cell by the explicit rank sum, softmax by hand
        let gt = p.head.w_q.matvec(&guide).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|i| {
                let vt = p.head.w_v.matvec(&Vector::from_vec(g.cells().row(i).to_vec())).unwrap();
                let mut s = 0.0;
                for sl in &p.head.slices {
                    let a: f64 = (0..3).map(|k| sl.m.get(k, 0) * gt[k]).sum();
                    let b: f64 = (0..2).map(|k| sl.n.get(k, 0) * vt[k]).sum();
                    s += a * b;
                }
                s * p.head.w_a.get(0, 0)
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut want = vec![0.0; 3];
        for (i, s) in scores.iter().enumerate() {
            for (d, w) in want.iter_mut().enumerate() {
                *w += s.exp() / z * g.cells().get(i, d);
            }
        }
        assert!(out.pooled.max_abs_diff(&Vector::from_vec(want)) < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = grid(7, 2, 2, 3);
        let p = params(8, 4, 3);
        assert!(attend(&g, &Vector::zeros(3), &p).is_err());
        assert!(attend(&grid(9, 2, 2, 4), &Vector::zeros(4), &p).is_err());
        assert!(FeatureGrid::new(0, 2, Matrix::zeros(0, 3)).is_err());
        assert!(FeatureGrid::new(2, 2, Matrix::zeros(3, 3)).is_err());
        assert!(pool_with_scores(&g, &[0.0; 3]).is_err());
    }

    #[test]
    fn tape_attention_matches_direct() {
        let g = grid(10, 2, 3, 4);
        let p = params(11, 5, 4);
        let guide = Vector::uniform(5, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let want = attend(&g, &guide, &p).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let vars = p.bind(&mut b);
        let cells = tape.constant(g.cells().clone());
        let gv = tape.constant(guide);
        let got = vars.attend(&mut tape, cells, gv).unwrap();
        assert!(tape.vector(got).unwrap().max_abs_diff(&want.pooled) < 1e-12);
    }

    #[test]
    fn tape_attention_gradients() {
        let g = grid(13, 2, 2, 3);
        let p = params(14, 3, 3);
        let guide = Vector::uniform(3, 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let mut inputs: Vec<crate::autodiff::Value> = vec![g.cells().clone().into(), guide.into()];
        for a in p.head.arrays("") {
            inputs.push(Matrix::from_vec(a.dims[0], a.dims[1], a.data.to_vec()).unwrap().into());
        }
        let err = check_tape_gradients(
            &inputs,
            &|tape, x| {
                let slices = (0..2).map(|r| (x[5 + 2 * r], x[6 + 2 * r])).collect();
                let vars = AttentionVars {
                    head: FusionVars {
                        w_q: x[2],
                        w_v: x[3],
                        w_a: x[4],
                        slices,
                    },
                    t_v: 2,
                };
                let pooled = vars.attend(tape, x[0], x[1])?;
                let sq = tape.mul(pooled, pooled)?;
                Ok(tape.sum(sq))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "gradient error {err}");
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_and_pooling_stays_in_hull(seed in 0u64..500, scale in 0.1f64..20.0) {
            let g = grid(seed, 2, 3, 4);
            let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
            let scores: Vec<f64> = (0..6).map(|_| scale * r.gen_range(-1.0..1.0)).collect();
            let out = pool_with_scores(&g, &scores).unwrap();
            prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for d in 0..4 {
                let col = g.cells().column(d);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.pooled[d] >= lo - 1e-12 && out.pooled[d] <= hi + 1e-12);
            }
        }

        #[test]
        fn shifting_scores_changes_nothing(seed in 0u64..500, shift in -50.0f64..50.0) {
            let g = grid(seed, 2, 2, 3);
            let mut r = ChaCha8Rng::seed_from_u64(seed + 7);
            let scores: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let a = pool_with_scores(&g, &scores).unwrap();
            let b = pool_with_scores(&g, &shifted).unwrap();
            prop_assert!(a.pooled.max_abs_diff(&b.pooled) < 1e-10);
        }
    }
}
