//! The dual fusion kernel: one parameter set infers answer features from
//! question features and question features from answer features.
//!
//! Both directions call the same slice sum with the mode-1 input swapped:
//!
//! ```text
//! ã* = Σ_r (M_rᵀ q̃) ⊙ (N_rᵀ ṽ)
//! q̃* = Σ_r (M_rᵀ ã) ⊙ (N_rᵀ ṽ)
//! ```
//!
//! That is exact when every visual slice `T_c[:, j, :]` of the composed core
//! is symmetric. The slice parameterization does not force symmetry, so
//! [`DualMode::DenseSymmetric`] exists as a reference: it composes the dense
//! core, symmetrizes it, and contracts densely. It is never trained.

use crate::error::{Error, Result};
use crate::fusion::{compose_core, fuse_via_core, lowrank_fuse, FusionParams};
use crate::linalg::{Matrix, Tensor3, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualMode {
    #[default]
    LowrankShared,
    DenseSymmetric,
}

#[derive(Debug, Clone)]
pub struct DualFusion {
    pub params: FusionParams,
    pub mode: DualMode,
    dense_core: Option<Tensor3>,
}

impl DualFusion {
    pub fn new(params: FusionParams, mode: DualMode) -> Result<Self> {
        if params.t_q() != params.t_a() {
            return Err(Error::shape(
                "dual_fusion",
                format!("question and answer projections differ: t_q={} t_a={}", params.t_q(), params.t_a()),
            ));
        }
        let dense_core = match mode {
            DualMode::LowrankShared => None,
            DualMode::DenseSymmetric => Some(symmetrize_core(&compose_core(&params.slices)?)?),
        };
        Ok(Self {
            params,
            mode,
            dense_core,
        })
    }

    fn infer(&self, mode1: &Vector, v_tilde: &Vector) -> Result<Vector> {
        match &self.dense_core {
            None => lowrank_fuse(mode1, v_tilde, &self.params.slices),
            Some(core) => fuse_via_core(core, mode1, v_tilde),
        }
    }

    /// `ã*` from a projected question feature.
    pub fn infer_answer_feature(&self, q_tilde: &Vector, v_tilde: &Vector) -> Result<Vector> {
        self.infer(q_tilde, v_tilde)
    }

    /// `q̃*` from a projected answer feature.
    pub fn infer_question_feature(&self, a_tilde: &Vector, v_tilde: &Vector) -> Result<Vector> {
        self.infer(a_tilde, v_tilde)
    }

    /// The dense symmetric core, present only in `DenseSymmetric` mode.
    pub fn dense_core(&self) -> Option<&Tensor3> {
        self.dense_core.as_ref()
    }
}

/// Replaces every visual-indexed slice `S = T[:, j, :]` by `(S + Sᵀ) / 2`.
pub fn symmetrize_core(core: &Tensor3) -> Result<Tensor3> {
    let [d1, d2, d3] = core.dims();
    if d1 != d3 {
        return Err(Error::shape(
            "symmetrize_core",
            format!("visual slices are {d1}x{d3}, not square"),
        ));
    }
    let mut out = core.clone();
    for j in 0..d2 {
        for i in 0..d1 {
            for k in 0..d3 {
                out.set(i, j, k, 0.5 * (core.get(i, j, k) + core.get(k, j, i)));
            }
        }
    }
    Ok(out)
}

/// Per-slice transpose `T'[:, j, :] = T[:, j, :]ᵀ`.
pub fn transpose_slices(core: &Tensor3) -> Tensor3 {
    let [d1, d2, d3] = core.dims();
    Tensor3::from_fn([d3, d2, d1], |i, j, k| core.get(k, j, i))
}

/// Hands a fused feature to its decoder. With `skip` the feature passes
/// through unchanged; otherwise it is lifted back to the embedding space by
/// `projectionᵀ` (`â = ã*ᵀ W_a`, `q̂ = q̃*ᵀ W_q`).
pub fn skip_final_projection(feature: &Vector, projection: &Matrix, skip: bool) -> Result<Vector> {
    if skip {
        Ok(feature.clone())
    } else {
        projection.t_matvec(feature)
    }
}
