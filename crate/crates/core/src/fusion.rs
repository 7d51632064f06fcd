//! MUTAN fusion: Tucker-factored bilinear interaction between a guide vector
//! (question or answer) and a visual vector.
//!
//! Three equivalent routes compute the same answer feature:
//!
//! * full tensor: `â = (T ×₁ q) ×₂ v` with `T` of size `d_q × d_v × d_a`;
//! * Tucker core: `ã = (T_c ×₁ q̃) ×₂ ṽ` in projected space, `â = W_aᵀ ã`;
//! * rank-R slices: `ã = Σ_r (M_rᵀ q̃) ⊙ (N_rᵀ ṽ)`.
//!
//! Training only uses the last one. The first two exist so the slice
//! parameterization can be checked against a dense reference.
//!
//! Core axis order is (question, visual, answer). [`compose_core`] stores
//! `T_c[i, j, k] = Σ_r M_r[i, k] · N_r[j, k]`, which makes the core
//! contraction and the slice sum the same function.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{full_bilinear, mode_product, Axis, Matrix, Tensor3, Vector};
#[cfg(test)]
use crate::linalg::relative_diff;
use crate::params::{init_matrix, matrix_ref, ArrayRef, Binder, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Mutan,
    /// Identity core: `ã = q̃ ⊙ ṽ`. Requires `t == t_v`; the slices are
    /// fixed identities and not trained.
    Mlb,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Mutan => "mutan",
            Backend::Mlb => "mlb",
        }
    }

    pub fn parse(s: &str) -> Result<Backend> {
        match s {
            "mutan" => Ok(Backend::Mutan),
            "mlb" => Ok(Backend::Mlb),
            other => Err(Error::Config(format!("unknown fusion backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub d_q: usize,
    pub d_v: usize,
    pub d_a: usize,
    /// Shared projected dimension of question and answer (`t_q = t_a = t`).
    pub t: usize,
    pub t_v: usize,
    pub rank: usize,
    pub backend: Backend,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_q, self.d_v, self.d_a, self.t, self.t_v, self.rank];
        if dims.contains(&0) {
            return Err(Error::Config(format!("fusion dims must all be >= 1: {self:?}")));
        }
        if self.backend == Backend::Mlb && self.t != self.t_v {
            return Err(Error::Config(format!(
                "mlb backend needs t == t_v, got t={} t_v={}",
                self.t, self.t_v
            )));
        }
        Ok(())
    }

    /// Number of trainable core entries, `R · t · (t + t_v)`.
    pub fn slice_param_count(&self) -> usize {
        self.rank * self.t * (self.t + self.t_v)
    }

    /// Entries of a dense `t × t_v × t` core.
    pub fn dense_core_param_count(&self) -> usize {
        self.t * self.t * self.t_v
    }
}

/// One rank-one-per-column slice pair: `M_r` (`t_q × t_a`) and `N_r`
/// (`t_v × t_a`).
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub m: Matrix,
    pub n: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub w_a: Matrix,
    pub slices: Vec<Slice>,
    pub backend: Backend,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w_q = init_matrix(cfg.t, cfg.d_q, cfg.d_q, rng);
        let w_v = init_matrix(cfg.t_v, cfg.d_v, cfg.d_v, rng);
        let w_a = init_matrix(cfg.t, cfg.d_a, cfg.d_a, rng);
        let slices = match cfg.backend {
            Backend::Mutan => (0..cfg.rank)
                .map(|_| Slice {
                    m: init_matrix(cfg.t, cfg.t, cfg.t, rng),
                    n: init_matrix(cfg.t_v, cfg.t, cfg.t_v, rng),
                })
                .collect(),
            Backend::Mlb => mlb_slices(cfg.t),
        };
        Ok(Self {
            w_q,
            w_v,
            w_a,
            slices,
            backend: cfg.backend,
        })
    }

    /// A scoring head: guide `d_g → t`, visual `d_v → t_v`, scalar output.
    /// Used by visual attention.
    pub fn init_scoring<R: Rng + ?Sized>(
        d_guide: usize,
        d_v: usize,
        t: usize,
        t_v: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if [d_guide, d_v, t, t_v, rank].contains(&0) {
            return Err(Error::Config("attention dims must all be >= 1".into()));
        }
        let w_q = init_matrix(t, d_guide, d_guide, rng);
        let w_v = init_matrix(t_v, d_v, d_v, rng);
        let slices = (0..rank)
            .map(|_| Slice {
                m: init_matrix(t, 1, t, rng),
                n: init_matrix(t_v, 1, t_v, rng),
            })
            .collect();
        Ok(Self {
            w_q,
            w_v,
            w_a: Matrix::identity(1),
            slices,
            backend: Backend::Mutan,
        })
    }

    pub fn t_q(&self) -> usize {
        self.w_q.rows()
    }

    pub fn t_v(&self) -> usize {
        self.w_v.rows()
    }

    pub fn t_a(&self) -> usize {
        self.slices[0].m.cols()
    }

    pub fn d_q(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    pub fn d_a(&self) -> usize {
        self.w_a.cols()
    }

    /// `q̃ = W_q q`, `ṽ = W_v v`.
    pub fn project(&self, q: &Vector, v: &Vector) -> Result<(Vector, Vector)> {
        Ok((self.w_q.matvec(q)?, self.w_v.matvec(v)?))
    }

    /// Answer feature in the original space: `â = W_aᵀ · Σ_r (M_rᵀ q̃) ⊙ (N_rᵀ ṽ)`.
    pub fn answer_feature(&self, q: &Vector, v: &Vector) -> Result<Vector> {
        let (qt, vt) = self.project(q, v)?;
        let at = lowrank_fuse(&qt, &vt, &self.slices)?;
        self.w_a.t_matvec(&at)
    }

    /// Slices whose scalar entries are trained. Empty for the mlb backend.
    fn trainable_slices(&self) -> &[Slice] {
        match self.backend {
            Backend::Mutan => &self.slices,
            Backend::Mlb => &[],
        }
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> FusionVars {
        let w_q = b.matrix(&self.w_q);
        let w_v = b.matrix(&self.w_v);
        let w_a = b.matrix(&self.w_a);
        let slices = match self.backend {
            Backend::Mutan => self
                .slices
                .iter()
                .map(|s| (b.matrix(&s.m), b.matrix(&s.n)))
                .collect(),
            Backend::Mlb => self
                .slices
                .iter()
                .map(|s| (b.tape.constant(s.m.clone()), b.tape.constant(s.n.clone())))
                .collect(),
        };
        FusionVars {
            w_q,
            w_v,
            w_a,
            slices,
        }
    }
}

fn mlb_slices(t: usize) -> Vec<Slice> {
    vec![Slice {
        m: Matrix::identity(t),
        n: Matrix::identity(t),
    }]
}

impl ParamSet for FusionParams {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        let mut out = vec![
            matrix_ref(prefix, "w_q", &self.w_q),
            matrix_ref(prefix, "w_v", &self.w_v),
            matrix_ref(prefix, "w_a", &self.w_a),
        ];
        for (r, s) in self.trainable_slices().iter().enumerate() {
            out.push(matrix_ref(prefix, &format!("m{r}"), &s.m));
            out.push(matrix_ref(prefix, &format!("n{r}"), &s.n));
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let trainable = self.backend == Backend::Mutan;
        let FusionParams {
            w_q, w_v, w_a, slices, ..
        } = self;
        let mut out = vec![w_q.as_mut_slice(), w_v.as_mut_slice(), w_a.as_mut_slice()];
        if trainable {
            for s in slices.iter_mut() {
                out.push(s.m.as_mut_slice());
                out.push(s.n.as_mut_slice());
            }
        }
        out
    }
}

/// Tape handles for one [`FusionParams`].
#[derive(Debug, Clone)]
pub(crate) struct FusionVars {
    pub w_q: Var,
    pub w_v: Var,
    pub w_a: Var,
    pub slices: Vec<(Var, Var)>,
}

impl FusionVars {
    /// `Σ_r (M_rᵀ x̃) ⊙ (N_rᵀ ṽ)` on tape.
    pub fn lowrank_fuse(&self, tape: &mut Tape, guide: Var, visual: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(m, n) in &self.slices {
            let left = tape.t_matvec(m, guide)?;
            let right = tape.t_matvec(n, visual)?;
            let term = tape.mul(left, right)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("fusion has no slices".into()))
    }
}

/// `ã = Σ_r (q̃ᵀ M_r) ⊙ (ṽᵀ N_r)`.
pub fn lowrank_fuse(q_tilde: &Vector, v_tilde: &Vector, slices: &[Slice]) -> Result<Vector> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidArgument("lowrank_fuse needs at least one slice".into()))?;
    let mut acc = Vector::zeros(first.m.cols());
    for s in slices {
        if s.m.cols() != s.n.cols() || s.m.cols() != acc.len() {
            return Err(Error::shape("lowrank_fuse", "slice output widths differ"));
        }
        let term = s.m.t_matvec(q_tilde)?.hadamard(&s.n.t_matvec(v_tilde)?)?;
        acc = acc.add(&term)?;
    }
    Ok(acc)
}

/// Dense core `T_c[i, j, k] = Σ_r M_r[i, k] · N_r[j, k]`.
pub fn compose_core(slices: &[Slice]) -> Result<Tensor3> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidArgument("compose_core needs at least one slice".into()))?;
    let (t_q, t_v, t_a) = (first.m.rows(), first.n.rows(), first.m.cols());
    let mut core = Tensor3::zeros(t_q, t_v, t_a);
    for s in slices {
        if s.m.rows() != t_q || s.n.rows() != t_v || s.m.cols() != t_a || s.n.cols() != t_a {
            return Err(Error::shape("compose_core", "slices disagree on dimensions"));
        }
        for i in 0..t_q {
            for j in 0..t_v {
                for k in 0..t_a {
                    core.add_at(i, j, k, s.m.get(i, k) * s.n.get(j, k));
                }
            }
        }
    }
    Ok(core)
}

/// `ã = (T_c ×₁ q̃) ×₂ ṽ`.
pub fn fuse_via_core(core: &Tensor3, q_tilde: &Vector, v_tilde: &Vector) -> Result<Vector> {
    full_bilinear(core, q_tilde, v_tilde)
}

/// `T = ((T_c ×₁ W_q) ×₂ W_v) ×₃ W_a`, a `d_q × d_v × d_a` tensor.
pub fn compose_full_tensor(params: &FusionParams) -> Result<Tensor3> {
    let core = compose_core(&params.slices)?;
    let t = mode_product(&core, &params.w_q, Axis::First)?;
    let t = mode_product(&t, &params.w_v, Axis::Second)?;
    mode_product(&t, &params.w_a, Axis::Third)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(d_q: usize, d_v: usize, d_a: usize, t: usize, t_v: usize, rank: usize) -> FusionConfig {
        FusionConfig {
            d_q,
            d_v,
            d_a,
            t,
            t_v,
            rank,
            backend: Backend::Mutan,
        }
    }

    fn scalar_matrix(x: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn project_identity_zero_and_matvec() {
        let mut p = FusionParams::init(&cfg(3, 2, 3, 3, 2, 1), &mut rng(1)).unwrap();
        let q = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = Vector::from_vec(vec![3.0, 4.0]);
        let (qt, vt) = p.project(&q, &v).unwrap();
        assert_eq!(qt, p.w_q.matvec(&q).unwrap());
        assert_eq!(vt, p.w_v.matvec(&v).unwrap());

        p.w_q = Matrix::identity(3);
        p.w_v = Matrix::identity(2);
        assert_eq!(p.project(&q, &v).unwrap(), (q.clone(), v.clone()));
        p.w_q = Matrix::zeros(3, 3);
        assert_eq!(p.project(&q, &v).unwrap().0, Vector::zeros(3));
        assert!(p.project(&v, &q).is_err());
    }

    #[test]
    fn lowrank_fuse_zero_visual_and_scalar_case() {
        let p = FusionParams::init(&cfg(3, 2, 3, 3, 2, 2), &mut rng(2)).unwrap();
        let out = lowrank_fuse(&Vector::from_vec(vec![1.0, 2.0, 3.0]), &Vector::zeros(2), &p.slices).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));

        let slices = [Slice {
            m: scalar_matrix(4.0),
            n: scalar_matrix(5.0),
        }];
        let out = lowrank_fuse(&Vector::from_vec(vec![2.0]), &Vector::from_vec(vec![3.0]), &slices).unwrap();
        assert_eq!(out.as_slice(), &[120.0]);
    }

    #[test]
    fn lowrank_fuse_matches_composed_core() {
        let mut r = rng(3);
        let p = FusionParams::init(&cfg(3, 2, 3, 3, 2, 2), &mut r).unwrap();
        let q = Vector::uniform(3, 1.0, &mut r);
        let v = Vector::uniform(2, 1.0, &mut r);
        let direct = lowrank_fuse(&q, &v, &p.slices).unwrap();
        let core = compose_core(&p.slices).unwrap();
        let via_core = fuse_via_core(&core, &q, &v).unwrap();
        assert!(direct.max_abs_diff(&via_core) < 1e-10);
    }

    #[test]
    fn compose_core_one_hot_and_zero() {
        let mut m = Matrix::zeros(3, 2);
        m.set(1, 0, 1.0);
        let mut n = Matrix::zeros(2, 2);
        n.set(1, 0, 1.0);
        let core = compose_core(&[Slice { m, n }]).unwrap();
        let nonzero: Vec<_> = core.as_slice().iter().filter(|&&x| x != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(core.get(1, 1, 0), 1.0);

        let zero = compose_core(&[Slice {
            m: Matrix::zeros(3, 2),
            n: Matrix::zeros(2, 2),
        }])
        .unwrap();
        assert!(zero.as_slice().iter().all(|&x| x == 0.0));
        assert!(compose_core(&[]).is_err());
    }

    #[test]
    fn fuse_via_core_small_cases() {
        let zero = Tensor3::zeros(2, 2, 2);
        let q = Vector::from_vec(vec![1.0, 2.0]);
        assert_eq!(fuse_via_core(&zero, &q, &q).unwrap(), Vector::zeros(2));
        let one = Tensor3::from_vec([1, 1, 1], vec![3.0]).unwrap();
        let out = fuse_via_core(&one, &Vector::from_vec(vec![2.0]), &Vector::from_vec(vec![5.0])).unwrap();
        assert_eq!(out.as_slice(), &[30.0]);
    }

    #[test]
    fn full_tensor_with_identity_factors_is_the_core() {
        let mut p = FusionParams::init(&cfg(3, 2, 3, 3, 2, 2), &mut rng(4)).unwrap();
        p.w_q = Matrix::identity(3);
        p.w_v = Matrix::identity(2);
        p.w_a = Matrix::identity(3);
        let full = compose_full_tensor(&p).unwrap();
        let core = compose_core(&p.slices).unwrap();
        assert!(full.max_abs_diff(&core) < 1e-15);

        for s in &mut p.slices {
            s.m = Matrix::zeros(3, 3);
        }
        let full = compose_full_tensor(&p).unwrap();
        assert!(full.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mlb_core_does_not_mix_coordinates() {
        let c = FusionConfig {
            backend: Backend::Mlb,
            ..cfg(3, 4, 3, 4, 4, 3)
        };
        let p = FusionParams::init(&c, &mut rng(5)).unwrap();
        assert_eq!(p.slices.len(), 1);
        let mut r = rng(6);
        let qt = Vector::uniform(4, 1.0, &mut r);
        let vt = Vector::uniform(4, 1.0, &mut r);
        let base = lowrank_fuse(&qt, &vt, &p.slices).unwrap();
        assert_eq!(base, qt.hadamard(&vt).unwrap());
        for i in 0..4 {
            let mut bumped = qt.clone();
            bumped[i] += 0.5;
            let out = lowrank_fuse(&bumped, &vt, &p.slices).unwrap();
            for k in 0..4 {
                assert_eq!(out[k] != base[k], k == i && vt[k] != 0.0);
            }
        }
        // identity core slices are not trainable
        assert_eq!(p.arrays("f").len(), 3);

        let bad = FusionConfig {
            backend: Backend::Mlb,
            ..cfg(3, 4, 3, 4, 3, 1)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shipped_default_dims_compress_the_core() {
        let c = cfg(24, 16, 24, 24, 24, 3);
        assert!(c.slice_param_count() < c.dense_core_param_count());
    }

    #[test]
    fn param_arrays_align_with_mutable_views() {
        let mut p = FusionParams::init(&cfg(3, 2, 4, 3, 2, 2), &mut rng(7)).unwrap();
        let lens: Vec<usize> = p.arrays("x").iter().map(|a| a.data.len()).collect();
        let lens_mut: Vec<usize> = p.arrays_mut().iter().map(|a| a.len()).collect();
        assert_eq!(lens, lens_mut);
        let names: Vec<String> = p.arrays("x").into_iter().map(|a| a.name).collect();
        assert_eq!(names, ["x.w_q", "x.w_v", "x.w_a", "x.m0", "x.n0", "x.m1", "x.n1"]);
    }

    #[test]
    fn lowrank_is_bilinear() {
        let mut r = rng(8);
        let p = FusionParams::init(&cfg(3, 2, 3, 3, 2, 3), &mut r).unwrap();
        let q = Vector::uniform(3, 1.0, &mut r);
        let q2 = Vector::uniform(3, 1.0, &mut r);
        let v = Vector::uniform(2, 1.0, &mut r);
        let lhs = lowrank_fuse(&q.add(&q2).unwrap().scale(1.5), &v, &p.slices).unwrap();
        let rhs = lowrank_fuse(&q, &v, &p.slices)
            .unwrap()
            .add(&lowrank_fuse(&q2, &v, &p.slices).unwrap())
            .unwrap()
            .scale(1.5);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    proptest! {
        #[test]
        fn factorization_routes_agree(
            seed in any::<u64>(),
            d_q in 1usize..=5, d_v in 1usize..=5, d_a in 1usize..=5,
            t in 1usize..=4, t_v in 1usize..=4, rank in 1usize..=3,
        ) {
            let mut r = rng(seed);
            let p = FusionParams::init(&cfg(d_q, d_v, d_a, t, t_v, rank), &mut r).unwrap();
            let q = Vector::uniform(d_q, 1.0, &mut r);
            let v = Vector::uniform(d_v, 1.0, &mut r);
            let full = full_bilinear(&compose_full_tensor(&p).unwrap(), &q, &v).unwrap();
            let lowrank = p.answer_feature(&q, &v).unwrap();
            prop_assert!(relative_diff(full.as_slice(), lowrank.as_slice()) < 1e-10);
        }
    }
}
