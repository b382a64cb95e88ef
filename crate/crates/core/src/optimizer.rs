//! Gauss–Newton on the frame manifold with landmark Schur elimination.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::ops::{AddAssign, SubAssign};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::factors::{
    huber_cost, huber_weight, AnyLinearized, Calibration, Factor, FactorError, FrameState,
    Linearized, Matrix9, VariableLookup, Vector9,
};
use crate::Real;

/// Relative rounding error tolerated when comparing costs.
const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("normal equations are singular (pivot {pivot:e} at {variable:?})")]
    SingularSystem { variable: VarKey, pivot: f64 },
    #[error("factor refers to unknown frame {0}")]
    UnknownFrame(usize),
    #[error("factor refers to unknown landmark {0}")]
    UnknownLandmark(usize),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("failed to write debug dump: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum VarKey {
    Frame(usize),
    Landmark(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameVar<T: Real> {
    pub state: FrameState<T>,
    pub fix_pose: bool,
    pub fix_bias: bool,
}

impl<T: Real> FrameVar<T> {
    pub fn free(state: FrameState<T>) -> Self {
        Self { state, fix_pose: false, fix_bias: false }
    }

    pub fn fixed(state: FrameState<T>) -> Self {
        Self { state, fix_pose: true, fix_bias: true }
    }

    fn mask(&self) -> [bool; 9] {
        let mut m = [true; 9];
        m[..6].iter_mut().for_each(|v| *v = !self.fix_pose);
        m[6..].iter_mut().for_each(|v| *v = !self.fix_bias);
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkVar<T: Real> {
    pub position: Vector3<T>,
    pub fixed: bool,
}

/// A factor graph with its variables.
#[derive(Clone, Debug)]
pub struct Problem<T: Real> {
    pub frames: BTreeMap<usize, FrameVar<T>>,
    pub landmarks: BTreeMap<usize, LandmarkVar<T>>,
    pub factors: Vec<Factor<T>>,
    pub calib: Calibration<T>,
}

impl<T: Real> VariableLookup<T> for Problem<T> {
    fn frame(&self, id: usize) -> &FrameState<T> {
        &self.frames[&id].state
    }

    fn landmark(&self, id: usize) -> &Vector3<T> {
        &self.landmarks[&id].position
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Stop when the largest update component falls below this.
    pub step_tolerance: f64,
    /// Stop when the relative cost decrease falls below this.
    pub cost_tolerance: f64,
    pub max_step_halvings: usize,
    /// A small cost decrease ends the solve only once the gradient's largest
    /// component is below this times `1 + cost`.
    pub gradient_tolerance: f64,
    /// Minimum squared Cholesky pivot of the Jacobi-scaled system.
    pub pivot_tolerance: f64,
    /// Write the first iteration's reduced normal equations here.
    pub debug_dump: Option<PathBuf>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-9,
            max_step_halvings: 8,
            gradient_tolerance: 1e-6,
            pivot_tolerance: 1e-10,
            debug_dump: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    StepTolerance,
    CostTolerance,
    /// No step length along the Gauss–Newton direction lowered the cost.
    NoDecrease,
    MaxIterations,
    NothingToSolve,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Unweighted `Σ rᵀΩr` at the solution.
    pub chi2: f64,
    pub residual_dim: usize,
    pub free_dim: usize,
    pub dof: i64,
    /// Largest component of the robustified gradient at the solution.
    pub gradient_inf_norm: f64,
    /// Largest component of each variable's final accepted update.
    pub last_step: BTreeMap<VarKey, f64>,
}

/// Index of the free tangent components.
struct Layout {
    frames: BTreeMap<usize, [Option<usize>; 9]>,
    landmarks: BTreeMap<usize, usize>,
    frame_dim: usize,
    /// 9-wide block of every frame with a free coordinate.
    block: BTreeMap<usize, usize>,
    /// Free coordinates as indices into the block-padded system.
    padded_free: Vec<usize>,
}

impl Layout {
    fn new<T: Real>(p: &Problem<T>, override_free: Option<usize>) -> Self {
        let mut frames = BTreeMap::new();
        let mut block = BTreeMap::new();
        let mut padded_free = Vec::new();
        let mut n = 0;
        for (&id, v) in &p.frames {
            let mask = if Some(id) == override_free { [true; 9] } else { v.mask() };
            let mut idx = [None; 9];
            if mask.iter().any(|f| *f) {
                let b = block.len();
                block.insert(id, b);
                for (k, free) in mask.iter().enumerate() {
                    if *free {
                        idx[k] = Some(n);
                        padded_free.push(9 * b + k);
                        n += 1;
                    }
                }
            }
            frames.insert(id, idx);
        }
        let landmarks = p
            .landmarks
            .iter()
            .filter(|(_, l)| !l.fixed)
            .enumerate()
            .map(|(k, (&id, _))| (id, k))
            .collect();
        Self { frames, landmarks, frame_dim: n, block, padded_free }
    }
}

/// Normal equations with landmarks kept as separate blocks.
struct Normal<T: Real> {
    /// Frame blocks over free coordinates only.
    hff: DMatrix<T>,
    gf: DVector<T>,
    /// Same, padded to whole 9-wide blocks.
    padded_h: DMatrix<T>,
    padded_g: DVector<T>,
    hll: Vec<Matrix3<T>>,
    gl: Vec<Vector3<T>>,
    /// Per landmark: (frame id, 9×3 coupling in full tangent coordinates).
    hfl: Vec<Vec<(usize, SMatrix<T, 9, 3>)>>,
}

impl<T: Real> Problem<T> {
    pub fn new(calib: Calibration<T>) -> Self {
        Self {
            frames: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            factors: Vec::new(),
            calib,
        }
    }

    fn check_references(&self) -> Result<(), OptimizerError> {
        for f in &self.factors {
            for id in f.frames() {
                if !self.frames.contains_key(&id) {
                    return Err(OptimizerError::UnknownFrame(id));
                }
            }
            if let Some(l) = f.landmark() {
                if !self.landmarks.contains_key(&l) {
                    return Err(OptimizerError::UnknownLandmark(l));
                }
            }
        }
        Ok(())
    }

    /// Per-factor `rᵀΩr` at the current values.
    pub fn factor_chi2(&self) -> Result<Vec<T>, OptimizerError> {
        self.check_references()?;
        self.factors
            .iter()
            .map(|f| f.chi2(self, &self.calib).map_err(OptimizerError::from))
            .collect()
    }

    /// Robust total cost, or `None` if some factor cannot be evaluated.
    fn cost(&self) -> Option<T> {
        let mut c = T::zero();
        for f in &self.factors {
            let s = f.chi2(self, &self.calib).ok()?;
            c += match f.huber() {
                Some(d) => huber_cost(s, d),
                None => s,
            };
        }
        Some(c)
    }

    fn build(&self, layout: &Layout) -> Result<Normal<T>, OptimizerError> {
        let nb = 9 * layout.block.len();
        let nl = layout.landmarks.len();
        let mut ne = Normal {
            hff: DMatrix::zeros(0, 0),
            gf: DVector::zeros(0),
            padded_h: DMatrix::zeros(nb, nb),
            padded_g: DVector::zeros(nb),
            hll: vec![Matrix3::zeros(); nl],
            gl: vec![Vector3::zeros(); nl],
            hfl: vec![Vec::new(); nl],
        };
        for f in &self.factors {
            let h = f.huber();
            match f.linearize(self, &self.calib)? {
                AnyLinearized::Two(l) => accumulate(&mut ne, layout, l, h),
                AnyLinearized::Three(l) => accumulate(&mut ne, layout, l, h),
                AnyLinearized::Six(l) => accumulate(&mut ne, layout, l, h),
                AnyLinearized::Nine(l) => accumulate(&mut ne, layout, l, h),
            }
        }
        ne.hff = ne.padded_h.select_rows(&layout.padded_free).select_columns(&layout.padded_free);
        ne.gf = ne.padded_g.select_rows(&layout.padded_free);
        Ok(ne)
    }

    fn apply(&mut self, layout: &Layout, df: &DVector<T>, dl: &[Vector3<T>], alpha: T) {
        for (id, idx) in &layout.frames {
            if idx.iter().all(Option::is_none) {
                continue;
            }
            let mut d = Vector9::zeros();
            for (k, i) in idx.iter().enumerate() {
                if let Some(i) = i {
                    d[k] = df[*i] * alpha;
                }
            }
            let v = self.frames.get_mut(id).expect("layout built from problem");
            v.state = v.state.retract(&d);
        }
        for (id, &k) in &layout.landmarks {
            let v = self.landmarks.get_mut(id).expect("layout built from problem");
            v.position += dl[k] * alpha;
        }
    }

    /// Minimizes the robust cost over the free variables in place.
    pub fn solve(&mut self, opts: &SolveOptions) -> Result<SolveReport, OptimizerError> {
        self.check_references()?;
        let layout = Layout::new(self, None);
        let free_dim = layout.frame_dim + 3 * layout.landmarks.len();
        let residual_dim: usize = self.factors.iter().map(Factor::dim).sum();
        let mut cost = self.cost().ok_or_else(|| self.first_factor_error())?;
        let initial_cost = cost;
        let mut iterations = 0;
        let mut last_step = BTreeMap::new();
        let mut termination = Termination::NothingToSolve;

        let mut gradient = T::zero();
        if free_dim > 0 {
            termination = Termination::MaxIterations;
            let mut small_decrease = false;
            loop {
                let ne = self.build(&layout)?;
                gradient = gradient_norm(&ne);
                let grad_ok = gradient.as_f64() <= opts.gradient_tolerance * (1.0 + cost.as_f64());
                if small_decrease && grad_ok {
                    termination = Termination::CostTolerance;
                    break;
                }
                if iterations == opts.max_iterations {
                    break;
                }
                iterations += 1;
                if iterations == 1 {
                    if let Some(path) = &opts.debug_dump {
                        dump_normal(path, &ne)?;
                    }
                }
                let (df, dl) = solve_step(&ne, &layout, opts.pivot_tolerance)?;
                let step_max = df.amax().max(dl.iter().map(|v| v.amax()).fold(T::zero(), T::max));

                // Increases below the cost's own rounding error count as no change.
                let slack = cost * T::lit(ROUNDOFF);
                let mut alpha = T::one();
                let mut accepted = None;
                let saved = (self.frames.clone(), self.landmarks.clone());
                for _ in 0..=opts.max_step_halvings {
                    self.apply(&layout, &df, &dl, alpha);
                    if let Some(c) = self.cost() {
                        if c <= cost + slack {
                            accepted = Some(c);
                            break;
                        }
                    }
                    self.frames.clone_from(&saved.0);
                    self.landmarks.clone_from(&saved.1);
                    alpha *= T::lit(0.5);
                }
                let Some(new_cost) = accepted else {
                    termination = Termination::NoDecrease;
                    break;
                };
                last_step = step_summary(&layout, &df, &dl, alpha);
                let rel = if cost > T::zero() { (cost - new_cost) / cost } else { T::zero() };
                cost = new_cost;
                if step_max.as_f64() < opts.step_tolerance {
                    termination = Termination::StepTolerance;
                    gradient = gradient_norm(&self.build(&layout)?);
                    break;
                }
                small_decrease = rel.as_f64() < opts.cost_tolerance;
            }
        }

        let chi2 = self.factor_chi2()?.into_iter().fold(T::zero(), |a, b| a + b);
        Ok(SolveReport {
            iterations,
            initial_cost: initial_cost.as_f64(),
            final_cost: cost.as_f64(),
            converged: termination != Termination::MaxIterations,
            termination,
            chi2: chi2.as_f64(),
            residual_dim,
            free_dim,
            dof: residual_dim as i64 - free_dim as i64,
            gradient_inf_norm: gradient.as_f64(),
            last_step,
        })
    }

    fn first_factor_error(&self) -> OptimizerError {
        self.factors
            .iter()
            .find_map(|f| f.chi2(self, &self.calib).err())
            .map(OptimizerError::from)
            .unwrap_or(OptimizerError::Factor(FactorError::NotPositiveDefinite))
    }

    /// Information of frame `id` with every other free variable marginalized,
    /// at the current values. The target frame is treated as fully free.
    pub fn marginal_hessian(&self, id: usize) -> Result<Matrix9<T>, OptimizerError> {
        self.check_references()?;
        if !self.frames.contains_key(&id) {
            return Err(OptimizerError::UnknownFrame(id));
        }
        let layout = Layout::new(self, Some(id));
        let ne = self.build(&layout)?;
        let ((s, _), _) = schur_landmarks(&ne, &layout)?;
        let target: Vec<usize> = layout.frames[&id].iter().map(|i| i.expect("target is free")).collect();
        let others: Vec<usize> = (0..layout.frame_dim).filter(|i| !target.contains(i)).collect();
        let stt = Matrix9::from_fn(|r, c| s[(target[r], target[c])]);
        if others.is_empty() {
            return Ok(stt);
        }
        let m = others.len();
        let soo = DMatrix::from_fn(m, m, |r, c| s[(others[r], others[c])]);
        let sot = DMatrix::from_fn(m, 9, |r, c| s[(others[r], target[c])]);
        let chol = scaled_cholesky(&soo, 1e-10, |k| other_key(&layout, others[k]))?;
        let x = chol.solve(&sot);
        let reduced = stt - Matrix9::from_fn(|r, c| (sot.column(r).transpose() * x.column(c))[(0, 0)]);
        Ok((reduced + reduced.transpose()) * T::lit(0.5))
    }
}

fn gradient_norm<T: Real>(ne: &Normal<T>) -> T {
    ne.gl.iter().map(|g| g.amax()).fold(ne.gf.amax(), T::max)
}

fn other_key(layout: &Layout, index: usize) -> VarKey {
    layout
        .frames
        .iter()
        .find(|(_, idx)| idx.contains(&Some(index)))
        .map(|(id, _)| VarKey::Frame(*id))
        .unwrap_or(VarKey::Frame(usize::MAX))
}

fn accumulate<T: Real, const R: usize>(
    ne: &mut Normal<T>,
    layout: &Layout,
    l: Linearized<T, R>,
    huber: Option<T>,
) {
    let w = huber.map_or(T::one(), |d| huber_weight(l.chi2(), d));
    let omega = l.information * w;
    let wr = omega * l.residual;
    let frames = l.frames.map(|f| f.and_then(|(id, j)| layout.block.get(&id).map(|&b| (id, j.transpose() * omega, j, 9 * b))));
    let frames = frames.iter().flatten();
    for (_, ja_w, _, a) in frames.clone() {
        ne.padded_g.fixed_rows_mut::<9>(*a).add_assign(ja_w * l.residual);
        for (_, _, jb, b) in frames.clone() {
            ne.padded_h.fixed_view_mut::<9, 9>(*a, *b).add_assign(ja_w * jb);
        }
    }
    if let Some((lid, jf)) = &l.landmark {
        if let Some(&k) = layout.landmarks.get(lid) {
            let jf_w = jf.transpose() * omega;
            ne.hll[k] += jf_w * jf;
            ne.gl[k] += jf.transpose() * wr;
            for (fid, ja_w, _, _) in frames {
                let hal: SMatrix<T, 9, 3> = ja_w * jf;
                match ne.hfl[k].iter_mut().find(|(id, _)| id == fid) {
                    Some((_, h)) => *h += hal,
                    None => ne.hfl[k].push((*fid, hal)),
                }
            }
        }
    }
}

/// Reduced frame system `S`, `rhs` after eliminating landmarks, plus the
/// landmark inverses needed for back-substitution.
fn schur_landmarks<T: Real>(
    ne: &Normal<T>,
    layout: &Layout,
) -> Result<((DMatrix<T>, DVector<T>), Vec<Matrix3<T>>), OptimizerError> {
    let mut s = ne.padded_h.clone();
    let mut rhs = ne.padded_g.clone();
    let mut inverses = Vec::with_capacity(ne.hll.len());
    for (lid, &k) in &layout.landmarks {
        let inv = landmark_inverse(&ne.hll[k]).ok_or(OptimizerError::SingularSystem {
            variable: VarKey::Landmark(*lid),
            pivot: ne.hll[k].determinant().as_f64(),
        })?;
        let blocks: Vec<(usize, &SMatrix<T, 9, 3>)> =
            ne.hfl[k].iter().map(|(f, h)| (9 * layout.block[f], h)).collect();
        for (n, (a, ha)) in blocks.iter().enumerate() {
            let ha_inv = *ha * inv;
            rhs.fixed_rows_mut::<9>(*a).sub_assign(ha_inv * ne.gl[k]);
            for (b, hb) in &blocks[n..] {
                let blk: SMatrix<T, 9, 9> = ha_inv * hb.transpose();
                s.fixed_view_mut::<9, 9>(*a, *b).sub_assign(blk);
                if a != b {
                    s.fixed_view_mut::<9, 9>(*b, *a).sub_assign(blk.transpose());
                }
            }
        }
        inverses.push(inv);
    }
    let free = &layout.padded_free;
    Ok(((s.select_rows(free).select_columns(free), rhs.select_rows(free)), inverses))
}

fn landmark_inverse<T: Real>(h: &Matrix3<T>) -> Option<Matrix3<T>> {
    let d = h.diagonal().map(|v| if v > T::zero() { T::one() / v.sqrt() } else { T::zero() });
    if d.iter().any(|v| *v == T::zero()) {
        return None;
    }
    let dm = Matrix3::from_diagonal(&d);
    let chol = (dm * h * dm).cholesky()?;
    if chol.l_dirty().diagonal().iter().any(|v| (*v * *v).as_f64() < 1e-10) {
        return None;
    }
    Some(dm * chol.inverse() * dm)
}

/// Cholesky of `D·A·D` with `D = diag(A)^{-1/2}`; returns a solver for `A`.
struct ScaledCholesky<T: Real> {
    d: DVector<T>,
    chol: nalgebra::Cholesky<T, nalgebra::Dyn>,
}

impl<T: Real> ScaledCholesky<T> {
    fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut x = b.clone();
        for (mut row, d) in x.row_iter_mut().zip(self.d.iter()) {
            row *= *d;
        }
        let mut x = self.chol.solve(&x);
        for (mut row, d) in x.row_iter_mut().zip(self.d.iter()) {
            row *= *d;
        }
        x
    }
}

fn scaled_cholesky<T: Real>(
    a: &DMatrix<T>,
    pivot_tol: f64,
    key: impl Fn(usize) -> VarKey,
) -> Result<ScaledCholesky<T>, OptimizerError> {
    let n = a.nrows();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let v = a[(i, i)];
        if !(v > T::zero()) {
            return Err(OptimizerError::SingularSystem { variable: key(i), pivot: v.as_f64() });
        }
        d[i] = T::one() / v.sqrt();
    }
    let scaled = DMatrix::from_fn(n, n, |r, c| a[(r, c)] * d[r] * d[c]);
    let chol = scaled
        .cholesky()
        .ok_or(OptimizerError::SingularSystem { variable: key(n.saturating_sub(1)), pivot: 0.0 })?;
    if let Some((i, v)) = chol
        .l_dirty()
        .diagonal()
        .iter()
        .enumerate()
        .find(|(_, v)| (**v * **v).as_f64() < pivot_tol)
    {
        return Err(OptimizerError::SingularSystem { variable: key(i), pivot: (*v * *v).as_f64() });
    }
    Ok(ScaledCholesky { d, chol })
}

fn solve_step<T: Real>(
    ne: &Normal<T>,
    layout: &Layout,
    pivot_tol: f64,
) -> Result<(DVector<T>, Vec<Vector3<T>>), OptimizerError> {
    let ((s, rhs), inverses) = schur_landmarks(ne, layout)?;
    let df = if layout.frame_dim > 0 {
        let chol = scaled_cholesky(&s, pivot_tol, |k| other_key(layout, k))?;
        let x = chol.solve(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
        -DVector::from_column_slice(x.as_slice())
    } else {
        DVector::zeros(0)
    };
    let mut padded = DVector::zeros(9 * layout.block.len());
    for (i, &p) in layout.padded_free.iter().enumerate() {
        padded[p] = df[i];
    }
    let dl = layout
        .landmarks
        .values()
        .map(|&k| {
            let mut g = ne.gl[k];
            for (fa, ha) in &ne.hfl[k] {
                g += ha.transpose() * padded.fixed_rows::<9>(9 * layout.block[fa]);
            }
            -(inverses[k] * g)
        })
        .collect();
    Ok((df, dl))
}

fn step_summary<T: Real>(
    layout: &Layout,
    df: &DVector<T>,
    dl: &[Vector3<T>],
    alpha: T,
) -> BTreeMap<VarKey, f64> {
    let mut out = BTreeMap::new();
    for (id, idx) in &layout.frames {
        let m = idx
            .iter()
            .flatten()
            .map(|i| (df[*i] * alpha).abs())
            .fold(T::zero(), T::max);
        if idx.iter().any(Option::is_some) {
            out.insert(VarKey::Frame(*id), m.as_f64());
        }
    }
    for (id, &k) in &layout.landmarks {
        out.insert(VarKey::Landmark(*id), (dl[k] * alpha).amax().as_f64());
    }
    out
}

fn dump_normal<T: Real>(path: &PathBuf, ne: &Normal<T>) -> Result<(), OptimizerError> {
    let mut s = String::new();
    let _ = writeln!(s, "# H_ff ({}x{})", ne.hff.nrows(), ne.hff.ncols());
    for r in ne.hff.row_iter() {
        let row: Vec<String> = r.iter().map(|v| format!("{:.17e}", v.as_f64())).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(s, "# g_f");
    for v in ne.gf.iter() {
        let _ = writeln!(s, "{:.17e}", v.as_f64());
    }
    let _ = writeln!(s, "# landmark blocks: {}", ne.hll.len());
    std::fs::write(path, s)?;
    Ok(())
}
