//! The unrolled C-TISTA recursion and the zero-forcing detector.
//!
//! Starting from `s⁽¹⁾ = W y`, each layer `t` computes
//!
//! ```text
//! r⁽ᵗ⁾   = s⁽ᵗ⁾ + β_t h(s⁽ᵗ⁾)
//! λ⁽ᵗ⁾   = max(a_t + b_t ‖y − f(A s⁽ᵗ⁾)‖² / Tr(AᴴA), λ_floor)
//! s⁽ᵗ⁺¹⁾ = η(r⁽ᵗ⁾; λ⁽ᵗ⁾)
//! h(s)   = W [ (y − f(As))* ⊙ ∂f/∂z*(As) + (y − f(As)) ⊙ ∂f*/∂z*(As) ]
//! ```
//!
//! and the estimate is `s⁽ᵀ⁺¹⁾`. `λ⁽ᵗ⁾` is computed from `s⁽ᵗ⁾`, the same
//! iterate the gradient step starts from.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::nonlinearity::{residual_weights, ComponentwiseMap};
use crate::numerics::{gemm, pseudo_inverse, trace_gram, CMatrix, CVector, Op};
use crate::shrinkage::ShrinkageFn;
use crate::{Error, Result, C64};

/// Lower clamp on the error-variance estimate.
pub const LAMBDA_FLOOR: f64 = 1e-9;

/// Default `a_t` when the noise variance is not known.
pub const DEFAULT_A_INIT: f64 = 0.01;

/// The `3T` trainable scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtistaParams {
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl CtistaParams {
    /// `β_t = 1`, `b_t = 1`, `a_t = σ²` (or [`DEFAULT_A_INIT`]).
    pub fn init(layers: usize, noise_var: Option<f64>) -> Self {
        let a0 = noise_var.unwrap_or(DEFAULT_A_INIT);
        CtistaParams {
            beta: vec![1.0; layers],
            a: vec![a0; layers],
            b: vec![1.0; layers],
        }
    }

    pub fn new(beta: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let p = CtistaParams { beta, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn layers(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.beta.len();
        if self.a.len() != t || self.b.len() != t {
            return Err(Error::invalid(format!(
                "parameter lists differ in length: beta {}, a {}, b {}",
                t,
                self.a.len(),
                self.b.len()
            )));
        }
        if self
            .beta
            .iter()
            .chain(&self.a)
            .chain(&self.b)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(())
    }

    /// Layer-major flat view `[β₁, a₁, b₁, β₂, …]`; the first `3t` entries
    /// are exactly the parameters of layers `1..=t`.
    pub fn to_flat(&self) -> Vec<f64> {
        (0..self.layers())
            .flat_map(|t| [self.beta[t], self.a[t], self.b[t]])
            .collect()
    }

    /// Overwrites the leading `flat.len() / 3` layers.
    pub fn set_flat_prefix(&mut self, flat: &[f64]) {
        for (t, chunk) in flat.chunks_exact(3).enumerate() {
            self.beta[t] = chunk[0];
            self.a[t] = chunk[1];
            self.b[t] = chunk[2];
        }
    }
}

/// Which matrix multiplies the residual bracket in the gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMatrix {
    /// The pseudo-inverse `W`.
    #[default]
    PseudoInverse,
    /// `Aᴴ`, plain Wirtinger gradient descent scaling.
    Hermitian,
}

/// Frozen problem context shared by every forward pass.
#[derive(Clone, Debug)]
pub struct CtistaModel {
    a: CMatrix,
    w: CMatrix,
    trace_gram: f64,
    noise_gain: f64,
    f: Arc<dyn ComponentwiseMap>,
    eta: ShrinkageFn,
    layers: usize,
    gradient: GradientMatrix,
}

impl CtistaModel {
    pub fn new(
        a: CMatrix,
        f: Arc<dyn ComponentwiseMap>,
        eta: ShrinkageFn,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let w = pseudo_inverse(&a)?;
        let trace_gram = trace_gram(&a);
        let noise_gain = w.frobenius_norm().powi(2) / w.rows() as f64;
        Ok(CtistaModel {
            a,
            w,
            trace_gram,
            noise_gain,
            f,
            eta,
            layers,
            gradient: GradientMatrix::PseudoInverse,
        })
    }

    pub fn with_gradient_matrix(mut self, gradient: GradientMatrix) -> Self {
        self.gradient = gradient;
        self
    }

    pub fn a(&self) -> &CMatrix {
        &self.a
    }

    pub fn w(&self) -> &CMatrix {
        &self.w
    }

    pub fn trace_gram(&self) -> f64 {
        self.trace_gram
    }

    /// `‖W‖²_F / n`: per-component variance of `Ww` for white unit-variance
    /// `w`, i.e. how observation noise shows up in the zero-forcing start.
    pub fn noise_gain(&self) -> f64 {
        self.noise_gain
    }

    /// Initial parameters with `a_t` set to the observation noise variance
    /// carried through `W` (the error-variance scale that `λ` tracks), or
    /// [`DEFAULT_A_INIT`] when the noise variance is unknown.
    pub fn init_params(&self, noise_var: Option<f64>) -> CtistaParams {
        CtistaParams::init(self.layers, noise_var.map(|s| s * self.noise_gain))
    }

    pub fn f(&self) -> &dyn ComponentwiseMap {
        self.f.as_ref()
    }

    pub fn eta(&self) -> &ShrinkageFn {
        &self.eta
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn gradient_matrix(&self) -> GradientMatrix {
        self.gradient
    }

    /// `(m, n)`.
    pub fn dims(&self) -> (usize, usize) {
        self.a.shape()
    }

    fn check_params(&self, params: &CtistaParams) -> Result<()> {
        params.validate()?;
        if params.layers() != self.layers {
            return Err(Error::invalid(format!(
                "model has {} layers but parameters cover {}",
                self.layers,
                params.layers()
            )));
        }
        Ok(())
    }

    fn check_y(&self, y: &[C64]) -> Result<()> {
        if y.len() != self.a.rows() {
            return Err(Error::dim(format!(
                "observation has length {}, expected {}",
                y.len(),
                self.a.rows()
            )));
        }
        Ok(())
    }

    /// Multiplies the residual bracket by `W` (or `Aᴴ`).
    fn apply_gradient_matrix(&self, q: &[C64]) -> Result<CVector> {
        match self.gradient {
            GradientMatrix::PseudoInverse => self.w.matvec(q),
            GradientMatrix::Hermitian => self.a.hermitian_matvec(q),
        }
    }
}

/// One layer of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    /// Iterate entering the layer.
    pub s: CVector,
    /// After the gradient step.
    pub r: CVector,
    pub lambda: f64,
    /// `‖y − f(A s)‖²`.
    pub residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecoveryTrace {
    pub steps: Vec<TraceStep>,
}

/// `h(s)`; with `f = identity` this is `W(y − As)`.
pub fn h_step(model: &CtistaModel, s: &[C64], y: &[C64]) -> Result<CVector> {
    model.check_y(y)?;
    let u = model.a.matvec(s)?;
    let (q, _) = residual_weights(model.f(), &u, y);
    model.apply_gradient_matrix(&q)
}

fn residual_norm_sqr(model: &CtistaModel, s: &[C64], y: &[C64]) -> Result<f64> {
    let u = model.a.matvec(s)?;
    Ok(u.iter()
        .zip(y)
        .map(|(u, y)| (y - model.f.eval(*u)).norm_sqr())
        .sum())
}

fn clamp_lambda(raw: f64) -> f64 {
    // NaN also lands on the floor
    if raw > LAMBDA_FLOOR {
        raw
    } else {
        LAMBDA_FLOOR
    }
}

/// Error-variance estimate of layer `t` (1-based) at iterate `s`.
pub fn lambda_est(
    model: &CtistaModel,
    params: &CtistaParams,
    t: usize,
    s: &[C64],
    y: &[C64],
) -> Result<f64> {
    if t == 0 || t > params.layers() {
        return Err(Error::invalid(format!(
            "layer index {t} outside 1..={}",
            params.layers()
        )));
    }
    model.check_y(y)?;
    let rho = residual_norm_sqr(model, s, y)?;
    Ok(clamp_lambda(
        params.a[t - 1] + params.b[t - 1] * rho / model.trace_gram,
    ))
}

/// Full `T`-layer forward pass returning `s⁽ᵀ⁺¹⁾` and the per-layer trace.
pub fn ctista_forward(
    model: &CtistaModel,
    params: &CtistaParams,
    y: &[C64],
) -> Result<(CVector, RecoveryTrace)> {
    ctista_forward_truncated(model, params, y, model.layers)
}

/// Forward pass through the first `t_active` layers only.
pub fn ctista_forward_truncated(
    model: &CtistaModel,
    params: &CtistaParams,
    y: &[C64],
    t_active: usize,
) -> Result<(CVector, RecoveryTrace)> {
    model.check_params(params)?;
    model.check_y(y)?;
    if t_active == 0 || t_active > model.layers {
        return Err(Error::invalid(format!(
            "active layers {t_active} outside 1..={}",
            model.layers
        )));
    }
    let mut s = model.w.matvec(y)?;
    let mut trace = RecoveryTrace::default();
    for t in 1..=t_active {
        let u = model.a.matvec(&s)?;
        let (q, e) = residual_weights(model.f(), &u, y);
        let residual: f64 = e.iter().map(|z| z.norm_sqr()).sum();
        let lambda = clamp_lambda(params.a[t - 1] + params.b[t - 1] * residual / model.trace_gram);
        let h = model.apply_gradient_matrix(&q)?;
        let beta = params.beta[t - 1];
        let r: CVector = s.iter().zip(h.iter()).map(|(s, h)| s + beta * h).collect();
        let next: CVector = r.iter().map(|r| model.eta.eval(*r, lambda)).collect();
        if !next.is_finite() {
            return Err(Error::Divergence { iteration: t });
        }
        trace.steps.push(TraceStep {
            s,
            r,
            lambda,
            residual,
        });
        s = next;
    }
    Ok((s, trace))
}

/// `x̂ = W y`.
pub fn zf_detect(w: &CMatrix, y: &[C64]) -> Result<CVector> {
    w.matvec(y)
}

/// Intermediates of a batched forward pass, kept for reverse-mode
/// differentiation. Columns are samples.
#[derive(Debug)]
pub(crate) struct BatchTape {
    pub layers: Vec<LayerTape>,
}

#[derive(Debug)]
pub(crate) struct LayerTape {
    /// `A s⁽ᵗ⁾`, `m × L`.
    pub u: CMatrix,
    /// `y − f(u)`, `m × L`.
    pub e: CMatrix,
    /// `h(s⁽ᵗ⁾)`, `n × L`.
    pub h: CMatrix,
    /// `r⁽ᵗ⁾`, `n × L`.
    pub r: CMatrix,
    /// `‖e‖²` per column.
    pub rho: Vec<f64>,
    /// Unclamped variance estimate per column.
    pub lambda_raw: Vec<f64>,
}

impl LayerTape {
    pub fn lambda(&self, col: usize) -> f64 {
        clamp_lambda(self.lambda_raw[col])
    }
}

/// Batched forward pass over the columns of `y` (`m × L`); returns the
/// `n × L` iterate after `t_active` layers and, if requested, the tape.
pub(crate) fn forward_batch_impl(
    model: &CtistaModel,
    params: &CtistaParams,
    y: &CMatrix,
    t_active: usize,
    record: bool,
) -> Result<(CMatrix, Option<BatchTape>)> {
    let (m, n) = model.dims();
    let l = y.cols();
    if y.rows() != m {
        return Err(Error::dim(format!(
            "observation batch has {} rows, expected {m}",
            y.rows()
        )));
    }
    if t_active == 0 || t_active > params.layers() {
        return Err(Error::invalid(format!(
            "active layers {t_active} outside 1..={}",
            params.layers()
        )));
    }
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    let mut s = CMatrix::zeros(n, l);
    gemm(one, &model.w, Op::Plain, y, Op::Plain, zero, &mut s);
    let mut tape = record.then(|| BatchTape {
        layers: Vec::with_capacity(t_active),
    });
    let f = model.f();
    for t in 0..t_active {
        let mut u = CMatrix::zeros(m, l);
        gemm(one, &model.a, Op::Plain, &s, Op::Plain, zero, &mut u);
        let mut e = CMatrix::zeros(m, l);
        let mut q = CMatrix::zeros(m, l);
        let mut rho = vec![0.0; l];
        {
            let (us, ys) = (u.as_slice(), y.as_slice());
            let (es, qs) = (e.as_mut_slice(), q.as_mut_slice());
            for idx in 0..m * l {
                let ui = us[idx];
                let ei = ys[idx] - f.eval(ui);
                es[idx] = ei;
                qs[idx] = if f.is_identity() {
                    ei
                } else {
                    ei.conj() * f.d_dzc(ui) + ei * f.dconj_dzc(ui)
                };
                rho[idx % l] += ei.norm_sqr();
            }
        }
        let mut h = CMatrix::zeros(n, l);
        match model.gradient {
            GradientMatrix::PseudoInverse => {
                gemm(one, &model.w, Op::Plain, &q, Op::Plain, zero, &mut h)
            }
            GradientMatrix::Hermitian => {
                gemm(one, &model.a, Op::Hermitian, &q, Op::Plain, zero, &mut h)
            }
        }
        let lambda_raw: Vec<f64> = rho
            .iter()
            .map(|rho| params.a[t] + params.b[t] * rho / model.trace_gram)
            .collect();
        let beta = params.beta[t];
        let mut r = CMatrix::zeros(n, l);
        {
            let (ss, hs) = (s.as_slice(), h.as_slice());
            let rs = r.as_mut_slice();
            for idx in 0..n * l {
                rs[idx] = ss[idx] + beta * hs[idx];
            }
        }
        {
            let ss = s.as_mut_slice();
            let rs = r.as_slice();
            for idx in 0..n * l {
                ss[idx] = model.eta.eval(rs[idx], clamp_lambda(lambda_raw[idx % l]));
            }
        }
        if !s.is_finite() {
            return Err(Error::Divergence { iteration: t + 1 });
        }
        if let Some(tape) = tape.as_mut() {
            tape.layers.push(LayerTape {
                u,
                e,
                h,
                r,
                rho,
                lambda_raw,
            });
        }
    }
    Ok((s, tape))
}

/// Batched forward pass; column `j` of the result is the estimate for column
/// `j` of `y` after `t_active` layers.
pub fn forward_batch(
    model: &CtistaModel,
    params: &CtistaParams,
    y: &CMatrix,
    t_active: usize,
) -> Result<CMatrix> {
    model.check_params(params)?;
    forward_batch_impl(model, params, y, t_active, false).map(|(s, _)| s)
}

/// Batched forward pass returning the iterate after every layer:
/// element `t − 1` holds `s⁽ᵗ⁺¹⁾` for `t = 1..=t_active`.
pub fn forward_batch_layers(
    model: &CtistaModel,
    params: &CtistaParams,
    y: &CMatrix,
    t_active: usize,
) -> Result<Vec<CMatrix>> {
    model.check_params(params)?;
    let (last, tape) = forward_batch_impl(model, params, y, t_active, true)?;
    let tape = tape.expect("tape was requested");
    let mut out: Vec<CMatrix> = tape.layers[..t_active - 1]
        .iter()
        .map(|layer| {
            let l = layer.r.cols();
            let mut s = layer.r.clone();
            for (idx, v) in s.as_mut_slice().iter_mut().enumerate() {
                *v = model.eta.eval(*v, layer.lambda(idx % l));
            }
            s
        })
        .collect();
    out.push(last);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::{clip_map, grad_lms, Identity};
    use crate::numerics::{dist_sqr, RngStream};
    use crate::shrinkage::{make_psk, soft_complex};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn gaussian(m: usize, n: usize, var: f64, rng: &mut RngStream) -> CMatrix {
        CMatrix::from_fn(m, n, |_, _| rng.cgaussian(c(0.0, 0.0), var))
    }

    fn soft_model(a: CMatrix, layers: usize) -> CtistaModel {
        CtistaModel::new(a, Arc::new(Identity), ShrinkageFn::ComplexSoft, layers).unwrap()
    }

    #[test]
    fn h_step_linear_and_zero_residual() {
        let mut rng = RngStream::new(1, 0);
        let a = gaussian(4, 6, 1.0, &mut rng);
        let model = soft_model(a.clone(), 1);
        let s = CVector::from_fn(6, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let y = CVector::from_fn(4, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let h = h_step(&model, &s, &y).unwrap();
        let as_ = a.matvec(&s).unwrap();
        let res: Vec<C64> = y.iter().zip(as_.iter()).map(|(y, u)| y - u).collect();
        let want = model.w().matvec(&res).unwrap();
        assert!(dist_sqr(&h, &want) < 1e-24);

        let exact = a.matvec(&s).unwrap();
        assert_eq!(h_step(&model, &s, &exact).unwrap().norm_sqr(), 0.0);
        assert!(h_step(&model, &s, &s).is_err());
    }

    #[test]
    fn h_step_is_scaled_gradient_with_hermitian_matrix() {
        let mut rng = RngStream::new(2, 0);
        let a = gaussian(3, 5, 1.0, &mut rng);
        let f = Arc::new(clip_map(0.9).unwrap());
        let model = CtistaModel::new(a.clone(), f.clone(), ShrinkageFn::ComplexSoft, 1)
            .unwrap()
            .with_gradient_matrix(GradientMatrix::Hermitian);
        let s = CVector::from_fn(5, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let y = CVector::from_fn(3, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let h = h_step(&model, &s, &y).unwrap();
        let g = grad_lms(&a, &y, f.as_ref(), &s).unwrap();
        for (h, g) in h.iter().zip(g.iter()) {
            assert!((h + 2.0 * g).norm() < 1e-12);
        }
    }

    #[test]
    fn lambda_estimate_examples() {
        let model = soft_model(CMatrix::identity(3), 1);
        let y = CVector::from(vec![c(1.0, 0.0), c(0.0, 1.0), c(1.0, 1.0)]);
        let p = CtistaParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(lambda_est(&model, &p, 1, &y, &y).unwrap(), LAMBDA_FLOOR);
        let p = CtistaParams::new(vec![1.0], vec![0.5], vec![0.0]).unwrap();
        assert_eq!(
            lambda_est(&model, &p, 1, &CVector::zeros(3), &y).unwrap(),
            0.5
        );
        // ‖y − s‖² = 6 with Tr(AᴴA) = 3
        let p = CtistaParams::new(vec![1.0], vec![0.0], vec![2.0]).unwrap();
        let s = CVector::from(vec![
            c(1.0 - 2f64.sqrt(), 0.0),
            c(0.0, 1.0 + 2f64.sqrt()),
            c(1.0, 1.0 + 2f64.sqrt()),
        ]);
        assert!((lambda_est(&model, &p, 1, &s, &y).unwrap() - 4.0).abs() < 1e-12);
        assert!(lambda_est(&model, &p, 2, &s, &y).is_err());
    }

    #[test]
    fn single_layer_identity_closed_form() {
        let model = soft_model(CMatrix::identity(4), 1);
        let y = CVector::from(vec![c(2.0, 0.0), c(0.1, 0.1), c(-1.0, 1.0), c(0.0, -3.0)]);
        let p = CtistaParams::new(vec![1.0], vec![0.5], vec![0.0]).unwrap();
        let (xhat, trace) = ctista_forward(&model, &p, &y).unwrap();
        assert_eq!(trace.steps[0].r, y);
        for (x, y) in xhat.iter().zip(y.iter()) {
            assert_eq!(*x, soft_complex(*y, 0.5));
        }
    }

    #[test]
    fn square_noiseless_psk_is_a_fixed_point() {
        let mut rng = RngStream::new(3, 0);
        let s8 = make_psk(8).unwrap();
        let a = gaussian(6, 6, 1.0, &mut rng);
        let model = CtistaModel::new(
            a.clone(),
            Arc::new(Identity),
            ShrinkageFn::Mmse(s8.clone()),
            3,
        )
        .unwrap();
        let x = CVector::from_fn(6, |_| s8.points()[rng.index(8)]);
        let y = a.matvec(&x).unwrap();
        let p = CtistaParams::new(vec![1.0; 3], vec![0.0; 3], vec![1.0; 3]).unwrap();
        let (xhat, trace) = ctista_forward(&model, &p, &y).unwrap();
        assert!(dist_sqr(&xhat, &x) < 1e-18);
        assert!(trace.steps[0].residual < 1e-18);
    }

    #[test]
    fn forward_matches_step_by_step_transcript() {
        let mut rng = RngStream::new(4, 0);
        let (m, n, layers) = (4, 8, 3);
        let a = gaussian(m, n, 1.0 / m as f64, &mut rng);
        let x = CVector::from_fn(n, |_| {
            if rng.bernoulli(0.3) {
                rng.cgaussian(c(0.0, 0.0), 1.0)
            } else {
                c(0.0, 0.0)
            }
        });
        let y: CVector = a
            .matvec(&x)
            .unwrap()
            .iter()
            .map(|u| u + rng.cgaussian(c(0.0, 0.0), 1e-3))
            .collect();
        let model = soft_model(a.clone(), layers);
        let p = CtistaParams::new(
            vec![0.9, 1.1, 0.7],
            vec![0.01, 0.02, 0.005],
            vec![0.8, 1.2, 1.0],
        )
        .unwrap();
        let (xhat, trace) = ctista_forward(&model, &p, &y).unwrap();

        // independent transcript
        let w = pseudo_inverse(&a).unwrap();
        let tr: f64 = a.as_slice().iter().map(|z| z.norm_sqr()).sum();
        let mut s = w.matvec(&y).unwrap();
        for t in 0..layers {
            let res: Vec<C64> = y
                .iter()
                .zip(a.matvec(&s).unwrap().iter())
                .map(|(y, u)| y - u)
                .collect();
            let rho: f64 = res.iter().map(|z| z.norm_sqr()).sum();
            assert!((trace.steps[t].residual - rho).abs() <= 1e-12 * rho.max(1.0));
            let lambda = (p.a[t] + p.b[t] * rho / tr).max(LAMBDA_FLOOR);
            assert!((trace.steps[t].lambda - lambda).abs() < 1e-14);
            let wr = w.matvec(&res).unwrap();
            let r: Vec<C64> = s
                .iter()
                .zip(wr.iter())
                .map(|(s, g)| s + p.beta[t] * g)
                .collect();
            s = r.iter().map(|z| soft_complex(*z, lambda)).collect();
        }
        assert!(dist_sqr(&xhat, &s) < 1e-24);
    }

    #[test]
    fn unit_step_projects_onto_consistency() {
        let mut rng = RngStream::new(5, 0);
        let a = gaussian(5, 5, 1.0, &mut rng);
        let x = CVector::from_fn(5, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let y = a.matvec(&x).unwrap();
        let model = soft_model(a.clone(), 2);
        let p = CtistaParams::new(vec![1.0; 2], vec![0.3; 2], vec![0.0; 2]).unwrap();
        let (_, trace) = ctista_forward(&model, &p, &y).unwrap();
        for step in &trace.steps {
            let ar = a.matvec(&step.r).unwrap();
            assert!(dist_sqr(&ar, &y).sqrt() < 1e-9);
            assert!(step.lambda >= LAMBDA_FLOOR);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let mut rng = RngStream::new(6, 0);
        let a = gaussian(4, 6, 0.25, &mut rng);
        let y = CVector::from_fn(4, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let model = soft_model(a, 2);
        let p = CtistaParams::init(2, Some(0.01));
        assert_eq!(
            ctista_forward(&model, &p, &y).unwrap(),
            ctista_forward(&model, &p, &y).unwrap()
        );
        assert!(ctista_forward(&model, &CtistaParams::init(3, None), &y).is_err());
        assert!(ctista_forward(&model, &p, &y[..3]).is_err());
    }

    #[test]
    fn permuting_columns_permutes_the_estimate() {
        let mut rng = RngStream::new(7, 0);
        let (m, n) = (6, 12);
        let a = gaussian(m, n, 1.0 / m as f64, &mut rng);
        let x = CVector::from_fn(n, |i| {
            if i % 4 == 0 {
                rng.cgaussian(c(0.0, 0.0), 1.0)
            } else {
                c(0.0, 0.0)
            }
        });
        let y = a.matvec(&x).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let ap = CMatrix::from_fn(m, n, |i, j| a.get(i, perm[j]));
        let p = CtistaParams::new(vec![1.0; 4], vec![0.01; 4], vec![1.0; 4]).unwrap();
        let (x1, _) = ctista_forward(&soft_model(a, 4), &p, &y).unwrap();
        let (x2, _) = ctista_forward(&soft_model(ap, 4), &p, &y).unwrap();
        for j in 0..n {
            assert!((x2[j] - x1[perm[j]]).norm() < 1e-10);
        }
    }

    #[test]
    fn batched_forward_agrees_with_single_sample() {
        let mut rng = RngStream::new(8, 0);
        let a = gaussian(5, 8, 0.2, &mut rng);
        let f = Arc::new(clip_map(0.6).unwrap());
        let model = CtistaModel::new(a, f, ShrinkageFn::Mmse(make_psk(8).unwrap()), 3).unwrap();
        let p = CtistaParams::new(vec![0.8, 1.0, 1.2], vec![0.05; 3], vec![1.0; 3]).unwrap();
        let ys: Vec<CVector> = (0..4)
            .map(|_| CVector::from_fn(5, |_| rng.cgaussian(c(0.0, 0.0), 1.0)))
            .collect();
        let batch = CMatrix::from_columns(&ys).unwrap();
        let out = forward_batch(&model, &p, &batch, 2).unwrap();
        for (j, y) in ys.iter().enumerate() {
            let (single, _) = ctista_forward_truncated(&model, &p, y, 2).unwrap();
            assert!(dist_sqr(&out.column(j), &single) < 1e-20);
        }
    }

    #[test]
    fn zf_examples() {
        let y = CVector::from(vec![c(1.0, 2.0), c(-0.5, 0.0)]);
        assert_eq!(zf_detect(&CMatrix::identity(2), &y).unwrap(), y);

        let mut rng = RngStream::new(9, 0);
        let a = gaussian(4, 4, 1.0, &mut rng);
        let x = CVector::from_fn(4, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let w = pseudo_inverse(&a).unwrap();
        let xhat = zf_detect(&w, &a.matvec(&x).unwrap()).unwrap();
        assert!(dist_sqr(&xhat, &x) < 1e-20);

        let a = gaussian(3, 7, 1.0, &mut rng);
        let x = CVector::from_fn(7, |_| rng.cgaussian(c(0.0, 0.0), 1.0));
        let y = a.matvec(&x).unwrap();
        let xhat = zf_detect(&pseudo_inverse(&a).unwrap(), &y).unwrap();
        assert!(dist_sqr(&a.matvec(&xhat).unwrap(), &y).sqrt() < 1e-9);
        assert!(zf_detect(&pseudo_inverse(&a).unwrap(), &x).is_err());
    }

    #[test]
    fn per_layer_iterates_match_truncated_passes() {
        let mut rng = RngStream::new(21, 0);
        let a = gaussian(6, 10, 1.0 / 6.0, &mut rng);
        let model = soft_model(a, 4);
        let y = CMatrix::from_fn(6, 3, |_, _| rng.cgaussian(c(0.0, 0.0), 1.0));
        let params = CtistaParams::init(4, Some(0.01));
        let all = forward_batch_layers(&model, &params, &y, 4).unwrap();
        assert_eq!(all.len(), 4);
        for t in 1..=4 {
            let direct = forward_batch(&model, &params, &y, t).unwrap();
            assert_eq!(all[t - 1], direct);
        }
    }

    proptest! {
        #[test]
        fn mmse_iterates_stay_in_the_constellation_disc(
            seed in any::<u64>(),
            beta in 0.1..3.0f64, a in 1e-4..2.0f64, b in -1.0..3.0f64,
        ) {
            let mut rng = RngStream::new(seed, 0);
            let s = make_psk(8).unwrap();
            let model = CtistaModel::new(gaussian(6, 8, 1.0, &mut rng), Arc::new(Identity), ShrinkageFn::Mmse(s), 3).unwrap();
            let y = CVector::from_fn(6, |_| rng.cgaussian(c(0.0, 0.0), 4.0));
            let params = CtistaParams::new(vec![beta; 3], vec![a; 3], vec![b; 3]).unwrap();
            let (x, _) = ctista_forward(&model, &params, &y).unwrap();
            prop_assert!(x.iter().all(|z| z.is_finite() && z.norm() <= 1.0 + 1e-12));
        }

        #[test]
        fn zero_observation_gives_zero_soft_estimate(seed in any::<u64>(), a in 0.0..1.0f64) {
            let mut rng = RngStream::new(seed, 0);
            let model = soft_model(gaussian(5, 9, 0.2, &mut rng), 4);
            let params = CtistaParams::new(vec![1.3; 4], vec![a; 4], vec![0.7; 4]).unwrap();
            let (x, _) = ctista_forward(&model, &params, &CVector::zeros(5)).unwrap();
            prop_assert_eq!(x.norm_sqr(), 0.0);
        }
    }
}
