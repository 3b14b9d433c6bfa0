//! Component-wise complex maps with Wirtinger derivatives and the
//! least-squares gradient they induce.
//!
//! For `f: ℂ → ℂ` the two derivatives that matter are `∂f/∂z*` and
//! `∂f*/∂z*`. The steepest-descent direction of
//! `g(x) = ‖y − f(Ax)‖²` is `−∇g` with
//!
//! ```text
//! ∇g(x) = −½ Aᴴ [ (y − f(Ax))* ⊙ ∂f/∂z*(Ax) + (y − f(Ax)) ⊙ ∂f*/∂z*(Ax) ]
//! ```

use std::fmt::Debug;

use crate::numerics::{CMatrix, CVector};
use crate::{Error, Result, C64};

/// Wirtinger derivatives of the two first-order derivative maps
/// `d1 = ∂f/∂z*` and `d2 = ∂f*/∂z*`, as needed by reverse-mode training.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SecondWirtinger {
    pub d1_dz: C64,
    pub d1_dzc: C64,
    pub d2_dz: C64,
    pub d2_dzc: C64,
}

/// A scalar complex function applied coordinate-wise, together with its
/// Wirtinger derivatives.
pub trait ComponentwiseMap: Debug + Send + Sync {
    fn name(&self) -> String;

    fn eval(&self, z: C64) -> C64;

    /// `∂f/∂z*` at `z`.
    fn d_dzc(&self, z: C64) -> C64;

    /// `∂f*/∂z*` at `z`.
    fn dconj_dzc(&self, z: C64) -> C64;

    /// `∂f/∂z`, which is always `conj(∂f*/∂z*)`.
    fn d_dz(&self, z: C64) -> C64 {
        self.dconj_dzc(z).conj()
    }

    fn second(&self, z: C64) -> SecondWirtinger;

    /// Distance from `z` to the closest point where the map is not smooth.
    fn nonsmooth_distance(&self, _z: C64) -> f64 {
        f64::INFINITY
    }

    fn smooth_everywhere(&self) -> bool {
        true
    }

    /// True when `eval` is the identity; enables shortcuts.
    fn is_identity(&self) -> bool {
        false
    }
}

/// `f(z) = z`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Identity;

impl ComponentwiseMap for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn eval(&self, z: C64) -> C64 {
        z
    }

    fn d_dzc(&self, _z: C64) -> C64 {
        C64::new(0.0, 0.0)
    }

    fn dconj_dzc(&self, _z: C64) -> C64 {
        C64::new(1.0, 0.0)
    }

    fn second(&self, _z: C64) -> SecondWirtinger {
        SecondWirtinger::default()
    }

    fn is_identity(&self) -> bool {
        true
    }
}

/// Amplitude clipping at level `alpha`: identity inside the disc of radius
/// `alpha`, `alpha·e^{iφ(z)}` outside. An infinite level never clips.
///
/// With `f(z) = α z (z z*)^{−1/2}` outside the disc:
///
/// ```text
/// ∂f/∂z*  = −α z² / (2|z|³)
/// ∂f*/∂z* =  α / (2|z|)
/// ```
///
/// On the circle `|z| = α` the interior branch is used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipMap {
    alpha: f64,
}

impl ClipMap {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!(
                "clipping level must be > 0, got {alpha}"
            )));
        }
        Ok(ClipMap { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    fn clips(&self, z: C64) -> bool {
        z.norm() > self.alpha
    }
}

/// Builds the clipping map of level `alpha`.
pub fn clip_map(alpha: f64) -> Result<ClipMap> {
    ClipMap::new(alpha)
}

impl ComponentwiseMap for ClipMap {
    fn name(&self) -> String {
        format!("clip(alpha={})", self.alpha)
    }

    fn eval(&self, z: C64) -> C64 {
        if self.clips(z) {
            z * (self.alpha / z.norm())
        } else {
            z
        }
    }

    fn d_dzc(&self, z: C64) -> C64 {
        if self.clips(z) {
            let r = z.norm();
            -z * z * (self.alpha / (2.0 * r * r * r))
        } else {
            C64::new(0.0, 0.0)
        }
    }

    fn dconj_dzc(&self, z: C64) -> C64 {
        if self.clips(z) {
            C64::new(self.alpha / (2.0 * z.norm()), 0.0)
        } else {
            C64::new(1.0, 0.0)
        }
    }

    fn second(&self, z: C64) -> SecondWirtinger {
        if !self.clips(z) {
            return SecondWirtinger::default();
        }
        let r = z.norm();
        let r3 = r * r * r;
        let a = self.alpha;
        SecondWirtinger {
            d1_dz: -z * (a / (4.0 * r3)),
            d1_dzc: z * z * z * (3.0 * a / (4.0 * r3 * r * r)),
            d2_dz: -z.conj() * (a / (4.0 * r3)),
            d2_dzc: -z * (a / (4.0 * r3)),
        }
    }

    fn nonsmooth_distance(&self, z: C64) -> f64 {
        (z.norm() - self.alpha).abs()
    }

    fn smooth_everywhere(&self) -> bool {
        self.alpha.is_infinite()
    }

    fn is_identity(&self) -> bool {
        self.alpha.is_infinite()
    }
}

/// `f(z) = z + c·z²`, an analytic map used to exercise the general
/// gradient against its analytic specialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticMap {
    pub c: C64,
}

impl QuadraticMap {
    /// Complex derivative `f′(z) = 1 + 2cz`.
    pub fn derivative(&self, z: C64) -> C64 {
        C64::new(1.0, 0.0) + 2.0 * self.c * z
    }
}

impl ComponentwiseMap for QuadraticMap {
    fn name(&self) -> String {
        format!("quadratic(c={})", self.c)
    }

    fn eval(&self, z: C64) -> C64 {
        z + self.c * z * z
    }

    fn d_dzc(&self, _z: C64) -> C64 {
        C64::new(0.0, 0.0)
    }

    fn dconj_dzc(&self, z: C64) -> C64 {
        self.derivative(z).conj()
    }

    fn second(&self, _z: C64) -> SecondWirtinger {
        SecondWirtinger {
            d2_dzc: (2.0 * self.c).conj(),
            ..SecondWirtinger::default()
        }
    }
}

/// Default finite-difference step at `z`.
pub fn default_fd_step(z: C64) -> f64 {
    1e-5 * z.norm().max(1.0)
}

/// Central-difference Wirtinger derivatives `(∂g/∂z, ∂g/∂z*)` of an arbitrary
/// scalar function, with no smoothness check.
pub fn wirtinger_fd_of(g: impl Fn(C64) -> C64, z: C64, h: f64) -> (C64, C64) {
    let dr = (g(z + C64::new(h, 0.0)) - g(z - C64::new(h, 0.0))) / (2.0 * h);
    let di = (g(z + C64::new(0.0, h)) - g(z - C64::new(0.0, h))) / (2.0 * h);
    let i = C64::new(0.0, 1.0);
    (0.5 * (dr - i * di), 0.5 * (dr + i * di))
}

/// Numerical `(∂f/∂z, ∂f/∂z*)` of a component-wise map. Fails when `z` is
/// within `2h` of a non-smooth locus, where central differences straddle
/// the kink.
pub fn wirtinger_fd(f: &dyn ComponentwiseMap, z: C64, h: Option<f64>) -> Result<(C64, C64)> {
    let h = h.unwrap_or_else(|| default_fd_step(z));
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let dist = f.nonsmooth_distance(z);
    if dist <= 2.0 * h {
        return Err(Error::NearNonSmooth(format!(
            "{} at z={z} is {dist:e} from a non-smooth locus (step {h:e})",
            f.name()
        )));
    }
    Ok(wirtinger_fd_of(|w| f.eval(w), z, h))
}

/// `q = e* ⊙ ∂f/∂z*(u) + e ⊙ ∂f*/∂z*(u)` with `e = y − f(u)`; the bracket of
/// the LMS gradient. Returns `(q, e)`.
pub(crate) fn residual_weights(
    f: &dyn ComponentwiseMap,
    u: &[C64],
    y: &[C64],
) -> (Vec<C64>, Vec<C64>) {
    if f.is_identity() {
        let e: Vec<C64> = y.iter().zip(u).map(|(y, u)| y - u).collect();
        return (e.clone(), e);
    }
    let mut q = Vec::with_capacity(u.len());
    let mut e = Vec::with_capacity(u.len());
    for (ui, yi) in u.iter().zip(y) {
        let ei = yi - f.eval(*ui);
        q.push(ei.conj() * f.d_dzc(*ui) + ei * f.dconj_dzc(*ui));
        e.push(ei);
    }
    (q, e)
}

fn check_dims(a: &CMatrix, y: &[C64], x: &[C64]) -> Result<()> {
    let (m, n) = a.shape();
    if y.len() != m || x.len() != n {
        return Err(Error::dim(format!(
            "A is {m}x{n} but |y| = {} and |x| = {}",
            y.len(),
            x.len()
        )));
    }
    Ok(())
}

/// `g(x) = ‖y − f(Ax)‖²`.
pub fn lms_objective(a: &CMatrix, y: &[C64], f: &dyn ComponentwiseMap, x: &[C64]) -> Result<f64> {
    check_dims(a, y, x)?;
    let u = a.matvec(x)?;
    Ok(u.iter()
        .zip(y)
        .map(|(u, y)| (y - f.eval(*u)).norm_sqr())
        .sum())
}

/// `∇g(x) = −∂g/∂x*` of the least-squares objective.
pub fn grad_lms(a: &CMatrix, y: &[C64], f: &dyn ComponentwiseMap, x: &[C64]) -> Result<CVector> {
    check_dims(a, y, x)?;
    let u = a.matvec(x)?;
    let (q, _) = residual_weights(f, &u, y);
    let mut g = a.hermitian_matvec(&q)?;
    g.iter_mut().for_each(|z| *z *= -0.5);
    Ok(g)
}

/// Plain gradient descent `x ← x − 2β∇g(x)`, `iterations` times.
pub fn gradient_descent(
    a: &CMatrix,
    y: &[C64],
    f: &dyn ComponentwiseMap,
    beta: f64,
    iterations: usize,
    x0: &[C64],
) -> Result<CVector> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("step size must be > 0, got {beta}")));
    }
    check_dims(a, y, x0)?;
    let mut x = CVector::from(x0.to_vec());
    for it in 1..=iterations {
        let g = grad_lms(a, y, f, &x)?;
        for (xi, gi) in x.iter_mut().zip(g.iter()) {
            *xi -= 2.0 * beta * gi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
    }
    Ok(x)
}
