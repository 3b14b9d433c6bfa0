//! Scalar shrinkage estimators for the projection step and symbol decisions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::{Error, Result, C64};

/// Finite complex signal set with its average power `Σ|s|²/M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    name: String,
    points: Vec<C64>,
    avg_power: f64,
}

impl Constellation {
    pub fn new(name: impl Into<String>, points: Vec<C64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("constellation needs at least one point"));
        }
        if points
            .iter()
            .any(|p| !(p.re.is_finite() && p.im.is_finite()))
        {
            return Err(Error::invalid("constellation points must be finite"));
        }
        for (i, p) in points.iter().enumerate() {
            if points[..i].contains(p) {
                return Err(Error::invalid(format!("duplicate constellation point {p}")));
            }
        }
        let avg_power = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
        Ok(Constellation {
            name: name.into(),
            points,
            avg_power,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn avg_power(&self) -> f64 {
        self.avg_power
    }

    pub fn max_modulus(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> C64 {
        self.points.iter().sum::<C64>() / self.points.len() as f64
    }

    /// Index of the nearest point; ties go to the lowest index.
    pub fn nearest_index(&self, y: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, s) in self.points.iter().enumerate() {
            let d = (y - s).norm_sqr();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }
}

impl fmt::Display for Constellation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Accepts `8psk`, `qam16` and `mpsk:<M>`.
impl FromStr for Constellation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "8psk" => make_psk(8),
            "qam16" => Ok(make_qam16()),
            other => match other.strip_prefix("mpsk:") {
                Some(m) => {
                    let m: usize = m
                        .parse()
                        .map_err(|_| Error::Config(format!("bad PSK order in {other:?}")))?;
                    make_psk(m)
                }
                None => Err(Error::Config(format!("unknown constellation {other:?}"))),
            },
        }
    }
}

/// Unit-power M-PSK with points `exp(i·2πk/M)`, `k = 0..M−1`.
pub fn make_psk(m: usize) -> Result<Constellation> {
    if m < 2 {
        return Err(Error::invalid(format!("PSK order must be >= 2, got {m}")));
    }
    let points = (0..m)
        .map(|k| C64::from_polar(1.0, 2.0 * PI * k as f64 / m as f64))
        .collect();
    let name = if m == 8 {
        "8psk".to_string()
    } else {
        format!("mpsk:{m}")
    };
    Constellation::new(name, points)
}

/// Unnormalized 16-QAM `{p + iq : p, q ∈ {±1, ±3}}`, average power 10.
pub fn make_qam16() -> Constellation {
    let levels = [-3.0, -1.0, 1.0, 3.0];
    let points = levels
        .iter()
        .flat_map(|&p| levels.iter().map(move |&q| C64::new(p, q)))
        .collect();
    Constellation::new("qam16", points).expect("16-QAM points are distinct")
}

/// Real soft threshold `max(|x| − λ, 0)·sign(x)`.
pub fn soft_real(x: f64, lambda: f64) -> f64 {
    (x.abs() - lambda).max(0.0) * x.signum()
}

/// Complex soft shrinkage: the modulus is soft-thresholded, the phase kept.
pub fn soft_complex(x: C64, lambda: f64) -> C64 {
    let r = x.norm();
    if r <= lambda || r == 0.0 {
        C64::new(0.0, 0.0)
    } else {
        x * (soft_real(r, lambda) / r)
    }
}

/// Posterior mean of a uniform prior over `S` seen through an AWGN channel
/// of variance `lambda`. `lambda <= 0` returns the hard decision.
pub fn mmse_shrink(y: C64, lambda: f64, s: &Constellation) -> C64 {
    if !(lambda > 0.0) {
        return hard_decision(y, s);
    }
    let dmin = s
        .points
        .iter()
        .map(|p| (y - p).norm_sqr())
        .fold(f64::INFINITY, f64::min);
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0;
    for p in &s.points {
        let w = (-((y - p).norm_sqr() - dmin) / lambda).exp();
        num += p * w;
        den += w;
    }
    num / den
}

/// Nearest constellation point, lowest index on ties.
pub fn hard_decision(y: C64, s: &Constellation) -> C64 {
    s.points[s.nearest_index(y)]
}

/// Shrinkage value with its derivatives: Wirtinger derivatives in the
/// input and the ordinary derivative in `λ`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShrinkDerivs {
    pub value: C64,
    pub d_dr: C64,
    pub d_drc: C64,
    pub d_dlambda: C64,
}

/// The projection-step estimator `η(r; λ)`.
#[derive(Clone, Debug, PartialEq)]
pub enum ShrinkageFn {
    ComplexSoft,
    Mmse(Constellation),
}

impl ShrinkageFn {
    pub fn eval(&self, r: C64, lambda: f64) -> C64 {
        match self {
            ShrinkageFn::ComplexSoft => soft_complex(r, lambda),
            ShrinkageFn::Mmse(s) => mmse_shrink(r, lambda, s),
        }
    }

    /// Value and derivatives for `λ > 0`.
    pub fn eval_with_derivs(&self, r: C64, lambda: f64) -> ShrinkDerivs {
        match self {
            ShrinkageFn::ComplexSoft => {
                let a = r.norm();
                if a <= lambda || a == 0.0 {
                    return ShrinkDerivs::default();
                }
                let unit = r / a;
                ShrinkDerivs {
                    value: r - unit * lambda,
                    d_dr: C64::new(1.0 - lambda / (2.0 * a), 0.0),
                    d_drc: unit * unit * (lambda / (2.0 * a)),
                    d_dlambda: -unit,
                }
            }
            ShrinkageFn::Mmse(s) => mmse_derivs(r, lambda, s),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ShrinkageFn::ComplexSoft => "soft".into(),
            ShrinkageFn::Mmse(s) => format!("mmse({})", s.name()),
        }
    }
}

fn mmse_derivs(r: C64, lambda: f64, s: &Constellation) -> ShrinkDerivs {
    let d: Vec<f64> = s.points.iter().map(|p| (r - p).norm_sqr()).collect();
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|di| (-(di - dmin) / lambda).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mean = C64::new(0.0, 0.0);
    let mut second = 0.0;
    let mut sq = C64::new(0.0, 0.0);
    let mut dbar = 0.0;
    for ((p, wi), di) in s.points.iter().zip(&w).zip(&d) {
        let pr = wi / total;
        mean += p * pr;
        second += pr * p.norm_sqr();
        sq += p * p * pr;
        dbar += pr * di;
    }
    let mut dl = C64::new(0.0, 0.0);
    for ((p, wi), di) in s.points.iter().zip(&w).zip(&d) {
        dl += p * (wi / total * (di - dbar));
    }
    ShrinkDerivs {
        value: mean,
        d_dr: C64::new((second - mean.norm_sqr()) / lambda, 0.0),
        d_drc: (sq - mean * mean) / lambda,
        d_dlambda: dl / (lambda * lambda),
    }
}
