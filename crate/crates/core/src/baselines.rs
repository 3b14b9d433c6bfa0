//! Reference detectors: real-valued AMP on the widened system and the DFT
//! receiver for clipped OFDM.

use serde::{Deserialize, Serialize};

use crate::numerics::{idft_matrix, narrow_vec, widen, CMatrix, CVector, Op, RMatrix};
use crate::shrinkage::{hard_decision, Constellation};
use crate::{Error, Result, C64};

/// Scalar denoiser used inside AMP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmpDenoiser {
    /// Posterior mean under the Bernoulli-Gaussian prior.
    #[default]
    BayesBg,
    /// Soft threshold at `multiplier · τ`.
    SoftThreshold { multiplier: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmpConfig {
    pub iterations: usize,
    /// Probability that a component is nonzero.
    pub p: f64,
    /// Variance of a nonzero (real) component.
    pub var: f64,
    /// Noise variance per real observation; also the floor on `τ²`.
    pub noise_var: f64,
    pub denoiser: AmpDenoiser,
}

impl AmpConfig {
    fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid(format!(
                "AMP sparsity must be in (0, 1], got {}",
                self.p
            )));
        }
        if !(self.var >= 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::invalid("AMP variances must be >= 0"));
        }
        Ok(())
    }
}

/// Denoiser value and derivative in `r` at effective noise `tau2`.
fn denoise(cfg: &AmpConfig, r: f64, tau2: f64) -> (f64, f64) {
    match cfg.denoiser {
        AmpDenoiser::BayesBg => bayes_bg(r, tau2, cfg.p, cfg.var),
        AmpDenoiser::SoftThreshold { multiplier } => {
            let thr = multiplier * tau2.sqrt();
            if r.abs() > thr {
                (r - thr * r.signum(), 1.0)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Posterior mean of `x ~ (1−p)δ₀ + p N(0, v)` from `r = x + N(0, τ²)`,
/// with its derivative in `r`.
pub fn bayes_bg(r: f64, tau2: f64, p: f64, v: f64) -> (f64, f64) {
    if v <= 0.0 {
        return (0.0, 0.0);
    }
    let gain = v / (v + tau2);
    let curv = 1.0 / tau2 - 1.0 / (v + tau2);
    let pi = if p >= 1.0 {
        1.0
    } else {
        let logit = (p / (1.0 - p)).ln() + 0.5 * (tau2 / (v + tau2)).ln() + 0.5 * r * r * curv;
        1.0 / (1.0 + (-logit).exp())
    };
    let value = pi * gain * r;
    let deriv = gain * pi * (1.0 + (1.0 - pi) * r * r * curv);
    (value, deriv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmpOutput {
    pub estimate: Vec<f64>,
    /// Estimate after each iteration.
    pub iterates: Vec<Vec<f64>>,
    /// `‖z‖²/m` used at each iteration.
    pub tau2: Vec<f64>,
}

/// AMP with its sensing matrix rescaled to unit average column norm.
#[derive(Clone, Debug)]
pub struct AmpSolver {
    a: RMatrix,
    scale: f64,
    cfg: AmpConfig,
}

impl AmpSolver {
    pub fn new(a: &RMatrix, cfg: AmpConfig) -> Result<Self> {
        cfg.validate()?;
        if a.rows() == 0 || a.cols() == 0 {
            return Err(Error::invalid("empty sensing matrix"));
        }
        let scale = (a.frobenius_sqr() / a.cols() as f64).sqrt();
        if !(scale > 0.0) {
            return Err(Error::invalid("sensing matrix is zero"));
        }
        Ok(AmpSolver {
            a: a.scaled(1.0 / scale),
            scale,
            cfg,
        })
    }

    pub fn run(&self, y: &[f64]) -> Result<AmpOutput> {
        let (m, n) = (self.a.rows(), self.a.cols());
        if y.len() != m {
            return Err(Error::dim(format!(
                "AMP observation has length {}, expected {m}",
                y.len()
            )));
        }
        // x' = scale·x lives under a prior with variance scale²·var
        let cfg = AmpConfig {
            var: self.cfg.var * self.scale * self.scale,
            ..self.cfg
        };
        let ratio = n as f64 / m as f64;
        let mut x = vec![0.0; n];
        let mut z = y.to_vec();
        let mut out = AmpOutput {
            estimate: Vec::new(),
            iterates: Vec::with_capacity(cfg.iterations),
            tau2: Vec::with_capacity(cfg.iterations),
        };
        for it in 1..=cfg.iterations {
            let tau2 = (z.iter().map(|v| v * v).sum::<f64>() / m as f64)
                .max(cfg.noise_var)
                .max(1e-300);
            let atz = self.a.transpose_matvec(&z);
            let mut mean_deriv = 0.0;
            for (xi, g) in x.iter_mut().zip(&atz) {
                let (v, d) = denoise(&cfg, *xi + g, tau2);
                *xi = v;
                mean_deriv += d;
            }
            mean_deriv /= n as f64;
            z = onsager_residual(&self.a, y, &x, &z, ratio * mean_deriv);
            if x.iter().chain(&z).any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iteration: it });
            }
            out.tau2.push(tau2);
            out.iterates
                .push(x.iter().map(|v| v / self.scale).collect());
        }
        out.estimate = out.iterates.last().cloned().unwrap_or_else(|| vec![0.0; n]);
        Ok(out)
    }
}

/// `y − A x + c·z_prev`; with `c = 0` this is the plain thresholding residual.
fn onsager_residual(a: &RMatrix, y: &[f64], x: &[f64], z_prev: &[f64], c: f64) -> Vec<f64> {
    let ax = a.matvec(x);
    y.iter()
        .zip(&ax)
        .zip(z_prev)
        .map(|((y, ax), z)| y - ax + c * z)
        .collect()
}

/// Real-valued AMP.
pub fn amp_real(a: &RMatrix, y: &[f64], cfg: AmpConfig) -> Result<AmpOutput> {
    AmpSolver::new(a, cfg)?.run(y)
}

/// Complex Bernoulli-Gaussian prior seen through the widening: each real
/// coordinate is treated as an independent real Bernoulli-Gaussian variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexAmpConfig {
    pub iterations: usize,
    pub p: f64,
    /// Variance of a nonzero complex component.
    pub sigma_x2: f64,
    /// Complex noise variance.
    pub noise_var: f64,
    pub denoiser: AmpDenoiser,
}

impl ComplexAmpConfig {
    fn real(&self) -> AmpConfig {
        AmpConfig {
            iterations: self.iterations,
            p: self.p,
            var: self.sigma_x2 / 2.0,
            noise_var: self.noise_var / 2.0,
            denoiser: self.denoiser,
        }
    }
}

/// AMP on the widened system of a fixed complex matrix.
#[derive(Clone, Debug)]
pub struct WidenedAmp {
    solver: AmpSolver,
    rows: usize,
}

impl WidenedAmp {
    pub fn new(a: &CMatrix, cfg: ComplexAmpConfig) -> Result<Self> {
        let (a_r, _) = widen(a, &vec![C64::new(0.0, 0.0); a.rows()])?;
        Ok(WidenedAmp {
            solver: AmpSolver::new(&a_r, cfg.real())?,
            rows: a.rows(),
        })
    }

    /// Complex estimate after every iteration.
    pub fn iterates(&self, y: &[C64]) -> Result<Vec<CVector>> {
        if y.len() != self.rows {
            return Err(Error::dim(format!(
                "observation has length {}, expected {}",
                y.len(),
                self.rows
            )));
        }
        let out = self.solver.run(&crate::numerics::widen_vec(y))?;
        out.iterates.iter().map(|x| narrow_vec(x)).collect()
    }

    pub fn recover(&self, y: &[C64]) -> Result<CVector> {
        let n = self.solver.a.cols() / 2;
        Ok(self.iterates(y)?.pop().unwrap_or_else(|| CVector::zeros(n)))
    }
}

/// Widens `(A, y)`, runs real AMP and reassembles the complex estimate.
pub fn widened_amp_recover(a: &CMatrix, y: &[C64], cfg: ComplexAmpConfig) -> Result<CVector> {
    WidenedAmp::new(a, cfg)?.recover(y)
}

/// DFT receiver with its forward transform cached.
#[derive(Clone, Debug)]
pub struct DftReceiver {
    f: CMatrix,
    constellation: Constellation,
}

impl DftReceiver {
    pub fn new(n: usize, constellation: Constellation) -> Result<Self> {
        Ok(DftReceiver {
            f: idft_matrix(n)?,
            constellation,
        })
    }

    /// `Fᴴ y`.
    pub fn soft(&self, y: &[C64]) -> Result<CVector> {
        if y.len() != self.f.rows() {
            return Err(Error::dim(format!(
                "block has length {}, expected {}",
                y.len(),
                self.f.rows()
            )));
        }
        self.f.hermitian_matvec(y)
    }

    /// `Fᴴ Y` for a batch of blocks stored as columns.
    pub fn soft_batch(&self, y: &CMatrix) -> Result<CMatrix> {
        self.f.mul(Op::Hermitian, y, Op::Plain)
    }

    pub fn detect(&self, y: &[C64]) -> Result<(CVector, CVector)> {
        let soft = self.soft(y)?;
        let hard = soft
            .iter()
            .map(|z| hard_decision(*z, &self.constellation))
            .collect();
        Ok((soft, hard))
    }
}

/// Soft and hard outputs of the DFT receiver for one received block.
pub fn dft_receiver(y: &[C64], n: usize, s: &Constellation) -> Result<(CVector, CVector)> {
    DftReceiver::new(n, s.clone())?.detect(y)
}
