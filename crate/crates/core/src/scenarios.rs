//! Experiment generators, SNR and PAPR calibration, and error metrics.
//!
//! Each scenario draws its sensing matrix once from the master seed and keeps
//! it for training and evaluation. Random streams are partitioned by purpose:
//! the matrix, noise calibration, training mini-batches and evaluation trials
//! each use their own disjoint range of stream ids.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::AmpDenoiser;
use crate::nonlinearity::{clip_map, ComponentwiseMap, Identity};
use crate::numerics::{gemm, idft_matrix, CMatrix, CVector, Op, RngStream};
use crate::recovery::{CtistaModel, GradientMatrix};
use crate::shrinkage::{Constellation, ShrinkageFn};
use crate::{Error, Result, C64};

pub const STREAM_MATRIX: u64 = 1;
pub const STREAM_CALIBRATION: u64 = 2;
pub const TRAIN_STREAM_BASE: u64 = 1 << 48;
pub const EVAL_STREAM_BASE: u64 = 1 << 50;
const TRAIN_GEN_SHIFT: u32 = 24;

/// Blocks used for the Monte-Carlo estimate of clipped signal power.
pub const CALIBRATION_BLOCKS: usize = 10_000;

/// NMSE reported when the error is exactly zero.
pub const NMSE_FLOOR_DB: f64 = -150.0;

/// Stream id of mini-batch `k` in training generation `generation`.
pub fn train_stream(generation: usize, k: usize) -> u64 {
    assert!(k < 1 << TRAIN_GEN_SHIFT && generation < 1 << TRAIN_GEN_SHIFT);
    TRAIN_STREAM_BASE + ((generation as u64) << TRAIN_GEN_SHIFT) + k as u64
}

/// Stream id of evaluation trial `trial`.
pub fn eval_stream(trial: u64) -> u64 {
    assert!(trial < EVAL_STREAM_BASE);
    EVAL_STREAM_BASE + trial
}

pub fn is_train_stream(id: u64) -> bool {
    (TRAIN_STREAM_BASE..EVAL_STREAM_BASE).contains(&id)
}

pub fn is_eval_stream(id: u64) -> bool {
    id >= EVAL_STREAM_BASE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Sparse complex Gaussian-Bernoulli source, soft shrinkage.
    CsSparse,
    /// Uniform 8-PSK source on an underdetermined Gaussian channel.
    Psk8Under,
    /// 16-QAM OFDM block through the IDFT and an amplitude clipper.
    ClippedOfdm,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::CsSparse => "cs-sparse",
            ScenarioKind::Psk8Under => "psk8-under",
            ScenarioKind::ClippedOfdm => "clipped-ofdm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixEnsemble {
    /// i.i.d. `CN(0, 1/m)`.
    CnUnitOverM,
    /// i.i.d. `CN(0, 1)`.
    CnUnit,
    /// The deterministic `n×n` inverse DFT.
    Idft,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    #[default]
    Adjoint,
    FiniteDifference,
}

/// Starting values of the layer added in each training generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewLayerInit {
    /// `β = 1`, `a = σ²`, `b = 1`.
    #[default]
    Declared,
    /// Copy of the trained parameters of the previous layer.
    PreviousLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Mini-batches per generation (K).
    pub minibatches: usize,
    /// Samples per mini-batch (L).
    pub batch_size: usize,
    /// Adam learning rate (ξ).
    pub learning_rate: f64,
    /// Only train the newest layer in each generation.
    pub freeze_earlier: bool,
    pub new_layer_init: NewLayerInit,
    pub gradient: GradientMethod,
    pub gradient_matrix: GradientMatrix,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            minibatches: 500,
            batch_size: 200,
            learning_rate: 0.0005,
            freeze_earlier: false,
            new_layer_init: NewLayerInit::Declared,
            gradient: GradientMethod::Adjoint,
            gradient_matrix: GradientMatrix::PseudoInverse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trials (blocks) per MSE/NMSE point.
    pub trials: usize,
    /// SER points keep adding trials until this many symbol errors...
    pub ser_min_errors: u64,
    /// ...or this many trials.
    pub ser_max_trials: usize,
    pub snr_grid: Vec<f64>,
    /// Trials pushed through one batched forward pass.
    pub chunk: usize,
    pub amp_denoiser: AmpDenoiser,
    /// SNR at which `sweep-snr` trains a single parameter set; when absent
    /// each grid point is trained separately.
    pub train_snr_db: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 1000,
            ser_min_errors: 100,
            ser_max_trials: 20_000,
            snr_grid: vec![5.0, 10.0, 15.0, 20.0, 25.0],
            chunk: 50,
            amp_denoiser: AmpDenoiser::BayesBg,
            train_snr_db: None,
        }
    }
}

/// Generative description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n: usize,
    pub m: usize,
    /// Number of C-TISTA layers (T).
    pub layers: usize,
    pub seed: u64,
    pub ensemble: MatrixEnsemble,
    /// Nonzero probability of the sparse source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Variance of a nonzero sparse component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_x2: Option<f64>,
    /// `8psk`, `qam16` or `mpsk:<M>` for discrete sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constellation: Option<String>,
    /// Target PAPR of the clipper in dB; absent means no clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub papr_db: Option<f64>,
    /// Fixed noise variance; exclusive with `snr_db`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ScenarioConfig {
    /// Settings of the three reference experiments.
    pub fn preset(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::CsSparse => ScenarioConfig {
                kind,
                n: 300,
                m: 150,
                layers: 12,
                seed: 1,
                ensemble: MatrixEnsemble::CnUnitOverM,
                p: Some(0.1),
                sigma_x2: Some(1.0),
                constellation: None,
                papr_db: None,
                sigma2: Some(0.02 * 0.02),
                snr_db: None,
                training: TrainingConfig {
                    minibatches: 1000,
                    new_layer_init: NewLayerInit::PreviousLayer,
                    ..TrainingConfig::default()
                },
                eval: EvalConfig {
                    amp_denoiser: AmpDenoiser::SoftThreshold { multiplier: 1.2 },
                    ..EvalConfig::default()
                },
            },
            ScenarioKind::Psk8Under => ScenarioConfig {
                kind,
                n: 200,
                m: 160,
                layers: 10,
                seed: 1,
                ensemble: MatrixEnsemble::CnUnit,
                p: None,
                sigma_x2: None,
                constellation: Some("8psk".into()),
                papr_db: None,
                sigma2: None,
                snr_db: Some(20.0),
                training: TrainingConfig::default(),
                eval: EvalConfig::default(),
            },
            ScenarioKind::ClippedOfdm => ScenarioConfig {
                kind,
                n: 128,
                m: 128,
                layers: 10,
                seed: 1,
                ensemble: MatrixEnsemble::Idft,
                p: None,
                sigma_x2: None,
                constellation: Some("qam16".into()),
                papr_db: Some(3.0),
                sigma2: None,
                snr_db: Some(17.5),
                training: TrainingConfig::default(),
                eval: EvalConfig {
                    snr_grid: vec![5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0],
                    ..EvalConfig::default()
                },
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be positive".into());
        }
        if self.m > self.n {
            return bad(format!("m = {} exceeds n = {}", self.m, self.n));
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        match (self.sigma2, self.snr_db) {
            (Some(_), Some(_)) => return bad("give either sigma2 or snr_db, not both".into()),
            (None, None) => return bad("noise needs sigma2 or snr_db".into()),
            (Some(s), None) if !(s >= 0.0 && s.is_finite()) => {
                return bad(format!("sigma2 = {s} is not >= 0"))
            }
            (None, Some(s)) if s.is_nan() => return bad("snr_db is NaN".into()),
            _ => {}
        }
        match self.kind {
            ScenarioKind::CsSparse => {
                let p = self.p.unwrap_or(f64::NAN);
                if !(p > 0.0 && p <= 1.0) {
                    return bad(format!("cs-sparse needs 0 < p <= 1, got {:?}", self.p));
                }
                if !(self.sigma_x2.unwrap_or(f64::NAN) > 0.0) {
                    return bad(format!(
                        "cs-sparse needs sigma_x2 > 0, got {:?}",
                        self.sigma_x2
                    ));
                }
                if self.ensemble == MatrixEnsemble::Idft {
                    return bad("cs-sparse uses a Gaussian ensemble".into());
                }
            }
            ScenarioKind::Psk8Under | ScenarioKind::ClippedOfdm => {
                self.constellation()?;
                if self.kind == ScenarioKind::ClippedOfdm
                    && (self.ensemble != MatrixEnsemble::Idft || self.m != self.n)
                {
                    return bad("clipped-ofdm needs ensemble = \"idft\" and m = n".into());
                }
            }
        }
        if let Some(papr) = self.papr_db {
            if self.kind != ScenarioKind::ClippedOfdm {
                return bad("papr_db only applies to clipped-ofdm".into());
            }
            if papr.is_nan() {
                return bad("papr_db is NaN".into());
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate > 0.0) {
            return bad("training needs batch_size >= 1 and learning_rate > 0".into());
        }
        if self.eval.chunk == 0 {
            return bad("eval.chunk must be >= 1".into());
        }
        Ok(())
    }

    pub fn constellation(&self) -> Result<Constellation> {
        let name = self.constellation.as_deref().unwrap_or(match self.kind {
            ScenarioKind::ClippedOfdm => "qam16",
            _ => "8psk",
        });
        name.parse()
    }
}

/// Prior of the transmitted vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    BernoulliGaussian { p: f64, sigma_x2: f64 },
    Uniform(Constellation),
}

impl Source {
    /// `E|x_i|²`.
    pub fn power(&self) -> f64 {
        match self {
            Source::BernoulliGaussian { p, sigma_x2 } => p * sigma_x2,
            Source::Uniform(s) => s.avg_power(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<CVector> {
        match self {
            Source::BernoulliGaussian { p, sigma_x2 } => sample_bg_source(n, *p, *sigma_x2, rng),
            Source::Uniform(s) => Ok(sample_const_source(n, s, rng)),
        }
    }
}

/// Each component is 0 with probability `1 − p`, otherwise `CN(0, σ_x²)`.
pub fn sample_bg_source(n: usize, p: f64, sigma_x2: f64, rng: &mut RngStream) -> Result<CVector> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p must be in (0, 1], got {p}")));
    }
    if !(sigma_x2 > 0.0) {
        return Err(Error::invalid(format!(
            "sigma_x2 must be > 0, got {sigma_x2}"
        )));
    }
    Ok(CVector::from_fn(n, |_| {
        if rng.bernoulli(p) {
            rng.cgaussian(C64::new(0.0, 0.0), sigma_x2)
        } else {
            C64::new(0.0, 0.0)
        }
    }))
}

/// i.i.d. uniform draws from the constellation.
pub fn sample_const_source(n: usize, s: &Constellation, rng: &mut RngStream) -> CVector {
    CVector::from_fn(n, |_| s.points()[rng.index(s.len())])
}

pub fn sample_matrix(
    kind: MatrixEnsemble,
    m: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<CMatrix> {
    let zero = C64::new(0.0, 0.0);
    match kind {
        MatrixEnsemble::CnUnitOverM => Ok(CMatrix::from_fn(m, n, |_, _| {
            rng.cgaussian(zero, 1.0 / m as f64)
        })),
        MatrixEnsemble::CnUnit => Ok(CMatrix::from_fn(m, n, |_, _| rng.cgaussian(zero, 1.0))),
        MatrixEnsemble::Idft => {
            if m != n {
                return Err(Error::invalid("the IDFT ensemble is square"));
            }
            idft_matrix(n)
        }
    }
}

/// Clipping level `α = √(P_avg · 10^{PAPR/10})` where `P_avg` is the
/// per-sample power of the unclipped time-domain block, equal to the
/// constellation's average power because the IDFT is unitary. An infinite
/// PAPR gives `α = ∞`, i.e. no clipping.
pub fn clip_level_from_papr(papr_db: f64, s: &Constellation, n: usize) -> Result<f64> {
    if papr_db.is_nan() || n == 0 {
        return Err(Error::invalid("PAPR must be a number and n >= 1"));
    }
    if papr_db == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok((s.avg_power() * 10f64.powf(papr_db / 10.0)).sqrt())
}

/// `10 log₁₀(max_k |x̃_k|² / p_avg)`.
pub fn papr_of(time_signal: &[C64], p_avg: f64) -> Result<f64> {
    if !(p_avg > 0.0) {
        return Err(Error::invalid("average power must be > 0"));
    }
    let peak = time_signal.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    Ok(10.0 * (peak / p_avg).log10())
}

fn nonlinearity_for(cfg: &ScenarioConfig) -> Result<(Arc<dyn ComponentwiseMap>, Option<f64>)> {
    match cfg.papr_db {
        Some(papr) if cfg.kind == ScenarioKind::ClippedOfdm => {
            let alpha = clip_level_from_papr(papr, &cfg.constellation()?, cfg.n)?;
            Ok((Arc::new(clip_map(alpha)?), Some(alpha)))
        }
        _ => Ok((Arc::new(Identity), None)),
    }
}

fn source_for(cfg: &ScenarioConfig) -> Result<Source> {
    Ok(match cfg.kind {
        ScenarioKind::CsSparse => Source::BernoulliGaussian {
            p: cfg.p.unwrap_or(0.1),
            sigma_x2: cfg.sigma_x2.unwrap_or(1.0),
        },
        _ => Source::Uniform(cfg.constellation()?),
    })
}

/// `E‖f(Ax)‖²` for the scenario's ensemble: closed form for linear
/// Gaussian ensembles, Monte Carlo over [`CALIBRATION_BLOCKS`] blocks on the
/// calibration stream when clipping is active.
pub fn expected_signal_energy(cfg: &ScenarioConfig) -> Result<f64> {
    let source = source_for(cfg)?;
    let (m, n) = (cfg.m as f64, cfg.n as f64);
    let (f, _) = nonlinearity_for(cfg)?;
    Ok(match cfg.ensemble {
        MatrixEnsemble::CnUnit => m * n * source.power(),
        MatrixEnsemble::CnUnitOverM => n * source.power(),
        MatrixEnsemble::Idft if f.is_identity() => n * source.power(),
        MatrixEnsemble::Idft => {
            let fm = idft_matrix(cfg.n)?;
            let mut rng = RngStream::new(cfg.seed, STREAM_CALIBRATION);
            let mut total = 0.0;
            let mut u = CVector::zeros(cfg.n);
            for _ in 0..CALIBRATION_BLOCKS {
                let x = source.sample(cfg.n, &mut rng)?;
                fm.matvec_into(&x, &mut u);
                total += u.iter().map(|z| f.eval(*z).norm_sqr()).sum::<f64>();
            }
            total / CALIBRATION_BLOCKS as f64
        }
    })
}

/// Noise variance per observation: the fixed `sigma2`, or
/// `E‖f(Ax)‖² / (m·10^{SNR/10})`.
pub fn calibrate_noise(cfg: &ScenarioConfig) -> Result<f64> {
    match (cfg.sigma2, cfg.snr_db) {
        (Some(s), _) => Ok(s),
        (None, Some(snr)) => Ok(noise_for_snr(expected_signal_energy(cfg)?, cfg.m, snr)),
        (None, None) => Err(Error::Config("noise needs sigma2 or snr_db".into())),
    }
}

fn noise_for_snr(energy: f64, m: usize, snr_db: f64) -> f64 {
    energy / (m as f64 * 10f64.powf(snr_db / 10.0))
}

/// Columns are i.i.d. instances `Y = f(AX) + W`.
#[derive(Clone, Debug)]
pub struct InstanceBatch {
    /// `n × L` true signals.
    pub x: CMatrix,
    /// `m × L` observations.
    pub y: CMatrix,
    pub sigma2: f64,
}

impl InstanceBatch {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A configuration with its sensing matrix drawn and noise calibrated.
#[derive(Clone, Debug)]
pub struct Scenario {
    cfg: ScenarioConfig,
    a: CMatrix,
    source: Source,
    f: Arc<dyn ComponentwiseMap>,
    alpha: Option<f64>,
    signal_energy: f64,
    sigma2: f64,
}

impl Scenario {
    pub fn build(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.seed, STREAM_MATRIX);
        let a = sample_matrix(cfg.ensemble, cfg.m, cfg.n, &mut rng)?;
        let source = source_for(&cfg)?;
        let (f, alpha) = nonlinearity_for(&cfg)?;
        let signal_energy = expected_signal_energy(&cfg)?;
        let sigma2 = match (cfg.sigma2, cfg.snr_db) {
            (Some(s), _) => s,
            (None, Some(snr)) => noise_for_snr(signal_energy, cfg.m, snr),
            (None, None) => unreachable!("validated"),
        };
        Ok(Scenario {
            cfg,
            a,
            source,
            f,
            alpha,
            signal_energy,
            sigma2,
        })
    }

    /// Same matrix and clipper at another SNR.
    pub fn with_snr_db(&self, snr_db: f64) -> Scenario {
        let mut cfg = self.cfg.clone();
        cfg.sigma2 = None;
        cfg.snr_db = Some(snr_db);
        Scenario {
            sigma2: noise_for_snr(self.signal_energy, cfg.m, snr_db),
            cfg,
            ..self.clone()
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn a(&self) -> &CMatrix {
        &self.a
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn nonlinearity(&self) -> Arc<dyn ComponentwiseMap> {
        self.f.clone()
    }

    /// Clipping level, if the scenario clips.
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `E‖f(Ax)‖²` used for SNR calibration.
    pub fn signal_energy(&self) -> f64 {
        self.signal_energy
    }

    /// Constellation of a discrete source.
    pub fn constellation(&self) -> Option<&Constellation> {
        match &self.source {
            Source::Uniform(s) => Some(s),
            Source::BernoulliGaussian { .. } => None,
        }
    }

    pub fn shrinkage(&self) -> ShrinkageFn {
        match &self.source {
            Source::BernoulliGaussian { .. } => ShrinkageFn::ComplexSoft,
            Source::Uniform(s) => ShrinkageFn::Mmse(s.clone()),
        }
    }

    pub fn model(&self) -> Result<CtistaModel> {
        Ok(CtistaModel::new(
            self.a.clone(),
            self.f.clone(),
            self.shrinkage(),
            self.cfg.layers,
        )?
        .with_gradient_matrix(self.cfg.training.gradient_matrix))
    }

    pub fn rng(&self, stream: u64) -> RngStream {
        RngStream::new(self.cfg.seed, stream)
    }

    /// Draws `x` then the noise, returning `(x, y = f(Ax) + w)`.
    pub fn generate_instance(&self, rng: &mut RngStream) -> Result<(CVector, CVector)> {
        let x = self.source.sample(self.cfg.n, rng)?;
        let u = self.a.matvec(&x)?;
        let y = u
            .iter()
            .map(|u| self.f.eval(*u) + rng.cgaussian(C64::new(0.0, 0.0), self.sigma2))
            .collect();
        Ok((x, y))
    }

    /// `l` instances drawn in sequence from `rng`, stacked as columns.
    pub fn generate_batch(&self, l: usize, rng: &mut RngStream) -> Result<InstanceBatch> {
        if l == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let (m, n) = self.a.shape();
        let mut x = CMatrix::zeros(n, l);
        let mut w = CMatrix::zeros(m, l);
        for j in 0..l {
            let xj = self.source.sample(n, rng)?;
            x.set_column(j, &xj);
            for i in 0..m {
                w.set(i, j, rng.cgaussian(C64::new(0.0, 0.0), self.sigma2));
            }
        }
        let mut u = CMatrix::zeros(m, l);
        gemm(
            C64::new(1.0, 0.0),
            &self.a,
            Op::Plain,
            &x,
            Op::Plain,
            C64::new(0.0, 0.0),
            &mut u,
        );
        let mut y = w;
        for (yi, ui) in y.as_mut_slice().iter_mut().zip(u.as_slice()) {
            *yi += self.f.eval(*ui);
        }
        Ok(InstanceBatch {
            x,
            y,
            sigma2: self.sigma2,
        })
    }

    /// Instances of trials `first..first + count`, one evaluation stream per
    /// trial.
    pub fn eval_batch(&self, first: u64, count: usize) -> Result<InstanceBatch> {
        let mut xs = Vec::with_capacity(count);
        let mut ys = Vec::with_capacity(count);
        for k in 0..count as u64 {
            let mut rng = self.rng(eval_stream(first + k));
            let (x, y) = self.generate_instance(&mut rng)?;
            xs.push(x);
            ys.push(y);
        }
        Ok(InstanceBatch {
            x: CMatrix::from_columns(&xs)?,
            y: CMatrix::from_columns(&ys)?,
            sigma2: self.sigma2,
        })
    }
}

/// `‖x̂ − x‖² / ‖x‖²`, or `None` for an all-zero truth.
pub fn nmse_ratio(xhat: &[C64], x: &[C64]) -> Option<f64> {
    let energy: f64 = x.iter().map(|z| z.norm_sqr()).sum();
    (energy > 0.0).then(|| crate::numerics::dist_sqr(xhat, x) / energy)
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// Single-trial NMSE in dB; `None` for an all-zero truth.
pub fn nmse(xhat: &[C64], x: &[C64]) -> Option<f64> {
    nmse_ratio(xhat, x).map(ratio_to_db)
}

/// Per-symbol squared error `‖x̂ − x‖² / n`.
pub fn mse(xhat: &[C64], x: &[C64]) -> f64 {
    crate::numerics::dist_sqr(xhat, x) / x.len() as f64
}

/// Number of components whose hard decision differs from the true symbol.
pub fn symbol_errors(xhat: &[C64], x: &[C64], s: &Constellation) -> u64 {
    xhat.iter()
        .zip(x)
        .filter(|(xh, x)| s.nearest_index(**xh) != s.nearest_index(**x))
        .count() as u64
}

/// Symbol error rate after nearest-point decisions.
pub fn ser(xhat: &[C64], x: &[C64], s: &Constellation) -> f64 {
    symbol_errors(xhat, x, s) as f64 / x.len() as f64
}

/// Running mean and standard error of a per-trial quantity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAccumulator {
    pub count: u64,
    sum: f64,
    sum_sq: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        let n = self.count as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

/// NMSE averaged over trials: the mean of the per-trial ratio, in dB.
/// Trials with an all-zero truth are counted in `skipped` and ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NmseAccumulator {
    ratios: MeanAccumulator,
    pub skipped: u64,
}

impl NmseAccumulator {
    pub fn push(&mut self, xhat: &[C64], x: &[C64]) {
        match nmse_ratio(xhat, x) {
            Some(r) => self.ratios.push(r),
            None => self.skipped += 1,
        }
    }

    pub fn trials(&self) -> u64 {
        self.ratios.count
    }

    pub fn mean_ratio(&self) -> f64 {
        self.ratios.mean()
    }

    pub fn db(&self) -> f64 {
        ratio_to_db(self.ratios.mean())
    }

    /// Delta-method standard error of the dB value.
    pub fn stderr_db(&self) -> f64 {
        let mean = self.ratios.mean();
        if mean > 0.0 {
            10.0 / std::f64::consts::LN_10 * self.ratios.stderr() / mean
        } else {
            0.0
        }
    }
}
