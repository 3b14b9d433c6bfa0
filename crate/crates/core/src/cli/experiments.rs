//! Monte-Carlo evaluation routines behind the CLI subcommands.
//!
//! Trials are processed in fixed-size chunks; chunks may run on any worker
//! but results are reduced in trial order, so output does not depend on the
//! number of threads.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ComplexAmpConfig, DftReceiver, WidenedAmp};
use crate::numerics::{gemm, CMatrix, Op};
use crate::recovery::{forward_batch, forward_batch_layers, CtistaModel, CtistaParams};
use crate::scenarios::{
    mse, symbol_errors, MatrixEnsemble, MeanAccumulator, NmseAccumulator, Scenario, Source,
};
use crate::{Error, Result, C64};

/// Chunks evaluated between checks of the symbol-error stopping rule.
pub const SER_ROUND_CHUNKS: usize = 8;

/// Detectors that can be compared against C-TISTA.
#[derive(
    Clone,
    Copy,
    Debug,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Zero forcing, `x̂ = W y`.
    Zf,
    /// AMP on the widened real system (sparse scenarios only).
    Amp,
    /// DFT receiver (OFDM scenarios only).
    Dft,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Zf => "zf",
            Baseline::Amp => "amp",
            Baseline::Dft => "dft",
        }
    }
}

/// Header comment identifying how a CSV was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub params: String,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!(
            "# ctista {} command={} config_digest={} seed={} params={}",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.config_digest,
            self.seed,
            self.params
        )
    }
}

pub trait CsvRow {
    const HEADER: &'static str;
    fn write_csv(&self, out: &mut String);
}

/// Rows plus the provenance needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult<R> {
    pub provenance: Provenance,
    pub rows: Vec<R>,
}

impl<R: CsvRow> ExperimentResult<R> {
    pub fn to_csv(&self) -> String {
        let mut out = self.provenance.line();
        out.push('\n');
        out.push_str(R::HEADER);
        out.push('\n');
        for row in &self.rows {
            row.write_csv(&mut out);
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRow {
    pub t: usize,
    pub algorithm: String,
    pub nmse_db: f64,
    pub trials: u64,
    pub stderr_db: f64,
}

impl CsvRow for IterRow {
    const HEADER: &'static str = "t,algorithm,nmse_db,trials,stderr_db";
    fn write_csv(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{:.6},{},{:.6}",
            self.t, self.algorithm, self.nmse_db, self.trials, self.stderr_db
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnrRow {
    pub snr_db: f64,
    pub algorithm: String,
    /// Per-symbol squared error averaged over trials.
    pub mse: f64,
    /// Symbol error rate; NaN for continuous sources.
    pub ser: f64,
    pub trials: u64,
    pub symbol_errors: u64,
}

impl CsvRow for SnrRow {
    const HEADER: &'static str = "snr_db,algorithm,mse,ser,trials";
    fn write_csv(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{:.6e},{:.6e},{}",
            self.snr_db, self.algorithm, self.mse, self.ser, self.trials
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub re: f64,
    pub im: f64,
    pub algorithm: String,
}

impl CsvRow for ScatterRow {
    const HEADER: &'static str = "re,im,algorithm";
    fn write_csv(&self, out: &mut String) {
        let _ = write!(out, "{:.9},{:.9},{}", self.re, self.im, self.algorithm);
    }
}

/// Runs `f(first_trial, count)` over `trials` trials in chunks of `chunk`,
/// returning per-chunk results in trial order.
fn map_chunks<T: Send>(
    first: u64,
    trials: usize,
    chunk: usize,
    f: impl Fn(u64, usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let chunks = trials.div_ceil(chunk);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * chunk;
            f(first + start as u64, chunk.min(trials - start))
        })
        .collect()
}

fn check_baseline(scn: &Scenario, b: Baseline) -> Result<()> {
    match b {
        Baseline::Amp if !matches!(scn.source(), Source::BernoulliGaussian { .. }) => Err(
            Error::Config("the amp baseline needs a sparse (cs-sparse) scenario".into()),
        ),
        Baseline::Dft if scn.config().ensemble != MatrixEnsemble::Idft => Err(Error::Config(
            "the dft baseline needs the idft ensemble".into(),
        )),
        _ => Ok(()),
    }
}

fn amp_for(scn: &Scenario, iterations: usize) -> Result<WidenedAmp> {
    let Source::BernoulliGaussian { p, sigma_x2 } = *scn.source() else {
        return Err(Error::Config(
            "the amp baseline needs a sparse (cs-sparse) scenario".into(),
        ));
    };
    WidenedAmp::new(
        scn.a(),
        ComplexAmpConfig {
            iterations,
            p,
            sigma_x2,
            noise_var: scn.sigma2(),
            denoiser: scn.config().eval.amp_denoiser,
        },
    )
}

/// Soft estimates of a baseline detector for a batch of observations.
fn baseline_batch(
    b: Baseline,
    model: &CtistaModel,
    amp: Option<&WidenedAmp>,
    dft: Option<&DftReceiver>,
    y: &CMatrix,
) -> Result<CMatrix> {
    match b {
        Baseline::Zf => {
            let mut out = CMatrix::zeros(model.w().rows(), y.cols());
            gemm(
                C64::new(1.0, 0.0),
                model.w(),
                Op::Plain,
                y,
                Op::Plain,
                C64::new(0.0, 0.0),
                &mut out,
            );
            Ok(out)
        }
        Baseline::Dft => dft.expect("dft receiver prepared").soft_batch(y),
        Baseline::Amp => {
            let amp = amp.expect("amp prepared");
            let cols = (0..y.cols())
                .map(|j| amp.recover(&y.column(j)))
                .collect::<Result<Vec<_>>>()?;
            CMatrix::from_columns(&cols)
        }
    }
}

/// NMSE after each layer `t = 1..=T` for C-TISTA, plus the requested
/// baselines (AMP per iteration; ZF repeated on every row).
pub fn sweep_iter(
    scn: &Scenario,
    model: &CtistaModel,
    params: &CtistaParams,
    label: &str,
    baselines: &[Baseline],
    trials: usize,
) -> Result<Vec<IterRow>> {
    for b in baselines {
        check_baseline(scn, *b)?;
        if *b == Baseline::Dft {
            return Err(Error::Config(
                "sweep-iter supports the zf and amp baselines".into(),
            ));
        }
    }
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let layers = model.layers();
    let amp = baselines
        .contains(&Baseline::Amp)
        .then(|| amp_for(scn, layers))
        .transpose()?;
    let chunk = scn.config().eval.chunk;
    // per chunk: [algorithm][t] -> per-trial (estimate error, truth energy) pairs
    let per_chunk = map_chunks(0, trials, chunk, |first, count| {
        let batch = scn.eval_batch(first, count)?;
        let mut series: Vec<Vec<CMatrix>> =
            vec![forward_batch_layers(model, params, &batch.y, layers)?];
        for b in baselines {
            match b {
                Baseline::Zf => {
                    let zf = baseline_batch(*b, model, None, None, &batch.y)?;
                    series.push(vec![zf; layers]);
                }
                Baseline::Amp => {
                    let amp = amp.as_ref().expect("amp prepared");
                    let per_trial = (0..count)
                        .map(|j| amp.iterates(&batch.y.column(j)))
                        .collect::<Result<Vec<_>>>()?;
                    let by_t = (0..layers)
                        .map(|t| {
                            CMatrix::from_columns(
                                &per_trial.iter().map(|it| it[t].clone()).collect::<Vec<_>>(),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    series.push(by_t);
                }
                Baseline::Dft => unreachable!("rejected above"),
            }
        }
        Ok((batch.x, series))
    })?;

    let names: Vec<String> = std::iter::once(label.to_string())
        .chain(baselines.iter().map(|b| b.name().to_string()))
        .collect();
    let mut acc = vec![vec![NmseAccumulator::default(); layers]; names.len()];
    for (x, series) in &per_chunk {
        for (alg, estimates) in series.iter().enumerate() {
            for (t, est) in estimates.iter().enumerate() {
                for j in 0..x.cols() {
                    acc[alg][t].push(&est.column(j), &x.column(j));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (alg, name) in names.iter().enumerate() {
        for (t, a) in acc[alg].iter().enumerate().take(layers) {
            if a.skipped > 0 {
                eprintln!(
                    "warning: {name} t={}: skipped {} all-zero trials",
                    t + 1,
                    a.skipped
                );
            }
            rows.push(IterRow {
                t: t + 1,
                algorithm: name.clone(),
                nmse_db: a.db(),
                trials: a.trials(),
                stderr_db: a.stderr_db(),
            });
        }
    }
    Ok(rows)
}

/// Trial budget of an SNR point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialPolicy {
    /// Trials always run.
    pub trials: usize,
    /// Keep going until every detector has this many symbol errors...
    pub min_errors: u64,
    /// ...or this many trials have run.
    pub max_trials: usize,
    pub chunk: usize,
}

impl TrialPolicy {
    pub fn from_scenario(scn: &Scenario, trials: Option<usize>) -> Self {
        let e = &scn.config().eval;
        let trials = trials.unwrap_or(e.trials);
        TrialPolicy {
            trials,
            min_errors: e.ser_min_errors,
            max_trials: e.ser_max_trials.max(trials),
            chunk: e.chunk,
        }
    }
}

/// MSE and SER at the scenario's SNR for C-TISTA (labelled `label`) and the
/// requested baselines.
pub fn snr_point(
    scn: &Scenario,
    model: &CtistaModel,
    params: &CtistaParams,
    label: &str,
    baselines: &[Baseline],
    policy: TrialPolicy,
) -> Result<Vec<SnrRow>> {
    for b in baselines {
        check_baseline(scn, *b)?;
    }
    if policy.trials == 0 || policy.chunk == 0 {
        return Err(Error::Config("trials and chunk must be >= 1".into()));
    }
    let layers = model.layers();
    let amp = baselines
        .contains(&Baseline::Amp)
        .then(|| amp_for(scn, layers))
        .transpose()?;
    let dft = match (baselines.contains(&Baseline::Dft), scn.constellation()) {
        (true, Some(s)) => Some(DftReceiver::new(scn.config().n, s.clone())?),
        (true, None) => Some(DftReceiver::new(
            scn.config().n,
            crate::shrinkage::make_qam16(),
        )?),
        _ => None,
    };
    let detectors = 1 + baselines.len();
    let mut mse_acc = vec![MeanAccumulator::default(); detectors];
    let mut errors = vec![0u64; detectors];
    let mut done = 0usize;
    let constellation = scn.constellation();
    let n = scn.config().n as u64;
    loop {
        let round = if done < policy.trials {
            policy.trials - done
        } else {
            (policy.chunk * SER_ROUND_CHUNKS).min(policy.max_trials - done)
        };
        let chunks = map_chunks(done as u64, round, policy.chunk, |first, count| {
            let batch = scn.eval_batch(first, count)?;
            let mut out = Vec::with_capacity(detectors);
            out.push(forward_batch(model, params, &batch.y, layers)?);
            for b in baselines {
                out.push(baseline_batch(
                    *b,
                    model,
                    amp.as_ref(),
                    dft.as_ref(),
                    &batch.y,
                )?);
            }
            // per detector: per-trial (mse, symbol errors)
            let stats: Vec<Vec<(f64, u64)>> = out
                .iter()
                .map(|est| {
                    (0..count)
                        .map(|j| {
                            let (e, x) = (est.column(j), batch.x.column(j));
                            let errs = constellation.map_or(0, |s| symbol_errors(&e, &x, s));
                            (mse(&e, &x), errs)
                        })
                        .collect()
                })
                .collect();
            Ok(stats)
        })?;
        for stats in &chunks {
            for (d, per_trial) in stats.iter().enumerate() {
                for (m, e) in per_trial {
                    mse_acc[d].push(*m);
                    errors[d] += e;
                }
            }
        }
        done += round;
        let enough = constellation.is_none() || errors.iter().all(|e| *e >= policy.min_errors);
        if enough || done >= policy.max_trials {
            break;
        }
    }
    let names =
        std::iter::once(label.to_string()).chain(baselines.iter().map(|b| b.name().to_string()));
    let snr = scn.config().snr_db.unwrap_or(f64::NAN);
    Ok(names
        .enumerate()
        .map(|(d, name)| SnrRow {
            snr_db: snr,
            algorithm: name,
            mse: mse_acc[d].mean(),
            ser: if constellation.is_some() {
                errors[d] as f64 / (done as u64 * n) as f64
            } else {
                f64::NAN
            },
            trials: done as u64,
            symbol_errors: errors[d],
        })
        .collect())
}

/// Soft (pre-decision) estimates of one block for C-TISTA and the DFT
/// receiver.
pub fn scatter(
    scn: &Scenario,
    model: &CtistaModel,
    params: &CtistaParams,
    label: &str,
    trial: u64,
) -> Result<Vec<ScatterRow>> {
    check_baseline(scn, Baseline::Dft)?;
    let batch = scn.eval_batch(trial, 1)?;
    let ctista = forward_batch(model, params, &batch.y, model.layers())?;
    let s = scn
        .constellation()
        .cloned()
        .unwrap_or_else(crate::shrinkage::make_qam16);
    let dft = DftReceiver::new(scn.config().n, s)?.soft_batch(&batch.y)?;
    let rows = |est: &CMatrix, name: &str| -> Vec<ScatterRow> {
        est.column(0)
            .iter()
            .map(|z| ScatterRow {
                re: z.re,
                im: z.im,
                algorithm: name.to_string(),
            })
            .collect()
    };
    let mut out = rows(&ctista, label);
    out.extend(rows(&dft, Baseline::Dft.name()));
    Ok(out)
}

/// SNR (dB) at which a curve first crosses `target`, interpolating
/// `log₁₀ SER` linearly between grid points. `points` must be sorted by SNR.
pub fn snr_at_ser(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let lt = target.log10();
    points.windows(2).find_map(|w| {
        let ((s0, p0), (s1, p1)) = (w[0], w[1]);
        if p0 >= target && p1 <= target && p0 > 0.0 {
            if p1 <= 0.0 {
                return Some(s1);
            }
            let (l0, l1) = (p0.log10(), p1.log10());
            if l0 == l1 {
                return Some(s0);
            }
            Some(s0 + (l0 - lt) / (l0 - l1) * (s1 - s0))
        } else {
            None
        }
    })
}
