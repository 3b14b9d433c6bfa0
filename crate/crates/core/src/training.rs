//! Loss, parameter gradients, Adam, the incremental training schedule and
//! the trained-parameter file.
//!
//! Gradients with respect to the `3t` scalars of the active layers come from
//! central finite differences on a fixed batch, or from a reverse-mode sweep
//! through the recorded forward pass. The two agree to well within `1e-4`
//! relative; the test suite checks this on random instances.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{gemm, CMatrix, Op};
use crate::recovery::{
    forward_batch_impl, CtistaModel, CtistaParams, GradientMatrix, LAMBDA_FLOOR,
};
use crate::scenarios::{train_stream, GradientMethod, InstanceBatch, NewLayerInit, Scenario};
use crate::{Error, Result, C64};

/// Relative finite-difference step: `h = FD_REL_STEP · max(1, |θ|)`.
pub const FD_REL_STEP: f64 = 1e-4;

/// Version tag of the parameter file layout.
pub const PARAM_FILE_VERSION: u32 = 1;

/// Bias-corrected Adam moments for a fixed number of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(lr: f64, dim: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update of `theta` against `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.dim() || grad.len() != self.dim() {
            return Err(Error::dim(format!(
                "Adam holds {} moments, got {} parameters and {} gradients",
                self.dim(),
                theta.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    state.step(&mut theta, grad)?;
    Ok(theta)
}

fn check_batch(model: &CtistaModel, batch: &InstanceBatch) -> Result<()> {
    let (m, n) = model.dims();
    if batch.x.rows() != n || batch.y.rows() != m || batch.x.cols() != batch.y.cols() {
        return Err(Error::dim(format!(
            "batch is x {}×{}, y {}×{}; model needs n = {n}, m = {m}",
            batch.x.rows(),
            batch.x.cols(),
            batch.y.rows(),
            batch.y.cols()
        )));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

fn check_active(params: &CtistaParams, t_active: usize) -> Result<()> {
    params.validate()?;
    if t_active == 0 || t_active > params.layers() {
        return Err(Error::invalid(format!(
            "active layers {t_active} outside 1..={}",
            params.layers()
        )));
    }
    Ok(())
}

fn loss_of(s: &CMatrix, x: &CMatrix) -> f64 {
    let l = x.cols();
    let mut per_col = vec![0.0; l];
    for (idx, (a, b)) in s.as_slice().iter().zip(x.as_slice()).enumerate() {
        per_col[idx % l] += (a - b).norm_sqr();
    }
    per_col.iter().sum::<f64>() / l as f64
}

/// Mean over the batch of `‖s⁽ᵗ⁺¹⁾ − x‖²` after `t_active` layers.
pub fn batch_loss(
    model: &CtistaModel,
    params: &CtistaParams,
    batch: &InstanceBatch,
    t_active: usize,
) -> Result<f64> {
    check_batch(model, batch)?;
    check_active(params, t_active)?;
    let (s, _) = forward_batch_impl(model, params, &batch.y, t_active, false)?;
    Ok(loss_of(&s, &batch.x))
}

/// Flat indices `[3·first, 3·t_active)` of the parameters being trained.
fn active_range(t_active: usize, first_layer: usize) -> std::ops::Range<usize> {
    3 * first_layer..3 * t_active
}

/// Central-difference gradient of [`batch_loss`] over the `3·t_active`
/// scalars of layers `1..=t_active`, in layer-major order
/// `[β₁, a₁, b₁, β₂, …]`. `h` is the relative step (default
/// [`FD_REL_STEP`]). The batch is fixed, so repeated calls are identical.
pub fn grad_fd(
    model: &CtistaModel,
    batch: &InstanceBatch,
    params: &CtistaParams,
    t_active: usize,
    h: Option<f64>,
) -> Result<Vec<f64>> {
    grad_fd_range(model, batch, params, t_active, 0, h)
}

fn grad_fd_range(
    model: &CtistaModel,
    batch: &InstanceBatch,
    params: &CtistaParams,
    t_active: usize,
    first_layer: usize,
    h: Option<f64>,
) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    check_active(params, t_active)?;
    let rel = h.unwrap_or(FD_REL_STEP);
    if !(rel > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {rel}"
        )));
    }
    let base = params.to_flat();
    let loss_at = |flat: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.set_flat_prefix(flat);
        let (s, _) = forward_batch_impl(model, &p, &batch.y, t_active, false)?;
        Ok(loss_of(&s, &batch.x))
    };
    active_range(t_active, first_layer)
        .into_par_iter()
        .map(|i| {
            let step = rel * base[i].abs().max(1.0);
            let mut plus = base[..3 * t_active].to_vec();
            let mut minus = plus.clone();
            plus[i] += step;
            minus[i] -= step;
            Ok((loss_at(&plus)? - loss_at(&minus)?) / (2.0 * step))
        })
        .collect()
}

/// Loss and its exact gradient over the scalars of layers `1..=t_active`,
/// by a reverse sweep through the recorded forward pass. Layout as in
/// [`grad_fd`].
///
/// Complex cotangents are carried as `∂L/∂Re z + i ∂L/∂Im z`; a map `w(z)`
/// pulls a cotangent back as `conj(∂w/∂z)·ḡ + ∂w/∂z*·conj(ḡ)`.
pub fn grad_adjoint(
    model: &CtistaModel,
    batch: &InstanceBatch,
    params: &CtistaParams,
    t_active: usize,
) -> Result<(f64, Vec<f64>)> {
    check_batch(model, batch)?;
    check_active(params, t_active)?;
    let (s_out, tape) = forward_batch_impl(model, params, &batch.y, t_active, true)?;
    let tape = tape.expect("tape was requested");
    let loss = loss_of(&s_out, &batch.x);

    let (m, n) = model.dims();
    let l = batch.len();
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    let f = model.f();
    let eta = model.eta();
    let tr = model.trace_gram();
    let mut grad = vec![0.0; 3 * t_active];

    // cotangent of the current layer's output iterate
    let mut g_s = CMatrix::zeros(n, l);
    for (g, (s, x)) in g_s
        .as_mut_slice()
        .iter_mut()
        .zip(s_out.as_slice().iter().zip(batch.x.as_slice()))
    {
        *g = (s - x) * (2.0 / l as f64);
    }

    for t in (0..t_active).rev() {
        let layer = &tape.layers[t];
        let beta = params.beta[t];

        // shrinkage s' = η(r; λ)
        let mut g_r = CMatrix::zeros(n, l);
        let mut g_lambda = vec![0.0; l];
        {
            let (rs, gs) = (layer.r.as_slice(), g_s.as_slice());
            let gr = g_r.as_mut_slice();
            for idx in 0..n * l {
                let col = idx % l;
                let d = eta.eval_with_derivs(rs[idx], layer.lambda(col));
                let gsi = gs[idx];
                gr[idx] = d.d_dr.conj() * gsi + d.d_drc * gsi.conj();
                g_lambda[col] += (gsi.conj() * d.d_dlambda).re;
            }
        }

        // λ = a + b ρ / Tr, inactive below the floor
        let mut g_rho = vec![0.0; l];
        for col in 0..l {
            if layer.lambda_raw[col] > LAMBDA_FLOOR {
                grad[3 * t + 1] += g_lambda[col];
                grad[3 * t + 2] += g_lambda[col] * layer.rho[col] / tr;
                g_rho[col] = g_lambda[col] * params.b[t] / tr;
            }
        }

        // r = s + β h
        let mut g_beta = 0.0;
        let mut g_h = CMatrix::zeros(n, l);
        {
            let (gr, hs) = (g_r.as_slice(), layer.h.as_slice());
            let gh = g_h.as_mut_slice();
            for idx in 0..n * l {
                g_beta += (gr[idx].conj() * hs[idx]).re;
                gh[idx] = gr[idx] * beta;
            }
        }
        grad[3 * t] = g_beta;

        // h = W q (or Aᴴ q)
        let mut g_q = CMatrix::zeros(m, l);
        match model.gradient_matrix() {
            GradientMatrix::PseudoInverse => gemm(
                one,
                model.w(),
                Op::Hermitian,
                &g_h,
                Op::Plain,
                zero,
                &mut g_q,
            ),
            GradientMatrix::Hermitian => {
                gemm(one, model.a(), Op::Plain, &g_h, Op::Plain, zero, &mut g_q)
            }
        }

        // q = e* ⊙ d1(u) + e ⊙ d2(u), e = y − f(u), ρ = ‖e‖²
        let mut g_u = CMatrix::zeros(m, l);
        {
            let (us, es, gq) = (layer.u.as_slice(), layer.e.as_slice(), g_q.as_slice());
            let gu = g_u.as_mut_slice();
            for idx in 0..m * l {
                let (u, e, q) = (us[idx], es[idx], gq[idx]);
                let g_rho_e = e * (2.0 * g_rho[idx % l]);
                if f.is_identity() {
                    gu[idx] = -(q + g_rho_e);
                    continue;
                }
                let d1 = f.d_dzc(u);
                let d2 = f.dconj_dzc(u);
                let sw = f.second(u);
                let g_e = d2.conj() * q + d1 * q.conj() + g_rho_e;
                let eq = e * q;
                let ecq = e.conj() * q;
                gu[idx] = -d2 * g_e - d1 * g_e.conj()
                    + sw.d1_dz.conj() * eq
                    + sw.d1_dzc * eq.conj()
                    + sw.d2_dz.conj() * ecq
                    + sw.d2_dzc * ecq.conj();
            }
        }

        // s enters r directly and through u = A s
        if t > 0 {
            gemm(
                one,
                model.a(),
                Op::Hermitian,
                &g_u,
                Op::Plain,
                zero,
                &mut g_s,
            );
            for (gs, gr) in g_s.as_mut_slice().iter_mut().zip(g_r.as_slice()) {
                *gs += gr;
            }
        }
    }
    Ok((loss, grad))
}

/// Loss curve of one generation of the incremental schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    /// Number of scalars updated in this generation.
    pub trained_params: usize,
    pub losses: Vec<f64>,
    /// Parameters at the end of the generation.
    pub params: CtistaParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub generations: Vec<GenerationLog>,
    pub params: CtistaParams,
    pub wall_clock_secs: f64,
    pub seed: u64,
    /// Stream id of the first and last mini-batch drawn.
    pub train_streams: (u64, u64),
    pub scenario_digest: String,
}

/// Progress callback: `(generation, minibatch, loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize, f64);

/// Layer-by-layer training as configured in the scenario: generation
/// `t = 1..=T` trains the parameters of layers `1..=t` (only layer `t` with
/// `freeze_earlier`) on `K` fresh mini-batches of size `L` with Adam,
/// starting the new layer from [`CtistaModel::init_params`] at the
/// scenario's noise variance, or from the previous layer's values when
/// `new_layer_init = "previous-layer"`.
pub fn incremental_train(scenario: &Scenario, model: &CtistaModel) -> Result<TrainReport> {
    incremental_train_with(scenario, model, None)
}

pub fn incremental_train_with(
    scenario: &Scenario,
    model: &CtistaModel,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainReport> {
    let started = Instant::now();
    let cfg = scenario.config();
    let tc = &cfg.training;
    let layers = model.layers();
    let mut params = model.init_params(Some(scenario.sigma2()));
    let mut generations = Vec::with_capacity(layers);
    let last_stream = if tc.minibatches == 0 {
        train_stream(0, 0)
    } else {
        train_stream(layers, tc.minibatches - 1)
    };
    for generation in 1..=layers {
        if generation > 1 && tc.new_layer_init == NewLayerInit::PreviousLayer {
            let t = generation - 1;
            params.beta[t] = params.beta[t - 1];
            params.a[t] = params.a[t - 1];
            params.b[t] = params.b[t - 1];
        }
        let first_layer = if tc.freeze_earlier { generation - 1 } else { 0 };
        let range = active_range(generation, first_layer);
        let mut adam = AdamState::new(tc.learning_rate, range.len());
        let mut losses = Vec::with_capacity(tc.minibatches);
        for k in 0..tc.minibatches {
            let diverged = |_| Error::TrainingDiverged { generation };
            let batch = scenario.generate_batch(
                tc.batch_size,
                &mut scenario.rng(train_stream(generation, k)),
            )?;
            let (loss, grad) = match tc.gradient {
                GradientMethod::Adjoint => {
                    let (loss, full) =
                        grad_adjoint(model, &batch, &params, generation).map_err(diverged)?;
                    (loss, full[range.clone()].to_vec())
                }
                GradientMethod::FiniteDifference => {
                    let g = grad_fd_range(model, &batch, &params, generation, first_layer, None)
                        .map_err(diverged)?;
                    (
                        batch_loss(model, &params, &batch, generation).map_err(diverged)?,
                        g,
                    )
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { generation });
            }
            let mut flat = params.to_flat();
            adam.step(&mut flat[range.clone()], &grad)?;
            params.set_flat_prefix(&flat[..3 * generation]);
            losses.push(loss);
            if let Some(cb) = progress.as_mut() {
                cb(generation, k, loss);
            }
        }
        if params.validate().is_err() {
            return Err(Error::TrainingDiverged { generation });
        }
        generations.push(GenerationLog {
            generation,
            trained_params: range.len(),
            losses,
            params: params.clone(),
        });
    }
    Ok(TrainReport {
        generations,
        params,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        train_streams: (train_stream(1, 0), last_stream),
        scenario_digest: cfg.digest(),
    })
}

/// Provenance stored alongside trained parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamsMeta {
    pub scenario_digest: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    version: u32,
    #[serde(rename = "T")]
    t: usize,
    beta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    scenario_digest: String,
    seed: u64,
}

pub fn params_to_json(params: &CtistaParams, meta: &ParamsMeta) -> Result<String> {
    params
        .validate()
        .map_err(|e| Error::ParamFile(e.to_string()))?;
    let file = ParamFile {
        version: PARAM_FILE_VERSION,
        t: params.layers(),
        beta: params.beta.clone(),
        a: params.a.clone(),
        b: params.b.clone(),
        scenario_digest: meta.scenario_digest.clone(),
        seed: meta.seed,
    };
    Ok(serde_json::to_string_pretty(&file).expect("parameter file serializes") + "\n")
}

pub fn params_from_json(text: &str) -> Result<(CtistaParams, ParamsMeta)> {
    let file: ParamFile =
        serde_json::from_str(text).map_err(|e| Error::ParamFile(e.to_string()))?;
    if file.version != PARAM_FILE_VERSION {
        return Err(Error::ParamFile(format!(
            "unsupported version {}",
            file.version
        )));
    }
    if file.beta.len() != file.t || file.a.len() != file.t || file.b.len() != file.t {
        return Err(Error::ParamFile(format!(
            "T = {} but list lengths differ",
            file.t
        )));
    }
    let params = CtistaParams::new(file.beta, file.a, file.b)
        .map_err(|e| Error::ParamFile(e.to_string()))?;
    Ok((
        params,
        ParamsMeta {
            scenario_digest: file.scenario_digest,
            seed: file.seed,
        },
    ))
}

pub fn save_params(params: &CtistaParams, meta: &ParamsMeta, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_json(params, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(CtistaParams, ParamsMeta)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    params_from_json(&text)
}

/// Loads parameters and checks they fit a `layers`-layer model.
pub fn load_params_for(path: &Path, layers: usize) -> Result<(CtistaParams, ParamsMeta)> {
    let (params, meta) = load_params(path)?;
    if params.layers() != layers {
        return Err(Error::ParamFile(format!(
            "file has T = {} but the model has {layers} layers",
            params.layers()
        )));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::ctista_forward_truncated;
    use crate::scenarios::{eval_stream, ScenarioConfig, ScenarioKind};
    use proptest::prelude::*;

    fn small(kind: ScenarioKind, n: usize, m: usize, layers: usize) -> Scenario {
        let mut cfg = ScenarioConfig::preset(kind);
        cfg.n = n;
        cfg.m = m;
        cfg.layers = layers;
        if kind == ScenarioKind::Psk8Under {
            cfg.snr_db = Some(10.0);
        }
        Scenario::build(cfg).unwrap()
    }

    fn perturbed(layers: usize, sigma2: f64, seed: u64) -> CtistaParams {
        let mut rng = crate::numerics::RngStream::new(seed, 99);
        let mut p = CtistaParams::init(layers, Some(sigma2));
        for t in 0..layers {
            p.beta[t] = 0.6 + 0.5 * rng.uniform();
            p.a[t] = sigma2 * (0.5 + rng.uniform());
            p.b[t] = 0.5 + rng.uniform();
        }
        p
    }

    fn assert_close(adj: &[f64], fd: &[f64], tol: f64) {
        let scale = fd.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        for (i, (a, f)) in adj.iter().zip(fd).enumerate() {
            let rel = (a - f).abs() / f.abs().max(1e-3 * scale);
            assert!(
                rel <= tol,
                "coordinate {i}: adjoint {a} vs fd {f} (rel {rel:e})"
            );
        }
    }

    #[test]
    fn adjoint_matches_finite_differences_soft() {
        let scn = small(ScenarioKind::CsSparse, 24, 12, 4);
        let model = scn.model().unwrap();
        let batch = scn
            .generate_batch(6, &mut scn.rng(train_stream(1, 0)))
            .unwrap();
        let p = perturbed(4, scn.sigma2(), 1);
        for t in 1..=4 {
            let (loss, adj) = grad_adjoint(&model, &batch, &p, t).unwrap();
            assert_eq!(loss, batch_loss(&model, &p, &batch, t).unwrap());
            let fd = grad_fd(&model, &batch, &p, t, Some(1e-6)).unwrap();
            assert_eq!(adj.len(), 3 * t);
            assert_close(&adj, &fd, 1e-4);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences_mmse() {
        let scn = small(ScenarioKind::Psk8Under, 16, 12, 3);
        let model = scn.model().unwrap();
        let batch = scn
            .generate_batch(5, &mut scn.rng(train_stream(1, 1)))
            .unwrap();
        let p = perturbed(3, scn.sigma2(), 2);
        let (_, adj) = grad_adjoint(&model, &batch, &p, 3).unwrap();
        let fd = grad_fd(&model, &batch, &p, 3, Some(1e-6)).unwrap();
        assert_close(&adj, &fd, 1e-4);
    }

    #[test]
    fn adjoint_matches_finite_differences_clipped() {
        let mut cfg = ScenarioConfig::preset(ScenarioKind::ClippedOfdm);
        cfg.n = 16;
        cfg.m = 16;
        cfg.layers = 3;
        cfg.papr_db = Some(2.0);
        let scn = Scenario::build(cfg).unwrap();
        let model = scn.model().unwrap();
        let batch = scn
            .generate_batch(4, &mut scn.rng(train_stream(1, 2)))
            .unwrap();
        let p = perturbed(3, scn.sigma2(), 3);
        let (_, adj) = grad_adjoint(&model, &batch, &p, 3).unwrap();
        let fd = grad_fd(&model, &batch, &p, 3, Some(1e-6)).unwrap();
        assert_close(&adj, &fd, 1e-4);

        let hermitian = model
            .clone()
            .with_gradient_matrix(GradientMatrix::Hermitian);
        let (_, adj) = grad_adjoint(&hermitian, &batch, &p, 2).unwrap();
        let fd = grad_fd(&hermitian, &batch, &p, 2, Some(1e-6)).unwrap();
        assert_close(&adj, &fd, 1e-4);
    }

    #[test]
    fn loss_definition_examples() {
        let scn = small(ScenarioKind::CsSparse, 20, 10, 3);
        let model = scn.model().unwrap();
        let p = CtistaParams::init(3, Some(scn.sigma2()));
        let (x, y) = scn
            .generate_instance(&mut scn.rng(train_stream(1, 5)))
            .unwrap();
        let batch = InstanceBatch {
            x: CMatrix::from_columns(std::slice::from_ref(&x)).unwrap(),
            y: CMatrix::from_columns(std::slice::from_ref(&y)).unwrap(),
            sigma2: scn.sigma2(),
        };
        let (s, _) = ctista_forward_truncated(&model, &p, &y, 2).unwrap();
        let direct = crate::numerics::dist_sqr(&s, &x);
        assert!(
            (batch_loss(&model, &p, &batch, 2).unwrap() - direct).abs() <= 1e-12 * direct.max(1.0)
        );

        let big = scn
            .generate_batch(5, &mut scn.rng(train_stream(1, 6)))
            .unwrap();
        let order = [3, 0, 4, 1, 2];
        let shuffled = InstanceBatch {
            x: CMatrix::from_columns(&order.map(|j| big.x.column(j))).unwrap(),
            y: CMatrix::from_columns(&order.map(|j| big.y.column(j))).unwrap(),
            sigma2: big.sigma2,
        };
        let l1 = batch_loss(&model, &p, &big, 3).unwrap();
        let l2 = batch_loss(&model, &p, &shuffled, 3).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1);
        assert!(batch_loss(&model, &p, &big, 4).is_err());
        assert!(batch_loss(&model, &p, &big, 0).is_err());
    }

    #[test]
    fn fd_is_repeatable_and_scoped_to_active_layers() {
        let scn = small(ScenarioKind::CsSparse, 20, 10, 4);
        let model = scn.model().unwrap();
        let batch = scn
            .generate_batch(4, &mut scn.rng(train_stream(1, 0)))
            .unwrap();
        let p = perturbed(4, scn.sigma2(), 4);
        let g1 = grad_fd(&model, &batch, &p, 2, None).unwrap();
        let g2 = grad_fd(&model, &batch, &p, 2, None).unwrap();
        assert_eq!(g1.len(), 6);
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(grad_fd(&model, &batch, &p, 2, Some(0.0)).is_err());
    }

    #[test]
    fn central_difference_of_a_quadratic() {
        // the same stencil as grad_fd applied to (β − 2)²
        let loss = |b: f64| (b - 2.0) * (b - 2.0);
        let h = FD_REL_STEP;
        let g = (loss(h) - loss(-h)) / (2.0 * h);
        assert!((g + 4.0).abs() < 1e-6);
    }

    #[test]
    fn adam_examples() {
        let mut adam = AdamState::new(0.0005, 3);
        let theta = vec![1.0, -2.0, 0.5];
        let same = adam_step(&mut adam, &theta, &[0.0; 3]).unwrap();
        assert_eq!(same, theta);

        let mut adam = AdamState::new(0.0005, 3);
        let moved = adam_step(&mut adam, &theta, &[3.0, -0.01, 1e3]).unwrap();
        for (i, sign) in [1.0, -1.0, 1.0].iter().enumerate() {
            let step = theta[i] - moved[i];
            assert!((step - 0.0005 * sign).abs() < 1e-9, "{step}");
        }

        let mut adam = AdamState::new(0.01, 1);
        let mut x = vec![0.0];
        let mut last = 0.0;
        for _ in 0..50 {
            adam.step(&mut x, &[2.0]).unwrap();
            assert!(x[0] < last);
            last = x[0];
        }
        assert_eq!(adam.steps(), 50);
        assert!(adam.step(&mut x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_minibatches_keep_the_initialization() {
        let mut cfg = ScenarioConfig::preset(ScenarioKind::CsSparse);
        cfg.n = 16;
        cfg.m = 8;
        cfg.layers = 1;
        cfg.training.minibatches = 0;
        let scn = Scenario::build(cfg).unwrap();
        let model = scn.model().unwrap();
        let report = incremental_train(&scn, &model).unwrap();
        assert_eq!(report.params, model.init_params(Some(scn.sigma2())));
    }

    #[test]
    fn schedule_trains_three_t_scalars_and_reduces_loss() {
        let mut cfg = ScenarioConfig::preset(ScenarioKind::CsSparse);
        cfg.n = 40;
        cfg.m = 20;
        cfg.layers = 3;
        cfg.training.minibatches = 60;
        cfg.training.batch_size = 20;
        cfg.training.learning_rate = 0.01;
        let scn = Scenario::build(cfg.clone()).unwrap();
        let model = scn.model().unwrap();
        let report = incremental_train(&scn, &model).unwrap();
        let counts: Vec<usize> = report
            .generations
            .iter()
            .map(|g| g.trained_params)
            .collect();
        assert_eq!(counts, vec![3, 6, 9]);
        assert!(report
            .generations
            .iter()
            .all(|g| g.losses.iter().all(|l| l.is_finite())));

        let held_out = scn.eval_batch(0, 200).unwrap();
        let init = model.init_params(Some(scn.sigma2()));
        for t in 1..=3 {
            let trained =
                batch_loss(&model, &report.generations[t - 1].params, &held_out, t).unwrap();
            let untrained = batch_loss(&model, &init, &held_out, t).unwrap();
            assert!(trained <= untrained, "t = {t}: {trained} > {untrained}");
        }

        let mut frozen_cfg = cfg;
        frozen_cfg.training.freeze_earlier = true;
        frozen_cfg.training.minibatches = 5;
        let frozen = Scenario::build(frozen_cfg).unwrap();
        let report = incremental_train(&frozen, &model).unwrap();
        assert!(report.generations.iter().all(|g| g.trained_params == 3));
    }

    #[test]
    fn fd_and_adjoint_training_agree() {
        let mut cfg = ScenarioConfig::preset(ScenarioKind::CsSparse);
        cfg.n = 16;
        cfg.m = 8;
        cfg.layers = 2;
        cfg.training.minibatches = 5;
        cfg.training.batch_size = 8;
        let adj = Scenario::build(cfg.clone()).unwrap();
        cfg.training.gradient = GradientMethod::FiniteDifference;
        let fd = Scenario::build(cfg).unwrap();
        let model = adj.model().unwrap();
        let pa = incremental_train(&adj, &model).unwrap().params.to_flat();
        let pf = incremental_train(&fd, &model).unwrap().params.to_flat();
        for (a, f) in pa.iter().zip(&pf) {
            assert!((a - f).abs() < 1e-6, "{a} vs {f}");
        }
    }

    #[test]
    fn param_file_round_trip_and_errors() {
        let p = perturbed(10, 0.01, 7);
        let meta = ParamsMeta {
            scenario_digest: "ab12".into(),
            seed: 42,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_params(&p, &meta, &path).unwrap();
        let (back, back_meta) = load_params(&path).unwrap();
        assert_eq!(
            back.to_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back_meta, meta);
        assert!(matches!(
            load_params_for(&path, 12),
            Err(Error::ParamFile(_))
        ));
        assert!(load_params_for(&path, 10).is_ok());

        let text = std::fs::read_to_string(&path).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["version", "T", "beta", "a", "b", "scenario_digest", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let bad = text.replacen(&format!("{}", p.beta[0]), "1e999", 1);
        assert!(params_from_json(&bad).is_err());
        let null = text.replacen(&format!("{}", p.beta[0]), "null", 1);
        assert!(params_from_json(&null).is_err());
        assert!(params_from_json("{").is_err());

        let mut nan = p.clone();
        nan.a[3] = f64::NAN;
        assert!(save_params(&nan, &meta, &path).is_err());
    }

    #[test]
    fn training_streams_never_touch_evaluation() {
        let mut cfg = ScenarioConfig::preset(ScenarioKind::CsSparse);
        cfg.n = 8;
        cfg.m = 4;
        cfg.layers = 2;
        cfg.training.minibatches = 3;
        let scn = Scenario::build(cfg).unwrap();
        let r = incremental_train(&scn, &scn.model().unwrap()).unwrap();
        assert!(crate::scenarios::is_train_stream(r.train_streams.0));
        assert!(crate::scenarios::is_train_stream(r.train_streams.1));
        assert!(r.train_streams.1 < eval_stream(0));
    }

    proptest! {
        #[test]
        fn param_files_round_trip_exactly(
            values in proptest::collection::vec(-1e6..1e6f64, 3..=30),
            seed in any::<u64>(),
        ) {
            let t = values.len() / 3;
            let p = CtistaParams::new(values[..t].to_vec(), values[t..2 * t].to_vec(), values[2 * t..3 * t].to_vec()).unwrap();
            let meta = ParamsMeta { scenario_digest: "ab".repeat(32), seed };
            let (back, back_meta) = params_from_json(&params_to_json(&p, &meta).unwrap()).unwrap();
            prop_assert_eq!(back, p);
            prop_assert_eq!(back_meta, meta);
        }

        #[test]
        fn adam_zero_gradient_is_a_fixed_point(
            theta in proptest::collection::vec(-10.0..10.0f64, 1..12),
            steps in 1usize..40,
        ) {
            let mut adam = AdamState::new(0.01, theta.len());
            let mut moved = theta.clone();
            for _ in 0..steps {
                adam.step(&mut moved, &vec![0.0; theta.len()]).unwrap();
            }
            prop_assert_eq!(moved, theta);
        }

        #[test]
        fn adam_first_step_has_learning_rate_magnitude(g in prop_oneof![-1e3..-1e-3f64, 1e-3..1e3f64]) {
            let mut adam = AdamState::new(0.0005, 1);
            let mut theta = [0.0];
            adam.step(&mut theta, &[g]).unwrap();
            prop_assert!((theta[0] + 0.0005 * g.signum()).abs() < 1e-9);
        }
    }
}
