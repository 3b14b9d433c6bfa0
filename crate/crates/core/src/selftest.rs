//! Fast numerical self-checks run by `ctista selftest`.

use std::sync::Arc;

use crate::nonlinearity::{clip_map, wirtinger_fd, ComponentwiseMap, Identity};
use crate::numerics::{idft_matrix, pseudo_inverse, CMatrix, RngStream};
use crate::recovery::CtistaParams;
use crate::scenarios::{train_stream, Scenario, ScenarioConfig, ScenarioKind};
use crate::training::{grad_adjoint, grad_fd};
use crate::C64;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn wirtinger() -> Outcome {
    let mut rng = RngStream::new(7, 0);
    let maps: Vec<Arc<dyn ComponentwiseMap>> = vec![
        Arc::new(Identity),
        Arc::new(clip_map(1.0).map_err(|e| e.to_string())?),
    ];
    let mut worst = 0.0f64;
    for f in &maps {
        let mut tested = 0;
        while tested < 100 {
            let z = rng.cgaussian(C64::new(0.0, 0.0), 2.0);
            let Ok((dz, dzc)) = wirtinger_fd(f.as_ref(), z, None) else {
                continue;
            };
            let rel = |a: C64, b: C64| (a - b).norm() / b.norm().max(1.0);
            worst = worst.max(rel(f.d_dzc(z), dzc)).max(rel(f.d_dz(z), dz));
            tested += 1;
        }
    }
    check(
        worst <= 1e-5,
        format!("max relative error {worst:.2e} over 200 points"),
    )
}

fn linear_algebra() -> Outcome {
    let mut rng = RngStream::new(8, 0);
    let a = CMatrix::from_fn(12, 20, |_, _| rng.cgaussian(C64::new(0.0, 0.0), 1.0));
    let w = pseudo_inverse(&a).map_err(|e| e.to_string())?;
    let aw = a.matmul(&w).map_err(|e| e.to_string())?;
    let pinv_err = aw
        .sub(&CMatrix::identity(12))
        .map_err(|e| e.to_string())?
        .max_abs();
    let f = idft_matrix(64).map_err(|e| e.to_string())?;
    let ff = f
        .mul(
            crate::numerics::Op::Hermitian,
            &f,
            crate::numerics::Op::Plain,
        )
        .map_err(|e| e.to_string())?;
    let dft_err = ff
        .sub(&CMatrix::identity(64))
        .map_err(|e| e.to_string())?
        .max_abs();
    check(
        pinv_err < 1e-10 && dft_err < 1e-12,
        format!("|AW - I| = {pinv_err:.1e}, |F^H F - I| = {dft_err:.1e}"),
    )
}

fn adjoint() -> Outcome {
    let mut cfg = ScenarioConfig::preset(ScenarioKind::ClippedOfdm);
    cfg.n = 16;
    cfg.m = 16;
    cfg.layers = 3;
    let scn = Scenario::build(cfg).map_err(|e| e.to_string())?;
    let model = scn.model().map_err(|e| e.to_string())?;
    let batch = scn
        .generate_batch(4, &mut scn.rng(train_stream(1, 0)))
        .map_err(|e| e.to_string())?;
    let params = CtistaParams::init(3, Some(scn.sigma2()));
    let (_, adj) = grad_adjoint(&model, &batch, &params, 3).map_err(|e| e.to_string())?;
    let fd = grad_fd(&model, &batch, &params, 3, Some(1e-6)).map_err(|e| e.to_string())?;
    let scale = fd.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let worst = adj
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1e-3 * scale))
        .fold(0.0, f64::max);
    check(
        worst <= 1e-4,
        format!("adjoint vs finite differences, max relative {worst:.2e}"),
    )
}

/// Named outcomes of every self-check.
pub fn run_all() -> Vec<(&'static str, Outcome)> {
    vec![
        ("wirtinger-derivatives", wirtinger()),
        ("linear-algebra", linear_algebra()),
        ("training-gradient", adjoint()),
    ]
}
