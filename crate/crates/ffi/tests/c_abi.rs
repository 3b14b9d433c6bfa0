use std::ffi::{CStr, CString};
use std::ptr;

use ctista_ffi::*;

const SMALL: &str = r#"
kind = "psk8-under"
n = 20
m = 16
layers = 4
seed = 4
ensemble = "cn-unit"
constellation = "8psk"
snr_db = 30.0

[training]
minibatches = 40
batch_size = 20
learning_rate = 0.005
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ctista_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    scenario: *mut CtistaScenario,
    model: *mut CtistaModel,
    n: usize,
    m: usize,
    layers: usize,
    sigma2: f64,
}

impl Fixture {
    fn new() -> Self {
        let toml = CString::new(SMALL).unwrap();
        let mut scenario = ptr::null_mut();
        assert_eq!(
            unsafe { ctista_scenario_from_toml(toml.as_ptr(), &mut scenario) },
            CtistaStatus::Ok
        );
        let (mut n, mut m, mut layers, mut sigma2) = (0, 0, 0, 0.0);
        assert_eq!(
            unsafe { ctista_scenario_dims(scenario, &mut n, &mut m, &mut layers, &mut sigma2) },
            CtistaStatus::Ok
        );
        let mut model = ptr::null_mut();
        assert_eq!(
            unsafe { ctista_model_new(scenario, &mut model) },
            CtistaStatus::Ok
        );
        Fixture {
            scenario,
            model,
            n,
            m,
            layers,
            sigma2,
        }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            ctista_model_free(self.model);
            ctista_scenario_free(self.scenario);
        }
    }
}

#[test]
fn dimensions_round_trip() {
    let f = Fixture::new();
    assert_eq!((f.n, f.m, f.layers), (20, 16, 4));
    assert!(f.sigma2 > 0.0);
}

#[test]
fn forward_and_zero_forcing_recover_a_clean_instance() {
    let f = Fixture::new();
    let mut x = vec![0.0; 2 * f.n];
    let mut y = vec![0.0; 2 * f.m];
    assert_eq!(
        unsafe { ctista_scenario_generate(f.scenario, 0, x.as_mut_ptr(), y.as_mut_ptr()) },
        CtistaStatus::Ok
    );
    let mut params = ptr::null_mut();
    assert_eq!(
        unsafe { ctista_train(f.scenario, f.model, &mut params) },
        CtistaStatus::Ok
    );
    let mut est = vec![0.0; 2 * f.n];
    assert_eq!(
        unsafe { ctista_forward(f.model, params, y.as_ptr(), est.as_mut_ptr()) },
        CtistaStatus::Ok
    );
    assert!(est.iter().all(|v| v.is_finite()));
    let mut zf = vec![0.0; 2 * f.n];
    assert_eq!(
        unsafe { ctista_zero_forcing(f.model, y.as_ptr(), zf.as_mut_ptr()) },
        CtistaStatus::Ok
    );
    // trained C-TISTA with the PSK prior beats the linear estimate at 30 dB
    let err = |v: &[f64]| v.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    assert!(err(&est) < err(&zf), "{} vs {}", err(&est), err(&zf));
    unsafe { ctista_params_free(params) };
}

#[test]
fn model_initialization_scales_the_noise_variance() {
    let f = Fixture::new();
    let mut params = ptr::null_mut();
    assert_eq!(
        unsafe { ctista_model_init_params(f.model, f.sigma2, &mut params) },
        CtistaStatus::Ok
    );
    let (mut b, mut a, mut c) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
    assert_eq!(
        unsafe { ctista_params_get(params, 4, b.as_mut_ptr(), a.as_mut_ptr(), c.as_mut_ptr()) },
        CtistaStatus::Ok
    );
    assert_eq!(b, vec![1.0; 4]);
    assert_eq!(c, vec![1.0; 4]);
    // W of a CN(0, 1) channel shrinks the noise: E‖W‖²_F/n = m/(n(n − m)) = 0.2 here
    assert!(a.iter().all(|&v| v > 0.0 && v < f.sigma2));
    assert_eq!(
        unsafe { ctista_model_init_params(f.model, f64::NAN, &mut params) },
        CtistaStatus::InvalidArgument
    );
    unsafe { ctista_params_free(params) };
}

#[test]
fn training_and_parameter_files() {
    let f = Fixture::new();
    let mut trained = ptr::null_mut();
    assert_eq!(
        unsafe { ctista_train(f.scenario, f.model, &mut trained) },
        CtistaStatus::Ok
    );
    assert_eq!(unsafe { ctista_params_layers(trained) }, 4);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.json").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { ctista_params_save(trained, f.scenario, path.as_ptr()) },
        CtistaStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { ctista_params_load(path.as_ptr(), &mut loaded) },
        CtistaStatus::Ok
    );

    let get = |p: *const CtistaParams| {
        let (mut b, mut a, mut c) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        assert_eq!(
            unsafe { ctista_params_get(p, 4, b.as_mut_ptr(), a.as_mut_ptr(), c.as_mut_ptr()) },
            CtistaStatus::Ok
        );
        (b, a, c)
    };
    assert_eq!(get(trained), get(loaded));
    let (mut b, mut a, mut c) = (vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]);
    assert_eq!(
        unsafe { ctista_params_get(loaded, 2, b.as_mut_ptr(), a.as_mut_ptr(), c.as_mut_ptr()) },
        CtistaStatus::Dimension
    );
    unsafe {
        ctista_params_free(trained);
        ctista_params_free(loaded);
    }
}

#[test]
fn explicit_parameters_are_validated() {
    let beta = [1.0, f64::NAN];
    let a = [0.1, 0.1];
    let b = [1.0, 1.0];
    let mut out = ptr::null_mut();
    let status = unsafe { ctista_params_new(2, beta.as_ptr(), a.as_ptr(), b.as_ptr(), &mut out) };
    assert_eq!(status, CtistaStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(last_error().contains("finite"));
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut scenario = ptr::null_mut();
    let bad = CString::new("kind = \"nope\"").unwrap();
    assert_eq!(
        unsafe { ctista_scenario_from_toml(bad.as_ptr(), &mut scenario) },
        CtistaStatus::Config
    );
    assert!(!last_error().is_empty());
    assert!(scenario.is_null());

    assert_eq!(
        unsafe { ctista_scenario_from_toml(ptr::null(), &mut scenario) },
        CtistaStatus::NullPointer
    );
    let missing = CString::new("/nonexistent/ctista.toml").unwrap();
    assert_eq!(
        unsafe { ctista_scenario_load(missing.as_ptr(), &mut scenario) },
        CtistaStatus::Io
    );
    let mut params = ptr::null_mut();
    assert_eq!(
        unsafe { ctista_params_load(missing.as_ptr(), &mut params) },
        CtistaStatus::Io
    );

    let f = Fixture::new();
    let y = vec![0.0; 2 * f.m];
    let mut x = vec![0.0; 2 * f.n];
    assert_eq!(
        unsafe { ctista_forward(f.model, ptr::null(), y.as_ptr(), x.as_mut_ptr()) },
        CtistaStatus::NullPointer
    );
    let mut wrong = ptr::null_mut();
    assert_eq!(
        unsafe { ctista_params_init(3, 0.01, &mut wrong) },
        CtistaStatus::Ok
    );
    assert_eq!(
        unsafe { ctista_forward(f.model, wrong, y.as_ptr(), x.as_mut_ptr()) },
        CtistaStatus::InvalidArgument
    );
    unsafe { ctista_params_free(wrong) };

    // success clears the message
    assert_eq!(
        unsafe { ctista_zero_forcing(f.model, y.as_ptr(), x.as_mut_ptr()) },
        CtistaStatus::Ok
    );
    assert_eq!(last_error(), "");
    unsafe {
        ctista_scenario_free(ptr::null_mut());
        ctista_model_free(ptr::null_mut());
        ctista_params_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ctista.h")).unwrap();
    for name in [
        "ctista_last_error",
        "ctista_scenario_from_toml",
        "ctista_scenario_generate",
        "ctista_model_new",
        "ctista_model_init_params",
        "ctista_params_load",
        "ctista_train",
        "ctista_forward",
        "ctista_zero_forcing",
        "CTISTA_STATUS_OK",
        "typedef struct CtistaModel CtistaModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ctista.h\"\n\
         int main(void) {\n\
           CtistaScenario *s = NULL;\n\
           CtistaStatus st = ctista_scenario_from_toml(\"\", &s);\n\
           (void)ctista_last_error();\n\
           return st == CTISTA_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
    {
        Ok(out) => out,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
