use std::ffi::{CStr, CString};
use std::ptr;

use urn_ffi::*;

fn last_error() -> String {
    let p = urn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const TINY: &str = r#"{"input_size": [16, 16], "channels": [4, 8, 12, 16], "n_s": 2}"#;

#[test]
fn model_round_trip_through_handle() {
    let cfg = CString::new(TINY).unwrap();
    let mut h: *mut UrnHandle = ptr::null_mut();
    assert_eq!(unsafe { urn_model_new(cfg.as_ptr(), 3, &mut h) }, UrnStatus::Ok);
    let (mut rows, mut cols) = (0, 0);
    assert_eq!(unsafe { urn_model_input_size(h, &mut rows, &mut cols) }, UrnStatus::Ok);
    assert_eq!((rows, cols), (16, 16));

    let img: Vec<f64> = (0..3 * 256).map(|i| (i % 17) as f64 / 16.0).collect();
    let (mut m, mut u, mut v) = (vec![-1.0; 256], vec![-1.0; 256], vec![-1.0; 256]);
    let st = unsafe { urn_model_infer(h, img.as_ptr(), 16, 16, 5, m.as_mut_ptr(), u.as_mut_ptr(), v.as_mut_ptr()) };
    assert_eq!(st, UrnStatus::Ok);
    assert!(m.iter().chain(&v).all(|p| (0.0..=1.0).contains(p)));
    assert!(u.iter().all(|p| (0.5..1.0).contains(p)));

    let mut v2 = vec![0.0; 256];
    let st = unsafe { urn_model_infer(h, img.as_ptr(), 16, 16, 5, ptr::null_mut(), ptr::null_mut(), v2.as_mut_ptr()) };
    assert_eq!(st, UrnStatus::Ok);
    assert_eq!(v, v2);

    let st = unsafe { urn_model_infer(h, img.as_ptr(), 8, 8, 5, ptr::null_mut(), ptr::null_mut(), v2.as_mut_ptr()) };
    assert_eq!(st, UrnStatus::Shape);
    assert!(last_error().contains("shape"), "{}", last_error());
    unsafe { urn_model_free(h) };
    unsafe { urn_model_free(ptr::null_mut()) };
}

#[test]
fn errors_map_to_codes() {
    let mut h: *mut UrnHandle = ptr::null_mut();
    assert_eq!(unsafe { urn_model_new(ptr::null(), 0, &mut h) }, UrnStatus::NullPointer);
    let bad = CString::new(r#"{"input_size": [10, 10]}"#).unwrap();
    assert_eq!(unsafe { urn_model_new(bad.as_ptr(), 0, &mut h) }, UrnStatus::InvalidArgument);
    assert!(last_error().contains("multiple of 16"));
    let junk = CString::new("{").unwrap();
    assert_eq!(unsafe { urn_model_new(junk.as_ptr(), 0, &mut h) }, UrnStatus::InvalidArgument);
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().to_str().unwrap()).unwrap();
    let st = unsafe { urn_model_load(p.as_ptr(), &mut h) };
    assert!(matches!(st, UrnStatus::Io | UrnStatus::Checkpoint), "{st:?}");
    assert!(h.is_null());
}

#[test]
fn load_reads_saved_checkpoints() {
    let cfg: urn_core::stage1::NetworkConfig = serde_json::from_str(TINY).unwrap();
    let model = urn_core::urn::UrnModel::new(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let p = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h: *mut UrnHandle = ptr::null_mut();
    assert_eq!(unsafe { urn_model_load(p.as_ptr(), &mut h) }, UrnStatus::Ok, "{}", last_error());
    let img = vec![0.3; 3 * 256];
    let mut v = vec![0.0; 256];
    let st = unsafe { urn_model_infer(h, img.as_ptr(), 16, 16, 1, ptr::null_mut(), ptr::null_mut(), v.as_mut_ptr()) };
    assert_eq!(st, urn_ffi::UrnStatus::Ok);
    let direct = model.infer(&urn_core::tensor::Tensor::new([3, 16, 16], img), 1).unwrap();
    assert_eq!(direct.y_v.data(), &v[..]);
    unsafe { urn_model_free(h) };
}

#[test]
fn scoring_primitives() {
    let pred = [0.9, 0.2, 0.7, 0.4, 0.5];
    let gt = [1.0, 0.0, 0.0, 1.0, 1.0];
    let mut c = UrnConfusion::default();
    assert_eq!(unsafe { urn_confusion(pred.as_ptr(), gt.as_ptr(), 5, 0.5, &mut c) }, UrnStatus::Ok);
    assert_eq!(c, UrnConfusion { tp: 2, tn: 1, fp: 1, fn_: 1 });
    assert!((urn_f1(UrnConfusion { tp: 2, tn: 0, fp: 1, fn_: 1 }) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(urn_mcc(UrnConfusion { tp: 1, tn: 1, fp: 1, fn_: 1 }), 0.0);

    let mut a = 0.0;
    let labels = [1u8, 0, 0, 1, 1];
    assert_eq!(unsafe { urn_auc(pred.as_ptr(), labels.as_ptr(), 5, &mut a) }, UrnStatus::Ok);
    // Positives 0.9, 0.4, 0.5 against negatives 0.2, 0.7: 4 of 6 pairs ordered.
    assert!((a - 4.0 / 6.0).abs() < 1e-12);
    let ones = [1u8; 5];
    assert_eq!(unsafe { urn_auc(pred.as_ptr(), ones.as_ptr(), 5, &mut a) }, UrnStatus::SingleClass);

    let samples = [0.0, 0.3, 1.0, 0.3];
    let (mut mean, mut unc) = ([0.0; 2], [0.0; 2]);
    assert_eq!(unsafe { urn_summarize(samples.as_ptr(), 2, 2, mean.as_mut_ptr(), unc.as_mut_ptr()) }, UrnStatus::Ok);
    assert_eq!(mean, [0.5, 0.3]);
    assert!((unc[0] - 0.66976).abs() < 1e-4);
    assert_eq!(unc[1], 0.5);
    assert_eq!(unsafe { urn_summarize(samples.as_ptr(), 1, 4, mean.as_mut_ptr(), unc.as_mut_ptr()) }, UrnStatus::InvalidArgument);
}

#[test]
fn operator_matches_dense_formula() {
    let u = [0.5, 0.9, 0.6, 0.55, 0.7, 0.95];
    let (rows, cols) = (2usize, 3usize);
    let mut op = vec![0.0; 36];
    assert_eq!(unsafe { urn_uggc_operator(u.as_ptr(), rows, cols, op.as_mut_ptr()) }, UrnStatus::Ok);
    // Edge i -> j between 8-neighbours with weight u_i - u_j when positive.
    let mut a = [[0.0f64; 6]; 6];
    for i in 0..6 {
        a[i][i] = 1.0;
        for j in 0..6 {
            let (ri, ci, rj, cj) = ((i / cols) as i64, (i % cols) as i64, (j / cols) as i64, (j % cols) as i64);
            if i != j && (ri - rj).abs() <= 1 && (ci - cj).abs() <= 1 && u[i] > u[j] {
                a[i][j] = u[i] - u[j];
            }
        }
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>()).collect();
    for i in 0..6 {
        for j in 0..6 {
            let want = a[i][j] / (d[i] * d[j]).sqrt();
            assert!((op[i * 6 + j] - want).abs() < 1e-12, "({i},{j})");
        }
    }
    assert_eq!(unsafe { urn_uggc_operator(u.as_ptr(), 0, 3, op.as_mut_ptr()) }, UrnStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/urn.h");
    assert!(std::path::Path::new(header).exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"urn.h\"\nint main(void) { UrnConfusion c = {1, 1, 1, 1}; UrnHandle *h = 0; \
         urn_model_free(h); return urn_mcc(c) == 0.0 && URN_STATUS_OK == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let out = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
    {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping C check, no compiler: {e}");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
