//! Exercises the C ABI exactly as a C caller would: opaque handles, status
//! codes, thread-local error messages, and the generated header.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use segplan::synth::{generate_dataset, SynthSpec};
use segplan_ffi::*;

fn c_path(path: &Path) -> CString {
    CString::new(path.to_str().expect("utf-8 temp path")).expect("no NUL in path")
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sp_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn volume_round_trip_and_accessors() {
    let tmp = tempfile::tempdir().unwrap();
    let shape = [3usize, 4, 5];
    let spacing = [2.0f64, 1.0, 1.0];
    let labels: Vec<u8> = (0..60).map(|v| (v % 3) as u8).collect();

    let mut vol: *mut sp_volume = ptr::null_mut();
    let status = unsafe {
        sp_volume_new_labelmap(
            shape.as_ptr(),
            spacing.as_ptr(),
            3,
            labels.as_ptr(),
            labels.len(),
            &mut vol,
        )
    };
    assert_eq!(status, sp_status::SP_OK);
    assert!(!vol.is_null());
    assert_eq!(unsafe { sp_volume_ndim(vol) }, 3);
    assert_eq!(unsafe { sp_volume_channels(vol) }, 1);
    assert_eq!(unsafe { sp_volume_kind_of(vol) }, sp_volume_kind::SP_VOLUME_LABELMAP);

    let mut got_shape = [0usize; 8];
    assert_eq!(unsafe { sp_volume_shape(vol, got_shape.as_mut_ptr(), 8) }, 3);
    assert_eq!(&got_shape[..3], &shape);
    let mut got_spacing = [0.0f64; 8];
    assert_eq!(unsafe { sp_volume_spacing(vol, got_spacing.as_mut_ptr(), 8) }, 3);
    assert_eq!(&got_spacing[..3], &spacing);

    let path = tmp.path().join("roundtrip.mvox");
    let cpath = c_path(&path);
    assert_eq!(unsafe { sp_volume_write(vol, cpath.as_ptr()) }, sp_status::SP_OK);

    let mut back: *mut sp_volume = ptr::null_mut();
    assert_eq!(unsafe { sp_volume_read(cpath.as_ptr(), &mut back) }, sp_status::SP_OK);
    let mut got = vec![0u8; 60];
    assert_eq!(
        unsafe { sp_volume_copy_u8(back, got.as_mut_ptr(), got.len()) },
        sp_status::SP_OK
    );
    assert_eq!(got, labels);

    // f32 copy from a labelmap must fail with a validation error
    let mut floats = vec![0.0f32; 60];
    assert_eq!(
        unsafe { sp_volume_copy_f32(back, floats.as_mut_ptr(), floats.len()) },
        sp_status::SP_VALIDATION_ERROR
    );
    assert!(last_error().contains("labelmap"), "{}", last_error());

    // perfect self-dice through the ABI
    let mut dice = 0.0f64;
    assert_eq!(unsafe { sp_dice(vol, back, 1, &mut dice) }, sp_status::SP_OK);
    assert_eq!(dice, 1.0);

    unsafe {
        sp_volume_free(vol);
        sp_volume_free(back);
        sp_volume_free(ptr::null_mut()); // NULL free is a no-op
    }
}

#[test]
fn error_paths_set_status_and_message() {
    let missing = CString::new("/nonexistent/nowhere.mvox").unwrap();
    let mut vol: *mut sp_volume = ptr::null_mut();
    assert_eq!(
        unsafe { sp_volume_read(missing.as_ptr(), &mut vol) },
        sp_status::SP_IO_ERROR
    );
    assert!(vol.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { sp_volume_read(ptr::null(), &mut vol) },
        sp_status::SP_NULL_ARGUMENT
    );
    assert!(last_error().contains("NULL"), "{}", last_error());

    // undersized copy buffer
    let shape = [2usize, 2];
    let spacing = [1.0f64, 1.0];
    let labels = [0u8, 1, 1, 0];
    let mut small: *mut sp_volume = ptr::null_mut();
    assert_eq!(
        unsafe {
            sp_volume_new_labelmap(
                shape.as_ptr(),
                spacing.as_ptr(),
                2,
                labels.as_ptr(),
                4,
                &mut small,
            )
        },
        sp_status::SP_OK
    );
    let mut buf = [0u8; 2];
    assert_eq!(
        unsafe { sp_volume_copy_u8(small, buf.as_mut_ptr(), 2) },
        sp_status::SP_VALIDATION_ERROR
    );
    assert!(last_error().contains("buffer too small"), "{}", last_error());

    // malformed construction: payload length mismatch
    let mut bad: *mut sp_volume = ptr::null_mut();
    assert_eq!(
        unsafe {
            sp_volume_new_labelmap(
                shape.as_ptr(),
                spacing.as_ptr(),
                2,
                labels.as_ptr(),
                3,
                &mut bad,
            )
        },
        sp_status::SP_VALIDATION_ERROR
    );
    assert!(bad.is_null());

    unsafe { sp_volume_free(small) };
}

#[test]
fn full_pipeline_through_the_abi() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let mut spec = SynthSpec::rigged_mini(19);
    spec.num_cases = 6;
    generate_dataset(&spec, &data_dir).unwrap();

    let c_data = c_path(&data_dir);
    let mut fp: *mut sp_fingerprint = ptr::null_mut();
    assert_eq!(
        unsafe { sp_fingerprint_dataset(c_data.as_ptr(), &mut fp) },
        sp_status::SP_OK
    );
    let fp_path = c_path(&tmp.path().join("fp.json"));
    assert_eq!(unsafe { sp_fingerprint_write(fp, fp_path.as_ptr()) }, sp_status::SP_OK);

    // read it back and plan from the round-tripped handle
    let mut fp2: *mut sp_fingerprint = ptr::null_mut();
    assert_eq!(unsafe { sp_fingerprint_read(fp_path.as_ptr(), &mut fp2) }, sp_status::SP_OK);
    let mut plan: *mut sp_plan = ptr::null_mut();
    assert_eq!(unsafe { sp_plan_from_fingerprint(fp2, &mut plan) }, sp_status::SP_OK);
    assert_eq!(unsafe { sp_plan_has_cascade(plan) }, 0, "mini dataset stays single-stage");
    assert_eq!(unsafe { sp_plan_num_models(plan) }, 2);

    let plan_path = tmp.path().join("plan.json");
    let c_plan = c_path(&plan_path);
    assert_eq!(unsafe { sp_plan_write(plan, c_plan.as_ptr()) }, sp_status::SP_OK);
    let mut plan2: *mut sp_plan = ptr::null_mut();
    assert_eq!(unsafe { sp_plan_read(c_plan.as_ptr(), &mut plan2) }, sp_status::SP_OK);

    let prep_dir = tmp.path().join("prep");
    let c_prep = c_path(&prep_dir);
    assert_eq!(
        unsafe {
            sp_preprocess_dataset(c_data.as_ptr(), c_plan.as_ptr(), fp_path.as_ptr(), c_prep.as_ptr())
        },
        sp_status::SP_OK
    );

    let run_dir = tmp.path().join("run");
    let c_run = c_path(&run_dir);
    let oracle = CString::new("oracle").unwrap();
    assert_eq!(
        unsafe {
            sp_run_cv(
                c_data.as_ptr(),
                c_prep.as_ptr(),
                c_plan.as_ptr(),
                c_run.as_ptr(),
                7,
                oracle.as_ptr(),
                0,
                0,
            )
        },
        sp_status::SP_OK
    );
    assert!(run_dir.join("metrics.json").is_file());
    assert!(run_dir.join("manifest.json").is_file());

    // postprocess one prediction through the ABI and verify idempotence
    let pred_path = run_dir.join("predictions/u3d/case_00.mvox");
    let c_pred = c_path(&pred_path);
    let mut pred: *mut sp_volume = ptr::null_mut();
    assert_eq!(unsafe { sp_volume_read(c_pred.as_ptr(), &mut pred) }, sp_status::SP_OK);
    let classes = [1u8];
    let mut post: *mut sp_volume = ptr::null_mut();
    assert_eq!(
        unsafe { sp_postprocess(pred, classes.as_ptr(), 1, &mut post) },
        sp_status::SP_OK
    );
    let mut again: *mut sp_volume = ptr::null_mut();
    assert_eq!(
        unsafe { sp_postprocess(post, classes.as_ptr(), 1, &mut again) },
        sp_status::SP_OK
    );
    let mut d = -1.0f64;
    assert_eq!(unsafe { sp_dice(post, again, 1, &mut d) }, sp_status::SP_OK);
    assert_eq!(d, 1.0, "postprocessing is idempotent");

    // an unknown predictor name is a validation error
    let bogus = CString::new("magic").unwrap();
    assert_eq!(
        unsafe {
            sp_run_cv(
                c_data.as_ptr(),
                c_prep.as_ptr(),
                c_plan.as_ptr(),
                c_run.as_ptr(),
                7,
                bogus.as_ptr(),
                0,
                0,
            )
        },
        sp_status::SP_VALIDATION_ERROR
    );
    assert!(last_error().contains("magic"), "{}", last_error());

    unsafe {
        sp_fingerprint_free(fp);
        sp_fingerprint_free(fp2);
        sp_plan_free(plan);
        sp_plan_free(plan2);
        sp_volume_free(pred);
        sp_volume_free(post);
        sp_volume_free(again);
    }
}

#[test]
fn version_and_header_are_present() {
    let version = unsafe { CStr::from_ptr(sp_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));

    // the build script regenerates the C header next to this crate
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/segplan.h");
    let text = std::fs::read_to_string(&header).expect("generated header exists");
    for needle in [
        "SEGPLAN_H",
        "typedef struct sp_volume sp_volume;",
        "typedef struct sp_fingerprint sp_fingerprint;",
        "typedef struct sp_plan sp_plan;",
        "sp_last_error_message",
        "sp_run_cv",
        "SP_VALIDATION_ERROR = 2",
        "SP_IO_ERROR = 3",
    ] {
        assert!(text.contains(needle), "header is missing `{needle}`");
    }
}
