use std::ffi::{CStr, CString};
use std::ptr;

use smes_ffi::*;

fn dims() -> SmesDims {
    SmesDims {
        features: 5,
        encoder_hidden: 6,
        d_in: 4,
        d_out: 3,
        experts: 8,
        tasks: 2,
    }
}

fn last_error() -> String {
    let p = smes_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_predict_save_load() {
    unsafe {
        let mut m: *mut SmesModel = ptr::null_mut();
        assert_eq!(smes_model_new(dims(), 2, 2, 7, &mut m), SmesStatus::Ok);
        assert!(smes_last_error_message().is_null());
        let mut got = SmesDims::default();
        assert_eq!(smes_model_dims(m, &mut got), SmesStatus::Ok);
        assert_eq!(got, dims());

        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut p = vec![0.0; 6];
        assert_eq!(
            smes_model_predict(m, x.as_ptr(), 3, 5, p.as_mut_ptr(), p.len()),
            SmesStatus::Ok
        );
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(smes_model_save(m, path.as_ptr()), SmesStatus::Ok);
        let mut loaded: *mut SmesModel = ptr::null_mut();
        assert_eq!(smes_model_load(path.as_ptr(), &mut loaded), SmesStatus::Ok);
        let mut q = vec![0.0; 6];
        assert_eq!(
            smes_model_predict(loaded, x.as_ptr(), 3, 5, q.as_mut_ptr(), q.len()),
            SmesStatus::Ok
        );
        assert_eq!(p, q);

        assert_eq!(
            smes_model_predict(m, x.as_ptr(), 3, 5, q.as_mut_ptr(), 5),
            SmesStatus::BufferTooSmall
        );
        assert_eq!(
            smes_model_predict(m, x.as_ptr(), 3, 4, q.as_mut_ptr(), 6),
            SmesStatus::InvalidArgument
        );
        assert!(!last_error().is_empty());
        smes_model_free(m);
        smes_model_free(loaded);
        smes_model_free(ptr::null_mut());
    }
}

#[test]
fn model_errors() {
    unsafe {
        let mut m: *mut SmesModel = ptr::null_mut();
        assert_eq!(
            smes_model_new(dims(), 0, 0, 1, &mut m),
            SmesStatus::InvalidArgument
        );
        assert!(m.is_null());
        let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
        assert_eq!(smes_model_load(missing.as_ptr(), &mut m), SmesStatus::Io);
        assert!(last_error().contains("/nonexistent/dir/m.ckpt"));
        assert_eq!(
            smes_model_load(ptr::null(), &mut m),
            SmesStatus::NullPointer
        );

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(smes_model_load(bad.as_ptr(), &mut m), SmesStatus::Format);
    }
}

#[test]
fn pool_lifecycle() {
    unsafe {
        let mut pool: *mut SmesPool = ptr::null_mut();
        assert_eq!(smes_pool_new(4096, 10, &mut pool), SmesStatus::Ok);
        let mut a = SmesBlock::default();
        let mut b = SmesBlock::default();
        assert_eq!(smes_pool_allocate(pool, 4, -1, &mut a), SmesStatus::Ok);
        assert_eq!(smes_pool_allocate(pool, 3, -1, &mut b), SmesStatus::Ok);
        assert_eq!((a.start, a.len, b.start, b.len), (0, 4, 4, 3));

        let mut c = SmesBlock::default();
        assert_eq!(
            smes_pool_allocate(pool, 11, 0, &mut c),
            SmesStatus::Infeasible
        );
        assert_eq!(smes_pool_allocate(pool, 5, 10, &mut c), SmesStatus::Timeout);

        let mut s = SmesPoolStats::default();
        assert_eq!(smes_pool_stats(pool, &mut s), SmesStatus::Ok);
        assert_eq!(
            (s.pages_in_use, s.held_blocks, s.allocations, s.timeouts),
            (7, 2, 2, 1)
        );

        assert_eq!(smes_pool_release(pool, a.id), SmesStatus::Ok);
        assert_eq!(smes_pool_release(pool, a.id), SmesStatus::InvalidArgument);
        assert_eq!(smes_pool_release(pool, b.id), SmesStatus::Ok);
        assert_eq!(smes_pool_stats(pool, &mut s), SmesStatus::Ok);
        assert_eq!((s.pages_in_use, s.held_blocks, s.releases), (0, 0, 2));
        smes_pool_free(pool);

        assert_eq!(smes_pool_new(0, 10, &mut pool), SmesStatus::InvalidArgument);
    }
}

#[test]
fn metrics_over_raw_arrays() {
    unsafe {
        let scores = [0.9, 0.1, 0.5, 0.5];
        let labels = [1u8, 0, 1, 0];
        let users = [1u64, 1, 2, 2];
        let mut v = 0.0;
        assert_eq!(
            smes_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut v),
            SmesStatus::Ok
        );
        assert_eq!(v, 0.875);
        assert_eq!(
            smes_gauc(scores.as_ptr(), labels.as_ptr(), users.as_ptr(), 4, &mut v),
            SmesStatus::Ok
        );
        assert_eq!(v, 0.75);
        let ones = [1u8; 4];
        assert_eq!(
            smes_auc(scores.as_ptr(), ones.as_ptr(), 4, &mut v),
            SmesStatus::Undefined
        );
        assert_eq!(
            smes_auc(ptr::null(), labels.as_ptr(), 4, &mut v),
            SmesStatus::NullPointer
        );
    }
}

#[test]
fn route_on_raw_logits() {
    unsafe {
        // Task 0 prefers experts 0..2, task 1 prefers 4..6.
        let logits = [
            5.0, 4.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 5.0, 4.0, 3.0, 0.0,
        ];
        let mut active = [u32::MAX; 2 * 3];
        let mut union = [u32::MAX; 8];
        let mut n = 0usize;
        let st = smes_progressive_route(
            logits.as_ptr(),
            2,
            8,
            1,
            2,
            ptr::null(),
            active.as_mut_ptr(),
            union.as_mut_ptr(),
            &mut n,
        );
        assert_eq!(st, SmesStatus::Ok);
        assert!(n <= 1 + 2 * 2);
        let shared = active[0];
        assert!(active[3..].contains(&shared));
        for row in active.chunks(3) {
            assert!(row.windows(2).all(|w| w[0] < w[1]));
            assert!(row.iter().all(|e| union[..n].contains(e)));
        }
        let st = smes_progressive_route(
            logits.as_ptr(),
            2,
            8,
            0,
            9,
            ptr::null(),
            active.as_mut_ptr(),
            union.as_mut_ptr(),
            &mut n,
        );
        assert_eq!(st, SmesStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/smes.h")).unwrap();
    for name in [
        "smes_last_error_message",
        "smes_model_new",
        "smes_model_load",
        "smes_model_save",
        "smes_model_dims",
        "smes_model_predict",
        "smes_model_free",
        "smes_pool_new",
        "smes_pool_allocate",
        "smes_pool_release",
        "smes_pool_stats",
        "smes_pool_free",
        "smes_auc",
        "smes_gauc",
        "smes_progressive_route",
        "typedef struct SmesModel SmesModel;",
        "typedef struct SmesPool SmesPool;",
        "SMES_STATUS_OK = 0",
        "#ifndef SMES_H",
    ] {
        assert!(header.contains(name), "header is missing {name}");
    }
}
