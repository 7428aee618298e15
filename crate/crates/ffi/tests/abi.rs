//! Exercises the C ABI exactly as a foreign caller would: raw pointers,
//! NUL-terminated paths, preallocated buffers.

use std::ffi::CString;

use fewseg_ffi::{
    fewseg_last_error_message, fewseg_model_free, fewseg_model_input_size, fewseg_model_load,
    fewseg_segment, fewseg_segment_mask, fewseg_validate_registry, fewseg_version,
    FewsegImageView, FewsegMaskView, FewsegModel, FewsegStatus, FewsegSupport,
};

use fewseg_core::model::{init_params, ModelConfig};
use fewseg_core::train::{AdamState, Checkpoint, TrainConfig};

fn last_error() -> String {
    let needed = unsafe { fewseg_last_error_message(std::ptr::null_mut(), 0) };
    let mut buf = vec![0i8; needed + 1];
    unsafe { fewseg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf
        .iter()
        .take_while(|&&b| b != 0)
        .map(|&b| b as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn write_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = ModelConfig::tiny().with_input_size(32);
    let params = init_params::<f32>(&cfg, 12).unwrap();
    let adam = AdamState::new(&params);
    let checkpoint = Checkpoint {
        model_config: cfg,
        train_config: TrainConfig::default(),
        params,
        adam,
        episode: 0,
    };
    let path = dir.join("model.ckpt");
    checkpoint.save(&path).unwrap();
    path
}

fn load_model(path: &std::path::Path) -> *mut FewsegModel {
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut FewsegModel = std::ptr::null_mut();
    let status = unsafe { fewseg_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, FewsegStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

#[test]
fn version_is_a_c_string() {
    let raw = fewseg_version();
    let version = unsafe { std::ffi::CStr::from_ptr(raw) }.to_str().unwrap();
    assert!(!version.is_empty());
}

#[test]
fn load_segment_and_free() {
    let dir = tempfile::TempDir::new().unwrap();
    let ckpt = write_checkpoint(dir.path());
    let model = load_model(&ckpt);
    let side = unsafe { fewseg_model_input_size(model) } as usize;
    assert_eq!(side, 32);

    // 64x48 inputs get resized internally
    let (w, h) = (64u32, 48u32);
    let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
    let mask: Vec<u8> = (0..w * h)
        .map(|i| u8::from((i / w) < h / 2))
        .collect();
    let support = FewsegSupport {
        image: FewsegImageView {
            data: rgb.as_ptr(),
            width: w,
            height: h,
        },
        mask: FewsegMaskView {
            data: mask.as_ptr(),
            width: w,
            height: h,
        },
    };
    let query = FewsegImageView {
        data: rgb.as_ptr(),
        width: w,
        height: h,
    };

    let mut probs = vec![0.0f32; side * side];
    let status = unsafe {
        fewseg_segment(model, &support, 1, &query, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, FewsegStatus::Ok, "{}", last_error());
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));

    // same call through the thresholding entry point must agree
    let mut out_mask = vec![7u8; side * side];
    let status = unsafe {
        fewseg_segment_mask(
            model,
            &support,
            1,
            &query,
            0.5,
            out_mask.as_mut_ptr(),
            out_mask.len(),
        )
    };
    assert_eq!(status, FewsegStatus::Ok, "{}", last_error());
    for (p, m) in probs.iter().zip(out_mask.iter()) {
        assert_eq!(*m, if *p >= 0.5 { 255 } else { 0 });
    }

    unsafe { fewseg_model_free(model) };
}

#[test]
fn error_paths_report_statuses() {
    let dir = tempfile::TempDir::new().unwrap();
    let ckpt = write_checkpoint(dir.path());

    // missing checkpoint
    let mut handle: *mut FewsegModel = std::ptr::null_mut();
    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap().to_string()).unwrap();
    let status = unsafe { fewseg_model_load(missing.as_ptr(), &mut handle) };
    assert_eq!(status, FewsegStatus::Io);
    assert!(last_error().contains("nope.ckpt"));

    let model = load_model(&ckpt);
    let side = unsafe { fewseg_model_input_size(model) } as usize;
    let rgb = vec![0u8; 32 * 32 * 3];
    let query = FewsegImageView {
        data: rgb.as_ptr(),
        width: 32,
        height: 32,
    };

    // no supports
    let mut probs = vec![0.0f32; side * side];
    let status = unsafe {
        fewseg_segment(model, std::ptr::null(), 0, &query, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, FewsegStatus::InvalidArgument);

    // empty support mask
    let mask = vec![0u8; 32 * 32];
    let support = FewsegSupport {
        image: FewsegImageView {
            data: rgb.as_ptr(),
            width: 32,
            height: 32,
        },
        mask: FewsegMaskView {
            data: mask.as_ptr(),
            width: 32,
            height: 32,
        },
    };
    let status = unsafe {
        fewseg_segment(model, &support, 1, &query, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, FewsegStatus::InvalidArgument);
    assert!(last_error().contains("no foreground"));

    // undersized output buffer
    let mask: Vec<u8> = (0..32 * 32).map(|i| u8::from(i < 200)).collect();
    let support = FewsegSupport {
        image: FewsegImageView {
            data: rgb.as_ptr(),
            width: 32,
            height: 32,
        },
        mask: FewsegMaskView {
            data: mask.as_ptr(),
            width: 32,
            height: 32,
        },
    };
    let status =
        unsafe { fewseg_segment(model, &support, 1, &query, probs.as_mut_ptr(), 10) };
    assert_eq!(status, FewsegStatus::BufferTooSmall);

    // mask/image size mismatch
    let bad = FewsegSupport {
        mask: FewsegMaskView {
            data: mask.as_ptr(),
            width: 16,
            height: 16,
        },
        ..support
    };
    let status = unsafe {
        fewseg_segment(model, &bad, 1, &query, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, FewsegStatus::ShapeMismatch);

    unsafe { fewseg_model_free(model) };
    // freeing null is a no-op
    unsafe { fewseg_model_free(std::ptr::null_mut()) };
}

#[test]
fn registry_validation_over_ffi() {
    let dir = tempfile::TempDir::new().unwrap();
    fewseg_core::dataset::build_synthetic_dataset(2, 21, dir.path()).unwrap();

    let root = CString::new(dir.path().to_str().unwrap()).unwrap();
    let csv = dir.path().join("report.csv");
    let csv_c = CString::new(csv.to_str().unwrap()).unwrap();
    let mut errors = u64::MAX;
    let status =
        unsafe { fewseg_validate_registry(root.as_ptr(), csv_c.as_ptr(), &mut errors) };
    assert_eq!(status, FewsegStatus::Ok, "{}", last_error());
    assert_eq!(errors, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("path,rule_id,severity,message"));

    // unreadable root
    let missing = CString::new("/nonexistent/nowhere").unwrap();
    let status =
        unsafe { fewseg_validate_registry(missing.as_ptr(), std::ptr::null(), &mut errors) };
    assert_eq!(status, FewsegStatus::Io);
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::fs::read_to_string(fewseg_ffi::bundled_header_path())
        .expect("cbindgen header generated at build time");
    for symbol in [
        "fewseg_model_load",
        "fewseg_model_free",
        "fewseg_model_input_size",
        "fewseg_segment",
        "fewseg_segment_mask",
        "fewseg_validate_registry",
        "fewseg_last_error_message",
        "fewseg_version",
        "FewsegStatus",
        "FewsegSupport",
    ] {
        assert!(header.contains(symbol), "header missing {symbol}");
    }
}
