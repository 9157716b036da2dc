use std::ffi::{CStr, CString};
use std::ptr;

use traffic_unet::data::{generate_synthetic_city, write_dayfile, FrameStack};
use traffic_unet::model::{build_model, ModelConfig};
use traffic_unet_ffi::*;

fn last_error() -> String {
    let p = tu_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(tu_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_and_dayfile_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig::desk(8, 8, 1);
    let model = build_model(&config, 3).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let day = &generate_synthetic_city("c", 1, 1, 8, 8).unwrap()[0];
    let dayfile = dir.path().join("d.t4c");
    write_dayfile(day, &dayfile).unwrap();

    unsafe {
        let mut handle = ptr::null_mut();
        let path = CString::new(ckpt.to_str().unwrap()).unwrap();
        assert_eq!(tu_model_load(path.as_ptr(), &mut handle), TuStatus::Ok);
        let mut info = TuModelInfo::default();
        assert_eq!(tu_model_info(handle, &mut info), TuStatus::Ok);
        assert_eq!(
            (info.height, info.width, info.in_channels, info.out_channels),
            (8, 8, 72, 9)
        );
        assert_eq!(info.variant, TuVariant::Base1 as u32);

        let mut dh = ptr::null_mut();
        let dpath = CString::new(dayfile.to_str().unwrap()).unwrap();
        assert_eq!(tu_dayfile_read(dpath.as_ptr(), &mut dh), TuStatus::Ok);
        let (mut n, mut h, mut w) = (0, 0, 0);
        assert_eq!(tu_dayfile_dims(dh, &mut n, &mut h, &mut w), TuStatus::Ok);
        assert_eq!((n, h, w), (288, 8, 8));
        let (mut data, mut len) = (ptr::null(), 0);
        assert_eq!(tu_dayfile_data(dh, &mut data, &mut len), TuStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(data, len), day.frames.data());

        let mut x = vec![0f32; 8 * 8 * 72];
        assert_eq!(
            tu_encode_input(dh, 10, x.as_mut_ptr(), x.len()),
            TuStatus::Ok
        );
        let mut y = vec![0f32; 8 * 8 * 9];
        assert_eq!(
            tu_model_forward(handle, x.as_ptr(), x.len(), y.as_mut_ptr(), y.len()),
            TuStatus::Ok
        );
        let expected = model
            .forward(&traffic_unet::Tensor::new(vec![8, 8, 72], x.clone()).unwrap())
            .unwrap();
        assert_eq!(y, expected.data());

        let mut bytes = vec![0u8; 3 * 8 * 8 * 3];
        assert_eq!(
            tu_decode_output(y.as_ptr(), 8, 8, bytes.as_mut_ptr(), bytes.len()),
            TuStatus::Ok
        );
        let decoded: FrameStack = traffic_unet::data::decode_output(&expected).unwrap();
        assert_eq!(bytes, decoded.data());

        // wrong buffer sizes are shape errors, with a message
        assert_eq!(
            tu_model_forward(handle, x.as_ptr(), 3, y.as_mut_ptr(), y.len()),
            TuStatus::Shape
        );
        assert!(last_error().contains("input"));
        assert_eq!(
            tu_encode_input(dh, 280, x.as_mut_ptr(), x.len()),
            TuStatus::InvalidArgument
        );

        tu_dayfile_free(dh);
        tu_model_free(handle);
        tu_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut handle = ptr::null_mut();
        assert_eq!(
            tu_model_load(ptr::null(), &mut handle),
            TuStatus::NullPointer
        );
        let missing = CString::new("/no/such/model").unwrap();
        assert_eq!(tu_model_load(missing.as_ptr(), &mut handle), TuStatus::Io);
        assert!(handle.is_null());

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(
            tu_model_load(junk_c.as_ptr(), &mut handle),
            TuStatus::Format
        );
        assert!(!last_error().is_empty());

        let mut info = TuModelInfo::default();
        assert_eq!(tu_model_info(ptr::null(), &mut info), TuStatus::NullPointer);
    }
}

#[test]
fn evaluate_and_trace() {
    unsafe {
        let a = [0u8, 0, 0, 255, 255, 255];
        let b = [255u8; 6];
        let mut v = 0.0;
        assert_eq!(tu_evaluate(a.as_ptr(), b.as_ptr(), 6, &mut v), TuStatus::Ok);
        assert_eq!(v, 0.5);
        assert_eq!(
            tu_evaluate(a.as_ptr(), b.as_ptr(), 4, &mut v),
            TuStatus::Shape
        );

        let mut need = 0;
        assert_eq!(
            tu_shape_trace(495, 436, 7, ptr::null_mut(), 0, &mut need),
            TuStatus::Ok
        );
        let mut buf = vec![0 as std::ffi::c_char; need];
        assert_eq!(
            tu_shape_trace(495, 436, 7, buf.as_mut_ptr(), buf.len(), &mut need),
            TuStatus::Ok
        );
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert!(text.trim_end().ends_with("(495, 436, 9)"));
        let mut small = [0 as std::ffi::c_char; 4];
        assert_eq!(
            tu_shape_trace(495, 436, 7, small.as_mut_ptr(), small.len(), &mut need),
            TuStatus::InvalidArgument
        );
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/traffic_unet.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "tu_model_load",
        "tu_model_forward",
        "tu_evaluate",
        "TU_STATUS_PANIC",
        "TuVariant",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"traffic_unet.h\"\nint main(void) { TuModel *m = 0; TuStatus s = tu_model_load(\"x\", &m); tu_model_free(m); return (int)s; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc)
            .arg("--version")
            .output()
            .is_ok()
        {
            return Ok(cc);
        }
    }
    Err(())
}
