use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sfod::archive::Archive;
use sfod::data::{Dataset, SceneConfig, Split};
use sfod::detector::{Detector, DetectorConfig, DetectorParams};
use sfod::eval::{detect, evaluate, EvalConfig};
use sfod::matching::hungarian;
use sfod_ffi::*;

fn small() -> DetectorConfig {
    DetectorConfig {
        image_h: 16,
        image_w: 16,
        hidden: 8,
        n_queries: 4,
        dec_layers: 2,
        num_classes: 3,
        ffn_dim: 16,
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe { sfod_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn write_checkpoint(dir: &Path, prefix: &str, params: &DetectorParams) -> CString {
    let mut a = Archive::new();
    params.write_archive(&mut a, prefix);
    let p = dir.join(format!("{}ckpt.bin", prefix.trim_end_matches('/')));
    a.save(&p).unwrap();
    cpath(&p)
}

fn load(path: &CString, student: i32) -> *mut SfodModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sfod_model_load(path.as_ptr(), student, &mut m) }, SfodStatus::Ok, "{}", last_error());
    m
}

#[test]
fn detect_and_evaluate_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let params = DetectorParams::init(small(), 3).unwrap();
    let m = load(&write_checkpoint(dir.path(), "model/", &params), 0);

    let (mut h, mut w, mut k, mut q) = (0, 0, 0, 0);
    assert_eq!(unsafe { sfod_model_info(m, &mut h, &mut w, &mut k, &mut q) }, SfodStatus::Ok);
    assert_eq!((h, w, k, q), (16, 16, 3, 4));

    let scene = SceneConfig {
        image_h: 16,
        image_w: 16,
        ..SceneConfig::default()
    };
    let data = Dataset::generate(&scene, 1, Split::TargetTest, 5).unwrap();
    let det = Detector::new(small()).unwrap();
    for s in &data.samples {
        let want = detect(&det, &params, &s.image, 0, 0.0).unwrap();
        let mut out = [SfodDetection::default(); 4];
        let mut n = 0;
        let st = unsafe { sfod_model_detect(m, s.image.as_ptr(), s.image.len(), 0.0, out.as_mut_ptr(), out.len(), &mut n) };
        assert_eq!(st, SfodStatus::Ok);
        assert_eq!(n, want.len());
        for (a, b) in out[..n].iter().zip(&want) {
            assert_eq!((a.class_id as usize, a.score, a.cx, a.cy, a.w, a.h), (b.class, b.score, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h));
        }
        let st = unsafe { sfod_model_detect(m, s.image.as_ptr(), s.image.len(), 0.0, out.as_mut_ptr(), 1, &mut n) };
        assert_eq!((st, n), (SfodStatus::BufferTooSmall, 4));
    }

    let dpath = dir.path().join("target_test.bin");
    data.save(&dpath).unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { sfod_dataset_load(cpath(&dpath).as_ptr(), &mut d) }, SfodStatus::Ok);
    assert_eq!(unsafe { sfod_dataset_len(d) }, 5);
    let mut map = -1.0;
    assert_eq!(unsafe { sfod_model_evaluate(m, d, 0.5, 0.0, &mut map) }, SfodStatus::Ok);
    let cfg = EvalConfig {
        iou_thresh: 0.5,
        score_floor: 0.0,
    };
    assert_eq!(map, evaluate(&det, &params, &data, &cfg).unwrap().map50);
    assert_eq!(unsafe { sfod_model_evaluate(m, d, 0.0, 0.0, &mut map) }, SfodStatus::InvalidArgument);
    unsafe {
        sfod_dataset_free(d);
        sfod_model_free(m);
    }
}

#[test]
fn teacher_and_student_are_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = Archive::new();
    DetectorParams::init(small(), 1).unwrap().write_archive(&mut a, "teacher/");
    DetectorParams::init(small(), 2).unwrap().write_archive(&mut a, "student/");
    let p = dir.path().join("adapt.bin");
    a.save(&p).unwrap();
    let image = vec![0.5; 16 * 16 * 3];
    let run = |student| {
        let m = load(&cpath(&p), student);
        let mut out = [SfodDetection::default(); 4];
        let mut n = 0;
        unsafe {
            assert_eq!(sfod_model_detect(m, image.as_ptr(), image.len(), 0.0, out.as_mut_ptr(), 4, &mut n), SfodStatus::Ok);
            sfod_model_free(m);
        }
        out
    };
    assert_ne!(run(0), run(1));

    // A pretraining checkpoint has no student.
    let single = write_checkpoint(dir.path(), "model/", &DetectorParams::init(small(), 1).unwrap());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sfod_model_load(single.as_ptr(), 1, &mut m) }, SfodStatus::Config);
    assert!(m.is_null());
}

#[test]
fn errors_are_reported_not_raised() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/ckpt.bin").unwrap();
    assert_eq!(unsafe { sfod_model_load(missing.as_ptr(), 0, &mut m) }, SfodStatus::Io);
    assert!(last_error().starts_with("io:"), "{}", last_error());
    let need = unsafe { sfod_last_error(ptr::null_mut(), 0) };
    assert!(need > 0);
    let mut tiny = [1 as c_char; 4];
    assert_eq!(unsafe { sfod_last_error(tiny.as_mut_ptr(), 4) }, need);
    assert_eq!(tiny[3], 0);

    assert_eq!(unsafe { sfod_model_load(ptr::null(), 0, &mut m) }, SfodStatus::NullPointer);
    let junk = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(junk.path(), b"not an archive").unwrap();
    assert_eq!(unsafe { sfod_model_load(cpath(junk.path()).as_ptr(), 0, &mut m) }, SfodStatus::Format);

    let mut n = 0;
    let image = [0.0; 3];
    let dir = tempfile::tempdir().unwrap();
    let model = load(&write_checkpoint(dir.path(), "model/", &DetectorParams::init(small(), 0).unwrap()), 0);
    let st = unsafe { sfod_model_detect(model, image.as_ptr(), image.len(), 0.0, ptr::null_mut(), 0, &mut n) };
    assert_eq!(st, SfodStatus::Mismatch);
    assert!(!last_error().is_empty());
    let mut h = 0;
    assert_eq!(unsafe { sfod_model_info(model, &mut h, ptr::null_mut(), &mut h, &mut h) }, SfodStatus::NullPointer);
    unsafe { sfod_model_free(model) };
    unsafe { sfod_model_free(ptr::null_mut()) };

    // Success clears the message.
    assert_eq!(unsafe { sfod_hungarian(ptr::null(), 0, 0, ptr::null_mut(), &mut 0.0) }, SfodStatus::Ok);
    assert_eq!(unsafe { sfod_last_error(ptr::null_mut(), 0) }, 0);
}

#[test]
fn hungarian_and_schedule_match_the_library() {
    let cost = [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]];
    let flat: Vec<f64> = cost.iter().flatten().copied().collect();
    let mut asg = [0i64; 2];
    let mut total = 0.0;
    assert_eq!(unsafe { sfod_hungarian(flat.as_ptr(), 2, 3, asg.as_mut_ptr(), &mut total) }, SfodStatus::Ok);
    let m: Vec<Vec<f64>> = cost.iter().map(|r| r.to_vec()).collect();
    assert_eq!(total, hungarian(&m).total_cost(&m));
    assert_eq!((asg, total), ([1, 0], 3.0));

    // More rows than columns leaves the extra rows unmatched.
    let tall = [1.0, 2.0, 0.5];
    let mut asg = [0i64; 3];
    assert_eq!(unsafe { sfod_hungarian(tall.as_ptr(), 3, 1, asg.as_mut_ptr(), &mut total) }, SfodStatus::Ok);
    assert_eq!((asg, total), ([-1, -1, 0], 0.5));

    let bad = [f64::NAN];
    assert_eq!(unsafe { sfod_hungarian(bad.as_ptr(), 1, 1, asg.as_mut_ptr(), &mut total) }, SfodStatus::InvalidArgument);

    let got: Vec<u64> = (0..11).map(|e| sfod_dtui_interval(e, 5, 5)).collect();
    assert_eq!(got, [5, 5, 5, 5, 5, 6, 6, 6, 6, 6, 7]);
    let v = unsafe { CStr::from_ptr(sfod_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sfod.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "sfod_last_error",
        "sfod_version",
        "sfod_model_load",
        "sfod_model_free",
        "sfod_model_info",
        "sfod_model_detect",
        "sfod_model_evaluate",
        "sfod_dataset_load",
        "sfod_dataset_len",
        "sfod_dataset_free",
        "sfod_dtui_interval",
        "sfod_hungarian",
        "typedef struct SfodModel SfodModel",
    ] {
        assert!(text.contains(f), "{f}");
    }
    // Syntax-check as C and as C++ when a compiler is around.
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        match Command::new(cc).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).status() {
            Ok(s) => assert!(s.success(), "{cc} rejected the header"),
            Err(_) => eprintln!("{cc} not found, skipping"),
        }
    }
}
