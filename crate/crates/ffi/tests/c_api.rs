use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use syncgen::codec::io::write_codebooks;
use syncgen::codec::{analyze, fit_rvq};
use syncgen::model::{write_checkpoint, ModelConfig, Params};
use syncgen::world::WorldConfig;
use syncgen_ffi::*;

fn last_error() -> String {
    let p = sg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn artifacts(dir: &Path) -> (CString, CString, WorldConfig) {
    let world = WorldConfig {
        duration_s: 0.64,
        ..WorldConfig::default()
    };
    let feats: Vec<_> = (0..20)
        .map(|s| analyze(&world.clip("c", s).unwrap().audio, 64, 32).unwrap())
        .collect();
    let books = fit_rvq(&feats, 2, 16, 0, 4).unwrap();
    let books_path = dir.join("b.vrvq");
    write_codebooks(&books_path, &books).unwrap();
    let cfg = ModelConfig {
        k: 16,
        n_q: 2,
        d_a: 8,
        d_v: 8,
        d_raw: 16,
        d_vis_hidden: 8,
        n_layer: 1,
        n_head: 2,
        ..ModelConfig::default()
    };
    let ckpt = dir.join("m.vckp");
    write_checkpoint(&ckpt, &Params::init(&cfg, 1).unwrap(), None).unwrap();
    (
        CString::new(books_path.to_str().unwrap()).unwrap(),
        CString::new(ckpt.to_str().unwrap()).unwrap(),
        world,
    )
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(sg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn handles_round_trip_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let (books_path, ckpt_path, world) = artifacts(dir.path());
    let mut books = ptr::null_mut();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(sg_codebooks_read(books_path.as_ptr(), &mut books), SgStatus::Ok);
        assert_eq!(sg_model_read(ckpt_path.as_ptr(), &mut model), SgStatus::Ok);
        let (mut k, mut n_q, mut fl) = (0, 0, 0);
        assert_eq!(sg_codebooks_shape(books, &mut k, &mut n_q, &mut fl), SgStatus::Ok);
        assert_eq!((k, n_q, fl), (16, 2, 64));
        let mut count = 0;
        assert_eq!(sg_model_parameter_count(model, &mut count), SgStatus::Ok);
        assert!(count > 0);

        let clip = world.clip("v", 3).unwrap();
        let mut params = sg_sample_params_default();
        assert_eq!(params.gamma, 6.0);
        params.duration_s = 0.64;
        let mut len = 0;
        let st = sg_generate(
            model,
            books,
            clip.video.features.as_ptr(),
            clip.video.t_v,
            clip.video.d_raw,
            clip.video.fps,
            &params,
            ptr::null_mut(),
            0,
            &mut len,
        );
        assert_eq!(st, SgStatus::BufferTooSmall);
        assert_eq!(len, 5120);
        let mut buf = vec![0f32; len];
        let mut again = 0;
        let st = sg_generate(
            model,
            books,
            clip.video.features.as_ptr(),
            clip.video.t_v,
            clip.video.d_raw,
            clip.video.fps,
            &params,
            buf.as_mut_ptr(),
            buf.len(),
            &mut again,
        );
        assert_eq!(st, SgStatus::Ok);
        assert_eq!(again, len);
        assert!(buf.iter().all(|v| v.is_finite()));

        let mut snr = 0.0;
        let st = sg_codec_roundtrip_snr(books, clip.audio.samples.as_ptr(), clip.audio.samples.len(), 8000, &mut snr);
        if clip.audio.power() > 0.0 {
            assert_eq!(st, SgStatus::Ok);
            assert!(snr.is_finite());
        }
        sg_model_free(model);
        sg_codebooks_free(books);
        sg_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let missing = CString::new("/nonexistent/x.vrvq").unwrap();
    let mut books = ptr::null_mut();
    unsafe {
        assert_eq!(sg_codebooks_read(missing.as_ptr(), &mut books), SgStatus::Io);
        assert!(books.is_null());
        assert!(last_error().contains("/nonexistent/x.vrvq"));
        assert_eq!(sg_codebooks_read(ptr::null(), &mut books), SgStatus::NullPointer);
        assert!(last_error().contains("null"));

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.vckp");
        std::fs::write(&junk, b"NOPE").unwrap();
        let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(sg_model_read(junk_c.as_ptr(), &mut model), SgStatus::Format);
        assert!(model.is_null());
    }
}

#[test]
fn numeric_entry_points() {
    unsafe {
        let (p, q) = ([0.5, 0.5], [0.25, 0.75]);
        let mut kl = 0.0;
        assert_eq!(sg_kl_divergence(p.as_ptr(), q.as_ptr(), 2, &mut kl), SgStatus::Ok);
        assert!((kl - 0.1438).abs() < 1e-4);

        let lc = [0.8f64.ln(), 0.2f64.ln()];
        let lu = [0.5f64.ln(), 0.5f64.ln()];
        let mut mixed = [0.0; 2];
        assert_eq!(sg_cfg_mix(lc.as_ptr(), lu.as_ptr(), 2, 6.0, mixed.as_mut_ptr()), SgStatus::Ok);
        assert!((mixed[0].exp() - 4096.0 / 4097.0).abs() < 1e-12);

        let a: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64).collect();
        let mut fd = -1.0;
        assert_eq!(sg_frechet_distance(a.as_ptr(), 20, a.as_ptr(), 20, 2, &mut fd), SgStatus::Ok);
        assert!(fd.abs() < 1e-6);
        assert_eq!(
            sg_frechet_distance(a.as_ptr(), 2, a.as_ptr(), 20, 2, &mut fd),
            SgStatus::InvalidArgument
        );

        let wave = vec![0f32; 8000];
        let t = [0.5];
        let (mut ms, mut class) = (0.0, 0);
        assert_eq!(
            sg_estimate_offset(wave.as_ptr(), wave.len(), 8000, t.as_ptr(), 1, &mut ms, &mut class),
            SgStatus::Undefined
        );
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/syncgen.h")).unwrap();
    for name in [
        "sg_version",
        "sg_last_error_message",
        "sg_codebooks_read",
        "sg_codebooks_free",
        "sg_model_read",
        "sg_model_free",
        "sg_generate",
        "sg_cfg_mix",
        "sg_kl_divergence",
        "sg_frechet_distance",
        "sg_estimate_offset",
        "SG_STATUS_BUFFER_TOO_SMALL",
        "typedef struct SgModel SgModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"syncgen.h\"\nint main(void) { SgSampleParams p = sg_sample_params_default(); return p.top_k == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let inc = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(&inc)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "clang", "gcc"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
