use std::ffi::{CString, c_char};
use std::ptr;

use flowedit::engine::{Engine, SolverChoice};
use flowedit::flow::{TrainConfig, Trainer};
use flowedit::io::Checkpoint;
use flowedit::model::{ArchConfig, Model};
use flowedit::ode::SolverFamily;
use flowedit::prompt::Vocabulary;
use flowedit::uvit::UViTConfig;
use flowedit_ffi::*;

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = UViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        prompt_length: 4,
        vocab_size: 32,
        ..UViTConfig::default()
    };
    let model = Model::init(ArchConfig::Uvit(cfg), 3).unwrap();
    let train = TrainConfig::default();
    let trainer = Trainer::new(model, &train, 1e-4);
    let path = dir.join("tiny.fe");
    Checkpoint::from_trainer(&trainer, &Default::default(), &train, Some(Vocabulary::standard(32).unwrap()))
        .save(&path)
        .unwrap();
    path
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { fe_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn sample_matches_engine() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut FeEngine = ptr::null_mut();
    assert_eq!(unsafe { fe_engine_load(cpath.as_ptr(), ptr::null(), &mut h) }, FeStatus::Ok);
    let n = unsafe { fe_engine_latent_len(h) };
    assert_eq!(n, 64);
    let prompt = CString::new("a large circle").unwrap();
    let solver = CString::new("rk4").unwrap();
    let mut out = vec![0f32; 2 * n];
    let s = unsafe { fe_sample(h, 5, 2, prompt.as_ptr(), solver.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, FeStatus::Ok, "{}", last_error());

    let engine = Engine::load(&path, None).unwrap();
    let choice = SolverChoice {
        solver: SolverFamily::Rk4,
        ..SolverChoice::default()
    };
    let (x, _) = engine.sample(&[5, 6], "a large circle", &choice).unwrap();
    assert_eq!(x.data(), out.as_slice());
    unsafe { fe_engine_free(h) };
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let missing = CString::new(dir.path().join("nope.fe").to_str().unwrap()).unwrap();
    let mut h: *mut FeEngine = ptr::null_mut();

    assert_eq!(unsafe { fe_engine_load(missing.as_ptr(), ptr::null(), &mut h) }, FeStatus::MissingFile);
    assert!(last_error().contains("nope.fe"));
    assert_eq!(unsafe { fe_engine_load(ptr::null(), ptr::null(), &mut h) }, FeStatus::NullPointer);

    assert_eq!(unsafe { fe_engine_load(cpath.as_ptr(), ptr::null(), &mut h) }, FeStatus::Ok);
    let mut small = vec![0f32; 3];
    let s = unsafe { fe_sample(h, 0, 1, ptr::null(), ptr::null(), small.as_mut_ptr(), small.len()) };
    assert_eq!(s, FeStatus::BufferSize);

    let n = unsafe { fe_engine_latent_len(h) };
    let mut out = vec![0f32; n];
    let bad_word = CString::new("a purple circle").unwrap();
    let s = unsafe { fe_sample(h, 0, 1, bad_word.as_ptr(), ptr::null(), out.as_mut_ptr(), n) };
    assert_eq!(s, FeStatus::UnknownWord);
    assert!(last_error().contains("purple"));

    let bad_solver = CString::new("leapfrog").unwrap();
    let s = unsafe { fe_sample(h, 0, 1, ptr::null(), bad_solver.as_ptr(), out.as_mut_ptr(), n) };
    assert_eq!(s, FeStatus::Validation);

    let name = CString::new("large").unwrap();
    let names = [name.as_ptr()];
    let weights = [1.0f64];
    let s = unsafe {
        fe_edit(h, 0, ptr::null(), names.as_ptr(), weights.as_ptr(), 1, 0.5, ptr::null(), out.as_mut_ptr(), n, ptr::null_mut())
    };
    assert_eq!(s, FeStatus::UnknownAttribute);
    assert!(last_error().contains("large"));
    unsafe { fe_engine_free(h) };
    unsafe { fe_engine_free(ptr::null_mut()) };
}

#[test]
fn edit_without_attributes_equals_sample_and_invert_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut FeEngine = ptr::null_mut();
    assert_eq!(unsafe { fe_engine_load(cpath.as_ptr(), ptr::null(), &mut h) }, FeStatus::Ok);
    let n = unsafe { fe_engine_latent_len(h) };
    let mut sampled = vec![0f32; n];
    let mut edited = vec![0f32; n];
    let mut rel = f64::NAN;
    unsafe {
        assert_eq!(fe_sample(h, 9, 1, ptr::null(), ptr::null(), sampled.as_mut_ptr(), n), FeStatus::Ok);
        let s = fe_edit(h, 9, ptr::null(), ptr::null(), ptr::null(), 0, 0.5, ptr::null(), edited.as_mut_ptr(), n, &mut rel);
        assert_eq!(s, FeStatus::Ok, "{}", last_error());
    }
    assert_eq!(sampled, edited);
    assert_eq!(rel, 0.0);

    let mut noise = vec![0f32; n];
    let s = unsafe { fe_invert(h, sampled.as_ptr(), n, ptr::null(), ptr::null(), noise.as_mut_ptr(), n) };
    assert_eq!(s, FeStatus::Ok, "{}", last_error());
    let engine = Engine::load(&path, None).unwrap();
    let x0 = engine.noise(&[9]).unwrap();
    let err: f64 = x0
        .data()
        .iter()
        .zip(&noise)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
        / x0.l2_norm();
    assert!(err < 1e-2, "round trip error {err}");
    unsafe { fe_engine_free(h) };
}
