//! C ABI over [`flowedit::engine::Engine`].
//!
//! Every function returns an [`FeStatus`]; on failure the message is kept per
//! thread and can be copied out with [`fe_last_error`]. Output tensors are
//! written into caller-owned `float` buffers whose length must equal
//! [`fe_engine_latent_len`] times the batch size.

use std::cell::RefCell;
use std::ffi::{CStr, c_char};
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::Path;

use flowedit::engine::{AttrWeight, Category, EditRequest, Engine, EngineError, SolverChoice};
use flowedit::ode::SolverFamily;
use flowedit::tensor::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferSize = 3,
    MissingFile = 10,
    Io = 11,
    Digest = 12,
    Format = 13,
    Config = 20,
    Validation = 21,
    UnknownAttribute = 22,
    UnknownWord = 23,
    NotFound = 24,
    Solver = 30,
    Diverged = 31,
    Unavailable = 40,
    Internal = 41,
    Panic = 42,
}

impl From<Category> for FeStatus {
    fn from(c: Category) -> Self {
        match c {
            Category::MissingFile => FeStatus::MissingFile,
            Category::Io => FeStatus::Io,
            Category::Digest => FeStatus::Digest,
            Category::Format => FeStatus::Format,
            Category::Config => FeStatus::Config,
            Category::Validation => FeStatus::Validation,
            Category::UnknownAttribute => FeStatus::UnknownAttribute,
            Category::UnknownWord => FeStatus::UnknownWord,
            Category::NotFound => FeStatus::NotFound,
            Category::Solver => FeStatus::Solver,
            Category::Diverged => FeStatus::Diverged,
            Category::Unavailable => FeStatus::Unavailable,
            Category::Internal => FeStatus::Internal,
        }
    }
}

/// Opaque engine handle.
pub struct FeEngine {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: FeStatus, msg: impl Into<String>) -> FeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), FeStatus>) -> FeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FeStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(FeStatus::Panic, "internal panic"),
    }
}

fn engine_err(e: EngineError) -> FeStatus {
    fail(e.category().into(), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, FeStatus> {
    if p.is_null() {
        return Err(fail(FeStatus::NullPointer, format!("{name} is null")));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(FeStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// Null is read as the empty string.
unsafe fn opt_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, FeStatus> {
    if p.is_null() { Ok("") } else { unsafe { str_arg(p, name) } }
}

unsafe fn engine_ref<'a>(h: *const FeEngine) -> Result<&'a Engine, FeStatus> {
    if h.is_null() {
        return Err(fail(FeStatus::NullPointer, "engine is null"));
    }
    Ok(unsafe { &(*h).engine })
}

unsafe fn out_buf<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], FeStatus> {
    if p.is_null() {
        return Err(fail(FeStatus::NullPointer, "output buffer is null"));
    }
    if len != need {
        return Err(fail(FeStatus::BufferSize, format!("buffer holds {len} floats, need {need}")));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn solver(name: *const c_char) -> Result<SolverChoice, FeStatus> {
    let name = unsafe { opt_str(name, "solver") }?;
    let mut c = SolverChoice::default();
    if !name.is_empty() {
        c.solver = name
            .parse::<SolverFamily>()
            .map_err(|e| fail(FeStatus::Validation, e.to_string()))?;
    }
    Ok(c)
}

/// Copies the calling thread's last error message (NUL terminated, truncated
/// to `cap`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a checkpoint and an optional direction bank (`bank_path` may be null).
///
/// # Safety
/// Paths must be null or NUL-terminated strings; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_engine_load(
    checkpoint_path: *const c_char,
    bank_path: *const c_char,
    out: *mut *mut FeEngine,
) -> FeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FeStatus::NullPointer, "out is null"));
        }
        let ck = unsafe { str_arg(checkpoint_path, "checkpoint_path") }?;
        let bank = unsafe { opt_str(bank_path, "bank_path") }?;
        let bank = (!bank.is_empty()).then(|| Path::new(bank));
        let engine = Engine::load(ck, bank).map_err(engine_err)?;
        unsafe { *out = Box::into_raw(Box::new(FeEngine { engine })) };
        Ok(())
    })
}

/// Releases a handle from [`fe_engine_load`]. Null is ignored.
///
/// # Safety
/// `engine` must come from `fe_engine_load` and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_engine_free(engine: *mut FeEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Number of floats in one latent, or 0 for a null handle.
///
/// # Safety
/// `engine` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_engine_latent_len(engine: *const FeEngine) -> usize {
    match unsafe { engine_ref(engine) } {
        Ok(e) => e.model.latent_shape().iter().product(),
        Err(_) => 0,
    }
}

/// Number of attributes in the loaded bank.
///
/// # Safety
/// `engine` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_engine_attribute_count(engine: *const FeEngine) -> usize {
    match unsafe { engine_ref(engine) } {
        Ok(e) => e.bank.as_ref().map_or(0, |b| b.attributes.len()),
        Err(_) => 0,
    }
}

fn write(out: &mut [f32], x: &Tensor) {
    out.copy_from_slice(x.data());
}

/// Generates `count` samples from seeds `seed..seed + count` into `out`
/// (`count * latent_len` floats). `prompt` and `solver` may be null for the
/// empty prompt and dopri5.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_sample(
    engine: *const FeEngine,
    seed: u64,
    count: usize,
    prompt: *const c_char,
    solver_name: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> FeStatus {
    guard(|| {
        let e = unsafe { engine_ref(engine) }?;
        let prompt = unsafe { opt_str(prompt, "prompt") }?;
        let choice = unsafe { solver(solver_name) }?;
        let n: usize = e.model.latent_shape().iter().product();
        let buf = unsafe { out_buf(out, out_len, n * count) }?;
        let seeds: Vec<u64> = (seed..seed + count as u64).collect();
        let (x, _) = e.sample(&seeds, prompt, &choice).map_err(engine_err)?;
        write(buf, &x);
        Ok(())
    })
}

/// Inverts one latent (`latent_len` floats) back to noise.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_invert(
    engine: *const FeEngine,
    image: *const f32,
    image_len: usize,
    prompt: *const c_char,
    solver_name: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> FeStatus {
    guard(|| {
        let e = unsafe { engine_ref(engine) }?;
        if image.is_null() {
            return Err(fail(FeStatus::NullPointer, "image is null"));
        }
        let shape = e.model.latent_shape();
        let n: usize = shape.iter().product();
        if image_len != n {
            return Err(fail(FeStatus::BufferSize, format!("image holds {image_len} floats, need {n}")));
        }
        let prompt = unsafe { opt_str(prompt, "prompt") }?;
        let choice = unsafe { solver(solver_name) }?;
        let buf = unsafe { out_buf(out, out_len, n) }?;
        let data = unsafe { std::slice::from_raw_parts(image, image_len) }.to_vec();
        let x = Tensor::new(shape, data).map_err(|err| engine_err(err.into()))?;
        let (z, _) = e.invert(&x, prompt, &choice).map_err(engine_err)?;
        write(buf, &z);
        Ok(())
    })
}

/// Edits the sample of `seed` with `n_attrs` attribute offsets
/// (`names[i]` with weight `weights[i]`) applied for `0 < t < t_edit`.
/// Writes the edited latent to `out` and, when non-null, the relative change
/// against the unedited sample to `relative_error`.
///
/// # Safety
/// `names` and `weights` must hold `n_attrs` entries; buffers must be valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn fe_edit(
    engine: *const FeEngine,
    seed: u64,
    prompt: *const c_char,
    names: *const *const c_char,
    weights: *const f64,
    n_attrs: usize,
    t_edit: f64,
    solver_name: *const c_char,
    out: *mut f32,
    out_len: usize,
    relative_error: *mut f64,
) -> FeStatus {
    guard(|| {
        let e = unsafe { engine_ref(engine) }?;
        if n_attrs > 0 && (names.is_null() || weights.is_null()) {
            return Err(fail(FeStatus::NullPointer, "attribute arrays are null"));
        }
        let prompt = unsafe { opt_str(prompt, "prompt") }?;
        let mut attrs = Vec::with_capacity(n_attrs);
        for i in 0..n_attrs {
            let name = unsafe { str_arg(*names.add(i), "attribute name") }?;
            attrs.push(AttrWeight {
                attribute: name.to_string(),
                weight: unsafe { *weights.add(i) },
            });
        }
        let n: usize = e.model.latent_shape().iter().product();
        let buf = unsafe { out_buf(out, out_len, n) }?;
        let req = EditRequest {
            attrs,
            t_edit,
            solver: unsafe { solver(solver_name) }?,
            ..EditRequest::default()
        };
        let x0 = e.noise(&[seed]).map_err(engine_err)?;
        let o = e.edit(&x0, prompt, &req).map_err(engine_err)?;
        write(buf, &o.image);
        if !relative_error.is_null() {
            unsafe { *relative_error = o.relative_edit_error };
        }
        Ok(())
    })
}
