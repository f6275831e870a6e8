//! C ABI over the belief tracker and the uncertainty maths.
//!
//! Every fallible call returns a [`BuStatus`]; on failure the message is
//! available from [`bu_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use beliefunc::dialoguesim::{tracker_input, World};
use beliefunc::pipeline::{self, ExperimentConfig, LoadedTracker, Run, TrackerChoice};
use beliefunc::tracker::GoalBelief;
use beliefunc::uncmath::{dirichlet_decompose, entropy, Categorical, DirichletParams};
use beliefunc::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad distribution, dimension, index or configuration.
    InvalidArgument = 3,
    MissingArtifact = 4,
    /// Checksum, fingerprint or format problem in a stored artifact.
    CorruptArtifact = 5,
    ModeUnsupported = 6,
    Io = 7,
    BufferTooSmall = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
    Other = 10,
}

/// Which trained tracker a handle wraps.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuTrackerKind {
    Single = 0,
    Ensemble = 1,
    End = 2,
    End2 = 3,
}

/// Per-slot belief after a turn. `knowledge` is NaN unless the tracker
/// outputs Dirichlet parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuSlotBelief {
    pub value: u32,
    pub confidence: f64,
    pub total: f64,
    pub knowledge: f64,
}

/// Total / data / knowledge uncertainty in nats.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuUncertainty {
    pub total: f64,
    pub data: f64,
    pub knowledge: f64,
}

/// A world plus a loaded tracker.
pub struct BuTracker {
    world: World,
    tracker: LoadedTracker,
}

/// Turn history of one dialogue; borrows nothing, but must only be used
/// with the tracker that created it.
pub struct BuSession {
    history: Vec<Vec<u32>>,
    slots: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BuStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::MissingArtifact { .. } => BuStatus::MissingArtifact,
            Error::Checksum(_) | Error::Fingerprint { .. } | Error::Format(_) | Error::Json(_) => {
                BuStatus::CorruptArtifact
            }
            Error::ModeUnsupported(_) => BuStatus::ModeUnsupported,
            Error::Io { .. } => BuStatus::Io,
            Error::InvalidDistribution(_)
            | Error::SupportMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::Domain(_)
            | Error::IndexOutOfRange { .. }
            | Error::Config(_)
            | Error::UnknownToken(_) => BuStatus::InvalidArgument,
            _ => BuStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BuStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BuStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BuStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Failure(BuStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

unsafe fn doubles<'a>(p: *const f64, k: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, k))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Shannon entropy (nats) of a probability vector.
///
/// # Safety
/// `probs` must point to `k` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bu_categorical_entropy(
    probs: *const f64,
    k: usize,
    out: *mut f64,
) -> BuStatus {
    guard(|| {
        let p = Categorical::new(doubles(probs, k, "probs")?.to_vec())?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = entropy(&p);
        Ok(())
    })
}

/// Uncertainty decomposition of a Dirichlet with concentrations `alphas`.
///
/// # Safety
/// `alphas` must point to `k` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bu_dirichlet_uncertainty(
    alphas: *const f64,
    k: usize,
    out: *mut BuUncertainty,
) -> BuStatus {
    guard(|| {
        let d = DirichletParams::new(doubles(alphas, k, "alphas")?.to_vec())?;
        if out.is_null() {
            return Err(null("out"));
        }
        let u = dirichlet_decompose(&d);
        *out = BuUncertainty {
            total: u.total,
            data: u.data,
            knowledge: u.knowledge,
        };
        Ok(())
    })
}

/// Opens the tracker trained in a run directory. `config_path` may be null,
/// in which case the `config.json` recorded in `out_dir` (or the defaults)
/// applies; a null `out_dir` means the config's `out`.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bu_tracker_open(
    config_path: *const c_char,
    out_dir: *const c_char,
    kind: BuTrackerKind,
    out: *mut *mut BuTracker,
) -> BuStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = opt_str(out_dir, "out_dir")?.map(PathBuf::from);
        let recorded = dir
            .as_ref()
            .map(|d| d.join("config.json"))
            .filter(|p| p.exists());
        let config = match (opt_str(config_path, "config_path")?, recorded) {
            (Some(p), _) => ExperimentConfig::load(p.as_ref())?,
            (None, Some(p)) => ExperimentConfig::load(&p)?,
            (None, None) => ExperimentConfig::default(),
        };
        let run = Run::new(config, None, dir)?;
        let world = pipeline::load_world(&run)?;
        let choice = match kind {
            BuTrackerKind::Single => TrackerChoice::Single,
            BuTrackerKind::Ensemble => TrackerChoice::Ensemble,
            BuTrackerKind::End => TrackerChoice::End,
            BuTrackerKind::End2 => TrackerChoice::End2,
        };
        let tracker = pipeline::load_tracker(&run, &world, choice)?;
        *out = Box::into_raw(Box::new(BuTracker { world, tracker }));
        Ok(())
    })
}

/// # Safety
/// `tracker` must be null or come from [`bu_tracker_open`], freed once.
#[no_mangle]
pub unsafe extern "C" fn bu_tracker_free(tracker: *mut BuTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Number of informable slots (the length of every belief array).
///
/// # Safety
/// `tracker` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn bu_tracker_num_slots(tracker: *const BuTracker) -> usize {
    tracker.as_ref().map_or(0, |t| t.world.ontology.num_slots())
}

/// Writes the name of `slot` (`domain.slot`) into `buf`, NUL
/// included. `needed` (optional) receives the required size.
///
/// # Safety
/// `buf` must hold `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn bu_tracker_slot_name(
    tracker: *const BuTracker,
    slot: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> BuStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        let refs = t.world.ontology.slot_refs();
        let r = *refs.get(slot).ok_or(Error::IndexOutOfRange {
            index: slot,
            len: refs.len(),
        })?;
        let name = t.world.ontology.slot_name(r);
        let bytes = name.as_bytes();
        if !needed.is_null() {
            *needed = bytes.len() + 1;
        }
        if buf.is_null() || len < bytes.len() + 1 {
            return Err(Failure(
                BuStatus::BufferTooSmall,
                format!("slot name needs {} bytes", bytes.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// Starts an empty dialogue for `tracker`.
///
/// # Safety
/// `tracker` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bu_session_new(
    tracker: *const BuTracker,
    out: *mut *mut BuSession,
) -> BuStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(BuSession {
            history: Vec::new(),
            slots: t.world.ontology.num_slots(),
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must be null or come from [`bu_session_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn bu_session_free(session: *mut BuSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Feeds one exchange (the system utterance that preceded the user, which
/// may be empty, then the user utterance) and writes the belief for every
/// slot into `out[0..n]`. Words are whitespace-separated; unknown words map
/// to the unknown token.
///
/// # Safety
/// `tracker` and `session` must be live and paired; `out` must hold `n`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn bu_session_step(
    tracker: *const BuTracker,
    session: *mut BuSession,
    system: *const c_char,
    user: *const c_char,
    out: *mut BuSlotBelief,
    n: usize,
) -> BuStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let system = opt_str(system, "system")?.unwrap_or("");
        let user = req_str(user, "user")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n < s.slots || s.slots != t.world.ontology.num_slots() {
            return Err(Error::DimensionMismatch {
                expected: t.world.ontology.num_slots(),
                got: n,
            }
            .into());
        }
        let words = |text: &str| -> Vec<u32> {
            text.split_whitespace()
                .map(|w| t.world.ontology.word(&w.to_lowercase()))
                .collect()
        };
        s.history.push(tracker_input(&words(system), &words(user)));
        // replaying the history keeps the session free of borrows; dialogues
        // are short enough that this costs little
        let outputs = t.tracker.as_ref().track(std::slice::from_ref(&s.history));
        let last = match outputs {
            Ok(mut o) => o.pop().and_then(|mut d| d.pop()).expect("one turn tracked"),
            Err(e) => {
                s.history.pop();
                return Err(e.into());
            }
        };
        let out = slice::from_raw_parts_mut(out, n);
        for (dst, g) in out.iter_mut().zip(&last.goal) {
            let p = g.predictive();
            *dst = BuSlotBelief {
                value: p.argmax() as u32,
                confidence: p.max_prob(),
                total: entropy(&p),
                knowledge: match g {
                    GoalBelief::Dirichlet(d) => dirichlet_decompose(d).knowledge,
                    GoalBelief::Categorical(_) => f64::NAN,
                },
            };
        }
        Ok(())
    })
}

/// Number of turns fed so far.
///
/// # Safety
/// `session` must be live or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn bu_session_turns(session: *const BuSession) -> usize {
    session.as_ref().map_or(0, |s| s.history.len())
}

/// Forgets every turn.
///
/// # Safety
/// `session` must be live or null (no-op).
#[no_mangle]
pub unsafe extern "C" fn bu_session_reset(session: *mut BuSession) {
    if let Some(s) = session.as_mut() {
        s.history.clear();
    }
}
