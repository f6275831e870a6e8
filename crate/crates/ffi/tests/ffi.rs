use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use beliefunc::pipeline::{self, DistillMode, ExperimentConfig, Run};
use beliefunc_ffi::*;

fn last_error() -> String {
    let p = bu_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn uncertainty_helpers_match_closed_forms() {
    let mut h = 0.0;
    let p = [0.5, 0.25, 0.25];
    assert_eq!(
        unsafe { bu_categorical_entropy(p.as_ptr(), 3, &mut h) },
        BuStatus::Ok
    );
    assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);

    // flat Dirichlet over two classes: E[H] = ψ(3) − ψ(2) = 1/2
    let mut u = BuUncertainty {
        total: 0.0,
        data: 0.0,
        knowledge: 0.0,
    };
    let a = [1.0, 1.0];
    assert_eq!(
        unsafe { bu_dirichlet_uncertainty(a.as_ptr(), 2, &mut u) },
        BuStatus::Ok
    );
    assert!((u.total - 2f64.ln()).abs() < 1e-12);
    assert!((u.data - 0.5).abs() < 1e-10);
    assert!((u.knowledge - (2f64.ln() - 0.5)).abs() < 1e-10);
}

#[test]
fn bad_arguments_give_codes_and_messages() {
    let mut h = 0.0;
    assert_eq!(
        unsafe { bu_categorical_entropy(ptr::null(), 3, &mut h) },
        BuStatus::NullPointer
    );
    assert!(last_error().contains("probs"));
    let bad = [0.7, 0.7];
    assert_eq!(
        unsafe { bu_categorical_entropy(bad.as_ptr(), 2, &mut h) },
        BuStatus::InvalidArgument
    );
    let neg = [1.0, -1.0];
    let mut u = BuUncertainty {
        total: 0.0,
        data: 0.0,
        knowledge: 0.0,
    };
    assert_eq!(
        unsafe { bu_dirichlet_uncertainty(neg.as_ptr(), 2, &mut u) },
        BuStatus::InvalidArgument
    );

    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut t = ptr::null_mut();
    let s = unsafe { bu_tracker_open(ptr::null(), out.as_ptr(), BuTrackerKind::End2, &mut t) };
    assert_eq!(s, BuStatus::MissingArtifact);
    assert!(t.is_null());
    assert!(last_error().contains("world.json"), "{}", last_error());

    // freeing null is a no-op; queries on null are harmless
    unsafe {
        bu_tracker_free(ptr::null_mut());
        bu_session_free(ptr::null_mut());
        assert_eq!(bu_tracker_num_slots(ptr::null()), 0);
    }
    assert!(!unsafe { CStr::from_ptr(bu_version()) }
        .to_bytes()
        .is_empty());
}

fn trained_run(dir: &Path) -> Run {
    let cfg = ExperimentConfig::from_json(
        r#"{"corpus": {"train": 40, "valid": 8, "test": 8},
            "train": {"max_epochs": 2, "patience": 2},
            "ensemble": {"members": 2}}"#,
    )
    .unwrap();
    let run = Run::new(cfg, Some(5), Some(dir.to_path_buf())).unwrap();
    pipeline::gen_world(&run).unwrap();
    pipeline::gen_corpus(&run).unwrap();
    pipeline::train_ensemble(&run).unwrap();
    pipeline::distill(&run, DistillMode::End2).unwrap();
    run
}

#[test]
fn sessions_track_text_turns() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let out = CString::new(run.dir().to_str().unwrap()).unwrap();

    for (kind, dirichlet) in [
        (BuTrackerKind::End2, true),
        (BuTrackerKind::Ensemble, false),
    ] {
        let mut t = ptr::null_mut();
        assert_eq!(
            unsafe { bu_tracker_open(ptr::null(), out.as_ptr(), kind, &mut t) },
            BuStatus::Ok,
            "{}",
            last_error()
        );
        let n = unsafe { bu_tracker_num_slots(t) };
        assert!(n > 0);

        let mut needed = 0;
        let mut tiny = [0 as std::ffi::c_char; 2];
        let s = unsafe { bu_tracker_slot_name(t, 0, tiny.as_mut_ptr(), tiny.len(), &mut needed) };
        assert_eq!(s, BuStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(
            unsafe { bu_tracker_slot_name(t, 0, buf.as_mut_ptr(), needed, ptr::null_mut()) },
            BuStatus::Ok
        );
        let name = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert!(name.contains('.'), "{name}");
        assert_eq!(
            unsafe { bu_tracker_slot_name(t, n, buf.as_mut_ptr(), needed, ptr::null_mut()) },
            BuStatus::InvalidArgument
        );

        let mut s = ptr::null_mut();
        assert_eq!(unsafe { bu_session_new(t, &mut s) }, BuStatus::Ok);
        let blank = BuSlotBelief {
            value: 0,
            confidence: 0.0,
            total: 0.0,
            knowledge: 0.0,
        };
        let mut beliefs = vec![blank; n];
        let user = CString::new("i need a place to stay").unwrap();
        let sys = CString::new("how can i help").unwrap();
        for (i, system) in [ptr::null(), sys.as_ptr()].into_iter().enumerate() {
            let st =
                unsafe { bu_session_step(t, s, system, user.as_ptr(), beliefs.as_mut_ptr(), n) };
            assert_eq!(st, BuStatus::Ok, "{}", last_error());
            assert_eq!(unsafe { bu_session_turns(s) }, i + 1);
        }
        for b in &beliefs {
            assert!(b.confidence > 0.0 && b.confidence <= 1.0);
            assert!(b.total >= 0.0);
            assert_eq!(b.knowledge.is_nan(), !dirichlet);
            if dirichlet {
                assert!(b.knowledge >= -1e-9 && b.knowledge <= b.total + 1e-9);
            }
        }
        // a short output buffer is rejected without consuming the turn
        let st = unsafe {
            bu_session_step(
                t,
                s,
                ptr::null(),
                user.as_ptr(),
                beliefs.as_mut_ptr(),
                n - 1,
            )
        };
        assert_eq!(st, BuStatus::InvalidArgument);
        assert_eq!(unsafe { bu_session_turns(s) }, 2);
        assert_eq!(
            unsafe { bu_session_step(t, s, ptr::null(), ptr::null(), beliefs.as_mut_ptr(), n) },
            BuStatus::NullPointer
        );

        // resetting replays identically
        let mut again = vec![blank; n];
        unsafe { bu_session_reset(s) };
        assert_eq!(unsafe { bu_session_turns(s) }, 0);
        let mut first = vec![blank; n];
        unsafe {
            bu_session_step(t, s, ptr::null(), user.as_ptr(), first.as_mut_ptr(), n);
            bu_session_reset(s);
            bu_session_step(t, s, ptr::null(), user.as_ptr(), again.as_mut_ptr(), n);
        }
        assert_eq!(
            first.iter().map(|b| b.value).collect::<Vec<_>>(),
            again.iter().map(|b| b.value).collect::<Vec<_>>()
        );
        assert_eq!(
            first
                .iter()
                .map(|b| b.confidence.to_bits())
                .collect::<Vec<_>>(),
            again
                .iter()
                .map(|b| b.confidence.to_bits())
                .collect::<Vec<_>>()
        );
        unsafe {
            bu_session_free(s);
            bu_tracker_free(t);
        }
    }

    // the categorical student was never trained
    let mut t = ptr::null_mut();
    assert_eq!(
        unsafe { bu_tracker_open(ptr::null(), out.as_ptr(), BuTrackerKind::End, &mut t) },
        BuStatus::MissingArtifact
    );
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/beliefunc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "bu_tracker_open",
        "bu_session_step",
        "bu_last_error_message",
        "BU_STATUS_MISSING_ARTIFACT",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ double h; double p[2] = {{0.5, 0.5}};\n\
             return bu_categorical_entropy(p, 2, &h) == BU_STATUS_OK ? 0 : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipped the syntax check");
        return;
    };
    assert!(status.success());
}
