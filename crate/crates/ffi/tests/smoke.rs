//! Exercises the C ABI end to end through the extern functions, and checks
//! that the generated header compiles as C when a C compiler is available.

use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use sfk_ffi::*;

#[test]
fn version_is_non_empty() {
    let v = unsafe { CStr::from_ptr(sfk_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn generate_train_graph_rollout_cycle() {
    unsafe {
        let mut ds: *mut SfkDataset = ptr::null_mut();
        let kos = [1usize];
        let status = sfk_dataset_generate(
            4, 0.4, 3, 40, 0.1, 1.0, 0.01, true, kos.as_ptr(), 1, 7, &mut ds,
        );
        assert_eq!(status, SfkStatus::Ok);
        assert_eq!(sfk_dataset_dim(ds), 4);
        assert_eq!(sfk_dataset_conditions(ds), 2);

        let mut truth = vec![0.0f64; 16];
        assert_eq!(sfk_dataset_graph(ds, truth.as_mut_ptr(), 16), SfkStatus::Ok);

        let cfg = CString::new("[train]\nsteps=40\nbatch=16\nngm_hidden=6\nscore_hidden=6\n").unwrap();
        let mut model: *mut SfkModel = ptr::null_mut();
        assert_eq!(sfk_train(ds, cfg.as_ptr(), 1, &mut model), SfkStatus::Ok);
        assert_eq!(sfk_model_dim(model), 4);

        let mut graph = vec![0.0f64; 16];
        assert_eq!(sfk_model_graph(model, graph.as_mut_ptr(), 16), SfkStatus::Ok);
        assert!(graph.iter().all(|v| v.is_finite()));

        // Too-small buffer is reported, not written past.
        assert_eq!(
            sfk_model_graph(model, graph.as_mut_ptr(), 3),
            SfkStatus::BufferTooSmall
        );

        let x0 = vec![0.1f64; 2 * 4];
        let mut x1 = vec![0.0f64; 2 * 4];
        assert_eq!(
            sfk_model_rollout(model, x0.as_ptr(), 2, 0, 1, 50, x1.as_mut_ptr()),
            SfkStatus::Ok
        );
        assert!(x1.iter().all(|v| v.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let ckpt = CString::new(dir.path().join("m.json").display().to_string()).unwrap();
        assert_eq!(sfk_model_save(model, ckpt.as_ptr()), SfkStatus::Ok);
        let mut model2: *mut SfkModel = ptr::null_mut();
        assert_eq!(sfk_model_load(ckpt.as_ptr(), &mut model2), SfkStatus::Ok);
        let mut graph2 = vec![0.0f64; 16];
        assert_eq!(sfk_model_graph(model2, graph2.as_mut_ptr(), 16), SfkStatus::Ok);
        assert_eq!(graph, graph2);

        let mut auroc = 0.0;
        let mut ap = 0.0;
        assert_eq!(
            sfk_structure_scores(graph.as_ptr(), truth.as_ptr(), 4, &mut auroc, &mut ap),
            SfkStatus::Ok
        );
        assert!((0.0..=1.0).contains(&auroc));

        sfk_model_free(model);
        sfk_model_free(model2);
        sfk_dataset_free(ds);
    }
}

#[test]
fn null_and_error_paths() {
    unsafe {
        let mut out: *mut SfkDataset = ptr::null_mut();
        assert_eq!(
            sfk_dataset_generate(3, 0.2, 3, 10, 0.1, 1.0, 0.01, true, ptr::null(), 2, 1, &mut out),
            SfkStatus::NullPointer
        );
        // Invalid sparsity surfaces as InvalidArgument with a message.
        assert_eq!(
            sfk_dataset_generate(3, 1.5, 3, 10, 0.1, 1.0, 0.01, true, ptr::null(), 0, 1, &mut out),
            SfkStatus::InvalidArgument
        );
        let msg = CStr::from_ptr(sfk_last_error_message()).to_str().unwrap();
        assert!(msg.contains("1.5"), "message was '{}'", msg);

        let bad = CString::new("/nonexistent/sfk/dataset").unwrap();
        let mut ds: *mut SfkDataset = ptr::null_mut();
        assert_eq!(sfk_dataset_read(bad.as_ptr(), &mut ds), SfkStatus::Io);

        sfk_dataset_free(ptr::null_mut());
        sfk_model_free(ptr::null_mut());
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sfk.h");
    assert!(std::path::Path::new(header).exists(), "header not generated");
    let probe = format!("#include \"{}\"\nint main(void) {{ return 0; }}\n", header);
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, probe).unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(
            out.status.success(),
            "header failed C compilation: {}",
            String::from_utf8_lossy(&out.stderr)
        ),
        Err(_) => eprintln!("cc not available; skipping header compile check"),
    }
}
