use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use learnroute::data::{generate_synthetic, write_fvecs};
use learnroute::eval::{evaluate_queries, Routing};
use learnroute::graph::{build_nsw, BuildParams};
use learnroute::model::{ModelConfig, QueryMode, RoutingModel};
use learnroute::search::SearchConfig;
use learnroute_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lr_last_error()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    graph: CString,
    base: CString,
    model: CString,
    ds: learnroute::data::VectorDataset,
    g: learnroute::graph::SimilarityGraph,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(600, 8, 4, 3).unwrap();
    let g = build_nsw(
        ds.base.view(),
        BuildParams {
            max_degree: 8,
            ef_construction: 40,
            seed: 0,
        },
    )
    .unwrap();
    let gp = dir.path().join("graph.bin");
    let bp = dir.path().join("base.fvecs");
    let mp = dir.path().join("model.bin");
    g.save(&gp).unwrap();
    write_fvecs(&bp, ds.base.view()).unwrap();
    let cfg = ModelConfig {
        conv_blocks: 1,
        conv_filters: 8,
        ffn_hidden: 16,
        ..ModelConfig::desk(8, 8, QueryMode::Identity)
    };
    RoutingModel::init(cfg, 1).unwrap().save(&mp).unwrap();
    Fixture {
        graph: cstr(&gp),
        base: cstr(&bp),
        model: cstr(&mp),
        _dir: dir,
        ds,
        g,
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(lr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn search_matches_library() {
    let f = fixture();
    let mut idx = ptr::null_mut();
    assert_eq!(unsafe { lr_index_open(f.graph.as_ptr(), f.base.as_ptr(), &mut idx) }, LrStatus::Ok);
    let (mut n, mut d) = (0usize, 0usize);
    assert_eq!(unsafe { lr_index_shape(idx, &mut n, &mut d) }, LrStatus::Ok);
    assert_eq!((n, d), (480, 8));

    let cfg = SearchConfig::original(40, 8);
    let expected = evaluate_queries(&f.g, f.ds.base.view(), f.ds.test_queries.view(), &cfg, Routing::Original).unwrap();
    for (i, q) in f.ds.test_queries.outer_iter().enumerate() {
        let mut ids = [0u32; 5];
        let mut count = 0usize;
        let mut used = 0.0f64;
        let s = unsafe {
            lr_index_search(
                idx,
                q.as_ptr(),
                8,
                40,
                0,
                LrMode::Original,
                ids.as_mut_ptr(),
                ids.len(),
                &mut count,
                &mut used,
            )
        };
        assert_eq!(s, LrStatus::Ok);
        assert_eq!(count, 5);
        assert_eq!(&ids[..], &expected[i].ranked[..5]);
        assert!(used <= 40.0);
    }
    unsafe { lr_index_free(idx) };
}

#[test]
fn learned_search_needs_a_model() {
    let f = fixture();
    let mut idx = ptr::null_mut();
    assert_eq!(unsafe { lr_index_open(f.graph.as_ptr(), f.base.as_ptr(), &mut idx) }, LrStatus::Ok);
    let q = f.ds.test_queries.row(0).to_vec();
    let search = |idx: *const LrIndex, count: &mut usize| {
        let mut ids = [0u32; 4];
        unsafe {
            lr_index_search(
                idx,
                q.as_ptr(),
                8,
                32,
                4,
                LrMode::Learned,
                ids.as_mut_ptr(),
                4,
                count,
                ptr::null_mut(),
            )
        }
    };
    let mut count = 0usize;
    assert_eq!(search(idx, &mut count), LrStatus::InvalidArgument);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { lr_index_attach_model(idx, f.model.as_ptr()) }, LrStatus::Ok);
    assert_eq!(search(idx, &mut count), LrStatus::Ok);
    assert_eq!(count, 4);
    unsafe { lr_index_free(idx) };
}

#[test]
fn errors_map_to_status_codes() {
    let f = fixture();
    let mut idx = ptr::null_mut();
    let missing = CString::new("/nonexistent/graph.bin").unwrap();
    assert_eq!(unsafe { lr_index_open(missing.as_ptr(), f.base.as_ptr(), &mut idx) }, LrStatus::Io);
    assert!(idx.is_null());
    assert!(!last_error().is_empty());
    // base file passed as graph: bad magic
    assert_eq!(unsafe { lr_index_open(f.base.as_ptr(), f.base.as_ptr(), &mut idx) }, LrStatus::Format);
    assert_eq!(unsafe { lr_index_open(ptr::null(), f.base.as_ptr(), &mut idx) }, LrStatus::NullPointer);
    assert_eq!(unsafe { lr_index_open(f.graph.as_ptr(), f.base.as_ptr(), ptr::null_mut()) }, LrStatus::NullPointer);

    assert_eq!(unsafe { lr_index_open(f.graph.as_ptr(), f.base.as_ptr(), &mut idx) }, LrStatus::Ok);
    let q = [0f32; 3];
    let mut count = 0usize;
    let mut ids = [0u32; 1];
    let s = unsafe {
        lr_index_search(idx, q.as_ptr(), 3, 10, 0, LrMode::Original, ids.as_mut_ptr(), 1, &mut count, ptr::null_mut())
    };
    assert_eq!(s, LrStatus::Dimension);
    let q = [0f32; 8];
    let s = unsafe {
        lr_index_search(idx, q.as_ptr(), 8, 4, 5, LrMode::Original, ids.as_mut_ptr(), 1, &mut count, ptr::null_mut())
    };
    assert_eq!(s, LrStatus::InvalidArgument, "k above the budget");
    unsafe {
        lr_index_free(idx);
        lr_index_free(ptr::null_mut());
    }
}

#[test]
fn routing_budget_through_the_abi() {
    let mut out = 0usize;
    for (dcs, k, full, d, mode, want) in [
        (128, 8, 128, 128, LrMode::Learned, 120),
        (128, 16, 128, 32, LrMode::Learned, 320),
        (256, 32, 128, 32, LrMode::Learned, 768),
        (512, 0, 128, 128, LrMode::Original, 512),
    ] {
        assert_eq!(unsafe { lr_routing_budget(dcs, k, full, d, mode, &mut out) }, LrStatus::Ok);
        assert_eq!(out, want);
    }
    assert_eq!(
        unsafe { lr_routing_budget(8, 0, 128, 64, LrMode::Original, &mut out) },
        LrStatus::InvalidArgument
    );
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"learnroute.h\"\nint main(void) { size_t n; return lr_routing_budget(128, 8, 128, 128, LR_MODE_LEARNED, &n) == LR_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the generated header"),
        Err(e) => eprintln!("no C compiler available ({e}); header syntax not checked"),
    }
}
