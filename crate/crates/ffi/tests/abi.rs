use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use tyrion_ffi::*;

fn last_error() -> String {
    let p = tyr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn toy_config() -> *mut TyrConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tyr_config_default(true, &mut cfg) }, TYR_OK);
    cfg
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(tyr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_map_to_codes() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("setup = 2\nobjective = \"optsimmim\"\n").unwrap();
    assert_eq!(unsafe { tyr_config_parse(bad.as_ptr(), &mut cfg) }, TYR_OK);
    assert_eq!(unsafe { tyr_config_validate(cfg) }, TYR_ERR_CONFIG);
    assert!(last_error().contains("setup 2"));
    unsafe { tyr_config_free(cfg) };

    let junk = CString::new("nonsense = [").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tyr_config_parse(junk.as_ptr(), &mut cfg) }, TYR_ERR_CONFIG);
    assert!(cfg.is_null());
    assert_eq!(unsafe { tyr_config_parse(ptr::null(), &mut cfg) }, TYR_ERR_ARGUMENT);
    assert_eq!(unsafe { tyr_config_validate(ptr::null()) }, TYR_ERR_ARGUMENT);
    assert_eq!(unsafe { tyr_run_stage(ptr::null(), TYR_STAGE_SYNTH) }, TYR_ERR_ARGUMENT);
    let missing = CString::new("/nonexistent/run.toml").unwrap();
    assert_eq!(unsafe { tyr_config_load(missing.as_ptr(), &mut cfg) }, TYR_ERR_CONFIG);
    unsafe { tyr_config_free(ptr::null_mut()) };
}

#[test]
fn mde_of_shifted_front() {
    // Vertical lines at column 2 and 5 of a 6x8 grid, 10 m pixels.
    let (rows, cols) = (6, 8);
    let mut gt = vec![0u8; rows * cols];
    let mut pred = vec![0u8; rows * cols];
    for r in 0..rows {
        gt[r * cols + 2] = 1;
        pred[r * cols + 5] = 255;
    }
    let mut m = 0.0;
    assert_eq!(unsafe { tyr_mde(gt.as_ptr(), pred.as_ptr(), rows, cols, 10.0, &mut m) }, TYR_OK);
    assert_eq!(m, 30.0);
    let empty = vec![0u8; rows * cols];
    assert_eq!(unsafe { tyr_mde(gt.as_ptr(), empty.as_ptr(), rows, cols, 10.0, &mut m) }, TYR_NO_FRONT);
    assert!(m.is_nan());
    assert_eq!(unsafe { tyr_mde(empty.as_ptr(), pred.as_ptr(), rows, cols, 10.0, &mut m) }, TYR_ERR_DATA);
}

#[test]
fn identical_members_have_zero_uncertainty() {
    let cfg = toy_config();
    let (mut one, mut three) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(tyr_ensemble_random(cfg, 1, 7, &mut one), TYR_OK);
        assert_eq!(tyr_ensemble_size(one), 1);
        assert_eq!(tyr_ensemble_random(cfg, 0, 7, &mut three), TYR_ERR_ARGUMENT);
    }
    let (rows, cols) = (80, 96);
    let sar: Vec<u16> = (0..rows * cols).map(|i| ((i * 7919) % 65536) as u16).collect();
    let bbox = [0usize, rows - 1, 0, cols - 1];
    let mut zones = vec![9u8; rows * cols];
    let mut front = vec![9u8; rows * cols];
    let mut unc = vec![-1.0; 4 * rows * cols];
    let code = unsafe {
        tyr_infer(one, sar.as_ptr(), rows, cols, bbox.as_ptr(), 20.0, true, true, zones.as_mut_ptr(), front.as_mut_ptr(), unc.as_mut_ptr())
    };
    assert_eq!(code, TYR_OK, "{}", last_error());
    assert!(zones.iter().all(|&z| z < 4));
    assert!(front.iter().all(|&f| f <= 1));
    assert!(unc.iter().all(|&u| u == 0.0));
    let bad = [0usize, rows, 0, cols - 1];
    let code = unsafe {
        tyr_infer(one, sar.as_ptr(), rows, cols, bad.as_ptr(), 20.0, false, false, zones.as_mut_ptr(), front.as_mut_ptr(), ptr::null_mut())
    };
    assert_ne!(code, TYR_OK);
    let small = [0usize, 39, 0, 47];
    let code = unsafe {
        tyr_infer(one, sar.as_ptr(), 40, 48, small.as_ptr(), 20.0, false, false, zones.as_mut_ptr(), front.as_mut_ptr(), ptr::null_mut())
    };
    assert_eq!(code, TYR_ERR_CONFIG);
    assert!(last_error().contains("smaller than the model input"));
    unsafe {
        tyr_ensemble_free(one);
        tyr_config_free(cfg);
    }
}

#[test]
fn stages_run_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "setup = 1\nseed = 5\n[paths]\nout = {:?}\nfinetune_data = {:?}\n[synth]\nglaciers = 1\nscenes_per_glacier = 3\nsize = 64\n[model]\ninput_size = 64\ninner_size = 32\nwindow = 4\npatch_embed = 2\nmlp_ratio = 2\ndecoder_channels = [32, 16, 16, 8, 8]\nnorm_groups = 4\nstages = [{{ depth = 1, dim = 8, heads = 1 }}, {{ depth = 1, dim = 16, heads = 2 }}, {{ depth = 1, dim = 32, heads = 2 }}, {{ depth = 1, dim = 32, heads = 4 }}]\n[finetune]\nsteps = 1\nbatch_size = 2\n",
        dir.path(),
        dir.path().join("data"),
    );
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(tyr_config_parse(text.as_ptr(), &mut cfg), TYR_OK, "{}", last_error());
        assert_eq!(tyr_run_stage(cfg, TYR_STAGE_SYNTH), TYR_OK, "{}", last_error());
        assert_eq!(tyr_run_stage(cfg, TYR_STAGE_PRETRAIN), TYR_ERR_CONFIG);
        assert_eq!(tyr_run_stage(cfg, TYR_STAGE_FINETUNE), TYR_OK, "{}", last_error());
        assert_eq!(tyr_run_stage(cfg, 42), TYR_ERR_ARGUMENT);
    }
    let ckpt = dir.path().join("finetune").join("best.ckpt");
    assert!(ckpt.exists());
    let paths = [CString::new(ckpt.to_str().unwrap()).unwrap(), CString::new(ckpt.to_str().unwrap()).unwrap()];
    let ptrs: Vec<_> = paths.iter().map(|p| p.as_ptr()).collect();
    let mut ens = ptr::null_mut();
    unsafe {
        assert_eq!(tyr_ensemble_load(cfg, ptrs.as_ptr(), 2, &mut ens), TYR_OK, "{}", last_error());
        assert_eq!(tyr_ensemble_size(ens), 2);
        tyr_ensemble_free(ens);
        let missing = CString::new("/nonexistent.ckpt").unwrap();
        let p = [missing.as_ptr()];
        assert_eq!(tyr_ensemble_load(cfg, p.as_ptr(), 1, &mut ens), TYR_ERR_DATA);
        tyr_config_free(cfg);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("tyrion.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["tyr_infer", "tyr_mde", "tyr_ensemble_load", "tyr_last_error", "TYR_NO_FRONT", "typedef struct TyrEnsemble TyrEnsemble"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"tyrion.h\"\nint main(void) { TyrConfig *c = 0; int32_t r = tyr_config_default(true, &c); tyr_config_free(c); return r == TYR_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping C syntax check: {cc} unavailable ({e})"),
    }
}
