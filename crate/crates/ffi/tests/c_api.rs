use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cldf::decoder::PixelDecoder;
use cldf_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = cldf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(cldf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tensor_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = cpath(&dir.path().join("t.cldf"));
    let shape = [2usize, 3, 2];
    let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(
            cldf_tensor_new_f32(CldfLayout::Hwc, shape.as_ptr(), 3, data.as_ptr(), data.len(), &mut t),
            CldfStatus::Ok
        );
        assert_eq!(cldf_tensor_write(t, file.as_ptr()), CldfStatus::Ok);
        cldf_tensor_free(t);

        let mut back = ptr::null_mut();
        assert_eq!(cldf_tensor_read(file.as_ptr(), &mut back), CldfStatus::Ok);
        let mut info = std::mem::zeroed::<CldfTensorInfo>();
        assert_eq!(cldf_tensor_info(back, &mut info), CldfStatus::Ok);
        assert_eq!(info.layout, CldfLayout::Hwc);
        assert_eq!(info.dtype, CldfDtype::F32);
        assert_eq!((info.rank, info.shape, info.len), (3, [2, 3, 2, 0], 12));
        let (mut p, mut n) = (ptr::null(), 0usize);
        assert_eq!(cldf_tensor_data_f32(back, &mut p, &mut n), CldfStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(p, n), data.as_slice());
        let (mut q, mut m) = (ptr::null(), 0usize);
        assert_eq!(cldf_tensor_data_u8(back, &mut q, &mut m), CldfStatus::InvalidArgument);
        cldf_tensor_free(back);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(cldf_tensor_read(ptr::null(), &mut t), CldfStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = cpath(Path::new("/nonexistent/x.cldf"));
        assert_eq!(cldf_tensor_read(missing.as_ptr(), &mut t), CldfStatus::Io);
        assert!(last_error().contains("/nonexistent/x.cldf"));

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.cldf");
        std::fs::write(&junk, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        assert_eq!(cldf_tensor_read(cpath(&junk).as_ptr(), &mut t), CldfStatus::Format);
        assert!(last_error().contains("magic"));

        let shape = [2usize, 2];
        let data = [0.0f32; 3];
        assert_eq!(
            cldf_tensor_new_f32(CldfLayout::Hw, shape.as_ptr(), 2, data.as_ptr(), 3, &mut t),
            CldfStatus::Format
        );
        assert_eq!(
            cldf_tensor_new_f32(CldfLayout::Hwc, shape.as_ptr(), 2, data.as_ptr(), 3, &mut t),
            CldfStatus::InvalidArgument
        );
        cldf_tensor_free(ptr::null_mut());
        cldf_decoder_free(ptr::null_mut());
    }
}

/// Direct O(N^2) double sum of the supervised contrastive loss.
fn supcon_oracle(z: &[f32], dim: usize, labels: &[u8], tau: f64) -> f64 {
    let n = labels.len();
    let s = |i: usize, j: usize| -> f64 {
        (0..dim).map(|k| z[i * dim + k] as f64 * z[j * dim + k] as f64).sum::<f64>() / tau
    };
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| s(i, a).exp()).sum();
        total += -pos.iter().map(|&p| (s(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
    }
    total
}

#[test]
fn supcon_matches_direct_sum() {
    let z: Vec<f32> = [0.6f32, 0.8, 1.0, 0.0, -0.28, 0.96, 0.0, -1.0, 0.8, 0.6]
        .chunks(2)
        .flat_map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        })
        .collect();
    let labels = [1u8, 1, 0, 0, 1];
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; z.len()];
    unsafe {
        assert_eq!(
            cldf_supcon_loss(z.as_ptr(), 5, 2, labels.as_ptr(), 0.5, &mut loss, grad.as_mut_ptr()),
            CldfStatus::Ok
        );
    }
    assert!((loss - supcon_oracle(&z, 2, &labels, 0.5)).abs() < 1e-9);
    assert!(grad.iter().any(|&g| g != 0.0));

    let bad = [3.0f32, 0.0, 0.0, 1.0];
    unsafe {
        assert_eq!(
            cldf_supcon_loss(bad.as_ptr(), 2, 2, labels.as_ptr(), 0.5, &mut loss, ptr::null_mut()),
            CldfStatus::Compute
        );
    }
}

#[test]
fn dice_and_iou_from_counts() {
    let pred = [1u8, 1, 0, 0, 1, 0];
    let gt = [1u8, 0, 0, 1, 1, 0];
    let (mut d, mut j) = (0.0, 0.0);
    unsafe {
        assert_eq!(cldf_dice(pred.as_ptr(), gt.as_ptr(), 2, 3, &mut d), CldfStatus::Ok);
        assert_eq!(cldf_iou(pred.as_ptr(), gt.as_ptr(), 2, 3, &mut j), CldfStatus::Ok);
        assert_eq!(cldf_dice(pred.as_ptr(), ptr::null(), 2, 3, &mut d), CldfStatus::NullPointer);
    }
    // |P∩G| = 2, |P| = |G| = 3, |P∪G| = 4
    assert_eq!(d, 4.0 / 6.0);
    assert_eq!(j, 0.5);
}

#[test]
fn kmeans_separates_two_groups() {
    let pts: Vec<f32> = [0.0f32, 0.1, 0.2, 10.0, 10.1, 10.2].to_vec();
    let mut assign = [9u32; 6];
    let mut obj = -1.0;
    let params = cldf_kmeans_default_params();
    assert_eq!(params.k, 2);
    unsafe {
        assert_eq!(
            cldf_kmeans(pts.as_ptr(), 6, 1, &params, 7, assign.as_mut_ptr(), &mut obj),
            CldfStatus::Ok
        );
    }
    assert_eq!(assign[0], assign[1]);
    assert_eq!(assign[1], assign[2]);
    assert_eq!(assign[3], assign[4]);
    assert_ne!(assign[0], assign[3]);
    assert!((obj - 0.04).abs() < 1e-5, "objective {obj}");
    unsafe {
        assert_eq!(
            cldf_kmeans(pts.as_ptr(), 1, 6, ptr::null(), 7, assign.as_mut_ptr(), &mut obj),
            CldfStatus::Shape
        );
    }
}

#[test]
fn decoder_load_decode_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let net = PixelDecoder::new(&[3, 8, 4], 5).unwrap();
    net.save(dir.path(), serde_json::Value::Null).unwrap();
    let (h, w) = (4usize, 6usize);
    // left half bright, right half dark
    let feats: Vec<f32> = (0..h * w)
        .flat_map(|p| {
            let v = if p % w < w / 2 { 1.0 } else { -1.0 };
            [v, 0.5 * v, 0.2]
        })
        .collect();
    let seeds: Vec<u8> = (0..h * w).map(|p| if p % w == 0 { 1 } else if p % w == w - 1 { 2 } else { 0 }).collect();
    unsafe {
        let mut dec = ptr::null_mut();
        assert_eq!(cldf_decoder_load(cpath(dir.path()).as_ptr(), &mut dec), CldfStatus::Ok);
        let (mut din, mut dout) = (0, 0);
        assert_eq!(cldf_decoder_dims(dec, &mut din, &mut dout), CldfStatus::Ok);
        assert_eq!((din, dout), (3, 4));

        let mut f = ptr::null_mut();
        let fshape = [h, w, 3];
        assert_eq!(
            cldf_tensor_new_f32(CldfLayout::Hwc, fshape.as_ptr(), 3, feats.as_ptr(), feats.len(), &mut f),
            CldfStatus::Ok
        );
        let mut emb = ptr::null_mut();
        assert_eq!(cldf_decoder_decode(dec, f, &mut emb), CldfStatus::Ok);
        let mut info = std::mem::zeroed::<CldfTensorInfo>();
        cldf_tensor_info(emb, &mut info);
        assert_eq!(&info.shape[..3], &[h, w, 4]);

        let mut s = ptr::null_mut();
        let sshape = [h, w];
        assert_eq!(
            cldf_tensor_new_u8(CldfLayout::Hw, sshape.as_ptr(), 2, seeds.as_ptr(), seeds.len(), &mut s),
            CldfStatus::Ok
        );
        let mut mask = ptr::null_mut();
        assert_eq!(cldf_infer_mask(dec, f, s, ptr::null(), 1, &mut mask), CldfStatus::Ok);
        let (mut p, mut n) = (ptr::null(), 0usize);
        cldf_tensor_data_u8(mask, &mut p, &mut n);
        let m = std::slice::from_raw_parts(p, n);
        for (i, &v) in m.iter().enumerate() {
            assert_eq!(v, u8::from(i % w < w / 2), "pixel {i}");
        }

        // features with the wrong depth
        let mut g = ptr::null_mut();
        let gshape = [h, w, 1];
        cldf_tensor_new_f32(CldfLayout::Hwc, gshape.as_ptr(), 3, feats.as_ptr(), h * w, &mut g);
        let mut bad = ptr::null_mut();
        assert_eq!(cldf_decoder_decode(dec, g, &mut bad), CldfStatus::Shape);
        assert!(bad.is_null());

        for t in [f, emb, s, mask, g] {
            cldf_tensor_free(t);
        }
        cldf_decoder_free(dec);
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = target_dir().join("libcldf_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "cldf.h"

int main(void) {
    unsigned char pred[4] = {1, 1, 0, 0};
    unsigned char gt[4] = {1, 0, 0, 0};
    double d = 0.0;
    if (cldf_dice(pred, gt, 2, 2, &d) != CLDF_STATUS_OK) return 1;
    CldfTensor *t = NULL;
    if (cldf_tensor_read("/nonexistent.cldf", &t) != CLDF_STATUS_IO) return 2;
    if (cldf_last_error() == NULL) return 3;
    size_t shape[2] = {2, 2};
    float data[4] = {0.f, 1.f, 2.f, 3.f};
    if (cldf_tensor_new_f32(CLDF_LAYOUT_HW, shape, 2, data, 4, &t) != CLDF_STATUS_OK) return 4;
    CldfTensorInfo info;
    cldf_tensor_info(t, &info);
    cldf_tensor_free(t);
    printf("%s %.6f %zu\n", cldf_version(), d, info.len);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status);
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(text.trim(), format!("{} 0.666667 4", env!("CARGO_PKG_VERSION")));
}
