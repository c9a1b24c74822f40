//! The netlib backend links `-lcblas`, but Debian/Ubuntu ship no standalone
//! `libcblas.so` (reference CBLAS lives in GSL's `libgslcblas`). None of the
//! routines used here go through CBLAS, so satisfying the linker with GSL's
//! copy is safe. On systems that do provide `libcblas`, the extra search path
//! is harmless.

use std::path::Path;

fn main() {
    let out_dir = std::env::var("OUT_DIR").unwrap();
    let target = Path::new(&out_dir).join("libcblas.so");
    for candidate in [
        "/usr/lib/x86_64-linux-gnu/libcblas.so",
        "/usr/lib/x86_64-linux-gnu/libgslcblas.so",
        "/usr/lib/libgslcblas.so",
    ] {
        if Path::new(candidate).exists() {
            if candidate.ends_with("libcblas.so") {
                return; // real CBLAS present, nothing to do
            }
            let _ = std::fs::remove_file(&target);
            #[cfg(unix)]
            std::os::unix::fs::symlink(candidate, &target).expect("symlink libcblas");
            println!("cargo:rustc-link-search=native={out_dir}");
            return;
        }
    }
}
