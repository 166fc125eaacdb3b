use std::path::Path;

// Link against a system OpenBLAS when one can be found; otherwise the crate
// falls back to the pure-Rust matrixmultiply kernels at runtime.
fn main() {
    println!("cargo::rustc-check-cfg=cfg(has_openblas)");

    if std::env::var("MTFUSE_NO_BLAS").is_ok() {
        println!("cargo:rerun-if-env-changed=MTFUSE_NO_BLAS");
        return;
    }
    println!("cargo:rerun-if-env-changed=MTFUSE_NO_BLAS");

    let candidates = [
        "/usr/lib/x86_64-linux-gnu/openblas-pthread",
        "/usr/lib/x86_64-linux-gnu/openblas-serial",
        "/usr/lib/x86_64-linux-gnu/openblas-openmp",
        "/usr/lib/x86_64-linux-gnu",
        "/usr/lib/aarch64-linux-gnu",
        "/usr/lib64",
        "/usr/lib",
        "/usr/local/lib",
        "/opt/homebrew/opt/openblas/lib",
    ];
    for dir in candidates {
        let so = Path::new(dir).join("libopenblas.so");
        let dylib = Path::new(dir).join("libopenblas.dylib");
        if so.exists() || dylib.exists() {
            println!("cargo:rustc-link-search=native={dir}");
            println!("cargo:rustc-link-lib=dylib=openblas");
            println!("cargo:rustc-cfg=has_openblas");
            return;
        }
    }
}
