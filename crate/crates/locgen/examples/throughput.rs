//! Rough matmul throughput probe at training-relevant shapes.
//!
//! Run with `cargo run --release -p locgen --example throughput`. Used to
//! sanity-check that default batch sizes keep a full training run in the
//! minutes range on one core.

use std::time::Instant;

use locgen::autodiff::{Tape, TensorData};

fn bench_case(m: usize, k: usize, n: usize, iters: usize) {
    let a = TensorData::full(&[m, k], 0.5f32);
    let b = TensorData::full(&[k, n], 0.25f32);

    // Forward only.
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape: Tape<f32> = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let _ = tape.matmul(va, vb).unwrap();
    }
    let fwd = start.elapsed().as_secs_f64();
    let fwd_gflops = (2.0 * (m * k * n * iters) as f64) / fwd / 1e9;

    // Forward + backward (adds the two gradient gemms).
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape: Tape<f32> = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        let loss = tape.mean_all(c).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    let both = start.elapsed().as_secs_f64();
    let both_gflops = (6.0 * (m * k * n * iters) as f64) / both / 1e9;

    println!(
        "[{m:>5} x {k:>4} x {n:>4}] fwd {fwd_gflops:7.2} GFLOP/s | fwd+bwd {both_gflops:7.2} GFLOP/s"
    );
}

fn main() {
    // Shapes mirroring the training graph: (batch*seq) rows against
    // d_model-scale weights, plus the wide vocab projection.
    for &(m, k, n) in &[
        (2208usize, 64usize, 64usize),
        (2208, 64, 256),
        (2208, 256, 64),
        (2208, 64, 66),
        (512, 512, 512),
    ] {
        let iters = (200_000_000 / (m * k * n)).max(3);
        bench_case(m, k, n, iters);
    }
}
