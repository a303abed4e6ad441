use std::time::Instant;

use lang2color::nn::{gemm, MatMut, MatRef};

fn main() {
    for &(m, k, n) in &[(128usize, 1152usize, 4096usize), (32, 288, 65536), (625, 128, 4096)] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            gemm(1.0, MatRef::row_major(&a, m, k), MatRef::row_major(&b, k, n), 0.0, MatMut::row_major(&mut c, m, n));
        }
        let secs = t.elapsed().as_secs_f64() / reps as f64;
        println!("{m}x{k}x{n}: {:.1} GFLOP/s", 2.0 * (m * k * n) as f64 / secs / 1e9);
    }
}
