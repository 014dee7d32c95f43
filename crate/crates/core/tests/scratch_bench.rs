use ndarray::Array2;
use std::time::Instant;

#[test]
#[ignore]
fn gemm_bench() {
    for (m, k, n) in [(16usize, 196usize, 4096usize), (64, 576, 256), (128, 1152, 1024), (256, 256, 256)] {
        let a = Array2::<f32>::from_elem((m, k), 1.01);
        let b = Array2::<f32>::from_elem((k, n), 0.99);
        let reps = (2_000_000_000 / (2 * m * k * n)).max(3);
        let t = Instant::now();
        let mut acc = 0.0f32;
        for _ in 0..reps {
            let c = a.dot(&b);
            acc += c[(0, 0)];
        }
        let secs = t.elapsed().as_secs_f64();
        let gflops = (2 * m * k * n * reps) as f64 / secs / 1e9;
        println!("m{m} k{k} n{n}: {gflops:.2} GFLOP/s ({acc})");
    }
}
