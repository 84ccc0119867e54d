//! Rough conv throughput probe for sizing the training budgets.

use lprf_core::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use lprf_core::{DenseArray, Shape};
use std::time::Instant;

fn bench(label: &str, n: usize, c_in: usize, c_out: usize, hw: usize, dil: usize, iters: usize) {
    let x = DenseArray::<f32>::from_fn(Shape::d4(n, c_in, hw, hw), |i| (i % 97) as f32 * 0.01);
    let k = DenseArray::<f32>::from_fn(Shape::d4(c_out, c_in, 3, 3), |i| (i % 31) as f32 * 0.01);
    let g = ConvGeom::infer(x.shape(), k.shape(), 1, dil, dil).unwrap();
    let macs = (n * c_out * g.out_h * g.out_w * c_in * 9) as f64;

    let t0 = Instant::now();
    let mut out = None;
    for _ in 0..iters {
        out = Some(conv2d_forward(&x, &k, &g));
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;

    let gy = out.unwrap();
    let t1 = Instant::now();
    for _ in 0..iters {
        let _ = conv2d_backward(&x, &k, &g, &gy, true, true);
    }
    let bwd = t1.elapsed().as_secs_f64() / iters as f64;

    println!(
        "{label}: fwd {:.1} ms ({:.1} GMAC/s), bwd {:.1} ms ({:.1} GMAC/s)",
        fwd * 1e3,
        macs / fwd / 1e9,
        bwd * 1e3,
        2.0 * macs / bwd / 1e9
    );
}

fn main() {
    bench("pred 32->32 @256 d2", 1, 32, 32, 256, 2, 5);
    bench("pred 32->32 @256 d8", 1, 32, 32, 256, 8, 5);
    bench("pred 1->32 @256 d1", 1, 1, 32, 256, 1, 5);
    bench("ae 32->64 @32 s1-ish", 8, 32, 64, 32, 1, 20);
}
