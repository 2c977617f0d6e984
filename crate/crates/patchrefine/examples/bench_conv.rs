use ndarray::{Array1, Array2, Array4};
use patchrefine::nn::ops;
use std::time::Instant;

fn main() {
    let xa = Array4::from_elem((4, 16, 128, 128), 0.3f32);
    let w = Array4::from_elem((8, 16, 3, 3), 0.01f32);
    let b = Array1::from_elem(8, 0.0f32);
    for _ in 0..2 {
        let t = Instant::now();
        for _ in 0..5 { std::hint::black_box(ops::conv2d_fwd(&xa.view(), &w.view(), Some(&b.view()), 1, 1)); }
        println!("conv 16->8 @128 batch4 fwd: {:?}/rep", t.elapsed() / 5);
    }
    // Patch-shaped equivalent: 256 samples of 16x16.
    let xp = Array4::from_elem((256, 16, 16, 16), 0.3f32);
    let t = Instant::now();
    for _ in 0..5 { std::hint::black_box(ops::conv2d_fwd(&xp.view(), &w.view(), Some(&b.view()), 1, 1)); }
    println!("conv 16->8 @16x256 fwd: {:?}/rep", t.elapsed() / 5);

    // Raw gemm comparison at the same shape.
    let a = Array2::from_elem((65536, 144), 0.3f32);
    let bm = Array2::from_elem((144, 8), 0.01f32);
    let mut c = Array2::zeros((65536, 8));
    let t = Instant::now();
    for _ in 0..5 { ndarray::linalg::general_mat_mul(1.0f32, &a.view(), &bm.view(), 0.0, &mut c); }
    println!("gemm (65536x144)x(144x8): {:?}/rep", t.elapsed() / 5);

    let a2 = Array2::from_elem((8, 144), 0.01f32);
    let b2 = Array2::from_elem((144, 65536), 0.3f32);
    let mut c2 = Array2::zeros((8, 65536));
    let t = Instant::now();
    for _ in 0..5 { ndarray::linalg::general_mat_mul(1.0f32, &a2.view(), &b2.view(), 0.0, &mut c2); }
    println!("gemm (8x144)x(144x65536): {:?}/rep", t.elapsed() / 5);

    let a3 = Array2::from_elem((65536, 8), 0.3f32);
    let mut c3 = Array2::zeros((65536, 144));
    let t = Instant::now();
    for _ in 0..5 { ndarray::linalg::general_mat_mul(1.0f32, &a3.view(), &a2.view(), 0.0, &mut c3); }
    println!("gemm (65536x8)x(8x144): {:?}/rep", t.elapsed() / 5);
}
