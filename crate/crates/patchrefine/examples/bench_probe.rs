use ndarray::Array4;
use patchrefine::network::{BranchMode, NetworkConfig, PatchRefineNet};
use std::time::Instant;

fn main() {
    let cfg = NetworkConfig {
        input_side: 128, patch_size: 16, width_scale: 0.25, seed: 1,
        ..NetworkConfig::default()
    };
    let net = PatchRefineNet::<f32>::new(cfg).unwrap();
    let x = Array4::from_shape_fn((4, 1, 128, 128), |(n, _, i, j)| ((n + i + j) % 7) as f32 / 7.0);
    let mut best = f64::INFINITY;
    for _ in 0..6 {
        let t = Instant::now();
        let (tape, g, l) = net.forward_train_batch(x.clone(), BranchMode::Both).unwrap();
        let gs = Array4::from_elem((4, 1, 128, 128), 1e-4f32);
        std::hint::black_box(tape.backward(net.params(), vec![(g.unwrap(), gs.clone()), (l.unwrap(), gs)]));
        best = best.min(t.elapsed().as_secs_f64());
    }
    println!("fwd+bwd best of 6: {:.0} ms/batch", best * 1000.0);
}
