use mproto_core::network::nn::{Conv3d, GradSink, InstanceNorm3d, MaxPool3d};
use mproto_core::rng::{rng_for, Stream};
use ndarray::Array4;
use rand::Rng;
use std::time::Instant;

fn time<F: FnMut()>(label: &str, mut f: F) {
    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n {
        f();
    }
    println!("{label:28} {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}

fn main() {
    let mut rng = rng_for(0, Stream::Init);
    let x = Array4::from_shape_fn((4, 128, 128, 96), |_| rng.random_range(-1.0f32..1.0));
    let stem = Conv3d::new("stem", &mut rng, 4, 4, 3, 2, false);
    time("stem conv fwd", || {
        let _ = stem.forward(&x);
    });
    let (y, cache) = stem.forward_cached(&x);
    let grad = y.clone();
    time("stem conv bwd (dw only)", || {
        let mut sink = GradSink::default();
        let _ = stem.backward(&grad, &cache, false, &mut sink);
    });
    let norm = InstanceNorm3d::new("n", 4);
    time("stem norm fwd", || {
        let _ = norm.forward(&y);
    });
    time("maxpool fwd", || {
        let _ = MaxPool3d::forward(&y);
    });
    let pooled = MaxPool3d::forward(&y); // 4 x 32 x 32 x 24

    let c1 = Conv3d::new("s0c1", &mut rng, 4, 8, 3, 1, false);
    time("stage0 conv1 fwd (4->8)", || {
        let _ = c1.forward(&pooled);
    });
    let (y1, cache1) = c1.forward_cached(&pooled);
    let g1 = y1.clone();
    time("stage0 conv1 bwd", || {
        let mut sink = GradSink::default();
        let _ = c1.backward(&g1, &cache1, true, &mut sink);
    });
    let c2 = Conv3d::new("s0c2", &mut rng, 8, 8, 3, 1, false);
    time("stage0 conv2 fwd (8->8)", || {
        let _ = c2.forward(&y1);
    });
    let c3 = Conv3d::new("s1c1", &mut rng, 8, 16, 3, 2, false);
    time("stage1 conv1 fwd (8->16 s2)", || {
        let _ = c3.forward(&y1);
    });
}
