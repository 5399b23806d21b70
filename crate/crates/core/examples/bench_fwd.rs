use mproto_core::network::{BackboneConfig, MProtoNet, ModelVariant};
use mproto_core::objectives::LossWeights;
use mproto_core::volume_io::{augment, generate_case, AugmentationConfig, Grade};
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig::toy();
    let model = MProtoNet::new(ModelVariant::mprotonet_c(), &cfg, 0).unwrap();
    let case = generate_case("bench", 1, Grade::HGG);

    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let _ = model.feature_forward(&case.volume).unwrap();
    }
    println!("backbone fwd:     {:.4} s", t0.elapsed().as_secs_f64() / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = model.forward_trace(&case.volume).unwrap();
    }
    println!("full fwd trace:   {:.4} s", t0.elapsed().as_secs_f64() / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = model
            .sample_gradients(&case.volume, 0, &[10, 10], &LossWeights::default(), 8)
            .unwrap();
    }
    println!("train step:       {:.4} s", t0.elapsed().as_secs_f64() / n as f64);

    let t0 = Instant::now();
    for i in 0..n {
        let mut c = AugmentationConfig::defaults(i as u64);
        c.rotation_scaling.probability = 1.0; // worst case
        let _ = augment(&case, &c).unwrap();
    }
    println!("augment (w/ rot): {:.4} s", t0.elapsed().as_secs_f64() / n as f64);

    let t0 = Instant::now();
    for i in 0..n {
        let _ = generate_case("g", i as u64, Grade::LGG);
    }
    println!("generate_case:    {:.4} s", t0.elapsed().as_secs_f64() / n as f64);
}
