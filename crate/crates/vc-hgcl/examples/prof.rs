use vc_hgcl::data::{generate_dataset, SynthSpec};
use vc_hgcl::param::harvest;
use vc_hgcl::pipeline::*;
use std::time::Instant;

fn main() {
    let spec = SynthSpec { n_train: 64, n_eval: 0, ..SynthSpec::default() };
    let config = ModelConfig { share_fusion: true, ..ModelConfig::default() };
    let ds = generate_dataset(&spec).unwrap();
    let mut model = Model::new(config).unwrap();

    // warmup
    for inst in ds.train.iter().take(8) {
        let _ = model.forward(&inst.qa, 1).unwrap();
    }

    let t0 = Instant::now();
    let mut nodes = 0usize;
    for inst in &ds.train {
        let pass = model.forward(&inst.qa, 1).unwrap();
        nodes = pass.tape.node_count();
    }
    let fwd = t0.elapsed();

    let t1 = Instant::now();
    for inst in &ds.train {
        model.params_mut().zero_grads();
        let pass = model.forward(&inst.qa, 1).unwrap();
        let mut tape = pass.tape;
        tape.backward(pass.total).unwrap();
        harvest(&tape, &pass.binding, model.params_mut());
    }
    let both = t1.elapsed();

    println!("nodes/forward: {nodes}");
    println!("forward only:  {:?}/inst", fwd / 64);
    println!("fwd+bwd+harvest: {:?}/inst", both / 64);
    println!("backward approx: {:?}/inst", (both - fwd) / 64);

    // lean predict path
    let t2 = Instant::now();
    for inst in &ds.train {
        let _ = model.predict(&inst.qa).unwrap();
    }
    println!("predict: {:?}/inst", t2.elapsed() / 64);
}
