use vc_hgcl::data::SynthSpec;
use vc_hgcl::harness::{run_training, run_ablation};
use vc_hgcl::pipeline::{Ablation, ModelConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("single");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(7);

    let spec = SynthSpec { n_train, n_eval: 200, seed, ..SynthSpec::default() };
    let ablation = match std::env::var("CAL_ABLATION").as_deref() {
        Ok("vco") => vc_hgcl::pipeline::Ablation::VCOOnly,
        Ok("mlp") => vc_hgcl::pipeline::Ablation::MLPContrastive,
        Ok("base") => vc_hgcl::pipeline::Ablation::Baseline,
        _ => vc_hgcl::pipeline::Ablation::GRNContrastive,
    };
    let nonlin = match std::env::var("CAL_NONLIN").as_deref() {
        Ok("relu") => vc_hgcl::nn::Nonlinearity::Relu,
        Ok("sigmoid") => vc_hgcl::nn::Nonlinearity::Sigmoid,
        _ => vc_hgcl::nn::Nonlinearity::Tanh,
    };
    let lambda: f64 = std::env::var("CAL_LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.7);
    let share = std::env::var("CAL_SHARE").is_ok();
    let tau: f64 = std::env::var("CAL_TAU").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let sigma = match std::env::var("CAL_SIGMA").ok().and_then(|v| v.parse::<f64>().ok()) {
        Some(v) => vc_hgcl::fusion::SigmaMode::Fixed(v),
        None => vc_hgcl::fusion::SigmaMode::AnchorStd,
    };
    let config = ModelConfig { seed, ablation, nonlinearity: nonlin, lambda, share_fusion: share, sigma_mode: sigma, tau, ..ModelConfig::default() };

    match mode {
        "single" => {
            let t0 = std::time::Instant::now();
            let (report, _) = run_training(&config, &spec, epochs, lr).unwrap();
            for e in &report.epochs {
                println!(
                    "epoch {:2}  loss {:>9}  acc {:.3}  sim+ {:>8}  sim- {:>8}  attn {:.3}",
                    e.epoch,
                    e.train_loss.map(|l| format!("{l:.4}")).unwrap_or_default(),
                    e.eval_accuracy,
                    e.sim_positive.map(|l| format!("{l:.4}")).unwrap_or_default(),
                    e.sim_negative.map(|l| format!("{l:.4}")).unwrap_or_default(),
                    e.signal_attention,
                );
            }
            println!("elapsed {:?}", t0.elapsed());
        }
        "ablate" => {
            let t0 = std::time::Instant::now();
            let table = run_ablation(&config, &spec, epochs, lr).unwrap();
            for (a, acc) in &table.rows {
                println!("{a:?}: {acc:.3}");
            }
            println!("grn-vco margin: {:.3}", table.accuracy(Ablation::GRNContrastive) - table.accuracy(Ablation::VCOOnly));
            println!("elapsed {:?}", t0.elapsed());
        }
        other => eprintln!("unknown mode {other}"),
    }
}
