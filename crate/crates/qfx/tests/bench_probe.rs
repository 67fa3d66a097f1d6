use qfx::backbone::{build_resnet_lite, ForwardMode};
use qfx::fewshot::Protocol;
use qfx::io::{generate_synthetic, SyntheticDatasetSpec};
use qfx::ptq::{evaluate_standardized, run_ptq, StandardizeMode};
use qfx::tensor::QuantConfig;
use qfx::training::{train, LinearHead, TrainConfig, TrainMode};
use qfx::QFormat;
use std::time::Instant;

fn experiment(noise: f64, epochs: usize, lr: f64) {
    let seed = 1u64;
    let base = generate_synthetic(&SyntheticDatasetSpec {
        classes: 8, samples_per_class: 48, size: 32, noise, seed, class_offset: 0,
    }).unwrap();
    let novel = generate_synthetic(&SyntheticDatasetSpec {
        classes: 10, samples_per_class: 24, size: 32, noise, seed, class_offset: 8,
    }).unwrap();
    let protocol = Protocol { way: 5, shot: 5, queries: 15, episodes: 500 };
    let arch = build_resnet_lite(1, 16, seed);
    let smode = StandardizeMode::CenterNormalize;

    // Float training (shared by float eval and all PTQ rows).
    let t0 = Instant::now();
    let cfg = TrainConfig::new(epochs, 32, lr, seed);
    let float_out = train(&arch, LinearHead::init(8, arch.feature_dim, seed), &base, &cfg).unwrap();
    let final_loss = float_out.history.last().unwrap().loss;
    println!("float train: {:?}, final loss {:.4}", t0.elapsed(), final_loss);

    let (fstat, _) = evaluate_standardized(&float_out.model, &base, &novel,
        ForwardMode::Float, &protocol, seed, smode).unwrap();
    println!("float eval: {fstat}");

    for fmt_s in ["Q3.3", "Q5.5", "Q6.6", "Q16.16"] {
        let fmt: QFormat = fmt_s.parse().unwrap();
        let qc = QuantConfig::uniform(fmt);
        let t = Instant::now();
        let ptq = run_ptq(&float_out.model.weights, &arch, &qc, &base, &novel, &protocol, seed, smode).unwrap();
        println!("PTQ  {fmt_s:>7}: {} ({:?})", ptq.accuracy, t.elapsed());
    }
    for fmt_s in ["Q3.3", "Q5.5", "Q16.16"] {
        let fmt: QFormat = fmt_s.parse().unwrap();
        let qc = QuantConfig::uniform(fmt);
        let mut qcfg = cfg.clone();
        qcfg.mode = TrainMode::Qat(qc);
        let t = Instant::now();
        let qat_out = train(&arch, LinearHead::init(8, arch.feature_dim, seed), &base, &qcfg).unwrap();
        let (qstat, _) = evaluate_standardized(&qat_out.model, &base, &novel,
            ForwardMode::Quantized(qc), &protocol, seed, smode).unwrap();
        println!("QAT  {fmt_s:>7}: {qstat} (train+eval {:?}, final loss {:.4})",
            t.elapsed(), qat_out.history.last().unwrap().loss);
    }
}

#[test]
#[ignore]
fn probe_experiment() {
    let noise: f64 = std::env::var("PROBE_NOISE").map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let epochs: usize = std::env::var("PROBE_EPOCHS").map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f64 = std::env::var("PROBE_LR").map(|s| s.parse().unwrap()).unwrap_or(0.05);
    println!("=== noise {noise}, epochs {epochs}, lr {lr} ===");
    experiment(noise, epochs, lr);
}
