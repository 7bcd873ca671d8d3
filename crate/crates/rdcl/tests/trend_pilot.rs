//! Manual pilots for the desk-scale trend experiment (run with --ignored).

use rdcl::context::ContextKind;
use rdcl::model::{CodecModel, ModelConfig, Quantizer};
use rdcl::synthetic::synth_image;
use rdcl::training::{
    desk_schedule, train_full, ImageDataset, LambdaPolicy, Phase, PhaseSchedule,
};

fn quick_schedule(crop: usize, epochs: usize) -> PhaseSchedule {
    PhaseSchedule {
        phases: vec![Phase {
            lambda_policy: LambdaPolicy::UniformOverGrid,
            quantizer: Quantizer::Noise,
            epochs,
        }],
        batch_size: 8,
        crop,
        initial_lr: 2e-4,
        plateau_patience: 10,
        plateau_factor: 0.5,
        reset_lr_each_phase: true,
    }
}

fn run_one(label: &str, mut config: ModelConfig, ds: &ImageDataset, crop: usize) {
    let t0 = std::time::Instant::now();
    config.init_seed = 100;
    let mut model = CodecModel::new(config).unwrap();
    let report = train_full(&mut model, &quick_schedule(crop, 3), ds, 500).unwrap();
    println!(
        "{label}: params {} val={:.5} time={:.0}s",
        model.total_params(),
        report.final_val_loss,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn width_sweep_pilot() {
    let images: Vec<_> = (0..800).map(|i| synth_image(7_000 + i, 72, 72)).collect();
    let ds = ImageDataset::from_images(&images);
    let crop = 64;
    let mk = |kind: ContextKind, w: usize| {
        let mut c = ModelConfig::desk("baseline_conv", kind, 100).unwrap();
        c.context_width = w;
        c
    };
    run_one("charm w16", mk(ContextKind::Charm, 16), &ds, crop);
    run_one("scctx w13", mk(ContextKind::Scctx, 13), &ds, crop);
    run_one("scctx w16", mk(ContextKind::Scctx, 16), &ds, crop);
    run_one("scctx w24", mk(ContextKind::Scctx, 24), &ds, crop);
    run_one("hyperprior", mk(ContextKind::Hyperprior, 0), &ds, crop);
}

#[test]
#[ignore]
fn crop128_pilot() {
    let images: Vec<_> = (0..800).map(|i| synth_image(7_000 + i, 136, 136)).collect();
    let ds = ImageDataset::from_images(&images);
    let crop = 128;
    let mk = |kind: ContextKind, w: usize| {
        let mut c = ModelConfig::desk("baseline_conv", kind, 100).unwrap();
        c.context_width = w;
        c
    };
    run_one("charm w16 c128", mk(ContextKind::Charm, 16), &ds, crop);
    run_one("scctx w13 c128", mk(ContextKind::Scctx, 13), &ds, crop);
    run_one("hyperprior c128", mk(ContextKind::Hyperprior, 0), &ds, crop);
}

#[test]
#[ignore]
fn trend_pilot_single_seed() {
    let images: Vec<_> = (0..2000).map(|i| synth_image(7_000 + i, 72, 72)).collect();
    let ds = ImageDataset::from_images(&images);
    let schedule = desk_schedule();
    for kind in [ContextKind::Hyperprior, ContextKind::Charm, ContextKind::Scctx] {
        let t0 = std::time::Instant::now();
        let config = ModelConfig::desk("baseline_conv", kind, 100).unwrap();
        let mut model = CodecModel::new(config).unwrap();
        println!("{kind:?}: {} params, ctx width {}", model.total_params(), model.config.context_width);
        let report = train_full(&mut model, &schedule, &ds, 500).unwrap();
        println!(
            "{kind:?}: val={:.5} diverged={} time={:.1}s",
            report.final_val_loss,
            report.diverged,
            t0.elapsed().as_secs_f64()
        );
        for l in report.logs.iter() {
            println!(
                "  phase {} epoch {}: loss {:.4} bpp {:.4} psnr {:.2} val {:.4} lr {:.2e}",
                l.phase, l.epoch, l.mean_loss, l.mean_bpp, l.mean_psnr, l.val_loss, l.lr
            );
        }
    }
}
