//! Regenerates the committed golden files (run explicitly with --ignored).
//! The model is trained deterministically, so reruns on the same build
//! reproduce identical artifacts.

use std::path::Path;

use rdcl::checkpoint::save_checkpoint;
use rdcl::codec;
use rdcl::context::ContextKind;
use rdcl::image_io;
use rdcl::model::{CodecModel, ModelConfig};
use rdcl::synthetic::synth_image;
use rdcl::training::{desk_schedule, train_full, ImageDataset};

#[test]
#[ignore]
fn regenerate_golden_files() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    std::fs::create_dir_all(&dir).unwrap();

    let mut config = ModelConfig::toy("baseline_conv", ContextKind::Checkerboard, 8, 16, 8);
    config.context_width = 8;
    config.init_seed = 2026;
    let mut model = CodecModel::new(config).unwrap();
    let images: Vec<_> = (0..48).map(|i| synth_image(31_337 + i, 72, 72)).collect();
    let ds = ImageDataset::from_images(&images);
    let mut schedule = desk_schedule();
    schedule.phases.truncate(2);
    schedule.phases[0].epochs = 2;
    schedule.phases[1].epochs = 1;
    let report = train_full(&mut model, &schedule, &ds, 777).unwrap();
    assert!(!report.diverged);
    save_checkpoint(&model, None, &dir.join("golden.rdck")).unwrap();

    // non-multiple-of-64 dims exercise the padding path
    let input = synth_image(424_242, 52, 76);
    image_io::save_image_png(&dir.join("golden_input.png"), &input).unwrap();
    let res = codec::compress_to_stream(&model, &input, 2.5).unwrap();
    std::fs::write(dir.join("golden.rdcl"), res.stream.to_bytes()).unwrap();
    let decoded = codec::decompress_from_stream(&model, &res.stream).unwrap();
    image_io::save_image_png(&dir.join("golden_output.png"), &decoded).unwrap();
    println!(
        "golden: {} params, stream {} bytes, image {}x{}",
        model.total_params(),
        res.stream.total_bytes(),
        res.stream.header.width,
        res.stream.header.height
    );
}
