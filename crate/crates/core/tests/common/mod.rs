#![allow(dead_code)]

use std::path::Path;

use diffmark::codec::{CodecConfig, GeneratorArchitecture};
use diffmark::dataset::SyntheticSpec;
use diffmark::diffusion::{DiffusionConfig, UNetConfig};
use diffmark::pipeline::{ClassifierSettings, DatasetSource, ExperimentConfig};
use diffmark::ImageShape;

pub fn tiny_codec(c: usize) -> CodecConfig {
    CodecConfig {
        image_shape: ImageShape::new(3, 8, 8),
        num_watermarks: c,
        epochs: 2,
        anneal_epochs: 1,
        batch_size: 8,
        decoder_width: 2,
        generator: GeneratorArchitecture::new(4, vec![8], 2, &[2, 1]),
        eval_passes: 1,
        holdout_fraction: 0.25,
        blur_kernel: 3,
        blur_sigma: 1.0,
        ..CodecConfig::cifar()
    }
}

/// Seconds-scale end-to-end configuration on 8×8 images.
pub fn tiny_experiment(out: &Path) -> ExperimentConfig {
    let shape = ImageShape::new(3, 8, 8);
    let mut cfg = ExperimentConfig::preset("single-class", out).unwrap();
    cfg.dataset = DatasetSource::Synthetic {
        spec: SyntheticSpec {
            num_classes: 3,
            per_class: 12,
            size: 8,
            ..SyntheticSpec::default()
        },
        seed: 1,
    };
    cfg.codec = tiny_codec(2);
    cfg.diffusion = DiffusionConfig {
        unet: UNetConfig {
            image_shape: shape,
            channel_scale: 4,
            block_widths: vec![1, 2],
            res_blocks_per_level: 1,
        },
        num_steps: 4,
        epochs: 1,
        batch_size: 12,
        ..DiffusionConfig::desk(shape)
    };
    cfg.n_generate = 60;
    cfg.classifier = ClassifierSettings {
        base_width: 2,
        epochs: 3,
        batch_size: 12,
        ..ClassifierSettings::default()
    };
    cfg.analysis.fid_min_samples = Some(2);
    cfg
}
