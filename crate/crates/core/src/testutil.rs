//! Small synthetic fixtures shared by unit tests.

use crate::data::synth::{generate_slide, SynthConfig};
use crate::data::tiling::{render_group, tile_slide, GroupPixels, TilingConfig};

pub fn tiny_groups(n_slides: usize) -> Vec<GroupPixels> {
    let synth = SynthConfig {
        slides: n_slides,
        low_size: 512,
        classes: 3,
        ratio: 4,
        class_fractions: Vec::new(),
        seed: 9,
    };
    let tiling = TilingConfig {
        context_window: 256,
        context_step: 256,
        target_window: 64,
        target_step: 64,
        output_size: 32,
        min_tissue_fraction: 0.1,
    };
    (0..n_slides)
        .flat_map(|i| {
            let slide = generate_slide(&synth, i).unwrap();
            tile_slide(&slide, &tiling)
                .unwrap()
                .iter()
                .map(|g| render_group(&slide, g).unwrap())
                .collect::<Vec<_>>()
        })
        .collect()
}
