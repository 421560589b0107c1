//! Grow a model one level and watch the output move from the upsampled coarse
//! reconstruction to the new full-resolution path as alpha goes from 0 to 1.

use dpa::{blend_input, Autoencoder, BlendState, ModelConfig, Tensor};

fn main() -> dpa::Result<()> {
    let cfg = ModelConfig {
        target_resolution: 16,
        ..ModelConfig::default()
    };
    let mut model = Autoencoder::<f32>::new(cfg, 0)?;
    let x = Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i * 37 % 256) as f32) / 255.0).collect())?;
    let coarse = model.reconstruct(&dpa::loss::down(&x)?, BlendState::full(0))?;
    model.grow()?;
    println!("grown to level {}, {} parameters", model.level(), model.num_parameters());
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let out = model.reconstruct(&x, BlendState::new(1, alpha)?)?;
        let from_coarse = out.max_abs_diff(&dpa::ops::upsample_nearest2(&coarse)).unwrap_or(f32::NAN);
        let input_blend = blend_input(&x, alpha)?;
        println!(
            "alpha {alpha:.2}: max |out - upsampled coarse| {from_coarse:.4}, blended input mean {:.4}",
            input_blend.sum() / input_blend.numel() as f32
        );
    }
    Ok(())
}
