//! Compare relative-perceptual-L1 with pixel L1 on a few distortions of one texture.
//!
//! A texture shifted by one pixel is far away in pixel space but close in
//! feature space; a texture with a different spectrum is the other way round.

use dpa::data::{generate_synthetic, SynthSpec};
use dpa::features::{FeatureExtractor, FixedRandomSpec};
use dpa::loss::relative_perceptual_l1;
use dpa::Tensor;

fn pixel_l1(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
}

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 64,
        n_test_normal: 0,
        n_test_anomalous: 2,
        n_val_pool: 0,
        ..SynthSpec::default()
    })?;
    let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default())?;
    let stage = 2;
    let stats = ex.compute_stats(ds.samples[..64].iter().map(|s| &s.image), stage, "train normals")?;

    let x = &ds.samples[0].image;
    let res = x.hw().0;
    let shifted = Tensor::new(
        x.shape().to_vec(),
        (0..res * res).map(|i| x.data()[(i / res) * res + (i % res + 1) % res]).collect(),
    )?;
    let noisy = x.map(|v| (v + 0.05 * ((v * 9973.0).sin())).clamp(0.0, 1.0));
    let flat = Tensor::full(x.shape(), x.data().iter().sum::<f32>() / x.numel() as f32);
    let candidates = [
        ("itself", x),
        ("shifted by one pixel", &shifted),
        ("mild pixel noise", &noisy),
        ("flat grey", &flat),
        ("another normal texture", &ds.samples[1].image),
        ("patch-shift anomaly", &ds.samples[64].image),
        ("global-shift anomaly", &ds.samples[65].image),
    ];
    println!("{:<24} {:>12} {:>10}", "reconstruction", "perceptual", "pixel L1");
    for (name, xr) in candidates {
        let p = relative_perceptual_l1(x, xr, &ex, &stats, stage)?.value();
        println!("{name:<24} {p:>12.4} {:>10.4}", pixel_l1(x, xr));
    }
    Ok(())
}
