//! The preprocessing chain on a color image: center crop, resize, grayscale,
//! histogram equalization.

use dpa::data::{preprocess, PreprocessSpec};
use dpa::Tensor;

fn describe(name: &str, t: &Tensor<f32>) {
    let (lo, hi) = t.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{name:<28} shape {:?} range [{lo:.3}, {hi:.3}]", t.shape());
}

fn main() -> dpa::Result<()> {
    let (h, w) = (48, 64);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(0.2 + 0.3 * ((x + c * 7) as f32 / w as f32) * ((y as f32) / h as f32));
            }
        }
    }
    let img = Tensor::new(vec![3, h, w], data)?;
    describe("input", &img);
    let steps = [
        ("resize to 32", PreprocessSpec { resolution: 32, grayscale: false, center_crop: false, hist_equalize: false }),
        ("crop + resize", PreprocessSpec { resolution: 32, grayscale: false, center_crop: true, hist_equalize: false }),
        ("crop + resize + gray", PreprocessSpec { resolution: 32, grayscale: true, center_crop: true, hist_equalize: false }),
        ("crop + resize + gray + eq", PreprocessSpec { resolution: 32, grayscale: true, center_crop: true, hist_equalize: true }),
    ];
    for (name, spec) in steps {
        describe(&format!("{name} [{}]", spec.label()), &preprocess(&img, &spec)?);
    }
    Ok(())
}
