use super::idx::IdxArray;
use super::{conflicting_bias, BiasRatio, BiasedDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const MNIST_SIDE: usize = 28;
const NUM_DIGITS: usize = 10;

/// Ten fully saturated colors at evenly spaced hues (36° apart), starting at red.
pub fn default_palette() -> [[f32; 3]; NUM_DIGITS] {
    let mut out = [[0.0; 3]; NUM_DIGITS];
    for (i, rgb) in out.iter_mut().enumerate() {
        *rgb = hue_to_rgb(i as f32 * 36.0);
    }
    out
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let hp = h / 60.0;
    let x = 1.0 - (hp % 2.0 - 1.0).abs();
    match hp as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Renders grayscale digits in the color of their bias attribute.
///
/// Each pixel becomes `(g/255)·palette[b]` in a 3×28×28 channel-major image.
/// Train splits make `⌈ρ·n_k⌉` samples of each class conflicting; test splits
/// make `⌊n_k/2⌋` conflicting.
pub fn build_colored_mnist(
    images: &IdxArray,
    labels: &IdxArray,
    ratio: f64,
    palette: &[[f32; 3]],
    split: Split,
    rng: &mut Rng,
) -> Result<BiasedDataset> {
    if palette.len() != NUM_DIGITS {
        return Err(Error::config(format!(
            "palette needs {NUM_DIGITS} colors, got {}",
            palette.len()
        )));
    }
    for i in 0..NUM_DIGITS {
        for j in (i + 1)..NUM_DIGITS {
            if palette[i] == palette[j] {
                return Err(Error::config(format!("palette colors {i} and {j} coincide")));
            }
        }
    }
    if images.dims != [images.len(), MNIST_SIDE, MNIST_SIDE] {
        return Err(Error::shape(format!(
            "expected images n×{MNIST_SIDE}×{MNIST_SIDE}, got {:?}",
            images.dims
        )));
    }
    if labels.dims.len() != 1 || labels.len() != images.len() {
        return Err(Error::shape(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= NUM_DIGITS) {
        return Err(Error::Format(format!("label {bad} outside 0..=9")));
    }

    let ratio = match split {
        Split::Train => {
            if !(ratio > 0.0 && ratio < 0.5) {
                return Err(Error::config(format!(
                    "bias ratio {ratio} must lie in (0, 0.5)"
                )));
            }
            BiasRatio::from_f64(ratio)?
        }
        Split::Test => BiasRatio::new(1, 2)?,
    };

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_DIGITS];
    for (i, &l) in labels.data.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut bias_of = vec![0usize; images.len()];
    for (k, members) in by_class.iter_mut().enumerate() {
        let n_conf = match split {
            Split::Train => ratio.conflicting_count(members.len()),
            Split::Test => members.len() / 2,
        };
        rng.shuffle(members);
        for (pos, &i) in members.iter().enumerate() {
            bias_of[i] = if pos < n_conf {
                conflicting_bias(k, NUM_DIGITS, rng.below(NUM_DIGITS - 1))
            } else {
                k
            };
        }
    }

    let plane = MNIST_SIDE * MNIST_SIDE;
    let samples = (0..images.len())
        .map(|i| {
            let label = labels.data[i] as usize;
            let bias = bias_of[i];
            let color = palette[bias];
            let gray = images.item(i);
            let mut x = vec![0.0f32; 3 * plane];
            for (c, &intensity) in color.iter().enumerate() {
                for (p, &g) in gray.iter().enumerate() {
                    x[c * plane + p] = f32::from(g) / 255.0 * intensity;
                }
            }
            Sample {
                x,
                label,
                bias,
                aligned: label == bias,
            }
        })
        .collect();

    Ok(BiasedDataset {
        samples,
        num_classes: NUM_DIGITS,
        num_biases: NUM_DIGITS,
        input_dim: 3 * plane,
        ratio,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_mnist(n: usize) -> (IdxArray, IdxArray) {
        let mut rng = Rng::new(0, 0);
        let mut img = Vec::with_capacity(n * 784);
        for _ in 0..n * 784 {
            img.push(if rng.uniform() < 0.2 { rng.below(256) as u8 } else { 0 });
        }
        let lab: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        (
            IdxArray {
                dims: vec![n, 28, 28],
                data: img,
            },
            IdxArray {
                dims: vec![n],
                data: lab,
            },
        )
    }

    #[test]
    fn palette_is_distinct() {
        let p = default_palette();
        assert_eq!(p[0], [1.0, 0.0, 0.0]);
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_ne!(p[i], p[j]);
            }
        }
    }

    #[test]
    fn train_split_counts_and_colors() {
        let (img, lab) = fake_mnist(2000);
        let ds = build_colored_mnist(&img, &lab, 0.05, &default_palette(), Split::Train, &mut Rng::new(1, 1))
            .unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.input_dim, 2352);
        for (k, (_, c)) in ds.counts_per_class().into_iter().enumerate() {
            assert_eq!(c, 10, "class {k}");
        }
        let palette = default_palette();
        for (i, s) in ds.samples.iter().enumerate().filter(|(_, s)| s.aligned) {
            let gray = img.item(i);
            let color = palette[s.label];
            for c in 0..3 {
                for p in 0..784 {
                    let v = s.x[c * 784 + p];
                    assert!((0.0..=1.0).contains(&v));
                    if color[c] == 0.0 || gray[p] == 0 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert!(v > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn test_split_is_half_conflicting() {
        let (img, lab) = fake_mnist(1001);
        let ds = build_colored_mnist(&img, &lab, 0.05, &default_palette(), Split::Test, &mut Rng::new(1, 2))
            .unwrap();
        for (a, c) in ds.counts_per_class() {
            assert!(a.abs_diff(c) <= 1);
        }
    }

    #[test]
    fn config_errors() {
        let (img, lab) = fake_mnist(20);
        let mut rng = Rng::new(0, 0);
        let pal = default_palette();
        assert!(build_colored_mnist(&img, &lab, 0.05, &pal[..9], Split::Train, &mut rng).is_err());
        let mut dup = pal;
        dup[3] = dup[4];
        assert!(build_colored_mnist(&img, &lab, 0.05, &dup, Split::Train, &mut rng).is_err());
        assert!(build_colored_mnist(&img, &lab, 0.0, &pal, Split::Train, &mut rng).is_err());
        assert!(build_colored_mnist(&img, &lab, 0.6, &pal, Split::Train, &mut rng).is_err());
    }
}
