use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{precision, Tensor};

const CHANNELS: usize = 3;
const WAVES: usize = 3;

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Per-channel colour offset plus a few plane waves.
struct Template {
    offset: [f64; CHANNELS],
    waves: Vec<[Wave; CHANNELS]>,
}

impl Template {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let max_f = (size / 4).max(1) as i64;
        let wave = |rng: &mut ChaCha8Rng| loop {
            let fx = rng.random_range(-max_f..=max_f);
            let fy = rng.random_range(0..=max_f);
            if fx != 0 || fy != 0 {
                return Wave {
                    fx: fx as f64,
                    fy: fy as f64,
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(0.08..0.2),
                };
            }
        };
        let offset = [0; CHANNELS].map(|_| rng.random_range(-0.2..0.2));
        let waves = (0..WAVES).map(|_| [wave(rng), wave(rng), wave(rng)]).collect();
        Self { offset, waves }
    }

    fn render(&self, size: usize, out: &mut Vec<f64>) {
        for ch in 0..CHANNELS {
            for y in 0..size {
                for x in 0..size {
                    let mut v = 0.5 + self.offset[ch];
                    for w in &self.waves {
                        let w = &w[ch];
                        let arg = 2.0 * PI * (w.fx * x as f64 + w.fy * y as f64) / size as f64 + w.phase;
                        v += w.amp * arg.sin();
                    }
                    out.push(v);
                }
            }
        }
    }
}

/// A balanced `num_classes`-way task of 3-channel `image_size`² images.
///
/// Each class is a fixed random template (colour offset plus plane waves)
/// with i.i.d. Gaussian pixel noise, clamped to `[0, 1]`. Samples are
/// ordered class-major. The result depends only on the arguments.
pub fn synth_task(num_classes: usize, samples_per_class: usize, image_size: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || image_size == 0 {
        return Err(Error::Data("synthetic task sizes must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Data(format!("invalid noise sigma {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut img = Vec::with_capacity(CHANNELS * image_size * image_size);
            Template::random(&mut rng, image_size).render(image_size, &mut img);
            img
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated above");
    let p = precision();
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * templates[0].len());
    let mut labels = Vec::with_capacity(n);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &v in t {
                let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(p.round((v + eps).clamp(0.0, 1.0)));
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, CHANNELS, image_size, image_size], data)?;
    Dataset::new(format!("synth-{seed}"), 0, num_classes, images, labels)
}
