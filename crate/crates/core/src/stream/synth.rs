use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: Vec<f64>,
}

struct Template {
    base: Vec<f64>,
    gratings: Vec<Grating>,
}

impl Template {
    fn random(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let base = (0..channels).map(|_| rng.gen_range(0.35..0.65)).collect();
        let gratings = (0..2)
            .map(|_| Grating {
                fx: f64::from(rng.gen_range(-3i32..=3)),
                fy: f64::from(rng.gen_range(1i32..=3)),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: (0..channels).map(|_| rng.gen_range(-0.25..0.25)).collect(),
            })
            .collect();
        Self { base, gratings }
    }

    fn pixel(&self, y: usize, x: usize, c: usize, h: usize, w: usize) -> f64 {
        let mut v = self.base[c];
        for g in &self.gratings {
            let arg = std::f64::consts::TAU * (g.fx * x as f64 / w as f64 + g.fy * y as f64 / h as f64) + g.phase;
            v += g.amp[c] * arg.sin();
        }
        v
    }
}

/// Class `c` is a seeded colour/frequency template of two sinusoidal gratings; each instance
/// adds i.i.d. Gaussian pixel noise, then clips to `[0, 1]` and quantises to bytes.
pub fn synth_dataset(cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Template> = (0..cfg.classes).map(|_| Template::random(&mut rng, cfg.channels)).collect();
    let shape = [cfg.height, cfg.width, cfg.channels];
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("finite noise"));
    let mut make = |per_class: usize| {
        let mut pixels = Vec::with_capacity(cfg.classes * per_class * cfg.height * cfg.width * cfg.channels);
        let mut labels = Vec::with_capacity(cfg.classes * per_class);
        for (label, t) in templates.iter().enumerate() {
            for _ in 0..per_class {
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        for c in 0..cfg.channels {
                            let n = noise.map_or(0.0, |d| d.sample(&mut rng));
                            let v = (t.pixel(y, x, c, cfg.height, cfg.width) + n).clamp(0.0, 1.0);
                            pixels.push((v * 255.0).round() as u8);
                        }
                    }
                }
                labels.push(label);
            }
        }
        ImageSet::new(shape, pixels, labels).expect("consistent sizes")
    };
    let train = make(cfg.train_per_class);
    let test = make(cfg.test_per_class);
    Dataset { num_classes: cfg.classes, train, test }
}
