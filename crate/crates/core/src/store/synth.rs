//! Synthetic embedding datasets with controllable zero-shot difficulty.
//!
//! Class prototypes are drawn uniformly on the unit sphere with a minimum
//! pairwise angle. Label mode uses the prototypes as class texts and draws
//! images as `normalize(prototype + noise)`. Caption mode gives every pair a
//! shared instance vector, so an image is closest to its own caption unless
//! another caption of a nearby concept in the same batch happens to be closer.
//!
//! All random draws are made from unit-scale distributions and rescaled
//! afterwards, so for a fixed seed the draws do not depend on the noise
//! level. In label mode without degradation, a sample that is misclassified
//! at one noise level therefore stays misclassified at every larger level.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{EmbeddingDataset, Mode, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};

const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub d: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation of the image noise.
    pub intra_class_noise: f64,
    /// Minimum pairwise angle between class prototypes, in radians.
    pub inter_class_min_angle: f64,
    pub seed: u64,
    pub mode: Mode,
    pub tau: f32,
    /// Class `c` scales its image noise by `exp(spread * u_c)`, `u_c ~ U[-1, 1]`.
    pub class_noise_spread: f64,
    /// Fraction of images that are degraded: their noise is multiplied by
    /// `degraded_noise` and they carry a shared marker direction of norm
    /// `degraded_marker` (a stand-in for blur or compression artifacts).
    pub degraded_fraction: f64,
    pub degraded_noise: f64,
    pub degraded_marker: f64,
    /// Caption mode: per-coordinate scale of the instance vector shared by an
    /// image and its caption.
    pub instance_scale: f64,
    /// Caption mode: per-coordinate noise added to each caption.
    pub caption_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            d: 64,
            samples_per_class: 100,
            intra_class_noise: 0.1,
            inter_class_min_angle: 0.0,
            seed: 0,
            mode: Mode::ImageLabel,
            tau: DEFAULT_TAU,
            class_noise_spread: 0.0,
            degraded_fraction: 0.0,
            degraded_noise: 1.0,
            degraded_marker: 0.0,
            instance_scale: 0.1,
            caption_noise: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        for (name, v) in [
            ("intra_class_noise", self.intra_class_noise),
            ("class_noise_spread", self.class_noise_spread),
            ("degraded_noise", self.degraded_noise),
            ("degraded_marker", self.degraded_marker),
            ("instance_scale", self.instance_scale),
            ("caption_noise", self.caption_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.inter_class_min_angle >= 0.0
            && self.inter_class_min_angle <= std::f64::consts::PI)
        {
            return bad(format!(
                "inter_class_min_angle must lie in [0, pi], got {}",
                self.inter_class_min_angle
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.n_classes * self.samples_per_class
    }
}

fn gaussian(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Draws unit prototypes with pairwise angle at least `min_angle`.
pub fn sample_prototypes(
    n: usize,
    d: usize,
    min_angle: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_angle.cos();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_PROTOTYPE_ATTEMPTS {
                return Err(Error::SamplingFailed {
                    attempts: MAX_PROTOTYPE_ATTEMPTS,
                });
            }
            let mut p = gaussian(rng, d);
            normalize(&mut p);
            let ok = protos
                .iter()
                .all(|q| q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() <= max_cos + 1e-12);
            if ok {
                protos.push(p);
                break;
            }
        }
    }
    Ok(protos)
}

fn to_rows(rows: &[Vec<f64>], d: usize) -> Array2<f32> {
    let flat: Vec<f32> = rows
        .iter()
        .flat_map(|r| r.iter().map(|&x| x as f32))
        .collect();
    Array2::from_shape_vec((rows.len(), d), flat).expect("rows have length d")
}

pub fn synth_generate(spec: &SynthSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let d = spec.d;
    let mut proto_rng = rng::seeded(rng::derive_seed(spec.seed, stream::PROTOTYPES));
    let protos = sample_prototypes(
        spec.n_classes,
        d,
        spec.inter_class_min_angle,
        &mut proto_rng,
    )?;
    let multipliers: Vec<f64> = (0..spec.n_classes)
        .map(|_| {
            let u: f64 = proto_rng.random::<f64>() * 2.0 - 1.0;
            (spec.class_noise_spread * u).exp()
        })
        .collect();

    let mut rng = rng::seeded(rng::derive_seed(spec.seed, stream::SAMPLES));
    let n = spec.num_samples();
    // Degradation draws use their own stream so they leave the others intact.
    let mut degrade_rng = rng::seeded(rng::derive_seed(spec.seed, stream::DEGRADE));
    let mut marker = gaussian(&mut degrade_rng, d);
    normalize(&mut marker);
    let marker: Vec<f64> = marker.iter().map(|m| m * spec.degraded_marker).collect();
    let mut degrade = move |x: &mut Vec<f64>, g: &[f64], scale: f64| {
        if degrade_rng.random::<f64>() < spec.degraded_fraction {
            let extra = scale * (spec.degraded_noise - 1.0);
            x.iter_mut()
                .zip(g)
                .zip(&marker)
                .for_each(|((v, e), m)| *v += extra * e + m);
        }
    };
    let mut images = Vec::with_capacity(n);
    match spec.mode {
        Mode::ImageLabel => {
            let mut labels = Vec::with_capacity(n);
            for (c, proto) in protos.iter().enumerate() {
                for _ in 0..spec.samples_per_class {
                    let scale = spec.intra_class_noise * multipliers[c];
                    let g = gaussian(&mut rng, d);
                    let mut x: Vec<f64> =
                        proto.iter().zip(&g).map(|(p, e)| p + scale * e).collect();
                    degrade(&mut x, &g, scale);
                    normalize(&mut x);
                    images.push(x);
                    labels.push(c as u32);
                }
            }
            EmbeddingDataset::image_label(
                spec.tau,
                to_rows(&images, d),
                to_rows(&protos, d),
                labels,
            )
        }
        Mode::ImageCaption => {
            let mut captions = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.random_range(0..spec.n_classes);
                let s = gaussian(&mut rng, d);
                let g = gaussian(&mut rng, d);
                let h = gaussian(&mut rng, d);
                let scale = spec.intra_class_noise * multipliers[c];
                let base: Vec<f64> = protos[c]
                    .iter()
                    .zip(&s)
                    .map(|(p, e)| p + spec.instance_scale * e)
                    .collect();
                let mut x: Vec<f64> = base.iter().zip(&g).map(|(b, e)| b + scale * e).collect();
                degrade(&mut x, &g, scale);
                let mut t: Vec<f64> = base
                    .iter()
                    .zip(&h)
                    .map(|(b, e)| b + spec.caption_noise * e)
                    .collect();
                normalize(&mut x);
                normalize(&mut t);
                images.push(x);
                captions.push(t);
            }
            let ids = (0..n as u32).collect();
            EmbeddingDataset::image_caption(
                spec.tau,
                to_rows(&images, d),
                to_rows(&captions, d),
                ids,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::format::encode;

    #[test]
    fn rejects_bad_specs() {
        let base = SynthSpec::default();
        assert!(synth_generate(&SynthSpec {
            n_classes: 1,
            ..base.clone()
        })
        .is_err());
        assert!(synth_generate(&SynthSpec {
            intra_class_noise: -0.1,
            ..base.clone()
        })
        .is_err());
        assert!(synth_generate(&SynthSpec { d: 0, ..base }).is_err());
    }

    #[test]
    fn infeasible_angle_fails() {
        let spec = SynthSpec {
            n_classes: 5,
            d: 2,
            inter_class_min_angle: 2.0,
            ..SynthSpec::default()
        };
        assert!(matches!(
            synth_generate(&spec),
            Err(Error::SamplingFailed { .. })
        ));
    }

    #[test]
    fn prototypes_respect_min_angle() {
        let mut rng = rng::seeded(9);
        let angle = 1.2;
        let protos = sample_prototypes(8, 16, angle, &mut rng).unwrap();
        for i in 0..protos.len() {
            for j in 0..i {
                let dot: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum();
                assert!(dot.clamp(-1.0, 1.0).acos() >= angle - 1e-9);
            }
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        let a = encode(&synth_generate(&spec).unwrap()).unwrap();
        let b = encode(&synth_generate(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = encode(&synth_generate(&SynthSpec { seed: 12, ..spec }).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degradation_off_leaves_data_unchanged() {
        let base = SynthSpec {
            seed: 4,
            ..SynthSpec::default()
        };
        let idle = SynthSpec {
            degraded_noise: 3.0,
            degraded_marker: 1.0,
            ..base.clone()
        };
        assert_eq!(
            encode(&synth_generate(&base).unwrap()).unwrap(),
            encode(&synth_generate(&idle).unwrap()).unwrap()
        );
    }

    #[test]
    fn degraded_images_are_harder() {
        let base = SynthSpec {
            intra_class_noise: 0.1,
            samples_per_class: 300,
            seed: 5,
            ..SynthSpec::default()
        };
        let degraded = SynthSpec {
            degraded_fraction: 1.0,
            degraded_noise: 4.0,
            degraded_marker: 0.5,
            ..base.clone()
        };
        let acc = |s: &SynthSpec| {
            crate::zeroshot::zero_shot_accuracy(&synth_generate(s).unwrap(), 1, 0).unwrap()
        };
        assert!(
            acc(&degraded) < acc(&base) - 0.2,
            "{} vs {}",
            acc(&degraded),
            acc(&base)
        );
    }

    #[test]
    fn caption_mode_pairs_images_with_captions() {
        let spec = SynthSpec {
            mode: Mode::ImageCaption,
            n_classes: 4,
            samples_per_class: 5,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.num_texts(), 20);
        assert!(ds.labels().is_empty());
    }
}
