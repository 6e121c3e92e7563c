use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{CmtError, Result};
use crate::numerics::{gaussian_blur, Tensor};

pub const FOG_COLOR: [f64; 3] = [0.8, 0.8, 0.8];

/// Target-domain degradation applied on top of a clean source render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub fog_density: f64,
    pub blur_sigma: f64,
    pub brightness_shift: f64,
    pub noise_std: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            fog_density: 0.5,
            blur_sigma: 1.0,
            brightness_shift: 0.0,
            noise_std: 0.02,
        }
    }
}

impl DomainParams {
    pub const IDENTITY: DomainParams = DomainParams {
        fog_density: 0.0,
        blur_sigma: 0.0,
        brightness_shift: 0.0,
        noise_std: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_density) {
            return Err(CmtError::ConfigInvalid(
                "fog_density must lie in [0, 1]".into(),
            ));
        }
        if !(self.blur_sigma >= 0.0)
            || !(self.noise_std >= 0.0)
            || !self.brightness_shift.is_finite()
        {
            return Err(CmtError::ConfigInvalid(
                "blur_sigma and noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Renders the target-domain view of a scene: blur, fog blend, brightness
/// shift, then Gaussian pixel noise, clamped to `[0, 1]`.
pub fn render_target(scene: &Scene, domain: &DomainParams) -> Tensor {
    let src = &scene.image_source;
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut img = gaussian_blur(src.data(), c, h, w, domain.blur_sigma);
    let f = domain.fog_density;
    for ch in 0..c {
        for v in &mut img[ch * h * w..(ch + 1) * h * w] {
            *v = (1.0 - f) * *v + f * FOG_COLOR[ch % 3] + domain.brightness_shift;
        }
    }
    if domain.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5EED_F0C5_0000_0001);
        let normal = Normal::new(0.0, domain.noise_std).expect("noise_std validated non-negative");
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![c, h, w], img).expect("shape preserved")
}

/// Snaps values to the 8-bit grid so PNG storage is lossless.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}
