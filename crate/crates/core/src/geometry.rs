//! Pairwise box geometry and its sinusoidal embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned region in pixels; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.x.is_finite() && self.y.is_finite();
        let sized = self.w.is_finite() && self.h.is_finite() && self.w > 0.0 && self.h > 0.0;
        if finite && sized {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Parameters of the sinusoidal geometry embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeomEmbedConfig {
    pub dims_per_component: usize,
    pub wavelength_base: f64,
    pub clamp_eps: f64,
}

impl Default for GeomEmbedConfig {
    fn default() -> Self {
        Self {
            dims_per_component: 64,
            wavelength_base: 10_000.0,
            clamp_eps: 1e-3,
        }
    }
}

impl GeomEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims_per_component;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dims_per_component must be even and >= 2, got {d}"
            )));
        }
        if !(self.wavelength_base > 1.0) || !self.wavelength_base.is_finite() {
            return Err(Error::Config("wavelength_base must be > 1".into()));
        }
        if !(self.clamp_eps > 0.0) || !self.clamp_eps.is_finite() {
            return Err(Error::Config("clamp_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Width of the embedded feature, `4 * d`.
    pub fn output_dim(&self) -> usize {
        4 * self.dims_per_component
    }

    /// Wavelength divisors `base^(2m/d)` for `m in 0..d/2`.
    pub fn wavelengths(&self) -> Vec<f64> {
        let d = self.dims_per_component as f64;
        (0..self.dims_per_component / 2)
            .map(|m| self.wavelength_base.powf(2.0 * m as f64 / d))
            .collect()
    }
}

/// Translation- and scale-invariant configuration of `b_j` relative to `b_i`.
///
/// Axis offsets smaller than `clamp_eps` times the reference size are clamped
/// to that floor so the log stays finite.
pub fn geometry_feature(bi: &BBox, bj: &BBox, clamp_eps: f64) -> Result<[f64; 4]> {
    bi.validate()?;
    bj.validate()?;
    if !(clamp_eps > 0.0) {
        return Err(Error::Config("clamp_eps must be > 0".into()));
    }
    let dx = (bi.x - bj.x).abs().max(clamp_eps * bi.w);
    let dy = (bi.y - bj.y).abs().max(clamp_eps * bi.h);
    Ok([
        (dx / bi.w).ln(),
        (dy / bi.h).ln(),
        (bj.w / bi.w).ln(),
        (bj.h / bi.h).ln(),
    ])
}

/// Embeds each of the four components with `sin`/`cos` pairs over `d/2`
/// wavelengths. Layout: component-major, `[sin, cos]` interleaved.
pub fn sinusoidal_embed(g: &[f64; 4], cfg: &GeomEmbedConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let wl = cfg.wavelengths();
    let mut out = Vec::with_capacity(cfg.output_dim());
    embed_into(g, &wl, &mut out);
    Ok(out)
}

pub(crate) fn embed_into(g: &[f64; 4], wavelengths: &[f64], out: &mut Vec<f64>) {
    for &v in g {
        for &f in wavelengths {
            let (s, c) = (v / f).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}
