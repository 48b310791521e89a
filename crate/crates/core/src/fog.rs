//! Fog image formation, dark-channel-prior dehazing, and min-max map
//! normalization.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`; depth and
//! transmission maps are `[H, W]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, NORM_EPS};

/// Transmission floor used wherever a map acts as a divisor.
pub const T_MIN: f64 = 0.1;
pub const DCP_OMEGA: f64 = 0.95;
pub const DCP_PATCH: usize = 7;
/// Fraction of pixels, ranked by dark channel, averaged into the airlight.
pub const DCP_BRIGHTEST_FRACTION: f64 = 0.001;
pub const DEFAULT_AIRLIGHT: [f64; 3] = [0.9, 0.9, 0.9];

const AIRLIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FogError {
    #[error("{op}: image shape {image:?} does not match map shape {map:?}")]
    ShapeMismatch { op: &'static str, image: Vec<usize>, map: Vec<usize> },
    #[error("negative depth {value} at index {index}")]
    NegativeDepth { index: usize, value: f64 },
    #[error("invalid {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// Per-pixel fraction of scene radiance that survives the fog.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap(Tensor);

impl TransmissionMap {
    /// Wraps an `[H, W]` map, clamping values into `[0, 1]`.
    pub fn new(values: Tensor) -> Result<Self, FogError> {
        if values.rank() != 2 {
            return Err(FogError::ShapeMismatch {
                op: "transmission",
                image: values.shape().to_vec(),
                map: Vec::new(),
            });
        }
        Ok(Self(values.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Uniform fog density and atmospheric light for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub beta: f64,
    pub airlight: [f64; 3],
}

impl Default for FogParams {
    fn default() -> Self {
        Self { beta: 0.06, airlight: DEFAULT_AIRLIGHT }
    }
}

fn image_dims(op: &'static str, image: &Tensor, map: Option<&Tensor>) -> Result<(usize, usize, usize), FogError> {
    let s = image.shape();
    let bad = || FogError::ShapeMismatch {
        op,
        image: s.to_vec(),
        map: map.map(|m| m.shape().to_vec()).unwrap_or_default(),
    };
    if s.len() != 3 {
        return Err(bad());
    }
    if let Some(m) = map {
        if m.shape() != [s[1], s[2]] {
            return Err(bad());
        }
    }
    Ok((s[0], s[1], s[2]))
}

fn airlight_for(airlight: &[f64], channel: usize) -> f64 {
    airlight[channel.min(airlight.len() - 1)]
}

/// `t(x) = exp(−β·D(x))`.
pub fn transmission_from_depth(depth: &Tensor, beta: f64) -> Result<TransmissionMap, FogError> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(FogError::InvalidParameter { name: "beta", value: beta });
    }
    if let Some((index, &value)) = depth.data().iter().enumerate().find(|(_, &d)| !(d >= 0.0)) {
        return Err(FogError::NegativeDepth { index, value });
    }
    TransmissionMap::new(depth.map(|d| (-beta * d).exp()))
}

/// Scattering composition `I = J·t + A·(1 − t)`, per channel.
pub fn apply_fog(clear: &Tensor, t: &TransmissionMap, airlight: &[f64]) -> Result<Tensor, FogError> {
    let (c, h, w) = image_dims("apply_fog", clear, Some(t.values()))?;
    let tv = t.values().data();
    let mut out = clear.clone();
    for ch in 0..c {
        let a = airlight_for(airlight, ch);
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (v, &ti) in plane.iter_mut().zip(tv) {
            *v = (*v * ti + a * (1.0 - ti)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Inverts [`apply_fog`] with the transmission floored at [`T_MIN`]:
/// `J = (I − A)/max(t, T_MIN) + A`, clamped to `[0, 1]`.
///
/// Evaluated as `I + (I − A)·(1/t − 1)` so that `t = 1` and `I = A` are exact
/// fixed points.
pub fn dehaze_exact(foggy: &Tensor, t: &TransmissionMap, airlight: &[f64]) -> Result<Tensor, FogError> {
    let (c, h, w) = image_dims("dehaze_exact", foggy, Some(t.values()))?;
    let tv = t.values().data();
    let mut out = foggy.clone();
    for ch in 0..c {
        let a = airlight_for(airlight, ch);
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (v, &ti) in plane.iter_mut().zip(tv) {
            *v = (*v + (*v - a) * (1.0 / ti.max(T_MIN) - 1.0)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Running minimum over a window of `2*radius+1`, clamped to the line.
fn min_filter_line(src: &[f64], radius: usize, dst: &mut [f64]) {
    let n = src.len();
    for (i, d) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(n);
        *d = src[lo..hi].iter().copied().fold(f64::INFINITY, f64::min);
    }
}

/// Minimum over the `patch × patch` window and all channels.
///
/// The window is clipped at image borders.
pub fn dark_channel(image: &Tensor, patch: usize) -> Result<Tensor, FogError> {
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(FogError::InvalidParameter { name: "patch", value: patch as f64 });
    }
    let (c, h, w) = image_dims("dark_channel", image, None)?;
    let data = image.data();
    let mut channel_min = vec![f64::INFINITY; h * w];
    for ch in 0..c {
        for (m, &v) in channel_min.iter_mut().zip(&data[ch * h * w..(ch + 1) * h * w]) {
            *m = m.min(v);
        }
    }
    let r = patch / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        min_filter_line(&channel_min[y * w..(y + 1) * w], r, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![0.0; h * w];
    let mut column = vec![0.0; h];
    let mut filtered = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = rows[y * w + x];
        }
        min_filter_line(&column, r, &mut filtered);
        for y in 0..h {
            out[y * w + x] = filtered[y];
        }
    }
    Ok(Tensor::new([h, w], out).expect("dark channel shape"))
}

/// `t̂ = 1 − ω·dark(I / A)`, clamped to `[T_MIN, 1]`.
pub fn estimate_transmission_dcp(
    image: &Tensor,
    airlight: &[f64],
    omega: f64,
    patch: usize,
) -> Result<TransmissionMap, FogError> {
    if let Some(&a) = airlight.iter().find(|&&a| !(a > 0.0)) {
        return Err(FogError::InvalidParameter { name: "airlight", value: a });
    }
    let (c, h, w) = image_dims("estimate_transmission_dcp", image, None)?;
    let mut scaled = image.clone();
    for ch in 0..c {
        let a = airlight_for(airlight, ch);
        scaled.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v /= a);
    }
    let dark = dark_channel(&scaled, patch)?;
    TransmissionMap::new(dark.map(|d| (1.0 - omega * d).clamp(T_MIN, 1.0)))
}

/// Atmospheric light: mean colour of the pixels with the brightest dark
/// channel (top [`DCP_BRIGHTEST_FRACTION`], at least one pixel).
pub fn estimate_airlight(image: &Tensor, dark: &Tensor) -> Result<Vec<f64>, FogError> {
    let (c, h, w) = image_dims("estimate_airlight", image, Some(dark))?;
    let n = h * w;
    let count = ((n as f64 * DCP_BRIGHTEST_FRACTION).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let dv = dark.data();
    order.sort_by(|&a, &b| dv[b].total_cmp(&dv[a]).then(a.cmp(&b)));
    let data = image.data();
    Ok((0..c)
        .map(|ch| {
            let sum: f64 = order[..count].iter().map(|&i| data[ch * n + i]).sum();
            (sum / count as f64).max(AIRLIGHT_FLOOR)
        })
        .collect())
}

/// Output of [`dcp_defog`].
#[derive(Clone, Debug, PartialEq)]
pub struct DcpResult {
    pub defogged: Tensor,
    pub transmission: TransmissionMap,
    pub airlight: Vec<f64>,
}

/// Single-image dehazing with the dark channel prior.
pub fn dcp_defog(image: &Tensor) -> Result<DcpResult, FogError> {
    let dark = dark_channel(image, DCP_PATCH)?;
    let airlight = estimate_airlight(image, &dark)?;
    let transmission = estimate_transmission_dcp(image, &airlight, DCP_OMEGA, DCP_PATCH)?;
    let defogged = dehaze_exact(image, &transmission, &airlight)?;
    Ok(DcpResult { defogged, transmission, airlight })
}

/// Min-max normalization `(v − min)/(max − min)`; near-constant maps give
/// all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range >= NORM_EPS) {
        return Tensor::zeros(map.shape().to_vec());
    }
    map.map(|v| (v - lo) / range)
}
