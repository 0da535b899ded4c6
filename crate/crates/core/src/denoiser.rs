//! Exact MMSE denoisers for isotropic Gaussian-mixture priors.
//!
//! For a prior `x_0 ~ sum_i pi_i N(mu_i, s^2 I)` and `x_t = sqrt(a) x_0 +
//! sqrt(1 - a) eps`, the marginal of `x_t` is a mixture with component variance
//! `v = a s^2 + 1 - a`, and `E[x_0 | x_t]` is the responsibility-weighted sum of
//! per-component Gaussian posterior means. `s = 0` is the empirical (delta)
//! limit, where every component mean is one memorized image.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::mask::{plain_mask, Mask, DEFAULT_PLAIN_TAU};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    shape: Vec<usize>,
    // Component means, row-major `(count, numel)`.
    means: Vec<f64>,
    component_std: f64,
}

/// Noise and clean-image predictions at one `(x_t, alpha_bar_t)` probe.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Tensor,
    pub x0: Tensor,
}

impl GmmModel {
    /// Weights are normalized here; they must be positive and finite.
    pub fn new(weights: Vec<f64>, means: Vec<Tensor>, component_std: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::param(
                "means",
                "mixture needs at least one component",
            ));
        }
        if weights.len() != means.len() {
            return Err(Error::param(
                "weights",
                format!("{} weights for {} means", weights.len(), means.len()),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::param(
                "weights",
                "all weights must be positive and finite",
            ));
        }
        if !(component_std >= 0.0 && component_std.is_finite()) {
            return Err(Error::param(
                "component_std",
                format!("must be finite and >= 0, got {component_std}"),
            ));
        }
        let shape = means[0].shape().to_vec();
        for m in &means {
            if m.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    expected: shape,
                    actual: m.shape().to_vec(),
                });
            }
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let means = means.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Self {
            weights,
            log_weights,
            shape,
            means,
            component_std,
        })
    }

    /// Uniform weights.
    pub fn uniform(means: Vec<Tensor>, component_std: f64) -> Result<Self> {
        let n = means.len();
        Self::new(vec![1.0; n], means, component_std)
    }

    pub fn standard_normal(shape: &[usize]) -> Self {
        Self::new(vec![1.0], vec![Tensor::zeros(shape)], 1.0).expect("valid single component")
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_std(&self) -> f64 {
        self.component_std
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn mean(&self, i: usize) -> Tensor {
        let d = self.numel();
        Tensor::new(self.shape.clone(), self.means[i * d..(i + 1) * d].to_vec())
            .expect("stored mean has model shape")
    }

    pub fn means(&self) -> Vec<Tensor> {
        (0..self.component_count()).map(|i| self.mean(i)).collect()
    }

    fn mean_slice(&self, i: usize) -> &[f64] {
        let d = self.numel();
        &self.means[i * d..(i + 1) * d]
    }

    fn check_probe(&self, x_t: &Tensor, alpha_bar: f64) -> Result<()> {
        if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
            return Err(Error::domain(format!(
                "alpha_bar must lie in (0, 1), got {alpha_bar}"
            )));
        }
        if x_t.shape() != self.shape.as_slice() {
            return Err(Error::Shape {
                expected: self.shape.clone(),
                actual: x_t.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Posterior responsibilities `w_i(x_t)`, computed with log-sum-exp.
    pub fn responsibilities(&self, x_t: &Tensor, alpha_bar: f64) -> Result<Vec<f64>> {
        self.check_probe(x_t, alpha_bar)?;
        Ok(self.responsibilities_unchecked(x_t.data(), alpha_bar))
    }

    fn responsibilities_unchecked(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let var = alpha_bar * self.component_std.powi(2) + (1.0 - alpha_bar);
        let mut logits: Vec<f64> = (0..self.component_count())
            .map(|i| {
                let d2: f64 = x
                    .iter()
                    .zip(self.mean_slice(i))
                    .map(|(xv, mv)| {
                        let r = xv - sa * mv;
                        r * r
                    })
                    .sum();
                self.log_weights[i] - d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in &mut logits {
            *l /= total;
        }
        logits
    }

    /// Both predictions from one responsibility pass.
    pub fn predict(&self, x_t: &Tensor, alpha_bar: f64) -> Result<Prediction> {
        self.check_probe(x_t, alpha_bar)?;
        let x = x_t.data();
        let w = self.responsibilities_unchecked(x, alpha_bar);
        let sa = alpha_bar.sqrt();
        let s2 = self.component_std.powi(2);
        let var = alpha_bar * s2 + (1.0 - alpha_bar);

        // Responsibility-weighted means and residuals r_i = x - sqrt(a) mu_i.
        let d = x.len();
        let mut mean_acc = vec![0.0; d];
        let mut resid_acc = vec![0.0; d];
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for ((m, r), (&xv, &mv)) in mean_acc
                .iter_mut()
                .zip(resid_acc.iter_mut())
                .zip(x.iter().zip(self.mean_slice(i)))
            {
                *m += wi * mv;
                *r += wi * (xv - sa * mv);
            }
        }

        // eps = sqrt(1 - a) / v * sum_i w_i r_i
        // x0  = sum_i w_i mu_i + (sqrt(a) s^2 / v) * sum_i w_i r_i
        let eps_scale = (1.0 - alpha_bar).sqrt() / var;
        let gain = sa * s2 / var;
        let eps = resid_acc.iter().map(|r| eps_scale * r).collect();
        let x0 = mean_acc
            .iter()
            .zip(&resid_acc)
            .map(|(m, r)| m + gain * r)
            .collect();
        Ok(Prediction {
            eps: Tensor::new(self.shape.clone(), eps)?,
            x0: Tensor::new(self.shape.clone(), x0)?,
        })
    }

    /// Exact MMSE noise prediction.
    pub fn predict_noise(&self, x_t: &Tensor, alpha_bar: f64) -> Result<Tensor> {
        Ok(self.predict(x_t, alpha_bar)?.eps)
    }

    /// `E[x_0 | x_t]`.
    pub fn posterior_mean(&self, x_t: &Tensor, alpha_bar: f64) -> Result<Tensor> {
        Ok(self.predict(x_t, alpha_bar)?.x0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Synthetic corpus of flat backgrounds with one textured rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background_palette: Vec<f64>,
    pub texture_amplitude: f64,
    pub texture_patch: PatchRect,
    pub seed: u64,
    /// Shared component std of the resulting mixture; `0` gives the
    /// delta-mixture (memorizing) limit.
    pub component_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 64,
            height: 32,
            width: 32,
            channels: 1,
            background_palette: vec![-0.5, 0.0, 0.5],
            texture_amplitude: 1.0,
            texture_patch: PatchRect {
                top: 8,
                left: 8,
                height: 16,
                width: 16,
            },
            seed: 0,
            component_std: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::param("count", "must be at least 1"));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::param(
                "height",
                format!(
                    "image must be at least 2x2 with one channel, got {}x{}x{}",
                    self.channels, self.height, self.width
                ),
            ));
        }
        if self.background_palette.is_empty()
            || self.background_palette.iter().any(|v| !v.is_finite())
        {
            return Err(Error::param(
                "background_palette",
                "needs at least one finite value",
            ));
        }
        if !(self.texture_amplitude > 0.0 && self.texture_amplitude.is_finite()) {
            return Err(Error::param("texture_amplitude", "must be > 0"));
        }
        let p = self.texture_patch;
        if p.height == 0
            || p.width == 0
            || p.top + p.height > self.height
            || p.left + p.width > self.width
        {
            return Err(Error::param(
                "texture_patch",
                format!(
                    "rectangle {p:?} does not fit inside a {}x{} image",
                    self.height, self.width
                ),
            ));
        }
        if !(self.component_std >= 0.0 && self.component_std.is_finite()) {
            return Err(Error::param("component_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Pixels whose forward differences touch the texture: the patch itself,
    /// the row directly above it and the column directly left of it.
    pub fn expected_plain_mask(&self) -> Mask {
        let p = self.texture_patch;
        let mut mask = Mask::filled(self.height, self.width, true);
        for h in p.top.saturating_sub(1)..p.top + p.height {
            for w in p.left.saturating_sub(1)..p.left + p.width {
                let above = h + 1 == p.top;
                let left = w + 1 == p.left;
                if !(above && left) {
                    mask.set(h, w, false);
                }
            }
        }
        mask
    }
}

/// Mixture built from the dataset plus the plain mask of each mean.
#[derive(Debug, Clone)]
pub struct FlatfieldDataset {
    pub spec: DatasetSpec,
    pub model: GmmModel,
    /// Plain (`true`) pixels of each mean.
    pub plain_masks: Vec<Mask>,
}

const MAX_TEXTURE_REDRAWS: usize = 10_000;

/// Uniform-weight mixture over `count` flat-background images, each with an
/// i.i.d. uniform texture in `background +- amplitude` over the patch. Texture
/// pixels are redrawn until every pixel of the texture footprint is non-plain
/// under the plain-surface threshold, so the returned masks equal
/// [`DatasetSpec::expected_plain_mask`].
pub fn make_flatfield_dataset(spec: &DatasetSpec) -> Result<FlatfieldDataset> {
    spec.validate()?;
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let p = spec.texture_patch;
    let expected = spec.expected_plain_mask();
    let mut means = Vec::with_capacity(spec.count);
    let mut masks = Vec::with_capacity(spec.count);

    for index in 0..spec.count {
        let mut rng = stream(spec.seed, Purpose::Dataset, index as u64);
        let bg = spec.background_palette[rng.random_range(0..spec.background_palette.len())];
        let mut img = Tensor::full(&[c, h, w], bg);
        let amp = spec.texture_amplitude;
        let draw = |img: &mut Tensor, rng: &mut rand_chacha::ChaCha8Rng, hh: usize, ww: usize| {
            for ch in 0..c {
                img.data_mut()[(ch * h + hh) * w + ww] = bg + rng.random_range(-amp..amp);
            }
        };
        for hh in p.top..p.top + p.height {
            for ww in p.left..p.left + p.width {
                draw(&mut img, &mut rng, hh, ww);
            }
        }

        let mut redraws = 0;
        loop {
            let mask = plain_mask(&img, DEFAULT_PLAIN_TAU)?;
            let bad: Vec<(usize, usize)> = (0..h)
                .flat_map(|hh| (0..w).map(move |ww| (hh, ww)))
                .filter(|&(hh, ww)| mask.get(hh, ww) != expected.get(hh, ww))
                .collect();
            if bad.is_empty() {
                masks.push(mask);
                break;
            }
            redraws += bad.len();
            if redraws > MAX_TEXTURE_REDRAWS {
                return Err(Error::param(
                    "texture_amplitude",
                    format!(
                        "could not make the texture of image {index} non-plain; amplitude {amp} is too small"
                    ),
                ));
            }
            // Redraw the texture pixels that feed each failing difference cell.
            for (hh, ww) in bad {
                for (dh, dw) in [(0, 0), (1, 0), (0, 1)] {
                    let (th, tw) = (hh + dh, ww + dw);
                    if th >= p.top && th < p.top + p.height && tw >= p.left && tw < p.left + p.width
                    {
                        draw(&mut img, &mut rng, th, tw);
                    }
                }
            }
        }
        means.push(img);
    }

    let model = GmmModel::uniform(means, spec.component_std)?;
    Ok(FlatfieldDataset {
        spec: spec.clone(),
        model,
        plain_masks: masks,
    })
}
