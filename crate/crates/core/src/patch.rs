//! Image tensors, their patch-token view, and random patch masking.
//!
//! Tokens are ordered frame-major, then row-major over the patch grid. Inside
//! a token, values are laid out `(row, col, channel)` with channel fastest.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::Tensor;

/// `batch x frames x channels x height x width` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(batch: usize, frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            frames,
            channels,
            height,
            width,
            values: vec![0.0; batch * frames * channels * height * width],
        }
    }

    pub fn from_values(dims: [usize; 5], values: Vec<f64>) -> Result<Self> {
        let [batch, frames, channels, height, width] = dims;
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::InconsistentDims(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        if frames == 0 {
            return Err(Error::InconsistentDims("at least one frame required".into()));
        }
        Ok(Self {
            batch,
            frames,
            channels,
            height,
            width,
            values,
        })
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.frames, self.channels, self.height, self.width]
    }

    fn plane_offset(&self, b: usize, t: usize, c: usize) -> usize {
        ((b * self.frames + t) * self.channels + c) * self.height * self.width
    }

    pub fn plane(&self, b: usize, t: usize, c: usize) -> &[f64] {
        let o = self.plane_offset(b, t, c);
        &self.values[o..o + self.height * self.width]
    }

    pub fn plane_mut(&mut self, b: usize, t: usize, c: usize) -> &mut [f64] {
        let o = self.plane_offset(b, t, c);
        let n = self.height * self.width;
        &mut self.values[o..o + n]
    }

    fn sample_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    /// Sample `b` as a batch of one.
    pub fn sample(&self, b: usize) -> ImageTensor {
        let n = self.sample_len();
        ImageTensor {
            batch: 1,
            values: self.values[b * n..(b + 1) * n].to_vec(),
            ..*self
        }
    }

    /// Concatenates batches with identical per-sample dims.
    pub fn stack<'a>(parts: impl IntoIterator<Item = &'a ImageTensor>) -> Result<ImageTensor> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or(Error::EmptyInput)?;
        let mut out = first.clone();
        for p in iter {
            if p.dims()[1..] != first.dims()[1..] {
                return Err(Error::InconsistentDims(format!(
                    "cannot stack {:?} onto {:?}",
                    p.dims(),
                    first.dims()
                )));
            }
            out.batch += p.batch;
            out.values.extend_from_slice(&p.values);
        }
        Ok(out)
    }
}

/// Patch-token view of an [`ImageTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub batch: usize,
    /// Tokens per sample.
    pub tokens: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `batch x tokens x patch_dim`.
    pub values: Vec<f64>,
}

impl PatchSet {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn token(&self, b: usize, s: usize) -> &[f64] {
        let pd = self.patch_dim();
        let o = (b * self.tokens + s) * pd;
        &self.values[o..o + pd]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.batch, self.tokens, self.patch_dim()],
            self.values.clone(),
        )
        .expect("patch set is consistent")
    }

    pub fn from_tensor(t: &Tensor, patch_size: usize, channels: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != patch_size * patch_size * channels {
            return Err(Error::InconsistentDims(format!(
                "token tensor {s:?} for patch {patch_size} with {channels} channels"
            )));
        }
        Ok(Self {
            batch: s[0],
            tokens: s[1],
            patch_size,
            channels,
            values: t.data().to_vec(),
        })
    }
}

/// Patch count per sample for the given frame geometry.
pub fn patch_count(frames: usize, height: usize, width: usize, p: usize) -> Result<usize> {
    for dim in [height, width] {
        if p == 0 || dim % p != 0 {
            return Err(Error::IndivisibleDims { dim, patch: p });
        }
    }
    Ok(frames * (height / p) * (width / p))
}

pub fn patchify(x: &ImageTensor, p: usize) -> Result<PatchSet> {
    let s = patch_count(x.frames, x.height, x.width, p)?;
    let (gh, gw) = (x.height / p, x.width / p);
    let pd = p * p * x.channels;
    let mut values = vec![0.0; x.batch * s * pd];
    for b in 0..x.batch {
        for t in 0..x.frames {
            for c in 0..x.channels {
                let plane = x.plane(b, t, c);
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tok = b * s + (t * gh + gy) * gw + gx;
                        for py in 0..p {
                            let row = &plane[(gy * p + py) * x.width + gx * p..][..p];
                            for (px, &v) in row.iter().enumerate() {
                                values[tok * pd + (py * p + px) * x.channels + c] = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PatchSet {
        batch: x.batch,
        tokens: s,
        patch_size: p,
        channels: x.channels,
        values,
    })
}

/// Exact inverse of [`patchify`] for `dims = [B, T, C, H, W]`.
pub fn unpatchify(patches: &PatchSet, dims: [usize; 5]) -> Result<ImageTensor> {
    let [batch, frames, channels, height, width] = dims;
    let p = patches.patch_size;
    let s = patch_count(frames, height, width, p)?;
    if patches.batch != batch || patches.tokens != s || patches.channels != channels {
        return Err(Error::InconsistentDims(format!(
            "{}x{} tokens of {} channels cannot form {dims:?}",
            patches.batch, patches.tokens, patches.channels
        )));
    }
    let (gh, gw) = (height / p, width / p);
    let pd = patches.patch_dim();
    let mut x = ImageTensor::zeros(batch, frames, channels, height, width);
    for b in 0..batch {
        for t in 0..frames {
            for c in 0..channels {
                let plane = x.plane_mut(b, t, c);
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tok = b * s + (t * gh + gy) * gw + gx;
                        for py in 0..p {
                            let row = &mut plane[(gy * p + py) * width + gx * p..][..p];
                            for (px, v) in row.iter_mut().enumerate() {
                                *v = patches.values[tok * pd + (py * p + px) * channels + c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Which token indices are removed before encoding, per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub batch: usize,
    pub tokens: usize,
    pub ratio_bits: u64,
    pub key: RngKey,
    /// Sorted ascending.
    pub masked: Vec<Vec<usize>>,
    /// Sorted ascending; complement of `masked`.
    pub visible: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn masked_per_sample(&self) -> usize {
        self.masked.first().map_or(0, Vec::len)
    }

    pub fn visible_per_sample(&self) -> usize {
        self.tokens - self.masked_per_sample()
    }
}

/// Number of masked tokens out of `tokens` at `ratio`.
pub fn mask_count(tokens: usize, ratio: f64) -> usize {
    (ratio * tokens as f64).floor() as usize
}

/// Independent uniformly random masks of `floor(ratio * tokens)` indices for
/// each of `batch` samples. Sample `b` draws from `key.child(b)`.
pub fn sample_mask(batch: usize, tokens: usize, ratio: f64, key: RngKey) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    let m = mask_count(tokens, ratio);
    let mut masked = Vec::with_capacity(batch);
    let mut visible = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut rng = key.child(b as u64).rng();
        let mut chosen = index::sample(&mut rng, tokens, m).into_vec();
        chosen.sort_unstable();
        let mut is_masked = vec![false; tokens];
        for &i in &chosen {
            is_masked[i] = true;
        }
        visible.push((0..tokens).filter(|&i| !is_masked[i]).collect());
        masked.push(chosen);
    }
    Ok(MaskPlan {
        batch,
        tokens,
        ratio_bits: ratio.to_bits(),
        key,
        masked,
        visible,
    })
}

fn check_plan(patches: &PatchSet, plan: &MaskPlan) -> Result<()> {
    if patches.batch != plan.batch || patches.tokens != plan.tokens {
        return Err(Error::PlanMismatch(format!(
            "plan for {}x{} tokens, patches are {}x{}",
            plan.batch, plan.tokens, patches.batch, patches.tokens
        )));
    }
    Ok(())
}

/// Tokens at `plan.visible`, in ascending index order.
pub fn gather_visible(patches: &PatchSet, plan: &MaskPlan) -> Result<PatchSet> {
    check_plan(patches, plan)?;
    gather_tokens(patches, &plan.visible)
}

/// Tokens at `plan.masked`, in ascending index order.
pub fn gather_masked(patches: &PatchSet, plan: &MaskPlan) -> Result<PatchSet> {
    check_plan(patches, plan)?;
    gather_tokens(patches, &plan.masked)
}

fn gather_tokens(patches: &PatchSet, indices: &[Vec<usize>]) -> Result<PatchSet> {
    let keep = indices.first().map_or(0, Vec::len);
    let mut values = Vec::with_capacity(patches.batch * keep * patches.patch_dim());
    for (b, row) in indices.iter().enumerate() {
        for &s in row {
            values.extend_from_slice(patches.token(b, s));
        }
    }
    Ok(PatchSet {
        tokens: keep,
        values,
        ..*patches
    })
}
