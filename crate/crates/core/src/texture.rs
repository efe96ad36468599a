//! Local Directional Pattern (LDP) codes and region-weighted chi-square
//! histogram distances.
//!
//! Each interior pixel's 3x3 neighborhood is correlated with the eight Kirsch
//! compass kernels. The LDP code sets bit `d` for each of the `k` directions
//! with the largest absolute response, lower direction index winning ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::ImageTensor;

/// Default number of set bits per code.
pub const DEFAULT_K: usize = 3;

/// Kirsch compass kernels, row-major 3x3, in direction order
/// East, Northeast, North, Northwest, West, Southwest, South, Southeast.
pub const KIRSCH_KERNELS: [[i32; 9]; 8] = [
    [-3, -3, 5, -3, 0, 5, -3, -3, 5],
    [-3, 5, 5, -3, 0, 5, -3, -3, -3],
    [5, 5, 5, -3, 0, -3, -3, -3, -3],
    [5, 5, -3, 5, 0, -3, -3, -3, -3],
    [5, -3, -3, 5, 0, -3, 5, -3, -3],
    [-3, -3, -3, 5, 0, -3, 5, 5, -3],
    [-3, -3, -3, -3, 0, -3, 5, 5, 5],
    [-3, -3, -3, -3, 0, 5, -3, 5, 5],
];

/// Neighbor offsets `(drow, dcol)` walking counter-clockwise from East. The
/// `+5` window of direction `d` is ring positions `d-1, d, d+1`.
const RING: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Texture descriptor selector. Only LDP is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[non_exhaustive]
pub enum DescriptorKind {
    Ldp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InconsistentDims(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    fn get_clamped(&self, row: isize, col: isize) -> i32 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.pixels[r * self.width + c] as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BorderPolicy {
    /// Border pixels see a replicate-padded source image.
    Replicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdpImage {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub codes: Vec<u8>,
    pub border: BorderPolicy,
}

impl LdpImage {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.codes[row * self.width + col]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.codes.clone(),
        }
    }
}

/// The eight Kirsch responses at an interior pixel.
pub fn kirsch_edge_responses(img: &GrayImage, row: usize, col: usize) -> Result<[i32; 8]> {
    if row == 0 || col == 0 || row + 1 >= img.height || col + 1 >= img.width {
        return Err(Error::OutOfBorder {
            row,
            col,
            height: img.height,
            width: img.width,
        });
    }
    let mut out = [0i32; 8];
    for (resp, kernel) in out.iter_mut().zip(KIRSCH_KERNELS.iter()) {
        let mut acc = 0;
        for dr in 0..3 {
            for dc in 0..3 {
                acc += kernel[dr * 3 + dc] * img.get(row + dr - 1, col + dc - 1) as i32;
            }
        }
        *resp = acc;
    }
    Ok(out)
}

/// Code with bit `d` set for the `k` strongest `|responses[d]|`.
pub fn ldp_code(responses: &[i32; 8], k: usize) -> Result<u8> {
    if !(1..=8).contains(&k) {
        return Err(Error::InvalidK(k));
    }
    let mut order: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
    // Stable sort keeps lower directions first among equal magnitudes.
    order.sort_by_key(|&d| std::cmp::Reverse(responses[d].unsigned_abs()));
    Ok(order[..k].iter().fold(0u8, |code, &d| code | (1 << d)))
}

/// LDP code image with the same size as `img`.
pub fn ldp_image(img: &GrayImage, k: usize) -> Result<LdpImage> {
    if img.height < 3 || img.width < 3 {
        return Err(Error::UndersizedImage {
            height: img.height,
            width: img.width,
        });
    }
    if !(1..=8).contains(&k) {
        return Err(Error::InvalidK(k));
    }
    let mut codes = Vec::with_capacity(img.height * img.width);
    let mut ring = [0i32; 8];
    let mut responses = [0i32; 8];
    for r in 0..img.height as isize {
        for c in 0..img.width as isize {
            for (v, &(dr, dc)) in ring.iter_mut().zip(RING.iter()) {
                *v = img.get_clamped(r + dr, c + dc);
            }
            let total: i32 = ring.iter().sum();
            for (d, resp) in responses.iter_mut().enumerate() {
                let window = ring[(d + 7) % 8] + ring[d] + ring[(d + 1) % 8];
                *resp = 8 * window - 3 * total;
            }
            codes.push(ldp_code(&responses, k)?);
        }
    }
    Ok(LdpImage {
        height: img.height,
        width: img.width,
        k,
        codes,
        border: BorderPolicy::Replicate,
    })
}

/// Quantizes a `[0,1]` plane to 8 bits.
pub fn quantize_plane(values: &[f64], height: usize, width: usize) -> Result<GrayImage> {
    let pixels = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::new(height, width, pixels)
}

/// Luma-weighted grayscale plane of frame `(b, t)`.
fn gray_plane(x: &ImageTensor, b: usize, t: usize) -> Result<Vec<f64>> {
    let plane = x.height * x.width;
    match x.channels {
        1 => Ok(x.plane(b, t, 0).to_vec()),
        3 => {
            let (r, g, bl) = (x.plane(b, t, 0), x.plane(b, t, 1), x.plane(b, t, 2));
            Ok((0..plane)
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i])
                .collect())
        }
        c => Err(Error::InconsistentDims(format!(
            "LDP needs 1 or 3 channels, got {c}"
        ))),
    }
}

/// 8-bit luma image of frame `(b, t)`.
pub fn gray_image(x: &ImageTensor, b: usize, t: usize) -> Result<GrayImage> {
    quantize_plane(&gray_plane(x, b, t)?, x.height, x.width)
}

/// LDP representation of an image tensor: grayscale, code image scaled to
/// `[0,1]`, replicated over every channel.
pub fn ldp_tensor(x: &ImageTensor, k: usize) -> Result<ImageTensor> {
    let mut out = ImageTensor::zeros(x.batch, x.frames, x.channels, x.height, x.width);
    for b in 0..x.batch {
        for t in 0..x.frames {
            let ldp = ldp_image(&gray_image(x, b, t)?, k)?;
            let scaled: Vec<f64> = ldp.codes.iter().map(|&c| c as f64 / 255.0).collect();
            for ch in 0..x.channels {
                out.plane_mut(b, t, ch).copy_from_slice(&scaled);
            }
        }
    }
    Ok(out)
}

/// Codes with exactly `k` bits set, ascending. Their positions are the
/// histogram bins.
pub fn attainable_codes(k: usize) -> Vec<u8> {
    (0u16..=255)
        .filter(|c| c.count_ones() as usize == k)
        .map(|c| c as u8)
        .collect()
}

/// Per-region histograms over attainable LDP codes with region weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionHistogramSet {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub bins: usize,
    /// `grid_rows * grid_cols` histograms, row-major over the grid.
    pub counts: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl RegionHistogramSet {
    pub fn new(
        grid_rows: usize,
        grid_cols: usize,
        counts: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let regions = grid_rows * grid_cols;
        if counts.len() != regions || weights.len() != regions {
            return Err(Error::HistogramMismatch(format!(
                "{} histograms / {} weights for a {grid_rows}x{grid_cols} grid",
                counts.len(),
                weights.len()
            )));
        }
        let bins = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|h| h.len() != bins) {
            return Err(Error::HistogramMismatch("ragged bin counts".into()));
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::HistogramMismatch("negative region weight".into()));
        }
        Ok(Self {
            grid_rows,
            grid_cols,
            bins,
            counts,
            weights,
        })
    }

    /// Histograms of `ldp` over an even `grid_rows x grid_cols` partition
    /// (remainder pixels go to the last row/column of regions). Weights
    /// default to 1.
    pub fn from_ldp(
        ldp: &LdpImage,
        grid_rows: usize,
        grid_cols: usize,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || grid_rows > ldp.height || grid_cols > ldp.width {
            return Err(Error::HistogramMismatch(format!(
                "grid {grid_rows}x{grid_cols} does not fit {}x{}",
                ldp.height, ldp.width
            )));
        }
        let codes = attainable_codes(ldp.k);
        let mut bin_of = [usize::MAX; 256];
        for (i, &c) in codes.iter().enumerate() {
            bin_of[c as usize] = i;
        }
        let mut counts = vec![vec![0.0; codes.len()]; grid_rows * grid_cols];
        let (rh, cw) = (ldp.height / grid_rows, ldp.width / grid_cols);
        for r in 0..ldp.height {
            let gr = (r / rh).min(grid_rows - 1);
            for c in 0..ldp.width {
                let gc = (c / cw).min(grid_cols - 1);
                let bin = bin_of[ldp.get(r, c) as usize];
                debug_assert!(bin != usize::MAX);
                counts[gr * grid_cols + gc][bin] += 1.0;
            }
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; grid_rows * grid_cols]);
        Self::new(grid_rows, grid_cols, counts, weights)
    }
}

/// Region-weighted chi-square distance; `0/0` bins contribute nothing. The
/// weights of `s` are used.
pub fn weighted_chi_square(s: &RegionHistogramSet, m: &RegionHistogramSet) -> Result<f64> {
    if s.grid_rows != m.grid_rows || s.grid_cols != m.grid_cols || s.bins != m.bins {
        return Err(Error::HistogramMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            s.grid_rows, s.grid_cols, s.bins, m.grid_rows, m.grid_cols, m.bins
        )));
    }
    let mut total = 0.0;
    for ((hs, hm), &w) in s.counts.iter().zip(&m.counts).zip(&s.weights) {
        for (&a, &b) in hs.iter().zip(hm) {
            let denom = a + b;
            if denom != 0.0 {
                total += w * (a - b) * (a - b) / denom;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(values: [u8; 9]) -> GrayImage {
        GrayImage::new(3, 3, values.to_vec()).unwrap()
    }

    #[test]
    fn kernels_sum_to_zero_with_zero_center() {
        for k in KIRSCH_KERNELS {
            assert_eq!(k.iter().sum::<i32>(), 0);
            assert_eq!(k[4], 0);
        }
    }

    #[test]
    fn constant_neighborhood_has_zero_response() {
        assert_eq!(kirsch_edge_responses(&block([100; 9]), 1, 1).unwrap(), [0; 8]);
    }

    #[test]
    fn isolated_center_has_zero_response() {
        let mut v = [0u8; 9];
        v[4] = 255;
        assert_eq!(kirsch_edge_responses(&block(v), 1, 1).unwrap(), [0; 8]);
    }

    #[test]
    fn vertical_edge_matches_dot_products() {
        let img = block([0, 0, 255, 0, 0, 255, 0, 0, 255]);
        let got = kirsch_edge_responses(&img, 1, 1).unwrap();
        for (d, kernel) in KIRSCH_KERNELS.iter().enumerate() {
            let dot: i32 = kernel
                .iter()
                .zip(&img.pixels)
                .map(|(&w, &p)| w * p as i32)
                .sum();
            assert_eq!(got[d], dot);
        }
        // East sees the full edge.
        assert_eq!(got[0], 3 * 5 * 255);
    }

    #[test]
    fn border_pixel_rejected() {
        let img = block([0; 9]);
        assert!(matches!(
            kirsch_edge_responses(&img, 0, 1),
            Err(Error::OutOfBorder { .. })
        ));
        assert!(kirsch_edge_responses(&img, 1, 2).is_err());
    }

    #[test]
    fn code_examples() {
        assert_eq!(ldp_code(&[0; 8], 3).unwrap(), 7);
        assert_eq!(ldp_code(&[9, 1, 1, 1, 1, 1, 1, 10], 2).unwrap(), 129);
        assert_eq!(ldp_code(&[4, -7, 2, 0, 9, -1, 3, 5], 8).unwrap(), 255);
        assert_eq!(ldp_code(&[0, 0, -5, 0, 0, 0, 0, 0], 1).unwrap(), 4);
        assert!(matches!(ldp_code(&[0; 8], 0), Err(Error::InvalidK(0))));
        assert!(matches!(ldp_code(&[0; 8], 9), Err(Error::InvalidK(9))));
    }

    #[test]
    fn constant_image_codes() {
        let img = GrayImage::new(4, 5, vec![37; 20]).unwrap();
        let ldp = ldp_image(&img, 3).unwrap();
        assert_eq!((ldp.height, ldp.width), (4, 5));
        assert!(ldp.codes.iter().all(|&c| c == 7));
    }

    #[test]
    fn undersized_image_rejected() {
        let img = GrayImage::new(2, 5, vec![0; 10]).unwrap();
        assert!(matches!(
            ldp_image(&img, 3),
            Err(Error::UndersizedImage { .. })
        ));
    }

    #[test]
    fn ldp_tensor_keeps_shape_and_replicates() {
        let mut x = ImageTensor::zeros(2, 1, 3, 8, 8);
        for (i, v) in x.values.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 100.0;
        }
        let p = ldp_tensor(&x, 3).unwrap();
        assert_eq!(p.dims(), x.dims());
        assert_eq!(p.plane(1, 0, 0), p.plane(1, 0, 2));
        assert!(p.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn chi_square_examples() {
        let s = RegionHistogramSet::new(1, 1, vec![vec![2.0, 0.0]], vec![1.0]).unwrap();
        let m = RegionHistogramSet::new(1, 1, vec![vec![0.0, 2.0]], vec![1.0]).unwrap();
        assert_eq!(weighted_chi_square(&s, &s).unwrap(), 0.0);
        assert_eq!(weighted_chi_square(&s, &m).unwrap(), 4.0);
        let half = RegionHistogramSet::new(1, 1, vec![vec![2.0, 0.0]], vec![0.5]).unwrap();
        assert_eq!(weighted_chi_square(&half, &m).unwrap(), 2.0);
    }

    #[test]
    fn chi_square_grid_mismatch() {
        let s = RegionHistogramSet::new(1, 1, vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        let m = RegionHistogramSet::new(1, 2, vec![vec![1.0, 0.0]; 2], vec![1.0; 2]).unwrap();
        assert!(matches!(
            weighted_chi_square(&s, &m),
            Err(Error::HistogramMismatch(_))
        ));
    }

    #[test]
    fn histograms_count_region_pixels() {
        let pixels: Vec<u8> = (0..64).map(|i| ((i * 53) % 256) as u8).collect();
        let ldp = ldp_image(&GrayImage::new(8, 8, pixels).unwrap(), 3).unwrap();
        let h = RegionHistogramSet::from_ldp(&ldp, 2, 2, None).unwrap();
        assert_eq!(h.bins, 56);
        for region in &h.counts {
            assert_eq!(region.iter().sum::<f64>(), 16.0);
        }
    }
}
