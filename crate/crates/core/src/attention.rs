//! Class activation maps, lung-mask clean-up and the attention-inside-lungs
//! (AIL) score.
//!
//! AIL is the share of a CAM's total mass that falls on lung pixels:
//! `sum(A * M) / sum(A)`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classify::Classifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Grid};
use crate::nn;
use crate::tensor::Scalar;

/// Nonnegative attention per pixel.
pub type AttentionMap = Grid<f32>;
/// `true` marks a lung pixel.
pub type LungMask = Grid<bool>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub cam_clamp: bool,
    pub min_area_fraction: f64,
    pub closing_radius: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            cam_clamp: true,
            min_area_fraction: 0.01,
            closing_radius: 2,
        }
    }
}

impl AttentionConfig {
    /// Defaults are tuned for 64-pixel images; the closing radius scales
    /// linearly with the side.
    pub fn for_side(side: usize) -> Self {
        Self {
            closing_radius: ((2 * side) as f64 / 64.0).round().max(1.0) as usize,
            ..Self::default()
        }
    }
}

/// Weighted sum of last-stage feature maps for one class, `[h, w]`.
fn class_map(weights: &[f32], maps: &[f32], hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; hw];
    for (w, plane) in weights.iter().zip(maps.chunks(hw)) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += w * v;
        }
    }
    out
}

/// CAMs for the predicted class of each image, upsampled to image size.
pub fn compute_cams(model: &Classifier, images: &[&Grid<u8>], clamp: bool) -> Result<Vec<AttentionMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let batch = crate::data::images_to_batch(chunk.iter().copied())?;
        let (maps, logits) = model.forward_eval(&batch)?;
        if !maps.is_finite() {
            return Err(Error::Numeric("feature maps".into()));
        }
        let preds = nn::argmax_rows(&logits);
        let (k, h, w) = (maps.dim(1), maps.dim(2), maps.dim(3));
        let head = model.head_weight()?;
        for (i, (&c, img)) in preds.iter().zip(chunk).enumerate() {
            let wrow = &head.data()[c * k..(c + 1) * k];
            let mut raw = class_map(wrow, &maps.data()[i * k * h * w..(i + 1) * k * h * w], h * w);
            if clamp {
                raw.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let raw = Grid::from_vec(h, w, raw)?;
            out.push(resize_bilinear(&raw, img.rows(), img.cols()));
        }
    }
    Ok(out)
}

pub fn compute_cam(model: &Classifier, image: &Grid<u8>, clamp: bool) -> Result<AttentionMap> {
    Ok(compute_cams(model, &[image], clamp)?.remove(0))
}

/// Connected components under 8-connectivity, as pixel index lists in
/// raster order of their first pixel.
pub fn connected_components(mask: &Grid<bool>) -> Vec<Vec<usize>> {
    let (rows, cols) = mask.shape();
    let mut seen = vec![false; rows * cols];
    let mut comps = Vec::new();
    for start in 0..rows * cols {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = ((p / cols) as isize, (p % cols) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let q = nr as usize * cols + nc as usize;
                    if mask.data()[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation and erosion with a disc; out-of-image neighbours are ignored,
/// which makes the pair an adjunction and closing idempotent.
fn morph(mask: &Grid<bool>, radius: usize, dilate: bool) -> Grid<bool> {
    let (rows, cols) = mask.shape();
    let offsets = disc_offsets(radius);
    Grid::from_fn(rows, cols, |r, c| {
        let mut hits = offsets.iter().filter_map(|&(dy, dx)| {
            let (nr, nc) = (r as isize + dy, c as isize + dx);
            (nr >= 0 && nc >= 0 && nr < rows as isize && nc < cols as isize)
                .then(|| mask.get(nr as usize, nc as usize))
        });
        if dilate {
            hits.any(|v| v)
        } else {
            hits.all(|v| v)
        }
    })
}

pub fn binary_closing(mask: &Grid<bool>, radius: usize) -> Grid<bool> {
    if radius == 0 {
        return mask.clone();
    }
    morph(&morph(mask, radius, true), radius, false)
}

/// Keep the (at most two) largest 8-connected components whose area is at
/// least `min_area_fraction * H * W`, then close with a disc.
pub fn postprocess_mask(raw: &Grid<bool>, min_area_fraction: f64, closing_radius: usize) -> Result<LungMask> {
    let (rows, cols) = raw.shape();
    let min_area = min_area_fraction * (rows * cols) as f64;
    let mut comps: Vec<Vec<usize>> = connected_components(raw)
        .into_iter()
        .filter(|c| c.len() as f64 >= min_area)
        .collect();
    if comps.is_empty() {
        return Err(Error::EmptyMask);
    }
    // stable sort keeps raster order among equal areas
    comps.sort_by(|a, b| b.len().cmp(&a.len()));
    let mut kept = Grid::new(rows, cols, false);
    for comp in comps.iter().take(2) {
        for &p in comp {
            kept.data_mut()[p] = true;
        }
    }
    Ok(binary_closing(&kept, closing_radius))
}

/// Attention inside the lungs, accumulated in f64. Maps are usually f32;
/// f64 maps are accepted so scaled copies can be formed without rounding.
pub fn ail<T: Scalar>(attention: &Grid<T>, mask: &LungMask) -> Result<f64> {
    attention.check_same_shape(mask)?;
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for (&a, &m) in attention.data().iter().zip(mask.data()) {
        let a = a.f64();
        total += a;
        if m {
            inside += a;
        }
    }
    if total == 0.0 {
        return Err(Error::ZeroAttention);
    }
    Ok(inside / total)
}

/// Pairwise (cascade) summation; the result does not depend on how the
/// caller happened to accumulate.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AilOutcome {
    Score(f64),
    Excluded(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanAil {
    pub mean: f64,
    pub per_image: BTreeMap<String, AilOutcome>,
    /// Images whose attention summed to zero.
    pub excluded: usize,
    /// Images without a mask.
    pub skipped: usize,
}

impl MeanAil {
    pub fn from_outcomes(per_image: BTreeMap<String, AilOutcome>) -> Result<Self> {
        let scores: Vec<f64> = per_image
            .values()
            .filter_map(|o| match o {
                AilOutcome::Score(s) => Some(*s),
                AilOutcome::Excluded(_) => None,
            })
            .collect();
        if scores.is_empty() {
            return Err(Error::Empty("no image produced a valid AIL score".into()));
        }
        let excluded = per_image
            .values()
            .filter(|o| matches!(o, AilOutcome::Excluded(r) if r == "zero_attention"))
            .count();
        let skipped = per_image
            .values()
            .filter(|o| matches!(o, AilOutcome::Excluded(r) if r == "missing_mask"))
            .count();
        Ok(Self {
            mean: pairwise_sum(&scores) / scores.len() as f64,
            per_image,
            excluded,
            skipped,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ail,excluded_reason\n");
        for (id, o) in &self.per_image {
            match o {
                AilOutcome::Score(s) => writeln!(out, "{id},{s:.9},").expect("string write"),
                AilOutcome::Excluded(r) => writeln!(out, "{id},,{r}").expect("string write"),
            }
        }
        out
    }
}

/// Mean AIL of `model` over `dataset`; images without masks are skipped and
/// zero-attention images are excluded, both are counted.
pub fn mean_ail(
    model: &Classifier,
    dataset: &Dataset,
    masks: &BTreeMap<String, LungMask>,
    clamp: bool,
) -> Result<MeanAil> {
    let mut per_image = BTreeMap::new();
    let with_mask: Vec<_> = dataset
        .samples
        .iter()
        .filter(|s| {
            let has = masks.contains_key(&s.id);
            if !has {
                per_image.insert(s.id.clone(), AilOutcome::Excluded("missing_mask".into()));
            }
            has
        })
        .collect();
    let images: Vec<&Grid<u8>> = with_mask.iter().map(|s| &s.pixels).collect();
    let cams = if images.is_empty() { Vec::new() } else { compute_cams(model, &images, clamp)? };
    for (s, cam) in with_mask.iter().zip(&cams) {
        let outcome = match ail(cam, &masks[&s.id]) {
            Ok(v) => AilOutcome::Score(v),
            Err(Error::ZeroAttention) => AilOutcome::Excluded("zero_attention".into()),
            Err(e) => return Err(e),
        };
        per_image.insert(s.id.clone(), outcome);
    }
    MeanAil::from_outcomes(per_image)
}

/// Zero the lung pixels.
pub fn inverse_segment(image: &Grid<u8>, mask: &LungMask) -> Result<Grid<u8>> {
    image.zip_map(mask, |p, m| if m { 0 } else { p })
}

/// Zero everything outside the lungs.
pub fn lung_only(image: &Grid<u8>, mask: &LungMask) -> Result<Grid<u8>> {
    image.zip_map(mask, |p, m| if m { p } else { 0 })
}

pub const F32G_MAGIC: &[u8; 4] = b"F32G";

pub fn encode_f32g(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * grid.data().len());
    out.extend_from_slice(F32G_MAGIC);
    out.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32g(bytes: &[u8]) -> Result<Grid<f32>> {
    if bytes.len() < 12 || &bytes[..4] != F32G_MAGIC {
        return Err(Error::Format("missing F32G header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "F32G body has {} bytes for {rows}x{cols}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Grid::from_vec(rows, cols, data)
}

pub fn write_f32g(path: &Path, grid: &Grid<f32>) -> Result<()> {
    fs::write(path, encode_f32g(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_f32g(path: &Path) -> Result<Grid<f32>> {
    decode_f32g(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One row per grid row, values with 9 significant digits.
pub fn cam_to_csv(grid: &Grid<f32>) -> String {
    let mut out = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> = (0..grid.cols()).map(|c| format!("{:.8e}", grid.get(r, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Grid<bool> {
        let cols = rows[0].len();
        Grid::from_vec(
            rows.len(),
            cols,
            rows.iter().flat_map(|r| r.chars().map(|ch| ch == '#')).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ail_worked_examples() {
        let uniform = Grid::new(2, 2, 1.0f32);
        let m = Grid::from_vec(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(ail(&uniform, &m).unwrap(), 0.25);
        let full = Grid::new(2, 2, true);
        let a = Grid::from_vec(2, 2, vec![0.3f32, 0.1, 2.0, 0.7]).unwrap();
        assert_eq!(ail(&a, &full).unwrap(), 1.0);
        let a = Grid::from_vec(2, 2, vec![0.5f32, 0.5, 1.0, 0.0]).unwrap();
        let m = Grid::from_vec(2, 2, vec![true, true, false, false]).unwrap();
        assert_eq!(ail(&a, &m).unwrap(), 0.5);
    }

    #[test]
    fn zero_attention_is_an_error() {
        let a = Grid::new(3, 3, 0.0f32);
        assert!(matches!(ail(&a, &Grid::new(3, 3, true)), Err(Error::ZeroAttention)));
    }

    #[test]
    fn ail_shape_mismatch() {
        assert!(matches!(ail(&Grid::new(2, 2, 1.0), &Grid::new(3, 2, true)), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_over_valid_images_only() {
        let mut per = BTreeMap::new();
        per.insert("a".to_string(), AilOutcome::Score(0.2));
        per.insert("b".to_string(), AilOutcome::Score(0.6));
        per.insert("c".to_string(), AilOutcome::Excluded("zero_attention".into()));
        let m = MeanAil::from_outcomes(per).unwrap();
        assert!((m.mean - 0.4).abs() < 1e-15);
        assert_eq!(m.excluded, 1);
        assert_eq!(m.skipped, 0);
        assert!(m.to_csv().contains("c,,zero_attention"));
    }

    #[test]
    fn small_component_removed() {
        // 40x40 block (1600 px) and a 5x8 block (40 px); threshold 100 px
        let g = Grid::from_fn(64, 64, |r, c| (5..45).contains(&r) && (5..45).contains(&c) || (55..60).contains(&r) && (50..58).contains(&c));
        let out = postprocess_mask(&g, 100.0 / 4096.0, 0).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v).count(), 1600);
        assert!(!out.get(57, 52));
    }

    #[test]
    fn hole_is_closed() {
        let mut g = Grid::from_fn(20, 20, |r, c| (3..17).contains(&r) && (3..17).contains(&c));
        g.set(9, 9, false);
        let out = postprocess_mask(&g, 0.01, 1).unwrap();
        assert!(out.get(9, 9));
    }

    #[test]
    fn only_two_largest_survive() {
        let m = mask_from(&[
            "##....###....####",
            "##....###....####",
            "##....###....####",
        ]);
        let out = postprocess_mask(&m, 0.0, 0).unwrap();
        assert!(!out.get(0, 0));
        assert!(out.get(0, 6) && out.get(0, 13));
    }

    #[test]
    fn nothing_large_enough() {
        let m = mask_from(&["#...", "....", "...."]);
        assert!(matches!(postprocess_mask(&m, 0.5, 1), Err(Error::EmptyMask)));
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = mask_from(&["#..", ".#.", "..#"]);
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn inverse_segment_rules() {
        let img = Grid::from_fn(4, 4, |r, c| (r * 4 + c) as u8 + 1);
        assert!(inverse_segment(&img, &Grid::new(4, 4, true)).unwrap().data().iter().all(|&v| v == 0));
        assert_eq!(inverse_segment(&img, &Grid::new(4, 4, false)).unwrap(), img);
        assert!(matches!(inverse_segment(&img, &Grid::new(3, 4, false)), Err(Error::Shape(_))));
    }

    #[test]
    fn f32g_round_trip() {
        let g = Grid::from_fn(3, 5, |r, c| r as f32 * 0.1 - c as f32);
        let bytes = encode_f32g(&g);
        assert_eq!(&bytes[..4], b"F32G");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(decode_f32g(&bytes).unwrap(), g);
        assert!(decode_f32g(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn csv_has_nine_significant_digits() {
        let g = Grid::from_vec(1, 1, vec![1.0f32 / 3.0]).unwrap();
        assert_eq!(cam_to_csv(&g), "3.33333343e-1\n");
    }
}
