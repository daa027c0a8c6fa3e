use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffmath::{softmax, DenseArray, NormMode, Scalar};
use crate::error::{Error, Result};
use crate::projectors::{
    project_image, project_text, FeatureGrid, ProjectedTextBank, ProjectorParams, TextBank,
};

/// Class id reserved for background pixels.
pub const BACKGROUND: u16 = u16::MAX;
pub const DEFAULT_BG_THRESHOLD: f64 = 0.85;
/// Temperature applied to cosines before the per-pixel class softmax.
pub const DEFAULT_SEGMENT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub out_size: (usize, usize),
    pub bg_threshold: f64,
    pub softmax_scale: f64,
}

impl SegmentOptions {
    pub fn new(out_size: (usize, usize)) -> Self {
        Self {
            out_size,
            bg_threshold: DEFAULT_BG_THRESHOLD,
            softmax_scale: DEFAULT_SEGMENT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub class_ids: Vec<u16>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, n_classes: usize, class_ids: Vec<u16>) -> Result<Self> {
        if class_ids.len() != height * width {
            return Err(Error::dim(format!(
                "{} ids for a {height}×{width} mask",
                class_ids.len()
            )));
        }
        if n_classes >= BACKGROUND as usize {
            return Err(Error::OutOfRange(format!(
                "{n_classes} classes exceed the id range"
            )));
        }
        if let Some(bad) = class_ids
            .iter()
            .find(|&&c| c != BACKGROUND && c as usize >= n_classes)
        {
            return Err(Error::OutOfRange(format!(
                "class id {bad} with {n_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            n_classes,
            class_ids,
        })
    }

    pub fn background(height: usize, width: usize, n_classes: usize) -> Self {
        Self {
            height,
            width,
            n_classes,
            class_ids: vec![BACKGROUND; height * width],
        }
    }

    pub fn get(&self, h: usize, w: usize) -> u16 {
        self.class_ids[h * self.width + w]
    }

    /// Binary PGM with 0 for background and `c + 1` for class `c`.
    pub fn write_pgm(&self, mut out: impl Write) -> Result<()> {
        let maxval = self.n_classes.max(1);
        write!(out, "P5\n{} {}\n{}\n", self.width, self.height, maxval)?;
        let code = |c: u16| if c == BACKGROUND { 0 } else { c as usize + 1 };
        if maxval < 256 {
            let bytes: Vec<u8> = self.class_ids.iter().map(|&c| code(c) as u8).collect();
            out.write_all(&bytes)?;
        } else {
            for &c in &self.class_ids {
                out.write_all(&(code(c) as u16).to_be_bytes())?;
            }
        }
        Ok(())
    }
}

/// Bilinear resize of an `h×w` map with half-pixel centres and no corner
/// alignment. Sample positions are clamped to the border.
pub fn upsample_bilinear(
    map: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "{} values for a {h}×{w} map",
            map.len()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("output size must be at least 1×1".into()));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src =
                    ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(inp - 1), src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
            let top = lerp(map[y0 * w + x0], map[y0 * w + x1], fx);
            let bottom = lerp(map[y1 * w + x0], map[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Ok(out)
}

/// Mask from per-location class scores `[H, W, N]` (cosines): scaled softmax
/// over classes, bilinear upsampling of each probability map, then argmax with
/// the lowest index winning ties, or background below `bg_threshold`.
pub fn segment_scores(scores: &DenseArray<f64>, opts: &SegmentOptions) -> Result<SegmentationMask> {
    let &[h, w, n] = scores.shape() else {
        return Err(Error::dim(format!(
            "scores must be [H, W, N], got {:?}",
            scores.shape()
        )));
    };
    let (oh, ow) = opts.out_size;
    let scaled = DenseArray::new(
        vec![h * w, n],
        scores
            .values()
            .iter()
            .map(|v| v * opts.softmax_scale)
            .collect(),
    )?;
    let probs = softmax(&scaled, 1)?;
    let maps: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let m: Vec<f64> = (0..h * w).map(|l| probs.values()[l * n + c]).collect();
            upsample_bilinear(&m, h, w, oh, ow)
        })
        .collect::<Result<_>>()?;
    let ids = (0..oh * ow)
        .map(|px| {
            let mut best = 0;
            for c in 1..n {
                if maps[c][px] > maps[best][px] {
                    best = c;
                }
            }
            if maps[best][px] < opts.bg_threshold {
                BACKGROUND
            } else {
                best as u16
            }
        })
        .collect();
    SegmentationMask::new(oh, ow, n, ids)
}

/// Segments one grid against already projected text.
pub fn segment_projected<T: Scalar>(
    grid: &FeatureGrid,
    text: &ProjectedTextBank<T>,
    params: &ProjectorParams<T>,
    opts: &SegmentOptions,
) -> Result<SegmentationMask> {
    let z = project_image(grid, params)?;
    let pos = text.positive();
    let (n, dp) = pos.dims2()?;
    let locs = grid.locations();
    let mut scores = Vec::with_capacity(locs * n);
    for l in 0..locs {
        let zl = &z.values()[l * dp..(l + 1) * dp];
        for c in 0..n {
            scores.push(
                zl.iter()
                    .zip(pos.row(c))
                    .map(|(a, b)| a.widen() * b.widen())
                    .sum(),
            );
        }
    }
    segment_scores(
        &DenseArray::new(vec![grid.height, grid.width, n], scores)?,
        opts,
    )
}

/// Projects the bank's positive prompts in eval mode and segments `grid`.
pub fn segment<T: Scalar>(
    grid: &FeatureGrid,
    bank: &TextBank,
    params: &ProjectorParams<T>,
    opts: &SegmentOptions,
) -> Result<SegmentationMask> {
    let text = project_text(bank, params, NormMode::Eval)?;
    segment_projected(grid, &text, params, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// `(class id, IoU)` for classes present in either mask, ascending id.
    pub per_class: Vec<(u16, f64)>,
    /// `None` when no class was evaluated.
    pub mean: Option<f64>,
}

pub fn miou(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    include_background: bool,
) -> Result<MiouResult> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(format!(
            "mask shapes {}×{} and {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let n = pred.n_classes.max(gt.n_classes);
    // Slot n is background.
    let slot = |c: u16| if c == BACKGROUND { n } else { c as usize };
    let mut inter = vec![0usize; n + 1];
    let mut union = vec![0usize; n + 1];
    for (&p, &g) in pred.class_ids.iter().zip(&gt.class_ids) {
        let (p, g) = (slot(p), slot(g));
        union[p] += 1;
        if p == g {
            inter[p] += 1;
        } else {
            union[g] += 1;
        }
    }
    let mut per_class = Vec::new();
    for c in 0..=n {
        if union[c] == 0 || (c == n && !include_background) {
            continue;
        }
        let id = if c == n { BACKGROUND } else { c as u16 };
        per_class.push((id, inter[c] as f64 / union[c] as f64));
    }
    let mean = (!per_class.is_empty())
        .then(|| per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64);
    Ok(MiouResult { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_upsamples_exactly() {
        let m = vec![0.3; 6];
        for (oh, ow) in [(1, 1), (5, 7), (13, 2)] {
            let up = upsample_bilinear(&m, 2, 3, oh, ow).unwrap();
            assert!(up.iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let m: Vec<f64> = (0..12).map(|v| v as f64 * 0.7).collect();
        assert_eq!(upsample_bilinear(&m, 3, 4, 3, 4).unwrap(), m);
    }

    #[test]
    fn half_pixel_doubling() {
        // 1×2 map [0, 1] to 1×4: centres at -0.25, 0.25, 0.75, 1.25.
        let up = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4).unwrap();
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_output_rejected() {
        assert!(upsample_bilinear(&[1.0], 1, 1, 0, 3).is_err());
    }

    fn scores(vals: Vec<f64>, h: usize, w: usize, n: usize) -> DenseArray<f64> {
        DenseArray::new(vec![h, w, n], vals).unwrap()
    }

    #[test]
    fn argmax_tie_and_threshold() {
        let s = scores(vec![0.5, 0.5, 0.1, 0.9], 1, 2, 2);
        let opts = SegmentOptions {
            out_size: (1, 2),
            bg_threshold: 0.0,
            softmax_scale: 10.0,
        };
        assert_eq!(segment_scores(&s, &opts).unwrap().class_ids, vec![0, 1]);
        let opts = SegmentOptions {
            bg_threshold: 1.0 + 1e-9,
            ..opts
        };
        assert_eq!(
            segment_scores(&s, &opts).unwrap().class_ids,
            vec![BACKGROUND; 2]
        );
    }

    #[test]
    fn mask_validation() {
        assert!(SegmentationMask::new(1, 2, 3, vec![0, 3]).is_err());
        assert!(SegmentationMask::new(1, 2, 3, vec![0]).is_err());
        assert!(SegmentationMask::new(1, 2, 3, vec![2, BACKGROUND]).is_ok());
    }

    #[test]
    fn miou_cases() {
        let a = SegmentationMask::new(1, 4, 2, vec![0, 0, 1, BACKGROUND]).unwrap();
        assert_eq!(miou(&a, &a, true).unwrap().mean, Some(1.0));
        let b = SegmentationMask::new(1, 4, 2, vec![1, 1, 1, BACKGROUND]).unwrap();
        let r = miou(&a, &b, false).unwrap();
        // class 0: 0/2, class 1: 1/3
        assert_eq!(r.per_class, vec![(0, 0.0), (1, 1.0 / 3.0)]);
        let with_bg = miou(&a, &b, true).unwrap();
        assert_eq!(with_bg.per_class.len(), 3);
        let x = SegmentationMask::new(1, 2, 2, vec![0, 0]).unwrap();
        let y = SegmentationMask::new(1, 2, 2, vec![1, 1]).unwrap();
        assert_eq!(miou(&x, &y, false).unwrap().mean, Some(0.0));
        let bg = SegmentationMask::background(1, 2, 2);
        assert_eq!(miou(&bg, &bg, false).unwrap().mean, None);
    }

    #[test]
    fn pgm_header() {
        let m = SegmentationMask::new(1, 2, 3, vec![BACKGROUND, 2]).unwrap();
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        assert_eq!(buf, b"P5\n2 1\n3\n\x00\x03");
    }
}
