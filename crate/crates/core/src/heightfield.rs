//! Height fields over a flat glass substrate and the printed-filament
//! distribution used to generate them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Grid;

/// Minimum width/height a perturbed line is clamped to (0.01 mm).
pub const PERTURB_FLOOR: f64 = 1e-5;

/// `n x n` surface elevations (meters) above the top of a substrate of
/// thickness `base_thickness`. Texel `(row, col)` sits at the center of its
/// cell; rows run along +y, columns along +x, and the field is centered on
/// the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    n: usize,
    heights: Vec<f64>,
    extent: (f64, f64),
    base_thickness: f64,
}

impl HeightField {
    pub fn new_flat(n: usize, extent: (f64, f64), base_thickness: f64) -> Result<Self> {
        Self::from_heights(n, vec![0.0; n * n], extent, base_thickness)
    }

    pub fn from_heights(n: usize, heights: Vec<f64>, extent: (f64, f64), base_thickness: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("height field needs n >= 2, got {n}")));
        }
        if heights.len() != n * n {
            return Err(Error::shape(format!("{} heights for a {n}x{n} field", heights.len())));
        }
        if !(extent.0 > 0.0 && extent.1 > 0.0 && extent.0.is_finite() && extent.1.is_finite()) {
            return Err(Error::invalid(format!("extent must be positive, got {extent:?}")));
        }
        if !(base_thickness > 0.0 && base_thickness.is_finite()) {
            return Err(Error::invalid(format!("base thickness must be positive, got {base_thickness}")));
        }
        if let Some(bad) = heights.iter().find(|h| !(h.is_finite() && **h >= 0.0)) {
            return Err(Error::invalid(format!("heights must be finite and >= 0, found {bad}")));
        }
        Ok(Self { n, heights, extent, base_thickness })
    }

    /// Same geometry as `self` with new heights; negative values are clamped to zero.
    pub fn with_heights_clamped(&self, heights: Vec<f64>) -> Result<Self> {
        let heights = heights.into_iter().map(|h| if h > 0.0 { h } else { 0.0 }).collect();
        Self::from_heights(self.n, heights, self.extent, self.base_thickness)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn extent(&self) -> (f64, f64) {
        self.extent
    }

    pub fn base_thickness(&self) -> f64 {
        self.base_thickness
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.n + col]
    }

    pub fn texel_size(&self) -> (f64, f64) {
        (self.extent.0 / self.n as f64, self.extent.1 / self.n as f64)
    }

    pub fn texel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (dx, dy) = self.texel_size();
        (-0.5 * self.extent.0 + (col as f64 + 0.5) * dx, -0.5 * self.extent.1 + (row as f64 + 0.5) * dy)
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(0.0, f64::max)
    }

    /// Sum of elevations times texel area (m^3).
    pub fn volume(&self) -> f64 {
        let (dx, dy) = self.texel_size();
        self.heights.iter().sum::<f64>() * dx * dy
    }

    pub fn same_geometry(&self, other: &HeightField) -> bool {
        self.n == other.n && self.extent == other.extent && self.base_thickness == other.base_thickness
    }

    /// Rounds every height through f32, the on-disk precision.
    pub fn quantized(&self) -> HeightField {
        let heights = self.heights.iter().map(|&h| h as f32 as f64).collect();
        HeightField { heights, ..self.clone() }
    }

    /// Adds one filament with a cosine cross-section. Texels at distance `u`
    /// from the center segment (rounded caps) gain `a * cos(pi * u / w)` while
    /// `u <= w / 2`.
    pub fn add_line(&mut self, line: &LineSpec) {
        let (dx, dy) = self.texel_size();
        let half_w = 0.5 * line.width;
        let lo_x = line.start[0].min(line.end[0]) - half_w;
        let hi_x = line.start[0].max(line.end[0]) + half_w;
        let lo_y = line.start[1].min(line.end[1]) - half_w;
        let hi_y = line.start[1].max(line.end[1]) + half_w;
        let to_col = |x: f64| (x + 0.5 * self.extent.0) / dx - 0.5;
        let to_row = |y: f64| (y + 0.5 * self.extent.1) / dy - 0.5;
        let n = self.n as isize;
        let c0 = (to_col(lo_x).floor() as isize).clamp(0, n - 1) as usize;
        let c1 = (to_col(hi_x).ceil() as isize).clamp(0, n - 1) as usize;
        let r0 = (to_row(lo_y).floor() as isize).clamp(0, n - 1) as usize;
        let r1 = (to_row(hi_y).ceil() as isize).clamp(0, n - 1) as usize;
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = self.texel_center(row, col);
                let u = distance_to_segment(p, line.start, line.end);
                if u <= half_w {
                    self.heights[row * self.n + col] +=
                        line.height * (std::f64::consts::PI * u / line.width).cos().max(0.0);
                }
            }
        }
    }

    pub fn from_lines(n: usize, extent: (f64, f64), base_thickness: f64, lines: &[LineSpec]) -> Result<Self> {
        let mut field = Self::new_flat(n, extent, base_thickness)?;
        for line in lines {
            field.add_line(line);
        }
        Ok(field)
    }

    /// Converts a `[0, 1]` grayscale image into elevations `value * height_scale`,
    /// bilinearly resampled to `n x n`.
    pub fn from_grayscale(
        image: &[f64],
        rows: usize,
        cols: usize,
        height_scale: f64,
        n: usize,
        extent: (f64, f64),
        base_thickness: f64,
    ) -> Result<Self> {
        if image.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::shape(format!("{} pixels for a {rows}x{cols} image", image.len())));
        }
        if let Some(bad) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("grayscale values must lie in [0, 1], found {bad}")));
        }
        if !(height_scale >= 0.0 && height_scale.is_finite()) {
            return Err(Error::invalid(format!("height scale must be >= 0, got {height_scale}")));
        }
        let mut heights = vec![0.0; n * n];
        for r in 0..n {
            let sy = ((r as f64 + 0.5) * rows as f64 / n as f64 - 0.5).clamp(0.0, (rows - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(rows - 1);
            let ty = sy - y0 as f64;
            for c in 0..n {
                let sx = ((c as f64 + 0.5) * cols as f64 / n as f64 - 0.5).clamp(0.0, (cols - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(cols - 1);
                let tx = sx - x0 as f64;
                let top = (1.0 - tx) * image[y0 * cols + x0] + tx * image[y0 * cols + x1];
                let bot = (1.0 - tx) * image[y1 * cols + x0] + tx * image[y1 * cols + x1];
                heights[r * n + c] = height_scale * ((1.0 - ty) * top + ty * bot);
            }
        }
        Self::from_heights(n, heights, extent, base_thickness)
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_f64(1, self.n, self.n, &self.heights).expect("consistent dims")
    }

    pub fn from_grid(grid: &Grid, extent: (f64, f64), base_thickness: f64) -> Result<Self> {
        if grid.channels != 1 || grid.rows != grid.cols {
            return Err(Error::shape(format!(
                "height field grid must be 1 x n x n, got {}x{}x{}",
                grid.channels, grid.rows, grid.cols
            )));
        }
        Self::from_heights(grid.rows, grid.to_f64(), extent, base_thickness)
    }
}

fn distance_to_segment(p: (f64, f64), a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p.0 - a[0], p.1 - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (apx - t * abx, apy - t * aby);
    (qx * qx + qy * qy).sqrt()
}

/// One straight filament: center segment, full width and peak height (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub width: f64,
    pub height: f64,
}

impl LineSpec {
    pub fn new(start: [f64; 2], end: [f64; 2], width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::invalid(format!("line width/height must be > 0, got {width}/{height}")));
        }
        if start == end {
            return Err(Error::invalid("line start and end coincide"));
        }
        Ok(Self { start, end, width, height })
    }
}

/// Sampling ranges for random line fields. Defaults follow the printed-glass
/// process values (substrate 5 cm, filaments up to 4 mm wide and 2 mm high).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFieldRanges {
    pub n_lines: (usize, usize),
    /// Bounds applied to both coordinates of start and end points.
    pub position: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    /// Symmetric offset bounds used when perturbing an existing layout.
    pub offset_position: f64,
    pub offset_width: f64,
    pub offset_height: f64,
}

impl Default for LineFieldRanges {
    fn default() -> Self {
        Self {
            n_lines: (2, 30),
            position: (-0.025, 0.025),
            width: (1e-4, 4e-3),
            height: (1e-4, 2e-3),
            offset_position: 2.5e-3,
            offset_width: 1e-3,
            offset_height: 1e-3,
        }
    }
}

impl LineFieldRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_lines.0 <= self.n_lines.1
            && self.position.0 <= self.position.1
            && 0.0 < self.width.0
            && self.width.0 <= self.width.1
            && 0.0 < self.height.0
            && self.height.0 <= self.height.1
            && self.offset_position >= 0.0
            && self.offset_width >= 0.0
            && self.offset_height >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid line field ranges {self:?}")))
        }
    }

    pub fn sample_line<R: Rng + ?Sized>(&self, rng: &mut R) -> LineSpec {
        let (lo, hi) = self.position;
        loop {
            let start = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
            let end = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
            let width = rng.gen_range(self.width.0..=self.width.1);
            let height = rng.gen_range(self.height.0..=self.height.1);
            if start != end || lo == hi {
                return LineSpec { start, end, width, height };
            }
        }
    }

    pub fn sample_lines<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<LineSpec> {
        let count = rng.gen_range(self.n_lines.0..=self.n_lines.1);
        (0..count).map(|_| self.sample_line(rng)).collect()
    }
}

/// Draws a random line layout and rasterizes it. The specs are returned so
/// the layout can be perturbed or reproduced later.
pub fn sample_line_field<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &LineFieldRanges,
    n: usize,
    extent: (f64, f64),
    base_thickness: f64,
) -> Result<(HeightField, Vec<LineSpec>)> {
    ranges.validate()?;
    let lines = ranges.sample_lines(rng);
    let field = HeightField::from_lines(n, extent, base_thickness, &lines)?;
    Ok((field, lines))
}

/// Offsets every line by uniform draws from the symmetric offset ranges,
/// clamping positions to the substrate and widths/heights to [`PERTURB_FLOOR`].
pub fn perturb_lines<R: Rng + ?Sized>(
    lines: &[LineSpec],
    rng: &mut R,
    ranges: &LineFieldRanges,
    extent: (f64, f64),
) -> Vec<LineSpec> {
    let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let (hx, hy) = (0.5 * extent.0, 0.5 * extent.1);
    lines
        .iter()
        .map(|l| {
            let mut start = l.start;
            let mut end = l.end;
            start[0] = (start[0] + sym(rng, ranges.offset_position)).clamp(-hx, hx);
            start[1] = (start[1] + sym(rng, ranges.offset_position)).clamp(-hy, hy);
            end[0] = (end[0] + sym(rng, ranges.offset_position)).clamp(-hx, hx);
            end[1] = (end[1] + sym(rng, ranges.offset_position)).clamp(-hy, hy);
            let width = (l.width + sym(rng, ranges.offset_width)).max(PERTURB_FLOOR);
            let height = (l.height + sym(rng, ranges.offset_height)).max(PERTURB_FLOOR);
            LineSpec { start, end, width, height }
        })
        .collect()
}

pub fn perturb_line_field<R: Rng + ?Sized>(
    lines: &[LineSpec],
    rng: &mut R,
    ranges: &LineFieldRanges,
    n: usize,
    extent: (f64, f64),
    base_thickness: f64,
) -> Result<(HeightField, Vec<LineSpec>)> {
    if lines.is_empty() {
        return Err(Error::invalid("cannot perturb an empty line layout"));
    }
    let moved = perturb_lines(lines, rng, ranges, extent);
    let field = HeightField::from_lines(n, extent, base_thickness, &moved)?;
    Ok((field, moved))
}

/// Fixed layout of five non-overlapping filaments on a 5 cm substrate.
pub fn handpicked_lines() -> Vec<LineSpec> {
    vec![
        LineSpec { start: [-0.020, -0.017], end: [0.020, -0.017], width: 2.0e-3, height: 1.0e-3 },
        LineSpec { start: [-0.018, -0.007], end: [0.016, -0.007], width: 3.0e-3, height: 1.5e-3 },
        LineSpec { start: [-0.020, 0.003], end: [0.012, 0.003], width: 1.5e-3, height: 0.8e-3 },
        LineSpec { start: [-0.012, 0.010], end: [-0.012, 0.021], width: 2.5e-3, height: 1.2e-3 },
        LineSpec { start: [0.008, 0.010], end: [0.018, 0.021], width: 3.5e-3, height: 2.0e-3 },
    ]
}

/// Procedural stand-ins for photographic grayscale test images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrayPattern {
    Rings,
    Blobs,
    Weave,
}

impl GrayPattern {
    pub const ALL: [GrayPattern; 3] = [GrayPattern::Rings, GrayPattern::Blobs, GrayPattern::Weave];

    /// Renders the pattern as a `size x size` image with values in `[0, 1]`.
    pub fn render(self, size: usize) -> Vec<f64> {
        use std::f64::consts::PI;
        let mut img = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                let u = (c as f64 + 0.5) / size as f64 - 0.5;
                let v = (r as f64 + 0.5) / size as f64 - 0.5;
                let value = match self {
                    GrayPattern::Rings => {
                        let rad = (u * u + v * v).sqrt();
                        let env = (1.0 - 2.0 * rad).clamp(0.0, 1.0);
                        0.5 * (1.0 + (2.0 * PI * 4.0 * rad).cos()) * env
                    }
                    GrayPattern::Blobs => {
                        const CENTERS: [(f64, f64, f64, f64); 4] = [
                            (-0.2, -0.15, 0.12, 0.9),
                            (0.18, -0.2, 0.08, 0.6),
                            (0.05, 0.2, 0.15, 1.0),
                            (-0.25, 0.22, 0.06, 0.5),
                        ];
                        CENTERS
                            .iter()
                            .map(|&(cx, cy, s, a)| a * (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * s * s)).exp())
                            .sum::<f64>()
                            .min(1.0)
                    }
                    GrayPattern::Weave => {
                        let a = (2.0 * PI * 3.0 * (u + v)).sin().max(0.0);
                        let b = (2.0 * PI * 2.0 * (u - 0.5 * v)).sin().max(0.0);
                        (0.6 * a + 0.4 * b * b).min(1.0)
                    }
                };
                img[r * size + c] = value.clamp(0.0, 1.0);
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EXT: (f64, f64) = (0.05, 0.05);

    #[test]
    fn flat_field() {
        let f = HeightField::new_flat(4, EXT, 0.003).unwrap();
        assert_eq!(f.heights(), &[0.0; 16]);
        assert_eq!(f.base_thickness(), 0.003);
        let g = HeightField::new_flat(2, (1.0, 1.0), 1.0).unwrap();
        assert_eq!(g.heights().iter().sum::<f64>(), 0.0);
        assert!(HeightField::new_flat(1, EXT, 0.003).is_err());
        assert!(HeightField::new_flat(4, (0.0, 1.0), 0.003).is_err());
        assert!(HeightField::new_flat(4, EXT, 0.0).is_err());
    }

    #[test]
    fn rejects_negative_heights() {
        assert!(HeightField::from_heights(2, vec![0.0, -1e-9, 0.0, 0.0], EXT, 0.003).is_err());
        assert!(HeightField::from_heights(2, vec![0.0, f64::NAN, 0.0, 0.0], EXT, 0.003).is_err());
    }

    fn centerline_field() -> (HeightField, LineSpec) {
        // 5 x 5 field on a 5 cm substrate: texel centers at -2, -1, 0, 1, 2 cm.
        let f = HeightField::new_flat(5, EXT, 0.003).unwrap();
        let line = LineSpec::new([-0.02, 0.0], [0.02, 0.0], 0.02, 1e-3).unwrap();
        (f, line)
    }

    #[test]
    fn cosine_profile_values() {
        let (mut f, line) = centerline_field();
        f.add_line(&line);
        // row 2 is the centerline, u = 0
        assert_eq!(f.at(2, 2), 1e-3);
        // rows 1 and 3 are at u = 1 cm = w/2: cos(pi/2) ~ 0
        assert!(f.at(1, 2).abs() < 1e-18);
        assert!(f.at(3, 2).abs() < 1e-18);
        assert_eq!(f.at(0, 2), 0.0);
    }

    #[test]
    fn overlapping_lines_stack() {
        let (mut f, line) = centerline_field();
        f.add_line(&line);
        f.add_line(&line);
        assert_eq!(f.at(2, 0), 2e-3);
    }

    #[test]
    fn rounded_caps() {
        let mut f = HeightField::new_flat(5, EXT, 0.003).unwrap();
        let line = LineSpec::new([-0.005, 0.0], [0.0, 0.0], 0.024, 1e-3).unwrap();
        f.add_line(&line);
        // texel at (x = 1 cm, y = 0) is 1 cm beyond the end cap
        let expect = 1e-3 * (std::f64::consts::PI * 0.01 / 0.024).cos();
        assert!((f.at(2, 3) - expect).abs() < 1e-15);
        assert_eq!(f.at(2, 4), 0.0);
    }

    #[test]
    fn lines_outside_are_clipped() {
        let mut f = HeightField::new_flat(8, EXT, 0.003).unwrap();
        f.add_line(&LineSpec::new([0.1, 0.1], [0.2, 0.1], 1e-3, 1e-3).unwrap());
        assert_eq!(f.max_height(), 0.0);
        f.add_line(&LineSpec::new([-0.1, 0.0], [0.1, 0.0], 8e-3, 1e-3).unwrap());
        assert!(f.max_height() > 0.0);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let ranges = LineFieldRanges::default();
        let a = sample_line_field(&mut ChaCha8Rng::seed_from_u64(9), &ranges, 32, EXT, 0.003).unwrap();
        let b = sample_line_field(&mut ChaCha8Rng::seed_from_u64(9), &ranges, 32, EXT, 0.003).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collapsed_ranges_bound_height() {
        let ranges =
            LineFieldRanges { n_lines: (7, 7), width: (2e-3, 2e-3), height: (1e-3, 1e-3), ..Default::default() };
        let (f, lines) = sample_line_field(&mut ChaCha8Rng::seed_from_u64(3), &ranges, 48, EXT, 0.003).unwrap();
        assert_eq!(lines.len(), 7);
        assert!(f.max_height() <= 7.0 * 1e-3 + 1e-15);
    }

    #[test]
    fn drawn_widths_stay_in_range() {
        let ranges = LineFieldRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let l = ranges.sample_line(&mut rng);
            assert!((1e-4..=4e-3).contains(&l.width));
            assert!((1e-4..=2e-3).contains(&l.height));
            for v in l.start.iter().chain(l.end.iter()) {
                assert!((-0.025..=0.025).contains(v));
            }
        }
    }

    #[test]
    fn zero_offsets_keep_field() {
        let ranges =
            LineFieldRanges { offset_position: 0.0, offset_width: 0.0, offset_height: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, lines) = sample_line_field(&mut rng, &ranges, 32, EXT, 0.003).unwrap();
        let (g, _) = perturb_line_field(&lines, &mut rng, &ranges, 32, EXT, 0.003).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn perturbation_respects_bounds_and_floor() {
        let ranges = LineFieldRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lines = vec![LineSpec::new([0.0249, 0.0], [0.0, 0.01], 2e-4, 2e-4).unwrap(); 200];
        let moved = perturb_lines(&lines, &mut rng, &ranges, EXT);
        for (m, l) in moved.iter().zip(&lines) {
            assert!(m.width >= PERTURB_FLOOR && m.height >= PERTURB_FLOOR);
            assert!(m.width - l.width <= 1e-3 + 1e-15);
            assert!((m.end[0] - l.end[0]).abs() <= 2.5e-3 + 1e-15);
            assert!(m.start[0] <= 0.025);
        }
        assert!(perturb_line_field(&[], &mut rng, &ranges, 8, EXT, 0.003).is_err());
    }

    #[test]
    fn grayscale_conversion() {
        let zeros = HeightField::from_grayscale(&[0.0; 16], 4, 4, 2e-3, 4, EXT, 0.003).unwrap();
        assert_eq!(zeros.max_height(), 0.0);
        let ones = HeightField::from_grayscale(&[1.0; 16], 4, 4, 2e-3, 8, EXT, 0.003).unwrap();
        assert!(ones.heights().iter().all(|&h| (h - 2e-3).abs() < 1e-18));
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let f = HeightField::from_grayscale(&checker, 4, 4, 2e-3, 4, EXT, 0.003).unwrap();
        for (h, c) in f.heights().iter().zip(&checker) {
            assert_eq!(*h, c * 2e-3);
        }
        assert!(HeightField::from_grayscale(&[1.5; 4], 2, 2, 2e-3, 4, EXT, 0.003).is_err());
    }

    #[test]
    fn patterns_are_unit_range() {
        for p in GrayPattern::ALL {
            let img = p.render(40);
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.iter().cloned().fold(0.0, f64::max) > 0.3);
        }
    }

    #[test]
    fn handpicked_lines_do_not_overlap() {
        let lines = handpicked_lines();
        let mut total = HeightField::new_flat(64, EXT, 0.003).unwrap();
        for l in &lines {
            total.add_line(l);
        }
        assert!(total.max_height() <= 2e-3 + 1e-12);
    }

    proptest! {
        #[test]
        fn rasterization_is_order_independent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ranges = LineFieldRanges { n_lines: (2, 8), ..Default::default() };
            let mut lines = ranges.sample_lines(&mut rng);
            let a = HeightField::from_lines(24, EXT, 0.003, &lines).unwrap();
            lines.shuffle(&mut rng);
            let b = HeightField::from_lines(24, EXT, 0.003, &lines).unwrap();
            let sum: f64 = lines.iter().map(|l| l.height).sum();
            for (x, y) in a.heights().iter().zip(b.heights()) {
                prop_assert!((x - y).abs() <= 1e-15);
                prop_assert!(*x >= 0.0 && *x <= sum + 1e-15);
            }
        }
    }
}
