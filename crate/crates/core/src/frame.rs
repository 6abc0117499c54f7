//! Pixel grids: template geometry, grayscale frames and sub-pixel access.
//!
//! Template pixels are indexed column-wise, `index = col * rows + row`, and
//! every module relies on that ordering. Locations are `(x, y)` = (column,
//! row) coordinates of the template centre in frame pixels.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Template centre in frame pixel coordinates, `(x, y)`.
pub type Location = Vector2<f64>;

/// Size of a template window `r x c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl TemplateGeometry {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "template geometry must be non-empty, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    /// Number of pixels `N = r * c`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        col * self.rows + row
    }

    /// `(row, col)` of a column-wise pixel index.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index % self.rows, index / self.rows)
    }

    /// Offset `(dx, dy)` of a pixel from the template centre.
    pub fn offset(&self, index: usize) -> Vector2<f64> {
        let (row, col) = self.position(index);
        Vector2::new(
            col as f64 - (self.cols as f64 - 1.0) / 2.0,
            row as f64 - (self.rows as f64 - 1.0) / 2.0,
        )
    }

    /// Half-extents `(cols / 2, rows / 2)`.
    pub fn half_extents(&self) -> Vector2<f64> {
        Vector2::new(self.cols as f64 / 2.0, self.rows as f64 / 2.0)
    }

    /// Inclusive range of centres for which the whole window lies in a
    /// `width x height` frame: `(min, max)` corners.
    pub fn valid_centers(&self, width: usize, height: usize) -> Option<(Location, Location)> {
        if self.cols > width || self.rows > height {
            return None;
        }
        let hx = (self.cols as f64 - 1.0) / 2.0;
        let hy = (self.rows as f64 - 1.0) / 2.0;
        Some((
            Location::new(hx, hy),
            Location::new(width as f64 - 1.0 - hx, height as f64 - 1.0 - hy),
        ))
    }

    /// Whether a window centred at `loc` fits in a `width x height` frame.
    pub fn fits(&self, loc: &Location, width: usize, height: usize) -> bool {
        match self.valid_centers(width, height) {
            Some((lo, hi)) => {
                loc.x >= lo.x - 1e-9 && loc.x <= hi.x + 1e-9 && loc.y >= lo.y - 1e-9 && loc.y <= hi.y + 1e-9
            }
            None => false,
        }
    }

    /// Clamp `loc` into the valid centre range. Returns the clamped location
    /// and whether it moved.
    pub fn clamp(&self, loc: &Location, width: usize, height: usize) -> Result<(Location, bool)> {
        let (lo, hi) = self.valid_centers(width, height).ok_or(Error::OutOfFrame {
            x: loc.x,
            y: loc.y,
            width,
            height,
        })?;
        let c = Location::new(loc.x.clamp(lo.x, hi.x), loc.y.clamp(lo.y, hi.y));
        let moved = (c - loc).amax() > 0.0;
        Ok((c, moved))
    }

    /// Integer top-left corner of the window whose centre is nearest to `loc`.
    pub fn top_left(&self, loc: &Location) -> (i64, i64) {
        (
            (loc.x - (self.cols as f64 - 1.0) / 2.0).round() as i64,
            (loc.y - (self.rows as f64 - 1.0) / 2.0).round() as i64,
        )
    }

    /// Centre of the window with integer top-left corner `(x0, y0)`.
    pub fn center_of(&self, x0: i64, y0: i64) -> Location {
        Location::new(
            x0 as f64 + (self.cols as f64 - 1.0) / 2.0,
            y0 as f64 + (self.rows as f64 - 1.0) / 2.0,
        )
    }
}

/// Single-channel frame, row-major, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("frame must be non-empty".into()));
        }
        if data.len() != width * height {
            return Err(Error::dim("frame data", width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Build a frame from a column-wise template vector.
    pub fn from_template(geometry: TemplateGeometry, values: &DVector<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::dim("template vector", geometry.len(), values.len()));
        }
        let mut f = Frame::filled(geometry.cols, geometry.rows, 0.0);
        for (k, &v) in values.iter().enumerate() {
            let (row, col) = geometry.position(k);
            f.set(col, row, v);
        }
        Ok(f)
    }

    fn cell(&self, x: f64, y: f64) -> (usize, usize, f64, f64) {
        let clampf = |v: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let v = v.clamp(0.0, (n - 1) as f64);
            let mut i = v.floor() as usize;
            if i >= n - 1 {
                i = n - 2;
            }
            (i, v - i as f64)
        };
        let (x0, fx) = clampf(x, self.width);
        let (y0, fy) = clampf(y, self.height);
        (x0, y0, fx, fy)
    }

    /// Bilinear interpolation at a real-valued position (clamped to the grid).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0, fx, fy) = self.cell(x, y);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    /// Spatial gradient `(d/dx, d/dy)` of the bilinear interpolant; on cell
    /// boundaries the cell to the lower-right is used.
    pub fn sample_gradient(&self, x: f64, y: f64) -> Vector2<f64> {
        let (x0, y0, fx, fy) = self.cell(x, y);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        Vector2::new(
            (1.0 - fy) * (v10 - v00) + fy * (v11 - v01),
            (1.0 - fx) * (v01 - v00) + fx * (v11 - v10),
        )
    }

    /// Column-wise patch of `geometry` centred at `loc`, bilinearly sampled.
    pub fn extract_patch(&self, loc: &Location, geometry: TemplateGeometry) -> Result<DVector<f64>> {
        if !geometry.fits(loc, self.width, self.height) {
            return Err(Error::OutOfFrame {
                x: loc.x,
                y: loc.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(DVector::from_fn(geometry.len(), |k, _| {
            let p = loc + geometry.offset(k);
            self.sample(p.x, p.y)
        }))
    }

    /// Copy of the frame with intensities clamped to `[0, 1]`.
    pub fn to_display(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Ordered frames sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames {
                if f.width != first.width || f.height != first.height {
                    return Err(Error::InvalidArgument(format!(
                        "frame size {}x{} differs from {}x{}",
                        f.width, f.height, first.width, first.height
                    )));
                }
            }
        }
        Ok(Self { frames })
    }

    /// Frames built from column-wise template vectors.
    pub fn from_templates(geometry: TemplateGeometry, templates: &[DVector<f64>]) -> Result<Self> {
        let frames = templates
            .iter()
            .map(|t| Frame::from_template(geometry, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn get(&self, t: usize) -> Option<&Frame> {
        self.frames.get(t)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }

    /// Patches of `geometry` extracted at one location per frame.
    pub fn extract_patches(&self, locations: &[Location], geometry: TemplateGeometry) -> Result<Vec<DVector<f64>>> {
        if locations.len() != self.frames.len() {
            return Err(Error::dim("locations per frame", self.frames.len(), locations.len()));
        }
        self.frames
            .iter()
            .zip(locations)
            .map(|(f, l)| f.extract_patch(l, geometry))
            .collect()
    }
}

impl<'a> IntoIterator for &'a FrameSequence {
    type Item = &'a Frame;
    type IntoIter = std::slice::Iter<'a, Frame>;
    fn into_iter(self) -> Self::IntoIter {
        self.frames.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_position_are_inverse() {
        let g = TemplateGeometry::new(3, 4).unwrap();
        for k in 0..g.len() {
            let (r, c) = g.position(k);
            assert_eq!(g.index(r, c), k);
        }
        // column-wise: index 1 is row 1 of column 0
        assert_eq!(g.position(1), (1, 0));
        assert_eq!(g.position(3), (0, 1));
    }

    #[test]
    fn zero_geometry_rejected() {
        assert!(TemplateGeometry::new(0, 3).is_err());
    }

    #[test]
    fn offsets_are_centered() {
        let g = TemplateGeometry::new(3, 3).unwrap();
        assert_eq!(g.offset(4), Vector2::new(0.0, 0.0));
        assert_eq!(g.offset(0), Vector2::new(-1.0, -1.0));
    }

    #[test]
    fn bilinear_exact_on_grid_and_linear_between() {
        let f = Frame::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(f.sample(1.0, 1.0), 4.0);
        assert!((f.sample(0.5, 0.5) - 2.0).abs() < 1e-15);
        assert!((f.sample(2.0, 1.0) - 5.0).abs() < 1e-15);
        let g = f.sample_gradient(0.3, 0.6);
        assert!((g.x - 1.0).abs() < 1e-15 && (g.y - 3.0).abs() < 1e-15);
    }

    #[test]
    fn template_roundtrip_through_frame() {
        let g = TemplateGeometry::new(2, 3).unwrap();
        let v = DVector::from_iterator(6, (0..6).map(|i| i as f64));
        let f = Frame::from_template(g, &v).unwrap();
        let center = Location::new(1.0, 0.5);
        let p = f.extract_patch(&center, g).unwrap();
        assert!((p - v).amax() < 1e-15);
    }

    #[test]
    fn clamp_reports_movement() {
        let g = TemplateGeometry::new(5, 5).unwrap();
        let (c, moved) = g.clamp(&Location::new(0.0, 10.0), 20, 20).unwrap();
        assert!(moved);
        assert_eq!(c, Location::new(2.0, 10.0));
        let (_, moved) = g.clamp(&Location::new(5.0, 5.0), 20, 20).unwrap();
        assert!(!moved);
    }
}
