//! Sampling grids shared by the propagation, sensor and fitting code.
//!
//! Layer grids are square, row-major (`iy * n + ix`) and centred on the
//! optical axis: node `i` sits at `(i - n/2) * spacing`. Aperture grids are
//! square point sets over the pupil with a boolean mask.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGrid {
    pub size: usize,
    pub spacing: f64,
}

impl LayerGrid {
    pub fn new(size: usize, spacing: f64) -> Result<Self> {
        if size < 2 {
            return Err(Error::config("grid_size", "layer grid needs at least 2 points per side"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::config("grid_spacing_m", "spacing must be positive"));
        }
        Ok(LayerGrid { size, spacing })
    }

    pub fn len(&self) -> usize {
        self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Coordinate of node `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.size / 2) as f64) * self.spacing
    }

    /// Half-open physical extent `[lo, hi]` of the node positions.
    pub fn extent(&self) -> (f64, f64) {
        (self.coord(0), self.coord(self.size - 1))
    }

    /// Bilinear stencil at `(x, y)`: node indices and weights. `None` when the
    /// point falls outside the node span.
    pub fn stencil(&self, x: f64, y: f64) -> Option<([usize; 4], [f64; 4])> {
        let (ix, fx) = self.axis_cell(x)?;
        let (iy, fy) = self.axis_cell(y)?;
        let n = self.size;
        let i00 = iy * n + ix;
        Some((
            [i00, i00 + 1, i00 + n, i00 + n + 1],
            [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        ))
    }

    fn axis_cell(&self, x: f64) -> Option<(usize, f64)> {
        let u = x / self.spacing + (self.size / 2) as f64;
        if !u.is_finite() || u < 0.0 {
            return None;
        }
        let last = (self.size - 1) as f64;
        // tolerate round-off right at the last node
        if u > last + 1e-9 {
            return None;
        }
        let u = u.min(last);
        let mut i = u.floor() as usize;
        if i >= self.size - 1 {
            i = self.size - 2;
        }
        Some((i, u - i as f64))
    }
}

/// Layer geometry as seen by the projections: an altitude and a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGeometry {
    pub altitude_m: f64,
    pub grid: LayerGrid,
}

/// Several layers stored back to back in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    layers: Vec<LayerGeometry>,
    offsets: Vec<usize>,
}

impl LayerLayout {
    pub fn new(layers: Vec<LayerGeometry>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        for l in &layers {
            offsets.push(acc);
            acc += l.grid.len();
        }
        offsets.push(acc);
        LayerLayout { layers, offsets }
    }

    pub fn layers(&self) -> &[LayerGeometry] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total number of values over all layers.
    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    pub fn range(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn slice<'a>(&self, data: &'a [f64], layer: usize) -> &'a [f64] {
        &data[self.range(layer)]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64], layer: usize) -> &'a mut [f64] {
        let r = self.range(layer);
        &mut data[r]
    }

    /// Layer index owning global position `k`.
    pub fn layer_of(&self, k: usize) -> usize {
        match self.offsets.binary_search(&k) {
            Ok(i) => i.min(self.layers.len() - 1),
            Err(i) => i - 1,
        }
    }
}

/// Square grid of sample points over the telescope pupil.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureGrid {
    pub n_side: usize,
    pub spacing: f64,
    pub mask: Vec<bool>,
}

impl ApertureGrid {
    /// Points spaced by `spacing`, symmetric about the axis, masked by an
    /// annulus of outer diameter `diameter` and central obstruction
    /// `obstruction` (fraction of the diameter).
    pub fn annular(n_side: usize, spacing: f64, diameter: f64, obstruction: f64) -> Result<Self> {
        let mut g = ApertureGrid {
            n_side,
            spacing,
            mask: vec![false; n_side * n_side],
        };
        let ro = diameter / 2.0;
        let ri = obstruction * ro;
        let eps = 1e-9 * spacing;
        for iy in 0..n_side {
            for ix in 0..n_side {
                let (x, y) = g.position_xy(ix, iy);
                let r = x.hypot(y);
                g.mask[iy * n_side + ix] = r <= ro + eps && r >= ri - eps;
            }
        }
        if !g.mask.iter().any(|&m| m) {
            return Err(Error::config("telescope", "pupil mask is empty"));
        }
        Ok(g)
    }

    pub fn with_mask(n_side: usize, spacing: f64, mask: Vec<bool>) -> Result<Self> {
        Error::check_len("aperture mask", n_side * n_side, mask.len())?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::config("telescope", "pupil mask is empty"));
        }
        Ok(ApertureGrid {
            n_side,
            spacing,
            mask,
        })
    }

    pub fn origin(&self) -> f64 {
        -((self.n_side - 1) as f64) * self.spacing / 2.0
    }

    pub fn position_xy(&self, ix: usize, iy: usize) -> (f64, f64) {
        let o = self.origin();
        (o + ix as f64 * self.spacing, o + iy as f64 * self.spacing)
    }

    pub fn len(&self) -> usize {
        self.n_side * self.n_side
    }

    pub fn is_empty(&self) -> bool {
        self.n_side == 0
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Positions of masked points, row-major.
    pub fn masked_points(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::with_capacity(self.n_masked());
        for iy in 0..self.n_side {
            for ix in 0..self.n_side {
                let k = iy * self.n_side + ix;
                if self.mask[k] {
                    let (x, y) = self.position_xy(ix, iy);
                    out.push((k, x, y));
                }
            }
        }
        out
    }
}
