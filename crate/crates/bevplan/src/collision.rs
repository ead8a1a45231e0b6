//! Oriented-rectangle intersection via the separating-axis test. Used for
//! expert validity during generation and for the collision-rate metric.

/// Oriented rectangle: center, heading, half extents (along/across heading).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub yaw: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Rect {
    pub fn new(cx: f64, cy: f64, yaw: f64, half_len: f64, half_wid: f64) -> Self {
        Rect { cx, cy, yaw, half_len, half_wid }
    }

    /// Axis-aligned rectangle.
    pub fn axis_aligned(cx: f64, cy: f64, half_len: f64, half_wid: f64) -> Self {
        Rect::new(cx, cy, 0.0, half_len, half_wid)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [(0.0, 0.0); 4];
        for (i, (dl, dw)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
            .iter()
            .enumerate()
        {
            let lx = dl * self.half_len;
            let ly = dw * self.half_wid;
            out[i] = (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly);
        }
        out
    }

    /// True if the point lies inside or on the boundary.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half_len && ly.abs() <= self.half_wid
    }
}

/// Separating-axis intersection test for two oriented rectangles. Touching
/// boundaries count as intersecting.
pub fn rects_intersect(a: &Rect, b: &Rect) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    // candidate axes: the two edge normals of each rectangle
    let axes = [
        (a.yaw.cos(), a.yaw.sin()),
        (-a.yaw.sin(), a.yaw.cos()),
        (b.yaw.cos(), b.yaw.sin()),
        (-b.yaw.sin(), b.yaw.cos()),
    ];
    for (ax, ay) in axes {
        let proj = |pts: &[(f64, f64); 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(x, y) in pts {
                let p = x * ax + y * ay;
                lo = lo.min(p);
                hi = hi.max(p);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}
