//! Axis-aligned rectangles and the L-shaped block used by the push task.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub const fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Rect { lo, hi }
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]).max(0.0) * (self.hi[1] - self.lo[1]).max(0.0)
    }

    pub fn translated(&self, by: [f64; 2]) -> Rect {
        Rect {
            lo: [self.lo[0] + by[0], self.lo[1] + by[1]],
            hi: [self.hi[0] + by[0], self.hi[1] + by[1]],
        }
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.hi[0].min(other.hi[0]) - self.lo[0].max(other.lo[0]);
        let h = self.hi[1].min(other.hi[1]) - self.lo[1].max(other.lo[1]);
        w.max(0.0) * h.max(0.0)
    }

    /// Signed distance from `p` to the rectangle boundary (negative inside).
    pub fn sdf(&self, p: [f64; 2]) -> f64 {
        let cx = 0.5 * (self.lo[0] + self.hi[0]);
        let cy = 0.5 * (self.lo[1] + self.hi[1]);
        let hx = 0.5 * (self.hi[0] - self.lo[0]);
        let hy = 0.5 * (self.hi[1] - self.lo[1]);
        let dx = (p[0] - cx).abs() - hx;
        let dy = (p[1] - cy).abs() - hy;
        let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
        outside + dx.max(dy).min(0.0)
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        [
            self.lo,
            [self.hi[0], self.lo[1]],
            self.hi,
            [self.lo[0], self.hi[1]],
        ]
    }
}

/// An L made of two disjoint rectangles, expressed relative to its centroid.
/// The long bar runs along +x, the short bar rises along +y from its left end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LShape {
    parts: [Rect; 2],
}

impl LShape {
    pub fn standard() -> Self {
        // Corner-origin parts: [0,0.5]x[0,0.2] and [0,0.2]x[0.2,0.5].
        let parts = [
            Rect::new([0.0, 0.0], [0.5, 0.2]),
            Rect::new([0.0, 0.2], [0.2, 0.5]),
        ];
        let total: f64 = parts.iter().map(Rect::area).sum();
        let mut c = [0.0; 2];
        for r in &parts {
            let a = r.area();
            c[0] += a * 0.5 * (r.lo[0] + r.hi[0]);
            c[1] += a * 0.5 * (r.lo[1] + r.hi[1]);
        }
        let shift = [-c[0] / total, -c[1] / total];
        LShape {
            parts: [parts[0].translated(shift), parts[1].translated(shift)],
        }
    }

    pub fn area(&self) -> f64 {
        self.parts.iter().map(Rect::area).sum()
    }

    pub fn placed(&self, at: [f64; 2]) -> [Rect; 2] {
        [self.parts[0].translated(at), self.parts[1].translated(at)]
    }

    /// Overlap area of the shape placed at `a` with the shape placed at `b`.
    pub fn overlap(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let pa = self.placed(a);
        let pb = self.placed(b);
        pa.iter()
            .flat_map(|x| pb.iter().map(move |y| x.intersection_area(y)))
            .sum()
    }

    /// Distance bound from `p` to the shape placed at `at`; exact outside.
    pub fn sdf(&self, at: [f64; 2], p: [f64; 2]) -> f64 {
        let local = [p[0] - at[0], p[1] - at[1]];
        self.parts[0].sdf(local).min(self.parts[1].sdf(local))
    }

    /// Bounding box `(lo, hi)` relative to the centroid.
    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in &self.parts {
            for i in 0..2 {
                lo[i] = lo[i].min(r.lo[i]);
                hi[i] = hi[i].max(r.hi[i]);
            }
        }
        (lo, hi)
    }

    /// Span along the other axis of the extreme face that a push along
    /// `axis` in direction `sign` makes contact with.
    pub fn face_span(&self, axis: usize, sign: f64) -> (f64, f64) {
        let other = 1 - axis;
        let (lo, hi) = self.extent();
        let touches = |r: &Rect| {
            if sign > 0.0 {
                r.lo[axis] == lo[axis]
            } else {
                r.hi[axis] == hi[axis]
            }
        };
        self.parts
            .iter()
            .filter(|r| touches(r))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.lo[other]), b.max(r.hi[other])))
    }

    /// Distance from the centroid to the farthest corner.
    pub fn radius(&self) -> f64 {
        self.parts
            .iter()
            .flat_map(|r| r.corners())
            .map(|c| c[0].hypot(c[1]))
            .fold(0.0, f64::max)
    }
}
