//! Stroke glyphs used as object classes.
//!
//! Every glyph is rotationally asymmetric, so the orientation of an
//! image can be read off the object itself, and no glyph is a 90-degree
//! rotation of another.

/// Line segment in glyph space, `[-1, 1]^2` with `y` pointing up.
pub(crate) type Segment = ((f64, f64), (f64, f64));

pub(crate) const GLYPH_NAMES: [&str; 8] = ["arrow", "ell", "tee", "hook", "wedge", "eff", "pee", "four"];

pub(crate) fn glyph_segments(class: usize) -> &'static [Segment] {
    const ARROW: &[Segment] = &[
        ((0.0, -0.75), (0.0, 0.75)),
        ((0.0, 0.75), (-0.45, 0.3)),
        ((0.0, 0.75), (0.45, 0.3)),
    ];
    const ELL: &[Segment] = &[((-0.4, 0.75), (-0.4, -0.7)), ((-0.4, -0.7), (0.5, -0.7))];
    const TEE: &[Segment] = &[((-0.6, 0.7), (0.6, 0.7)), ((0.0, 0.7), (0.0, -0.75))];
    const HOOK: &[Segment] = &[
        ((0.3, 0.75), (0.3, -0.35)),
        ((0.3, -0.35), (0.1, -0.7)),
        ((0.1, -0.7), (-0.2, -0.7)),
        ((-0.2, -0.7), (-0.45, -0.4)),
    ];
    const WEDGE: &[Segment] = &[((-0.45, 0.65), (0.5, 0.0)), ((0.5, 0.0), (-0.45, -0.65))];
    const EFF: &[Segment] = &[
        ((-0.4, -0.75), (-0.4, 0.7)),
        ((-0.4, 0.7), (0.5, 0.7)),
        ((-0.4, 0.05), (0.3, 0.05)),
    ];
    const PEE: &[Segment] = &[
        ((-0.4, -0.75), (-0.4, 0.7)),
        ((-0.4, 0.7), (0.4, 0.7)),
        ((0.4, 0.7), (0.4, 0.0)),
        ((0.4, 0.0), (-0.4, 0.0)),
    ];
    const FOUR: &[Segment] = &[
        ((0.25, -0.75), (0.25, 0.75)),
        ((0.25, 0.75), (-0.5, -0.15)),
        ((-0.5, -0.15), (0.5, -0.15)),
    ];
    match class {
        0 => ARROW,
        1 => ELL,
        2 => TEE,
        3 => HOOK,
        4 => WEDGE,
        5 => EFF,
        6 => PEE,
        7 => FOUR,
        _ => panic!("no glyph for class {class}"),
    }
}

fn segment_distance(p: (f64, f64), s: Segment) -> f64 {
    let ((ax, ay), (bx, by)) = s;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx - p.0, ay + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Placement of a glyph inside the image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Placement {
    /// Glyph-space unit in image-space half-widths.
    pub scale: f64,
    pub offset: (f64, f64),
    /// Small in-plane tilt, radians.
    pub tilt: f64,
    /// Stroke half-width in glyph space.
    pub half_width: f64,
}

/// Anti-aliased coverage mask (`size x size`, row 0 at the top).
pub(crate) fn rasterize(class: usize, size: usize, place: &Placement) -> Vec<f64> {
    let segments = glyph_segments(class);
    let (sin, cos) = place.tilt.sin_cos();
    // one pixel expressed in glyph units
    let pixel = 2.0 / size as f64 / place.scale;
    let mut mask = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let x = ((c as f64 + 0.5) / size as f64) * 2.0 - 1.0 - place.offset.0;
            let y = 1.0 - ((r as f64 + 0.5) / size as f64) * 2.0 - place.offset.1;
            let (x, y) = (x / place.scale, y / place.scale);
            // undo the tilt
            let p = (cos * x + sin * y, -sin * x + cos * y);
            let d = segments
                .iter()
                .map(|&s| segment_distance(p, s))
                .fold(f64::INFINITY, f64::min);
            mask[r * size + c] = ((place.half_width - d) / pixel + 0.5).clamp(0.0, 1.0);
        }
    }
    mask
}
