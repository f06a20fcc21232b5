//! Bilinear sampling on an `H×W×C` grid with zero padding outside the grid.
//!
//! Coordinates are in pixel-index space: `(x, y) = (j, i)` lands exactly on
//! `map[i][j]`.

/// One of the four grid cells surrounding a sample point.
#[derive(Clone, Copy, Debug)]
pub struct Corner {
    /// Flat cell index `i * W + j`, or `None` when the cell lies outside the grid.
    pub cell: Option<usize>,
    pub weight: f64,
    /// ∂weight/∂x
    pub dx: f64,
    /// ∂weight/∂y
    pub dy: f64,
}

pub fn bilinear_corners(x: f64, y: f64, height: usize, width: usize) -> [Corner; 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let cell = |cx: f64, cy: f64| -> Option<usize> {
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            None
        } else {
            Some(cy as usize * width + cx as usize)
        }
    };
    [
        Corner {
            cell: cell(x0, y0),
            weight: (1.0 - fx) * (1.0 - fy),
            dx: -(1.0 - fy),
            dy: -(1.0 - fx),
        },
        Corner {
            cell: cell(x0 + 1.0, y0),
            weight: fx * (1.0 - fy),
            dx: 1.0 - fy,
            dy: -fx,
        },
        Corner {
            cell: cell(x0, y0 + 1.0),
            weight: (1.0 - fx) * fy,
            dx: -fy,
            dy: 1.0 - fx,
        },
        Corner {
            cell: cell(x0 + 1.0, y0 + 1.0),
            weight: fx * fy,
            dx: fy,
            dy: fx,
        },
    ]
}

/// Samples all channels of `map` (row-major `H×W×C`) at pixel point `(x, y)`.
pub fn sample_bilinear(map: &[f64], height: usize, width: usize, channels: usize, x: f64, y: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if !x.is_finite() || !y.is_finite() {
        return;
    }
    for c in bilinear_corners(x, y, height, width) {
        let Some(cell) = c.cell else { continue };
        if c.weight == 0.0 {
            continue;
        }
        let src = &map[cell * channels..(cell + 1) * channels];
        for (o, v) in out.iter_mut().zip(src) {
            *o += c.weight * v;
        }
    }
}

pub(crate) fn forward(map: &[f64], h: usize, w: usize, c: usize, points: &[f64]) -> Vec<f64> {
    let n = points.len() / 2;
    let mut out = vec![0.0; n * c];
    for p in 0..n {
        sample_bilinear(map, h, w, c, points[2 * p], points[2 * p + 1], &mut out[p * c..(p + 1) * c]);
    }
    out
}

/// Returns (∂/∂map, ∂/∂points).
pub(crate) fn backward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    points: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = points.len() / 2;
    let mut gmap = vec![0.0; map.len()];
    let mut gpts = vec![0.0; points.len()];
    for p in 0..n {
        let (x, y) = (points[2 * p], points[2 * p + 1]);
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let go = &grad_out[p * c..(p + 1) * c];
        for corner in bilinear_corners(x, y, h, w) {
            let Some(cell) = corner.cell else { continue };
            let src = &map[cell * c..(cell + 1) * c];
            let dst = &mut gmap[cell * c..(cell + 1) * c];
            let mut dot = 0.0;
            for ((d, s), g) in dst.iter_mut().zip(src).zip(go) {
                *d += corner.weight * g;
                dot += s * g;
            }
            gpts[2 * p] += corner.dx * dot;
            gpts[2 * p + 1] += corner.dy * dot;
        }
    }
    (gmap, gpts)
}
