//! Independent reference computations used by tests.

use crate::raster::RESOLUTION;

/// Counts pixel centers inside the hair band with a per-row interval
/// sweep, independent of the rasterizer's per-pixel classifier.
pub fn scanline_hair_area(ax: f32, ay: f32, thickness: f32, extent: f32) -> usize {
    let (cx, cy) = (32.0f64, 33.0f64);
    let (ax, ay, t, ext) = (ax as f64, ay as f64, thickness as f64, extent as f64);
    assert!(ext < std::f64::consts::FRAC_PI_2);
    let outer = 1.0 + t / ay;
    let mut count = 0;
    for py in 0..RESOLUTION {
        let v = py as f64 + 0.5 - cy;
        // |u| range from the two ellipse bounds at this row.
        let band = |r: f64| {
            let q = r * r - (v / ay).powi(2);
            if q <= 0.0 { None } else { Some(ax * q.sqrt()) }
        };
        let Some(u_out) = band(outer) else { continue };
        let u_in = band(0.82).unwrap_or(0.0);
        // atan2(|u|, -v) <= extent with extent < pi/2 keeps rows above the
        // center and |u| <= -v tan(extent).
        if v >= 0.0 {
            continue;
        }
        let lo = u_in;
        let hi = u_out.min(-v * ext.tan());
        for px in 0..RESOLUTION {
            let u = (px as f64 + 0.5 - cx).abs();
            if u >= lo && u <= hi {
                count += 1;
            }
        }
    }
    count
}
