//! Brute-force nearest-center classification in the plane after an
//! explicit per-axis rescaling of the coordinates.

/// A query that flips class under anisotropic scaling: with unit scales it
/// is nearer the second center, after stretching x by 1.5 and shrinking y
/// by 0.5 it is nearer the first.
pub const EXAMPLE_QUERY: [f64; 2] = [0.5303, -0.5303];
pub const EXAMPLE_CENTERS: [[f64; 2]; 2] = [[0.5303, 0.5303], [0.0, -0.75]];

/// Index of the nearest center after mapping every point to
/// `(s_x x, s_y y)`.
pub fn geometry_oracle(query: [f64; 2], centers: &[[f64; 2]], axis_scales: [f64; 2]) -> usize {
    let scale = |p: [f64; 2]| [p[0] * axis_scales[0], p[1] * axis_scales[1]];
    let q = scale(query);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in centers.iter().enumerate() {
        let c = scale(c);
        let d = (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}
