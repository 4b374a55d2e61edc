//! Pinhole camera mathematics: projection, rotation parameterization,
//! horizon-line derivation and ground-truth normalization.
//!
//! Conventions, shared by every module in the crate:
//!
//! * Pixels: `u` rightward, `v` downward, origin at the top-left corner,
//!   principal point at the exact image center `(W/2, H/2)`.
//! * Image units: the vertical axis points up, `y = 1 - 2 v / H`, so the top
//!   and bottom edges sit at `+1` and `-1`.
//! * World and camera frames are right-handed with `x` right, `y` up and `z`
//!   forward; at zero rotation they coincide. `R = Rz(roll) Rx(pitch) Ry(yaw)`
//!   maps world coordinates into the camera frame; yaw only spins the scene
//!   and is never a regression target.
//! * Projection: `u = cx + f X/Z`, `v = cy - f Y/Z` for camera coordinates
//!   `(X, Y, Z)` with `Z > 0`. The sign on the `v` term is the y-up to v-down
//!   flip; it lives here and nowhere else.
//!
//! Pitch is non-positive (cameras look level to straight down), which places
//! the horizon at or above the image center: the midpoint in image units is
//! `-2 f tan(pitch) / H >= 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest focal length (pixels) produced by the sampler; normalization divisor.
pub const FOCAL_MAX_PX: f64 = 500.0;
/// Smallest focal length (pixels) produced by the sampler.
pub const FOCAL_MIN_PX: f64 = 50.0;
/// Largest pitch magnitude in degrees; normalization divisor.
pub const PITCH_MAX_DEG: f64 = 90.0;
/// Largest roll magnitude in degrees; normalization divisor.
pub const ROLL_MAX_DEG: f64 = 45.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{name} = {value} outside valid range [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("image dimension {name} = {value} must be >= 2")]
    DegenerateImage { name: &'static str, value: u32 },
}

/// Pinhole intrinsics: focal length in pixels and image size. The principal
/// point is fixed at the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub f_px: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl Intrinsics {
    pub fn new(f_px: f64, width_px: u32, height_px: u32) -> Result<Self, GeometryError> {
        if !(f_px > 0.0) || !f_px.is_finite() {
            return Err(GeometryError::OutOfRange {
                name: "f_px",
                value: f_px,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        if width_px < 2 {
            return Err(GeometryError::DegenerateImage {
                name: "width_px",
                value: width_px,
            });
        }
        if height_px < 2 {
            return Err(GeometryError::DegenerateImage {
                name: "height_px",
                value: height_px,
            });
        }
        Ok(Self {
            f_px,
            width_px,
            height_px,
        })
    }

    pub fn cx(&self) -> f64 {
        self.width_px as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height_px as f64 / 2.0
    }
}

/// Camera rotation as pitch/roll/yaw. Translation is fixed to zero: the
/// camera sits at the panorama center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Pitch (radians), in `(-pi/2, 0]`; negative looks downward.
    pub pitch_rad: f64,
    /// Roll (radians), in `[-pi/4, pi/4]`.
    pub roll_rad: f64,
    /// Yaw (radians), in `[0, 2 pi)`. Scene content only.
    pub yaw_rad: f64,
}

impl Extrinsics {
    pub fn new(pitch_rad: f64, roll_rad: f64, yaw_rad: f64) -> Result<Self, GeometryError> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let quarter_pi = std::f64::consts::FRAC_PI_4;
        if !(pitch_rad > -half_pi && pitch_rad <= 0.0) {
            return Err(GeometryError::OutOfRange {
                name: "pitch_rad",
                value: pitch_rad,
                lo: -half_pi,
                hi: 0.0,
            });
        }
        if !(-quarter_pi..=quarter_pi).contains(&roll_rad) {
            return Err(GeometryError::OutOfRange {
                name: "roll_rad",
                value: roll_rad,
                lo: -quarter_pi,
                hi: quarter_pi,
            });
        }
        if !(0.0..std::f64::consts::TAU).contains(&yaw_rad) {
            return Err(GeometryError::OutOfRange {
                name: "yaw_rad",
                value: yaw_rad,
                lo: 0.0,
                hi: std::f64::consts::TAU,
            });
        }
        Ok(Self {
            pitch_rad,
            roll_rad,
            yaw_rad,
        })
    }

    /// Pitch and roll only, yaw zero.
    pub fn level_yaw(pitch_rad: f64, roll_rad: f64) -> Result<Self, GeometryError> {
        Self::new(pitch_rad, roll_rad, 0.0)
    }
}

/// Normalized ground-truth triplet: each raw parameter divided by its maximum
/// absolute value (500 px, 90 deg, 45 deg).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    /// `f_px / 500`, in `[0, 1]`.
    pub focal_n: f64,
    /// `pitch_deg / 90`, in `[-1, 0]`.
    pub pitch_n: f64,
    /// `roll_deg / 45`, in `[-1, 1]`.
    pub roll_n: f64,
}

impl CalibrationTarget {
    pub fn as_array(&self) -> [f64; 3] {
        [self.focal_n, self.pitch_n, self.roll_n]
    }
}

/// Horizon line as (midpoint, roll). The midpoint is the y-coordinate, in
/// image units, where the line crosses the central vertical axis; magnitudes
/// above 1 mean the horizon lies outside the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonLine {
    pub midpoint_units: f64,
    pub roll_rad: f64,
}

/// Row-major 3x3 matrix, just enough linear algebra for the camera model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul(&self, other: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

/// World-to-camera rotation `Rz(roll) * Rx(pitch) * Ry(yaw)`.
pub fn rotation_matrix(ext: &Extrinsics) -> Mat3 {
    rot_z(ext.roll_rad)
        .mul(&rot_x(ext.pitch_rad))
        .mul(&rot_y(ext.yaw_rad))
}

/// Outcome of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Pixel coordinates (u, v).
    Pixel(f64, f64),
    /// The point sits on or behind the camera plane and does not project.
    BehindCamera,
}

/// Project a world point through the pinhole model. Points with non-positive
/// camera depth report [`Projection::BehindCamera`] rather than an error.
pub fn project_point(intr: &Intrinsics, ext: &Extrinsics, p_world: [f64; 3]) -> Projection {
    let cam = rotation_matrix(ext).apply(p_world);
    let depth = cam[2];
    if depth <= 0.0 {
        return Projection::BehindCamera;
    }
    let u = intr.cx() + intr.f_px * cam[0] / depth;
    let v = intr.cy() - intr.f_px * cam[1] / depth;
    Projection::Pixel(u, v)
}

/// Horizon midpoint in image units for a roll-free camera:
/// `-2 f tan(pitch) / H`. Level cameras give 0; pitching down moves the
/// horizon up (positive). Values outside `[-1, 1]` indicate the horizon has
/// left the frame.
pub fn horizon_midpoint(f_px: f64, pitch_rad: f64, height_px: u32) -> f64 {
    -2.0 * f_px * pitch_rad.tan() / height_px as f64
}

/// Convert an image-unit y-coordinate to a pixel row (v-down, fractional).
pub fn row_of_units(y_units: f64, height_px: u32) -> f64 {
    height_px as f64 * (1.0 - y_units) / 2.0
}

/// Convert a pixel row to image units (y-up).
pub fn units_of_row(row: f64, height_px: u32) -> f64 {
    1.0 - 2.0 * row / height_px as f64
}

/// Normalize raw parameters to the training target triplet. Rejects values
/// outside the sampler ranges.
pub fn normalize_target(
    intr: &Intrinsics,
    ext: &Extrinsics,
) -> Result<CalibrationTarget, GeometryError> {
    if !(FOCAL_MIN_PX..=FOCAL_MAX_PX).contains(&intr.f_px) {
        return Err(GeometryError::OutOfRange {
            name: "f_px",
            value: intr.f_px,
            lo: FOCAL_MIN_PX,
            hi: FOCAL_MAX_PX,
        });
    }
    let pitch_deg = ext.pitch_rad.to_degrees();
    let roll_deg = ext.roll_rad.to_degrees();
    if !(-PITCH_MAX_DEG..=0.0).contains(&pitch_deg) {
        return Err(GeometryError::OutOfRange {
            name: "pitch_deg",
            value: pitch_deg,
            lo: -PITCH_MAX_DEG,
            hi: 0.0,
        });
    }
    if !(-ROLL_MAX_DEG..=ROLL_MAX_DEG).contains(&roll_deg) {
        return Err(GeometryError::OutOfRange {
            name: "roll_deg",
            value: roll_deg,
            lo: -ROLL_MAX_DEG,
            hi: ROLL_MAX_DEG,
        });
    }
    Ok(CalibrationTarget {
        focal_n: intr.f_px / FOCAL_MAX_PX,
        pitch_n: pitch_deg / PITCH_MAX_DEG,
        roll_n: roll_deg / ROLL_MAX_DEG,
    })
}

/// Invert [`normalize_target`]: returns `(f_px, pitch_rad, roll_rad)`.
pub fn denormalize_target(t: &CalibrationTarget) -> (f64, f64, f64) {
    (
        t.focal_n * FOCAL_MAX_PX,
        (t.pitch_n * PITCH_MAX_DEG).to_radians(),
        (t.roll_n * ROLL_MAX_DEG).to_radians(),
    )
}

/// Intersections of the horizon line with the left and right image borders,
/// in pixel coordinates `(u, v)`. The line passes through the horizon
/// midpoint on the central vertical axis; its pixel slope is `-tan(roll)`
/// (v points down), which is `+tan(roll)` in the y-up image-unit frame and
/// matches the rendered horizon orientation. Endpoints may leave `[0, H)`
/// when the horizon exits the frame.
pub fn horizon_endpoints(
    f_px: f64,
    pitch_rad: f64,
    roll_rad: f64,
    width_px: u32,
    height_px: u32,
) -> [(f64, f64); 2] {
    let bp = horizon_midpoint(f_px, pitch_rad, height_px);
    let v_mid = row_of_units(bp, height_px);
    let cx = width_px as f64 / 2.0;
    let slope = -roll_rad.tan();
    let left_v = v_mid + (0.0 - cx) * slope;
    let right_v = v_mid + (width_px as f64 - cx) * slope;
    [(0.0, left_v), (width_px as f64, right_v)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((a.0[i][j] - b.0[i][j]).abs());
            }
        }
        worst
    }

    #[test]
    fn zero_rotation_is_identity() {
        let ext = Extrinsics::new(0.0, 0.0, 0.0).unwrap();
        assert!(max_abs_diff(&rotation_matrix(&ext), &Mat3::IDENTITY) < TOL);
    }

    #[test]
    fn quarter_turn_about_z_sends_x_to_y() {
        // Roll pi/2 is outside the sampler range, so build the raw matrix.
        let r = rot_z(std::f64::consts::FRAC_PI_2);
        let mapped = r.apply([1.0, 0.0, 0.0]);
        assert!((mapped[0] - 0.0).abs() < TOL);
        assert!((mapped[1] - 1.0).abs() < TOL);
        assert!((mapped[2] - 0.0).abs() < TOL);
    }

    #[test]
    fn rotation_matches_elementwise_product_oracle() {
        // Independent oracle: write out Rz(psi), Rx(theta) entry by entry and
        // multiply by hand.
        let theta = -std::f64::consts::FRAC_PI_6;
        let psi = std::f64::consts::FRAC_PI_8;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = psi.sin_cos();
        let rz = [[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]];
        let mut expect = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, rx_row) in rx.iter().enumerate() {
                    expect[i][j] += rz[i][k] * rx_row[j];
                }
            }
        }
        let got = rotation_matrix(&Extrinsics::new(theta, psi, 0.0).unwrap());
        assert!(max_abs_diff(&got, &Mat3(expect)) < TOL);
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let intr = Intrinsics::new(120.0, 200, 200).unwrap();
        let ext = Extrinsics::new(0.0, 0.0, 0.0).unwrap();
        match project_point(&intr, &ext, [0.0, 0.0, 5.0]) {
            Projection::Pixel(u, v) => {
                assert!((u - 100.0).abs() < TOL);
                assert!((v - 100.0).abs() < TOL);
            }
            Projection::BehindCamera => panic!("axis point must project"),
        }
    }

    #[test]
    fn rear_halfspace_is_behind_camera() {
        let intr = Intrinsics::new(100.0, 200, 200).unwrap();
        let ext = Extrinsics::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(
            project_point(&intr, &ext, [0.3, -0.2, -1.0]),
            Projection::BehindCamera
        );
        assert_eq!(
            project_point(&intr, &ext, [1.0, 1.0, 0.0]),
            Projection::BehindCamera
        );
    }

    #[test]
    fn hand_evaluated_projection() {
        // f = 100, zero rotations, 200x200 image, world point (1, 0, 1):
        // u = 100 + 100 * 1/1 = 200, v = 100.
        let intr = Intrinsics::new(100.0, 200, 200).unwrap();
        let ext = Extrinsics::new(0.0, 0.0, 0.0).unwrap();
        match project_point(&intr, &ext, [1.0, 0.0, 1.0]) {
            Projection::Pixel(u, v) => {
                assert!((u - 200.0).abs() < TOL);
                assert!((v - 100.0).abs() < TOL);
            }
            Projection::BehindCamera => panic!("point must project"),
        }
    }

    #[test]
    fn level_camera_horizon_at_center() {
        assert_eq!(horizon_midpoint(300.0, 0.0, 64), 0.0);
    }

    #[test]
    fn forty_five_down_puts_horizon_at_top_edge() {
        let bp = horizon_midpoint(150.0, (-45.0f64).to_radians(), 300);
        assert!((bp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_tangent_pitch_midpoint() {
        let pitch = (-0.5f64).atan(); // tan(theta) = -0.5
        let bp = horizon_midpoint(150.0, -pitch.abs(), 300);
        assert!((bp - 0.5).abs() < 1e-12);
        assert!((row_of_units(bp, 300) - 75.0).abs() < 1e-9);
    }

    #[test]
    fn normalization_hits_range_corners() {
        let intr = Intrinsics::new(500.0, 64, 64).unwrap();
        let ext = Extrinsics::new(-1.5707, 0.0, 0.0).unwrap();
        let t = normalize_target(&intr, &ext).unwrap();
        assert!((t.focal_n - 1.0).abs() < TOL);
        assert!(t.pitch_n < -0.9999);
        assert_eq!(t.roll_n, 0.0);
    }

    #[test]
    fn normalization_rejects_out_of_range() {
        let intr = Intrinsics::new(501.0, 64, 64).unwrap();
        let ext = Extrinsics::new(-0.1, 0.0, 0.0).unwrap();
        assert!(normalize_target(&intr, &ext).is_err());
    }

    #[test]
    fn horizon_endpoints_level() {
        let [l, r] = horizon_endpoints(300.0, 0.0, 0.0, 300, 300);
        assert_eq!(l, (0.0, 150.0));
        assert_eq!(r, (300.0, 150.0));
    }

    #[test]
    fn unit_slope_at_forty_five_roll() {
        let [l, r] = horizon_endpoints(300.0, 0.0, std::f64::consts::FRAC_PI_4, 300, 300);
        assert!(((l.1 - r.1).abs() - 300.0).abs() < 1e-9);
    }

    #[test]
    fn endpoints_at_half_tangent_pitch() {
        let pitch = -(0.5f64).atan();
        let [l, r] = horizon_endpoints(150.0, pitch, 0.0, 300, 300);
        let expect = row_of_units(horizon_midpoint(150.0, pitch, 300), 300);
        assert!((l.1 - expect).abs() < 1e-9);
        assert!((r.1 - expect).abs() < 1e-9);
        assert!((expect - 75.0).abs() < 1e-9);
    }

    #[test]
    fn eq2_matches_distant_point_projection() {
        // The horizon midpoint must equal the projected v of a faraway point
        // at elevation zero straight ahead, converted to image units.
        for &f in &[60.0, 150.0, 300.0, 450.0] {
            for &deg in &[-1.0, -5.0, -20.0, -44.0, -70.0] {
                let intr = Intrinsics::new(f, 640, 480).unwrap();
                let ext = Extrinsics::new((deg as f64).to_radians(), 0.0, 0.0).unwrap();
                let bp = horizon_midpoint(f, ext.pitch_rad, 480);
                match project_point(&intr, &ext, [0.0, 0.0, 1.0e9]) {
                    Projection::Pixel(_, v) => {
                        assert!((units_of_row(v, 480) - bp).abs() < 1e-9);
                    }
                    Projection::BehindCamera => panic!("distant point must project"),
                }
            }
        }
    }

    #[test]
    fn orthonormality_over_random_extrinsics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let ext = Extrinsics::new(
                rng.gen_range(-1.5..=0.0),
                rng.gen_range(-0.78..=0.78),
                rng.gen_range(0.0..6.28),
            )
            .unwrap();
            let r = rotation_matrix(&ext);
            let gram = r.transpose().mul(&r);
            assert!(max_abs_diff(&gram, &Mat3::IDENTITY) < 1e-12);
            assert!((r.det() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn normalization_round_trips(
            f in 50.0f64..=500.0,
            pitch_deg in -89.99f64..=0.0,
            roll_deg in -45.0f64..=45.0,
        ) {
            let intr = Intrinsics::new(f, 64, 64).unwrap();
            let ext = Extrinsics::new(pitch_deg.to_radians(), roll_deg.to_radians(), 0.0).unwrap();
            let t = normalize_target(&intr, &ext).unwrap();
            prop_assert!(t.focal_n >= 0.0 && t.focal_n <= 1.0);
            prop_assert!(t.pitch_n >= -1.0 && t.pitch_n <= 0.0);
            prop_assert!(t.roll_n >= -1.0 && t.roll_n <= 1.0);
            let (f2, p2, r2) = denormalize_target(&t);
            prop_assert!((f2 - f).abs() < 1e-12);
            prop_assert!((p2 - ext.pitch_rad).abs() < 1e-12);
            prop_assert!((r2 - ext.roll_rad).abs() < 1e-12);
        }

        #[test]
        fn midpoint_strictly_decreasing_in_pitch(
            f in 50.0f64..=500.0,
            a in -1.55f64..=-0.001,
            delta in 0.0005f64..=0.2,
        ) {
            // bp is strictly decreasing in theta on (-pi/2, 0].
            let lo = a;
            let hi = (a + delta).min(0.0);
            prop_assume!(hi > lo);
            let bp_lo = horizon_midpoint(f, lo, 256);
            let bp_hi = horizon_midpoint(f, hi, 256);
            prop_assert!(bp_lo > bp_hi);
        }
    }
}
