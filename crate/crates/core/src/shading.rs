//! Shading: second-order spherical-harmonic diffuse lighting, Blinn-Phong
//! specular under an extracted dominant light, the combined render equation,
//! and analytic derivatives of everything the optimizers touch.
//!
//! SH convention: real spherical harmonics with the Condon-Shortley phase
//! omitted, bands 0..2, ordered (Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21,
//! Y22). With this convention the band-1 coefficients of a light are direct
//! direction components, so the dominant-light direction needs no sign flips.

use nalgebra::{Vector2, Vector3};

use crate::geom::UvRaster;
use crate::{Error, Result};

pub const SH_COUNT: usize = 9;

/// Guard for the dominant-light intensity division `irradiance / (d·n)`.
pub const SLOAN_EPS: f64 = 0.1;

/// Rec. 709 luma weights used to reduce RGB lighting to one luminance channel.
pub const LUMINANCE_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

const Y00: f64 = 0.282094791773878; // 1 / (2 sqrt(pi))
const C1: f64 = 0.488602511902920; // sqrt(3 / (4 pi))
const C2: f64 = 1.092548430592079; // sqrt(15 / (4 pi))
const C3: f64 = 0.315391565252520; // (1/4) sqrt(5 / pi)
const C4: f64 = 0.546274215296040; // (1/4) sqrt(15 / pi)

/// Real SH basis values for bands 0..2 at direction `n`. Non-unit inputs are
/// normalized first.
pub fn sh_basis(n: Vector3<f64>) -> [f64; SH_COUNT] {
    let n = n.normalize();
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Y00,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C3 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C4 * (x * x - y * y),
    ]
}

/// Basis values together with their gradients in the components of `n`.
///
/// The gradients treat `n` as a free 3-vector; they are meant to be
/// contracted with directions tangent to the unit sphere (e.g. the columns
/// of a spherical-coordinate Jacobian), where the radial component of the
/// true derivative vanishes anyway.
pub fn sh_basis_and_grad(n: Vector3<f64>) -> ([f64; SH_COUNT], [Vector3<f64>; SH_COUNT]) {
    let n = n.normalize();
    let (x, y, z) = (n.x, n.y, n.z);
    let basis = [
        Y00,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C3 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C4 * (x * x - y * y),
    ];
    let grads = [
        Vector3::zeros(),
        Vector3::new(0.0, C1, 0.0),
        Vector3::new(0.0, 0.0, C1),
        Vector3::new(C1, 0.0, 0.0),
        Vector3::new(C2 * y, C2 * x, 0.0),
        Vector3::new(0.0, C2 * z, C2 * y),
        Vector3::new(0.0, 0.0, 6.0 * C3 * z),
        Vector3::new(C2 * z, 0.0, C2 * x),
        Vector3::new(2.0 * C4 * x, -2.0 * C4 * y, 0.0),
    ];
    (basis, grads)
}

/// Second-order SH lighting environment: 9 coefficients per color channel
/// plus a per-channel ambient term on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ShLighting {
    /// `coeffs[channel][k]` with channels ordered R, G, B.
    pub coeffs: [[f64; SH_COUNT]; 3],
    pub ambient: Vector3<f64>,
}

impl ShLighting {
    pub fn zero() -> Self {
        ShLighting {
            coeffs: [[0.0; SH_COUNT]; 3],
            ambient: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !(0.0..=255.0).contains(&self.ambient[c]) {
                return Err(Error::Parameter(format!(
                    "ambient channel {c} is {}, expected within [0, 255]",
                    self.ambient[c]
                )));
            }
        }
        Ok(())
    }

    /// Per-channel SH irradiance at normal `n`.
    pub fn irradiance(&self, n: Vector3<f64>) -> Vector3<f64> {
        let basis = sh_basis(n);
        self.irradiance_from_basis(&basis)
    }

    pub fn irradiance_from_basis(&self, basis: &[f64; SH_COUNT]) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..SH_COUNT {
                acc += self.coeffs[c][k] * basis[k];
            }
            out[c] = acc;
        }
        out
    }

    /// Luminance-weighted coefficient vector.
    pub fn luminance_coeffs(&self) -> [f64; SH_COUNT] {
        let mut lum = [0.0; SH_COUNT];
        for k in 0..SH_COUNT {
            for c in 0..3 {
                lum[k] += LUMINANCE_WEIGHTS[c] * self.coeffs[c][k];
            }
        }
        lum
    }

    /// Unnormalized dominant direction: the band-1 luminance coefficients
    /// rearranged into (x, y, z) order.
    pub fn dominant_axis(&self) -> Vector3<f64> {
        let lum = self.luminance_coeffs();
        Vector3::new(lum[3], lum[1], lum[2])
    }
}

/// A dominant directional light extracted from an SH environment: a global
/// unit direction plus a per-texel RGB intensity field over the UV domain.
#[derive(Debug, Clone)]
pub struct DominantLight {
    pub direction: Vector3<f64>,
    pub intensity: UvRaster<Vector3<f64>>,
}

impl DominantLight {
    /// True when the environment had no linear component; all intensities
    /// are zero and the specular term vanishes.
    pub fn is_zero(&self) -> bool {
        self.intensity.data.iter().all(|v| *v == Vector3::zeros())
    }
}

/// Dominant light direction of an SH environment, or None when the band-1
/// luminance coefficients are all zero.
pub fn dominant_direction(light: &ShLighting) -> Option<Vector3<f64>> {
    let axis = light.dominant_axis();
    let norm = axis.norm();
    (norm > 1e-12).then(|| axis / norm)
}

/// Pointwise dominant-light intensity at a surface normal:
/// `max(0, irradiance(n)) / max(ε, d·n)` per channel, with ε = `SLOAN_EPS`.
pub fn dominant_intensity(light: &ShLighting, direction: Vector3<f64>, n: Vector3<f64>) -> Vector3<f64> {
    let irr = light.irradiance(n);
    let denom = direction.dot(&n).max(SLOAN_EPS);
    Vector3::new(
        irr.x.max(0.0) / denom,
        irr.y.max(0.0) / denom,
        irr.z.max(0.0) / denom,
    )
}

/// Extracts the dominant light of `light` over a UV normal field. With no
/// linear lighting component the result carries an all-zero intensity map
/// (direction defaults to +z).
pub fn extract_dominant_light(
    light: &ShLighting,
    normal_map: &UvRaster<Vector3<f64>>,
) -> DominantLight {
    match dominant_direction(light) {
        Some(direction) => {
            let data = normal_map
                .data
                .iter()
                .map(|&n| dominant_intensity(light, direction, n))
                .collect();
            DominantLight {
                direction,
                intensity: UvRaster {
                    width: normal_map.width,
                    height: normal_map.height,
                    data,
                },
            }
        }
        None => DominantLight {
            direction: Vector3::z(),
            intensity: UvRaster::filled(normal_map.width, normal_map.height, Vector3::zeros()),
        },
    }
}

/// Diffuse term: per-channel product of albedo and SH irradiance (Lambertian
/// under the SH environment). Not clamped; clamping happens at image write.
pub fn shade_diffuse(albedo: Vector3<f64>, n: Vector3<f64>, light: &ShLighting) -> Vector3<f64> {
    let irr = light.irradiance(n);
    albedo.component_mul(&irr)
}

/// Blinn-Phong specular lobe for a known per-point light intensity:
/// `intensity · C_s · (n·h)^m` with `h = (d + v)/|d + v|`, and exactly zero
/// when `n·h <= 0` or when the half-vector is degenerate (`d + v = 0`).
pub fn shade_specular_point(
    c_s: f64,
    n: Vector3<f64>,
    v: Vector3<f64>,
    direction: Vector3<f64>,
    intensity: Vector3<f64>,
    shininess: f64,
) -> Vector3<f64> {
    if c_s == 0.0 {
        return Vector3::zeros();
    }
    let u = direction + v;
    let len = u.norm();
    if len < 1e-12 {
        return Vector3::zeros();
    }
    let h = u / len;
    let ndoth = n.dot(&h);
    if ndoth <= 0.0 {
        return Vector3::zeros();
    }
    intensity * (c_s * ndoth.powf(shininess))
}

/// Blinn-Phong specular term with the intensity sampled from a baked
/// dominant-light map at `uv`.
pub fn shade_specular(
    c_s: f64,
    n: Vector3<f64>,
    v: Vector3<f64>,
    dom: &DominantLight,
    uv: Vector2<f64>,
    shininess: f64,
) -> Result<Vector3<f64>> {
    let intensity = dom.intensity.sample(uv)?;
    Ok(shade_specular_point(c_s, n, v, dom.direction, intensity, shininess))
}

/// Full render equation at a surface point: ambient + diffuse + specular.
///
/// `albedo` is the effective diffuse albedo (base plus displacement). The
/// specular intensity is evaluated pointwise from the lighting and `n`, so
/// the result is a pure function of its arguments. With `c_s = 0` the value
/// is bitwise identical to the ambient-plus-diffuse path.
pub fn shade_total_point(
    albedo: Vector3<f64>,
    c_s: f64,
    n: Vector3<f64>,
    v: Vector3<f64>,
    light: &ShLighting,
    shininess: f64,
) -> Vector3<f64> {
    let mut out = light.ambient + shade_diffuse(albedo, n, light);
    if c_s != 0.0 {
        if let Some(direction) = dominant_direction(light) {
            let intensity = dominant_intensity(light, direction, n);
            out += shade_specular_point(c_s, n, v, direction, intensity, shininess);
        }
    }
    out
}

/// Value and analytic partials of `shade_total_point`.
///
/// Index conventions: `d_l[out][inp][k]` is the derivative of output channel
/// `out` with respect to lighting coefficient `k` of channel `inp` (the
/// cross-channel terms come from the luminance-weighted dominant direction).
/// `d_n[out]` is the derivative in the components of `n`, valid contracted
/// against tangent directions of the unit sphere. Kinks (`n·h = 0`,
/// irradiance = 0, `d·n = ε`, zero band-1) use the zero subgradient.
#[derive(Debug, Clone)]
pub struct ShadeGrads {
    pub value: Vector3<f64>,
    /// ∂ I[c] / ∂ albedo[c]; cross-channel terms are zero.
    pub d_albedo: Vector3<f64>,
    /// ∂ I[c] / ∂ C_s.
    pub d_cs: Vector3<f64>,
    pub d_l: [[[f64; SH_COUNT]; 3]; 3],
    pub d_n: [Vector3<f64>; 3],
}

/// Computes `shade_total_point` and every partial the optimizers need.
pub fn shade_total_gradients(
    albedo: Vector3<f64>,
    c_s: f64,
    n: Vector3<f64>,
    v: Vector3<f64>,
    light: &ShLighting,
    shininess: f64,
) -> ShadeGrads {
    let (basis, basis_grads) = sh_basis_and_grad(n);
    let irr = light.irradiance_from_basis(&basis);

    // Irradiance gradient in n per channel.
    let mut irr_grad = [Vector3::zeros(); 3];
    for c in 0..3 {
        for k in 0..SH_COUNT {
            irr_grad[c] += light.coeffs[c][k] * basis_grads[k];
        }
    }

    let mut grads = ShadeGrads {
        value: light.ambient + albedo.component_mul(&irr),
        d_albedo: irr,
        d_cs: Vector3::zeros(),
        d_l: [[[0.0; SH_COUNT]; 3]; 3],
        d_n: [Vector3::zeros(); 3],
    };
    // Diffuse contributions.
    for out in 0..3 {
        for k in 0..SH_COUNT {
            grads.d_l[out][out][k] = albedo[out] * basis[k];
        }
        grads.d_n[out] = albedo[out] * irr_grad[out];
    }

    // Specular contributions through the dominant-light chain.
    let axis = light.dominant_axis();
    let axis_norm = axis.norm();
    if axis_norm <= 1e-12 {
        return grads;
    }
    let d = axis / axis_norm;
    let u = d + v;
    let u_len = u.norm();
    if u_len < 1e-12 {
        return grads;
    }
    let h = u / u_len;
    let ndoth = n.dot(&h);
    if ndoth <= 0.0 {
        return grads;
    }
    let sigma = ndoth.powf(shininess);
    let sigma_prime = shininess * ndoth.powf(shininess - 1.0);
    let dn_raw = d.dot(&n);
    let denom = dn_raw.max(SLOAN_EPS);
    let denom_active = dn_raw > SLOAN_EPS;
    let numer = Vector3::new(irr.x.max(0.0), irr.y.max(0.0), irr.z.max(0.0));
    let intensity = numer / denom;

    grads.value += intensity * (c_s * sigma);
    grads.d_cs = intensity * sigma;

    // Projectors for the two normalizations in the chain d = w/|w| and
    // h = (d+v)/|d+v|.
    let proj_w = (nalgebra::Matrix3::identity() - d * d.transpose()) / axis_norm;
    let proj_h = (nalgebra::Matrix3::identity() - h * h.transpose()) / u_len;

    // Sensitivity of d to a lighting coefficient: only band-1 coefficients
    // move the axis, each along one Cartesian direction scaled by the
    // luminance weight of its channel. Basis order maps k=1 -> y, k=2 -> z,
    // k=3 -> x.
    let axis_of_k = |k: usize| -> Option<usize> {
        match k {
            1 => Some(1),
            2 => Some(2),
            3 => Some(0),
            _ => None,
        }
    };

    for out in 0..3 {
        let relu_active = irr[out] > 0.0;
        // d I_s[out] / d l[inp][k]
        for inp in 0..3 {
            for k in 0..SH_COUNT {
                let mut dvalue = 0.0;
                // Numerator: own-channel irradiance under the ReLU.
                if inp == out && relu_active {
                    dvalue += c_s * sigma * basis[k] / denom;
                }
                if let Some(axis_idx) = axis_of_k(k) {
                    let dd = LUMINANCE_WEIGHTS[inp] * proj_w.column(axis_idx);
                    // Through the half-vector: n·h changes with d.
                    let dh = proj_h * dd;
                    dvalue += c_s * intensity[out] * sigma_prime * n.dot(&dh);
                    // Through the denominator guard.
                    if denom_active {
                        dvalue -= c_s * sigma * numer[out] / (denom * denom) * n.dot(&dd);
                    }
                }
                grads.d_l[out][inp][k] += dvalue;
            }
        }
        // d I_s[out] / d n: the half-vector is independent of n, the
        // numerator and denominator are not.
        let mut dn = c_s * intensity[out] * sigma_prime * h;
        if relu_active {
            dn += c_s * sigma / denom * irr_grad[out];
        }
        if denom_active {
            dn -= c_s * sigma * numer[out] / (denom * denom) * d;
        }
        grads.d_n[out] += dn;
    }
    grads
}

/// Uniform random unit vector (rejection sampled).
pub fn sample_unit_vector(rng: &mut impl rand::Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let len = v.norm();
        if len > 1e-3 && len <= 1.0 {
            return v / len;
        }
    }
}

/// Random DC-dominant lighting environment for verification sweeps.
pub fn sample_test_lighting(rng: &mut impl rand::Rng) -> ShLighting {
    let mut light = ShLighting::zero();
    for c in 0..3 {
        light.coeffs[c][0] = rng.gen_range(1.0..3.0);
        for k in 1..SH_COUNT {
            light.coeffs[c][k] = rng.gen_range(-0.6..0.6);
        }
    }
    light.ambient = Vector3::new(
        rng.gen_range(0.0..30.0),
        rng.gen_range(0.0..30.0),
        rng.gen_range(0.0..30.0),
    );
    light
}

/// Draws a random shading configuration `(albedo, C_s, n, v, lighting)` and
/// rejects it (returns None) when it sits near any subgradient kink of the
/// shading model: degenerate dominant axis or half-vector, `|n·h| < 0.05`,
/// `|d·n − ε| < 0.05`, or any channel's irradiance within 0.05 of its ReLU.
/// Finite-difference gradient verification samples through this filter.
pub fn sample_kink_free_config(
    rng: &mut impl rand::Rng,
) -> Option<(Vector3<f64>, f64, Vector3<f64>, Vector3<f64>, ShLighting)> {
    let light = sample_test_lighting(rng);
    let n = sample_unit_vector(rng);
    let v = sample_unit_vector(rng);
    let albedo = Vector3::new(
        rng.gen_range(10.0..240.0),
        rng.gen_range(10.0..240.0),
        rng.gen_range(10.0..240.0),
    );
    let c_s = rng.gen_range(5.0..60.0);
    let axis = light.dominant_axis();
    if axis.norm() < 0.05 {
        return None;
    }
    let d = axis.normalize();
    let u = d + v;
    if u.norm() < 0.05 {
        return None;
    }
    let h = u.normalize();
    if n.dot(&h).abs() < 0.05 {
        return None;
    }
    if (d.dot(&n) - SLOAN_EPS).abs() < 0.05 {
        return None;
    }
    let irr = light.irradiance(n);
    if irr.iter().any(|c| c.abs() < 0.05) {
        return None;
    }
    Some((albedo, c_s, n, v, light))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        sample_unit_vector(rng)
    }

    #[test]
    fn y00_is_constant() {
        let mut rng = stream(7, "sh-y00");
        for _ in 0..100 {
            let basis = sh_basis(random_unit(&mut rng));
            assert_relative_eq!(basis[0], 0.2820948, epsilon = 1e-7);
        }
    }

    #[test]
    fn band1_at_north_pole() {
        let basis = sh_basis(Vector3::z());
        assert_eq!(basis[1], 0.0);
        assert_eq!(basis[3], 0.0);
        assert_relative_eq!(basis[2], 0.4886025, epsilon = 1e-7);
    }

    #[test]
    fn antipodal_parity_by_band() {
        let mut rng = stream(7, "sh-parity");
        for _ in 0..50 {
            let n = random_unit(&mut rng);
            let plus = sh_basis(n);
            let minus = sh_basis(-n);
            // Band 0 and band 2 are even, band 1 is odd.
            assert_relative_eq!(plus[0], minus[0], epsilon = 1e-14);
            for k in 1..4 {
                assert_relative_eq!(plus[k], -minus[k], epsilon = 1e-14);
            }
            for k in 4..9 {
                assert_relative_eq!(plus[k], minus[k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn band_sum_identity_holds_everywhere() {
        // Sum of squared basis values is (1 + 3 + 5) / (4 pi) on the sphere.
        let expected = 9.0 / (4.0 * std::f64::consts::PI);
        assert_relative_eq!(expected, 0.7161972, epsilon = 1e-7);
        let mut rng = stream(7, "sh-bandsum");
        for _ in 0..500 {
            let basis = sh_basis(random_unit(&mut rng));
            let sum: f64 = basis.iter().map(|b| b * b).sum();
            assert_relative_eq!(sum, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn basis_gradients_match_finite_differences_tangentially() {
        let mut rng = stream(7, "sh-grad");
        for _ in 0..50 {
            let n = random_unit(&mut rng);
            let (_, grads) = sh_basis_and_grad(n);
            // Probe along two tangent directions.
            let t1 = n.cross(&random_unit(&mut rng));
            if t1.norm() < 1e-3 {
                continue;
            }
            let t1 = t1.normalize();
            let h = 1e-6;
            let plus = sh_basis((n + h * t1).normalize());
            let minus = sh_basis((n - h * t1).normalize());
            for k in 0..SH_COUNT {
                let fd = (plus[k] - minus[k]) / (2.0 * h);
                assert_relative_eq!(grads[k].dot(&t1), fd, epsilon = 1e-5);
            }
        }
    }

    fn random_lighting(rng: &mut impl Rng) -> ShLighting {
        sample_test_lighting(rng)
    }

    #[test]
    fn zero_light_shades_to_zero() {
        let light = ShLighting::zero();
        let mut rng = stream(7, "shade-zero");
        for _ in 0..20 {
            let out = shade_diffuse(
                Vector3::new(200.0, 100.0, 50.0),
                random_unit(&mut rng),
                &light,
            );
            assert_eq!(out, Vector3::zeros());
        }
    }

    #[test]
    fn dc_only_lighting_is_normal_independent() {
        let mut light = ShLighting::zero();
        light.coeffs[0][0] = 2.0;
        light.coeffs[1][0] = 1.0;
        light.coeffs[2][0] = 0.5;
        let albedo = Vector3::new(100.0, 100.0, 100.0);
        let mut rng = stream(7, "shade-dc");
        let reference = shade_diffuse(albedo, Vector3::z(), &light);
        assert_relative_eq!(reference.x, 100.0 * 2.0 * 0.2820948, epsilon = 1e-4);
        for _ in 0..20 {
            let out = shade_diffuse(albedo, random_unit(&mut rng), &light);
            assert_relative_eq!(out, reference, epsilon = 1e-12);
        }
    }

    #[test]
    fn diffuse_is_linear_in_albedo() {
        let mut rng = stream(7, "shade-linear");
        let light = random_lighting(&mut rng);
        let n = random_unit(&mut rng);
        let albedo = Vector3::new(30.0, 60.0, 90.0);
        let single = shade_diffuse(albedo, n, &light);
        let doubled = shade_diffuse(2.0 * albedo, n, &light);
        assert_relative_eq!(doubled, 2.0 * single, epsilon = 1e-12);
    }

    #[test]
    fn specular_at_perfect_alignment_is_intensity_times_albedo() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let v = Vector3::new(0.0, 0.0, 1.0);
        // h = z, pick n = h.
        let out = shade_specular_point(0.5, Vector3::z(), v, d, Vector3::new(10.0, 20.0, 30.0), 5.0);
        assert_relative_eq!(out, Vector3::new(5.0, 10.0, 15.0), epsilon = 1e-12);
    }

    #[test]
    fn specular_falls_off_as_the_fifth_power() {
        let d = Vector3::z();
        let v = Vector3::z();
        // n·h = 0.5 at 60° from the half-vector.
        let n = Vector3::new((3.0f64 / 4.0).sqrt(), 0.0, 0.5);
        let out = shade_specular_point(1.0, n, v, d, Vector3::new(8.0, 8.0, 8.0), 5.0);
        assert_relative_eq!(out.x, 8.0 * 0.03125, epsilon = 1e-12);
    }

    #[test]
    fn specular_is_zero_past_ninety_degrees() {
        let d = Vector3::z();
        let v = Vector3::z();
        let n = Vector3::new((1.0f64 - 0.09).sqrt(), 0.0, -0.3);
        let out = shade_specular_point(1.0, n, v, d, Vector3::new(8.0, 8.0, 8.0), 5.0);
        assert_eq!(out, Vector3::zeros());
    }

    #[test]
    fn degenerate_half_vector_contributes_nothing() {
        let d = Vector3::z();
        let v = -Vector3::z();
        let out = shade_specular_point(1.0, Vector3::x(), v, d, Vector3::new(8.0, 8.0, 8.0), 5.0);
        assert_eq!(out, Vector3::zeros());
    }

    #[test]
    fn specular_is_monotone_in_alignment() {
        let d = Vector3::z();
        let v = Vector3::z();
        let mut last = -1.0;
        for i in 1..=20 {
            let t = i as f64 / 20.0;
            let n = Vector3::new((1.0 - t * t).sqrt(), 0.0, t);
            let out = shade_specular_point(1.0, n, v, d, Vector3::new(1.0, 1.0, 1.0), 5.0);
            assert!(out.x >= last);
            last = out.x;
        }
    }

    #[test]
    fn total_shade_is_the_sum_of_its_parts() {
        let mut rng = stream(7, "shade-sum");
        for _ in 0..30 {
            let light = random_lighting(&mut rng);
            let n = random_unit(&mut rng);
            let v = random_unit(&mut rng);
            let albedo = Vector3::new(
                rng.gen_range(0.0..255.0),
                rng.gen_range(0.0..255.0),
                rng.gen_range(0.0..255.0),
            );
            let c_s = rng.gen_range(0.0..80.0);
            let total = shade_total_point(albedo, c_s, n, v, &light, 5.0);
            let diffuse = shade_diffuse(albedo, n, &light);
            let spec = match dominant_direction(&light) {
                Some(dir) => {
                    shade_specular_point(c_s, n, v, dir, dominant_intensity(&light, dir, n), 5.0)
                }
                None => Vector3::zeros(),
            };
            assert_relative_eq!(total, light.ambient + diffuse + spec, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_specular_albedo_matches_lambertian_bitwise() {
        let mut rng = stream(7, "shade-lambert");
        for _ in 0..30 {
            let light = random_lighting(&mut rng);
            let n = random_unit(&mut rng);
            let v = random_unit(&mut rng);
            let albedo = Vector3::new(120.0, 90.0, 60.0);
            let total = shade_total_point(albedo, 0.0, n, v, &light, 5.0);
            let lambert = light.ambient + shade_diffuse(albedo, n, &light);
            assert_eq!(total, lambert);
        }
    }

    #[test]
    fn ambient_alone_when_everything_else_is_off() {
        let mut light = ShLighting::zero();
        light.ambient = Vector3::new(12.0, 15.0, 18.0);
        let out = shade_total_point(
            Vector3::new(200.0, 200.0, 200.0),
            0.0,
            Vector3::z(),
            Vector3::z(),
            &light,
            5.0,
        );
        assert_eq!(out, light.ambient);
    }

    #[test]
    fn directional_light_direction_is_recovered() {
        // Project an analytic directional (delta) light into SH by
        // evaluation, then extract the dominant direction.
        let target = Vector3::new(0.3, -0.2, 0.93).normalize();
        let basis = sh_basis(target);
        let mut light = ShLighting::zero();
        for c in 0..3 {
            for k in 0..SH_COUNT {
                light.coeffs[c][k] = 2.0 * basis[k];
            }
        }
        let d = dominant_direction(&light).unwrap();
        let angle = d.dot(&target).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 1.0, "direction off by {angle} degrees");
    }

    #[test]
    fn rotating_the_light_rotates_the_direction() {
        let q = crate::geom::rotation_from_axis_angle(Vector3::new(1.0, 0.4, -0.3), 0.9);
        let source = Vector3::new(0.1, 0.8, 0.6).normalize();
        let build = |dir: Vector3<f64>| {
            let basis = sh_basis(dir);
            let mut light = ShLighting::zero();
            for c in 0..3 {
                for k in 0..SH_COUNT {
                    light.coeffs[c][k] = basis[k];
                }
            }
            light
        };
        let d0 = dominant_direction(&build(source)).unwrap();
        let d1 = dominant_direction(&build(q * source)).unwrap();
        let angle = d1.dot(&(q * d0)).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 1.0, "rotation equivariance off by {angle} degrees");
    }

    #[test]
    fn dc_only_environment_has_no_dominant_light() {
        let mut light = ShLighting::zero();
        light.coeffs[0][0] = 3.0;
        light.coeffs[1][0] = 3.0;
        light.coeffs[2][0] = 3.0;
        assert!(dominant_direction(&light).is_none());
        let normals = UvRaster::filled(4, 4, Vector3::z());
        let dom = extract_dominant_light(&light, &normals);
        assert!(dom.is_zero());
        assert_relative_eq!(dom.direction.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn intensity_map_is_clamped_and_guarded() {
        let mut light = ShLighting::zero();
        // Strong -z lobe: irradiance at +z normals is negative.
        light.coeffs[0][2] = -2.0;
        light.coeffs[1][2] = -2.0;
        light.coeffs[2][2] = -2.0;
        let dir = dominant_direction(&light).unwrap();
        assert_relative_eq!(dir, -Vector3::z(), epsilon = 1e-12);
        // Normal aligned with +z: irradiance negative -> clamped to zero.
        let up = dominant_intensity(&light, dir, Vector3::z());
        assert_eq!(up, Vector3::zeros());
        // Grazing normal: denominator guarded by epsilon.
        let grazing = Vector3::x();
        let i = dominant_intensity(&light, dir, grazing);
        assert!(i.iter().all(|c| c.is_finite() && *c >= 0.0));
    }

    #[test]
    fn simple_gradient_identities() {
        let mut rng = stream(7, "shade-grad-ident");
        for _ in 0..20 {
            let light = random_lighting(&mut rng);
            let n = random_unit(&mut rng);
            let v = random_unit(&mut rng);
            let albedo = Vector3::new(90.0, 110.0, 70.0);
            let c_s = 20.0;
            let g = shade_total_gradients(albedo, c_s, n, v, &light, 5.0);
            // d/d albedo is the irradiance.
            assert_relative_eq!(g.d_albedo, light.irradiance(n), epsilon = 1e-12);
            // d/d C_s is intensity * (n·h)^m.
            if let Some(dir) = dominant_direction(&light) {
                let h = (dir + v).normalize();
                let ndoth = n.dot(&h);
                let expected = if ndoth > 0.0 {
                    dominant_intensity(&light, dir, n) * ndoth.powf(5.0)
                } else {
                    Vector3::zeros()
                };
                assert_relative_eq!(g.d_cs, expected, epsilon = 1e-10);
            }
            // Value agrees with the plain shader.
            assert_relative_eq!(
                g.value,
                shade_total_point(albedo, c_s, n, v, &light, 5.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        use nalgebra::DVector;

        let mut rng = stream(7, "shade-grad-fd");
        let mut tested = 0;
        while tested < 60 {
            let Some((albedo, c_s, n, v, light)) = sample_kink_free_config(&mut rng) else {
                continue;
            };
            tested += 1;
            let (theta, phi) = (n.z.acos(), n.y.atan2(n.x));
            // Parameter vector: [delta(3), c_s, theta, phi, l(27)].
            let mut x = DVector::zeros(6 + 27);
            x[3] = c_s;
            x[4] = theta;
            x[5] = phi;
            for c in 0..3 {
                for k in 0..SH_COUNT {
                    x[6 + c * SH_COUNT + k] = light.coeffs[c][k];
                }
            }
            for out in 0..3 {
                let f = |p: &DVector<f64>| {
                    let mut lt = light.clone();
                    for c in 0..3 {
                        for k in 0..SH_COUNT {
                            lt.coeffs[c][k] = p[6 + c * SH_COUNT + k];
                        }
                    }
                    let nn = Vector3::new(
                        p[4].sin() * p[5].cos(),
                        p[4].sin() * p[5].sin(),
                        p[4].cos(),
                    );
                    let alb = albedo + Vector3::new(p[0], p[1], p[2]);
                    shade_total_point(alb, p[3], nn, v, &lt, 5.0)[out]
                };
                let g = shade_total_gradients(albedo, c_s, n, v, &light, 5.0);
                let st = theta.sin();
                let dn_dtheta = Vector3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), -st);
                let dn_dphi = Vector3::new(-st * phi.sin(), st * phi.cos(), 0.0);
                let mut analytic = DVector::zeros(6 + 27);
                analytic[out] = g.d_albedo[out];
                analytic[3] = g.d_cs[out];
                analytic[4] = g.d_n[out].dot(&dn_dtheta);
                analytic[5] = g.d_n[out].dot(&dn_dphi);
                for c in 0..3 {
                    for k in 0..SH_COUNT {
                        analytic[6 + c * SH_COUNT + k] = g.d_l[out][c][k];
                    }
                }
                let err = crate::optim::check_gradient(f, &analytic, &x, 1e-4);
                assert!(err < 1e-4, "gradient error {err} on config {tested}");
            }
        }
    }

    #[test]
    fn diffuse_shading_is_rotation_invariant_via_reprojection() {
        // Project a smooth analytic environment into SH by quadrature, both
        // in original and rotated frames, and compare shading of matched
        // normal pairs.
        let q = crate::geom::rotation_from_axis_angle(Vector3::new(0.2, 1.0, -0.4), 1.3);
        let env = |w: Vector3<f64>| -> f64 {
            0.8 + 0.5 * w.dot(&Vector3::new(0.6, 0.0, 0.8)).max(0.0)
                + 0.3 * w.dot(&Vector3::new(-0.7, 0.7, 0.14)).max(0.0).powi(2)
        };
        let project = |f: &dyn Fn(Vector3<f64>) -> f64| -> [f64; SH_COUNT] {
            // Fibonacci-sphere quadrature.
            let n_pts = 20000;
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            let mut coeffs = [0.0; SH_COUNT];
            for i in 0..n_pts {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n_pts as f64;
                let r = (1.0 - z * z).sqrt();
                let th = golden * i as f64;
                let w = Vector3::new(r * th.cos(), r * th.sin(), z);
                let basis = sh_basis(w);
                let fv = f(w);
                for k in 0..SH_COUNT {
                    coeffs[k] += fv * basis[k];
                }
            }
            let weight = 4.0 * std::f64::consts::PI / n_pts as f64;
            for c in coeffs.iter_mut() {
                *c *= weight;
            }
            coeffs
        };
        let orig = project(&env);
        let rotated_env = |w: Vector3<f64>| env(q.transpose() * w);
        let rotated = project(&rotated_env);
        let as_light = |c: [f64; SH_COUNT]| {
            let mut light = ShLighting::zero();
            for ch in 0..3 {
                light.coeffs[ch] = c;
            }
            light
        };
        let (l0, l1) = (as_light(orig), as_light(rotated));
        let mut rng = stream(7, "shade-rot");
        for _ in 0..25 {
            let n = random_unit(&mut rng);
            let a = shade_diffuse(Vector3::new(1.0, 1.0, 1.0), n, &l0);
            let b = shade_diffuse(Vector3::new(1.0, 1.0, 1.0), q * n, &l1);
            assert_relative_eq!(a.x, b.x, epsilon = 1e-3);
        }
    }
}
