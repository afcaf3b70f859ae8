//! WGS84 conversions and a local east-north tangent plane.

use crate::types::GeoPoint;
use nalgebra::{Matrix3, Vector3};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;

fn e2() -> f64 {
    WGS84_F * (2.0 - WGS84_F)
}

/// Geodetic (degrees, meters) to earth-centred earth-fixed meters.
pub fn geodetic_to_ecef(p: GeoPoint, height_m: f64) -> Vector3<f64> {
    let (lat, lon) = (p.lat.to_radians(), p.lon.to_radians());
    let n = WGS84_A / (1.0 - e2() * lat.sin().powi(2)).sqrt();
    Vector3::new(
        (n + height_m) * lat.cos() * lon.cos(),
        (n + height_m) * lat.cos() * lon.sin(),
        (n * (1.0 - e2()) + height_m) * lat.sin(),
    )
}

/// Inverse of [`geodetic_to_ecef`], iterating on latitude.
pub fn ecef_to_geodetic(v: &Vector3<f64>) -> (GeoPoint, f64) {
    let lon = v.y.atan2(v.x);
    let p = (v.x * v.x + v.y * v.y).sqrt();
    let mut lat = v.z.atan2(p * (1.0 - e2()));
    let mut h = 0.0;
    for _ in 0..10 {
        let n = WGS84_A / (1.0 - e2() * lat.sin().powi(2)).sqrt();
        h = p / lat.cos() - n;
        let next = v.z.atan2(p * (1.0 - e2() * n / (n + h)));
        if (next - lat).abs() < 1e-15 {
            lat = next;
            break;
        }
        lat = next;
    }
    (
        GeoPoint {
            lat: lat.to_degrees(),
            lon: lon.to_degrees(),
        },
        h,
    )
}

/// East-north-up frame tangent to the ellipsoid at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnuFrame {
    pub origin: GeoPoint,
    origin_ecef: Vector3<f64>,
    rot: Matrix3<f64>,
}

impl EnuFrame {
    pub fn new(origin: GeoPoint) -> Self {
        let (lat, lon) = (origin.lat.to_radians(), origin.lon.to_radians());
        let (sl, cl, so, co) = (lat.sin(), lat.cos(), lon.sin(), lon.cos());
        #[rustfmt::skip]
        let rot = Matrix3::new(
            -so,       co,      0.0,
            -sl * co, -sl * so, cl,
             cl * co,  cl * so, sl,
        );
        Self {
            origin,
            origin_ecef: geodetic_to_ecef(origin, 0.0),
            rot,
        }
    }

    /// Frame centred on the mean of `points`.
    pub fn centroid(points: &[GeoPoint]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let sum = points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + geodetic_to_ecef(*p, 0.0));
        let (origin, _) = ecef_to_geodetic(&(sum / n));
        Some(Self::new(origin))
    }

    pub fn to_enu(&self, p: GeoPoint) -> (f64, f64) {
        let d = self.rot * (geodetic_to_ecef(p, 0.0) - self.origin_ecef);
        (d.x, d.y)
    }

    pub fn to_geo(&self, east: f64, north: f64) -> GeoPoint {
        let mut up = 0.0;
        let mut out = self.origin;
        // two passes put the point back on the ellipsoid surface
        for _ in 0..2 {
            let ecef = self.origin_ecef + self.rot.transpose() * Vector3::new(east, north, up);
            let (g, h) = ecef_to_geodetic(&ecef);
            out = g;
            up -= h;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ecef_equator() {
        let v = geodetic_to_ecef(GeoPoint { lat: 0.0, lon: 0.0 }, 0.0);
        assert!((v.x - WGS84_A).abs() < 1e-6);
        let v = geodetic_to_ecef(GeoPoint { lat: 90.0, lon: 0.0 }, 0.0);
        assert!((v.z - WGS84_A * (1.0 - WGS84_F)).abs() < 1e-6);
    }

    #[test]
    fn one_arcsecond_north() {
        let o = GeoPoint { lat: 51.0, lon: 3.7 };
        let f = EnuFrame::new(o);
        let (e, n) = f.to_enu(GeoPoint {
            lat: 51.0 + 1.0 / 3600.0,
            lon: 3.7,
        });
        assert!(e.abs() < 1e-6);
        // meridional arc length of one arcsecond at 51°N
        assert!((n - 30.91).abs() < 0.02, "{n}");
    }

    proptest! {
        #[test]
        fn geodetic_round_trip(lat in -80.0..80.0f64, lon in -179.0..179.0f64, h in -100.0..5000.0f64) {
            let (g, hh) = ecef_to_geodetic(&geodetic_to_ecef(GeoPoint { lat, lon }, h));
            prop_assert!((g.lat - lat).abs() < 1e-9);
            prop_assert!((g.lon - lon).abs() < 1e-9);
            prop_assert!((hh - h).abs() < 1e-5);
        }

        #[test]
        fn enu_round_trip(lat in -70.0..70.0f64, lon in -170.0..170.0f64, e in -1000.0..1000.0f64, n in -1000.0..1000.0f64) {
            let f = EnuFrame::new(GeoPoint { lat, lon });
            let (e2, n2) = f.to_enu(f.to_geo(e, n));
            prop_assert!((e2 - e).abs() < 1e-6 && (n2 - n).abs() < 1e-6, "{} {}", e2 - e, n2 - n);
        }
    }
}
