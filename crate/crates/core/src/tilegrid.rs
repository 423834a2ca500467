//! Web-mercator tile arithmetic.
//!
//! Tiles follow the slippy-map convention: `x` grows eastward from the
//! antimeridian, `y` grows southward from the northern clamp latitude, and a
//! zoom level `z` splits the world into `2^z × 2^z` tiles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equatorial circumference of the WGS84 ellipsoid, in metres.
pub const EQUATORIAL_CIRCUMFERENCE_M: f64 = 40_075_016.686;

/// Web-mercator latitude limit, in degrees.
pub const MAX_LATITUDE: f64 = 85.051_128_78;

pub const MAX_ZOOM: u8 = 23;

/// Zoom level of the archival imagery.
pub const IMAGERY_ZOOM: u8 = 21;

pub const DEFAULT_TILE_PX: u32 = 256;

/// Nominal ground resolution of the imagery at [`IMAGERY_ZOOM`], metres per pixel.
pub const NOMINAL_METERS_PER_PIXEL: f64 = 0.074;

/// Per-city tile counts and covered areas (km²) of a reference archival
/// imagery collection, with the grand total as the last row.
pub const IMAGERY_TABLE: [(&str, u64, f64); 16] = [
    ("Melbourne", 9_018_518, 3249.0),
    ("Sydney", 6_700_303, 2414.0),
    ("Perth", 13_205_906, 4758.0),
    ("Canberra", 4_856_845, 1750.0),
    ("Adelaide", 1_286_671, 464.0),
    ("Brisbane", 12_884_242, 4642.0),
    ("Geelong", 4_601_846, 1658.0),
    ("Bendigo", 2_112_860, 761.0),
    ("Darwin", 392_492, 141.0),
    ("Ballarat", 3_017_364, 1087.0),
    ("Hobart", 1_043_840, 376.0),
    ("Townsville", 948_061, 342.0),
    ("Cairns", 822_028, 296.0),
    ("Wollongong", 781_521, 282.0),
    ("Toowoomba", 876_648, 316.0),
    ("Total", 62_549_145, 22_536.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    /// Degrees, -90 to +90.
    pub lat: f64,
    /// Degrees, -180 (inclusive) to +180 (exclusive).
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::range(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..180.0).contains(&lon) {
            return Err(Error::range(format!("longitude {lon} outside [-180, 180)")));
        }
        Ok(Self { lat, lon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileKey {
    pub x: u32,
    pub y: u32,
    pub zoom: u8,
}

impl TileKey {
    pub fn new(x: u32, y: u32, zoom: u8) -> Result<Self> {
        check_zoom(zoom)?;
        let n = 1u64 << zoom;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(Error::range(format!(
                "tile ({x}, {y}) outside the {n}x{n} grid at zoom {zoom}"
            )));
        }
        Ok(Self { x, y, zoom })
    }

    /// Geographic centre of the tile (mercator midpoint, not the
    /// latitude mean of its corners).
    pub fn centroid(&self) -> GeoPoint {
        let n = (1u64 << self.zoom) as f64;
        let lon = (f64::from(self.x) + 0.5) / n * 360.0 - 180.0;
        GeoPoint {
            lat: mercator_y_to_lat((f64::from(self.y) + 0.5) / n),
            lon,
        }
    }
}

fn check_zoom(zoom: u8) -> Result<()> {
    if zoom > MAX_ZOOM {
        return Err(Error::range(format!("zoom {zoom} outside [0, {MAX_ZOOM}]")));
    }
    Ok(())
}

/// Equatorial edge length of one tile at `zoom`.
pub fn tile_edge_meters(zoom: u8) -> Result<f64> {
    check_zoom(zoom)?;
    Ok(EQUATORIAL_CIRCUMFERENCE_M / (1u64 << zoom) as f64)
}

pub fn meters_per_pixel(zoom: u8, tile_px: u32) -> Result<f64> {
    if tile_px == 0 {
        return Err(Error::range("tile size must be at least one pixel"));
    }
    Ok(tile_edge_meters(zoom)? / f64::from(tile_px))
}

/// Slippy-map tile containing `p`. Latitudes beyond the mercator limit are
/// clamped, and the eastern/southern edges fold into the last row/column.
pub fn latlon_to_tile(p: GeoPoint, zoom: u8) -> Result<TileKey> {
    check_zoom(zoom)?;
    let n = (1u64 << zoom) as f64;
    let max_index = (1u64 << zoom) - 1;

    let lat = p.lat.clamp(-MAX_LATITUDE, MAX_LATITUDE).to_radians();
    let fx = (p.lon + 180.0) / 360.0;
    let fy = (1.0 - (lat.tan() + 1.0 / lat.cos()).ln() / PI) / 2.0;

    let to_index = |f: f64| ((f * n).floor().max(0.0) as u64).min(max_index) as u32;
    Ok(TileKey {
        x: to_index(fx),
        y: to_index(fy),
        zoom,
    })
}

/// North-west corner of the tile.
///
/// Row `y = 0` maps to [`MAX_LATITUDE`] up to floating rounding. At zoom 1
/// the south-east tile's corner sits on the equator; `sinh(0)` is exactly
/// zero so no epsilon handling is needed there.
pub fn tile_to_latlon(t: TileKey) -> GeoPoint {
    let n = (1u64 << t.zoom) as f64;
    GeoPoint {
        lat: mercator_y_to_lat(f64::from(t.y) / n),
        lon: f64::from(t.x) / n * 360.0 - 180.0,
    }
}

fn mercator_y_to_lat(fy: f64) -> f64 {
    (PI * (1.0 - 2.0 * fy)).sinh().atan().to_degrees()
}

/// Area covered by `tile_count` tiles, in km².
///
/// Uses the nominal imagery resolution ([`NOMINAL_METERS_PER_PIXEL`] at
/// zoom 21, halving per zoom step) with 256 px tiles. The area is not
/// latitude-corrected, which is how the reference areas in
/// [`IMAGERY_TABLE`] were computed (about 358.9 m² per tile in every city).
pub fn coverage_area_km2(tile_count: u64, zoom: u8) -> Result<f64> {
    check_zoom(zoom)?;
    let scale = 2f64.powi(i32::from(IMAGERY_ZOOM) - i32::from(zoom));
    let edge = f64::from(DEFAULT_TILE_PX) * NOMINAL_METERS_PER_PIXEL * scale;
    Ok(tile_count as f64 * edge * edge / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_at_zoom_0_is_circumference() {
        assert_eq!(tile_edge_meters(0).unwrap(), EQUATORIAL_CIRCUMFERENCE_M);
    }

    #[test]
    fn edge_at_zoom_21() {
        // 40_075_016.686 / 2_097_152 = 19.109257...
        let e = tile_edge_meters(21).unwrap();
        assert!((e - 19.109_257).abs() < 1e-5, "{e}");
        let nominal = 256.0 * 0.074;
        assert!((e - nominal).abs() / nominal < 0.01);
    }

    #[test]
    fn zoom_out_of_range() {
        assert!(matches!(tile_edge_meters(24), Err(Error::Range(_))));
        assert!(latlon_to_tile(GeoPoint { lat: 0.0, lon: 0.0 }, 30).is_err());
        assert!(TileKey::new(0, 0, 24).is_err());
    }

    #[test]
    fn edge_halves_per_zoom() {
        for z in 0..MAX_ZOOM {
            assert_eq!(tile_edge_meters(z).unwrap(), 2.0 * tile_edge_meters(z + 1).unwrap());
        }
    }

    #[test]
    fn pixel_resolution() {
        let m = meters_per_pixel(21, 256).unwrap();
        assert!((m - 0.074_645).abs() < 1e-5);
        assert!((m - 0.074).abs() / 0.074 < 0.01);
        assert_eq!(meters_per_pixel(0, 1).unwrap(), EQUATORIAL_CIRCUMFERENCE_M);
        assert_eq!(meters_per_pixel(22, 256).unwrap() * 2.0, m);
        assert!(matches!(meters_per_pixel(21, 0), Err(Error::Range(_))));
    }

    #[test]
    fn origin_maps_to_grid_centre() {
        let t = latlon_to_tile(GeoPoint::new(0.0, 0.0).unwrap(), 4).unwrap();
        assert_eq!(t, TileKey { x: 8, y: 8, zoom: 4 });
    }

    #[test]
    fn polar_latitudes_are_clamped() {
        for z in [0u8, 1, 10, 21, 23] {
            let n = 1u32 << z;
            let north = latlon_to_tile(GeoPoint::new(85.06, 12.0).unwrap(), z).unwrap();
            assert_eq!(north.y, 0);
            let south = latlon_to_tile(GeoPoint::new(-89.9, 12.0).unwrap(), z).unwrap();
            assert_eq!(south.y, n - 1);
            let east = latlon_to_tile(GeoPoint { lat: 0.0, lon: 180.0 }, z).unwrap();
            assert_eq!(east.x, n - 1);
        }
    }

    #[test]
    fn north_west_corners() {
        let p = tile_to_latlon(TileKey::new(0, 0, 0).unwrap());
        assert!((p.lat - MAX_LATITUDE).abs() < 1e-8);
        assert_eq!(p.lon, -180.0);

        let p = tile_to_latlon(TileKey::new(1, 1, 1).unwrap());
        assert_eq!(p.lat, 0.0);
        assert_eq!(p.lon, 0.0);
    }

    #[test]
    fn geopoint_validation() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 180.0).is_err());
        assert!(GeoPoint::new(-90.0, -180.0).is_ok());
    }

    #[test]
    fn coverage_of_reference_rows() {
        assert_eq!(coverage_area_km2(0, 21).unwrap(), 0.0);
        let darwin = coverage_area_km2(392_492, 21).unwrap();
        assert!((darwin - 140.85).abs() < 0.01, "{darwin}");
        let total = coverage_area_km2(62_549_145, 21).unwrap();
        assert!((total - 22_447.3).abs() < 0.1, "{total}");
        for (city, images, area) in IMAGERY_TABLE {
            let got = coverage_area_km2(images, 21).unwrap();
            assert!((got - area).abs() / area < 0.01, "{city}: {got} vs {area}");
        }
    }

    #[test]
    fn centroid_lies_inside_tile() {
        let t = TileKey::new(1_852_110, 1_289_000, 21).unwrap();
        let c = t.centroid();
        assert_eq!(latlon_to_tile(c, 21).unwrap(), t);
    }
}
