//! Average minimum pixel distance between projected reconstructions and
//! silhouettes, and overlay rendering.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coord_align::{Vec2, DEPTH_EPSILON};
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::se3::{DenseCloud, Intrinsics, Transform3};

pub const ACCENT: [u8; 3] = [255, 64, 0];
const WHITE: [u8; 3] = [255, 255, 255];

fn check_set(points: &[Vec2], name: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidInput(format!("pixel set {name} is empty")));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "pixel set {name} has non-finite entries"
        )));
    }
    Ok(())
}

/// `(1/|A|) Σ_a min_b ‖a − b‖` by exhaustive search.
pub fn avg_min_distance_brute(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    check_set(a, "A")?;
    check_set(b, "B")?;
    let mins: Vec<f64> = a
        .par_iter()
        .map(|p| {
            b.iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(mins.iter().sum::<f64>() / a.len() as f64)
}

/// Uniform bucket grid over a point set for nearest-neighbour queries.
struct Grid<'a> {
    points: &'a [Vec2],
    origin: Vec2,
    cell: f64,
    nx: i64,
    ny: i64,
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec2]) -> Self {
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let area = (extent.x.max(1.0)) * (extent.y.max(1.0));
        let cell = (2.0 * area / points.len() as f64).sqrt().max(1e-6);
        let nx = ((extent.x / cell).floor() as i64 + 1).clamp(1, 4096);
        let ny = ((extent.y / cell).floor() as i64 + 1).clamp(1, 4096);
        let cell = cell.max(extent.x / nx as f64).max(extent.y / ny as f64) * (1.0 + 1e-12);
        let mut grid = Grid {
            points,
            origin: lo,
            cell,
            nx,
            ny,
            starts: vec![],
            order: vec![],
        };
        let ids: Vec<usize> = points
            .iter()
            .map(|p| grid.cell_id(grid.cell_of(p)))
            .collect();
        let mut counts = vec![0usize; (nx * ny) as usize + 1];
        for &id in &ids {
            counts[id + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &id) in ids.iter().enumerate() {
            order[fill[id]] = i;
            fill[id] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Vec2) -> (i64, i64) {
        let r = (p - self.origin) / self.cell;
        (r.x.floor() as i64, r.y.floor() as i64)
    }

    fn cell_id(&self, (x, y): (i64, i64)) -> usize {
        (y.clamp(0, self.ny - 1) * self.nx + x.clamp(0, self.nx - 1)) as usize
    }

    fn scan(&self, x: i64, y: i64, p: &Vec2, best: &mut f64) {
        let id = (y * self.nx + x) as usize;
        for &i in &self.order[self.starts[id]..self.starts[id + 1]] {
            let d = (self.points[i] - p).norm_squared();
            if d < *best {
                *best = d;
            }
        }
    }

    fn nearest(&self, p: &Vec2) -> f64 {
        let (cx, cy) = self.cell_of(p);
        // Rings closer than the grid rectangle hold no cells.
        let gap_x = (-cx).max(cx - (self.nx - 1)).max(0);
        let gap_y = (-cy).max(cy - (self.ny - 1)).max(0);
        let mut r = gap_x.max(gap_y);
        let mut best = f64::INFINITY;
        loop {
            let (x0, x1) = ((cx - r).max(0), (cx + r).min(self.nx - 1));
            let (y0, y1) = ((cy - r).max(0), (cy + r).min(self.ny - 1));
            for y in [cy - r, cy + r] {
                if (0..self.ny).contains(&y) {
                    for x in x0..=x1 {
                        self.scan(x, y, p, &mut best);
                    }
                    if r == 0 {
                        break;
                    }
                }
            }
            for x in [cx - r, cx + r] {
                if (0..self.nx).contains(&x) && r > 0 {
                    for y in (y0.max(cy - r + 1))..=(y1.min(cy + r - 1)) {
                        self.scan(x, y, p, &mut best);
                    }
                }
            }
            // Everything beyond ring r is at least r cells away.
            let bound = r as f64 * self.cell;
            if best.is_finite() && best <= bound * bound {
                return best.sqrt();
            }
            if x0 == 0 && y0 == 0 && x1 == self.nx - 1 && y1 == self.ny - 1 && best.is_finite() {
                return best.sqrt();
            }
            r += 1;
        }
    }
}

/// `(1/|A|) Σ_a min_b ‖a − b‖`, grid-accelerated.
pub fn avg_min_distance(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    check_set(a, "A")?;
    check_set(b, "B")?;
    let grid = Grid::new(b);
    let mins: Vec<f64> = a.par_iter().map(|p| grid.nearest(p)).collect();
    Ok(mins.iter().sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    #[serde(rename = "D_AB")]
    pub d_ab: f64,
    #[serde(rename = "D_BA")]
    pub d_ba: f64,
    #[serde(rename = "D_hat")]
    pub d_hat: f64,
}

/// Both directed distances and their mean.
pub fn compare(a: &[Vec2], b: &[Vec2]) -> Result<MetricReport> {
    let d_ab = avg_min_distance(a, b)?;
    let d_ba = avg_min_distance(b, a)?;
    Ok(MetricReport {
        d_ab,
        d_ba,
        d_hat: 0.5 * (d_ab + d_ba),
    })
}

/// `0.5 (D(A,B) + D(B,A))`.
pub fn symmetrized(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    Ok(compare(a, b)?.d_hat)
}

/// `(column, row)` coordinates of the set pixels.
pub fn silhouette_pixels(mask: &Mask) -> Result<Vec<Vec2>> {
    let mut out = Vec::with_capacity(mask.count());
    for h in 0..mask.height {
        for w in 0..mask.width {
            if mask.get(w, h) {
                out.push(Vec2::new(w as f64, h as f64));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("silhouette mask is empty".into()));
    }
    Ok(out)
}

/// Projects `cloud` moved by `pose`; points at or behind the image plane are
/// dropped. `subsample` keeps every k-th point.
pub fn project_visible(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    subsample: usize,
) -> Vec<Vec2> {
    cloud
        .points
        .iter()
        .step_by(subsample.max(1))
        .filter_map(|x| {
            let p = pose.apply(x);
            (p.z > DEPTH_EPSILON)
                .then(|| Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
        })
        .collect()
}

/// Symmetrized distance between the projected cloud and a silhouette.
pub fn evaluate_pose(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    mask: &Mask,
    subsample: usize,
) -> Result<MetricReport> {
    let projected = project_visible(cloud, pose, k, subsample);
    if projected.is_empty() {
        return Err(Error::Visibility(
            "no point of the cloud lies in front of the camera".into(),
        ));
    }
    compare(&projected, &silhouette_pixels(mask)?)
}

/// Mask in white, projected cloud pixels in the accent colour.
pub fn overlay_image(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    mask: &Mask,
) -> RgbImage {
    let mut img = RgbImage::new(mask.width, mask.height);
    for h in 0..mask.height {
        for w in 0..mask.width {
            if mask.get(w, h) {
                img.put(w, h, WHITE);
            }
        }
    }
    for p in project_visible(cloud, pose, k, 1) {
        let (u, v) = (p.x.round(), p.y.round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < mask.width && (v as usize) < mask.height {
            img.put(u as usize, v as usize, ACCENT);
        }
    }
    img
}

pub fn render_overlay(
    cloud: &DenseCloud,
    pose: &Transform3,
    k: &Intrinsics,
    mask: &Mask,
    out_path: &Path,
) -> Result<()> {
    let img = overlay_image(cloud, pose, k, mask);
    std::fs::write(out_path, img.to_ppm()).map_err(|e| Error::io(out_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Vec3;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    #[test]
    fn distance_cases() {
        let a = vec![v(1.0, 2.0), v(-3.0, 0.5)];
        assert_eq!(avg_min_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            avg_min_distance(&[v(0.0, 0.0)], &[v(3.0, 4.0)]).unwrap(),
            5.0
        );
        let wit_a = [v(0.0, 0.0), v(10.0, 0.0)];
        let wit_b = [v(0.0, 0.0)];
        assert_eq!(avg_min_distance(&wit_a, &wit_b).unwrap(), 5.0);
        assert_eq!(avg_min_distance(&wit_b, &wit_a).unwrap(), 0.0);
        assert_eq!(symmetrized(&wit_a, &wit_b).unwrap(), 2.5);
        assert_eq!(symmetrized(&a, &a).unwrap(), 0.0);
        assert!(avg_min_distance(&[], &a).is_err());
        assert!(symmetrized(&a, &[]).is_err());
    }

    #[test]
    fn silhouette_cases() {
        let mut m = Mask::filled(5, 4, false);
        m.set(3, 2, true);
        assert_eq!(silhouette_pixels(&m).unwrap(), vec![v(3.0, 2.0)]);
        assert_eq!(
            silhouette_pixels(&Mask::filled(2, 2, true)).unwrap().len(),
            4
        );

        let mut checker = Mask::filled(4, 4, false);
        let mut expected = vec![];
        for r in 0..4 {
            for c in 0..4 {
                if (r + c) % 2 == 0 {
                    checker.set(c, r, true);
                    expected.push(v(c as f64, r as f64));
                }
            }
        }
        assert_eq!(silhouette_pixels(&checker).unwrap(), expected);
        assert!(silhouette_pixels(&Mask::filled(3, 3, false)).is_err());
    }

    #[test]
    fn back_projected_mask_gives_zero_distance() {
        let k = Intrinsics::new(50.0, 40.0, 8.0, 6.0).unwrap();
        let mut mask = Mask::filled(16, 12, false);
        for (c, r) in [(2, 3), (5, 5), (6, 5), (15, 11), (0, 0)] {
            mask.set(c, r, true);
        }
        let pts: Vec<Vec3> = silhouette_pixels(&mask)
            .unwrap()
            .iter()
            .map(|p| Vec3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0))
            .collect();
        let cloud = DenseCloud::new(pts).unwrap();
        let report = evaluate_pose(&cloud, &Transform3::identity(), &k, &mask, 1).unwrap();
        assert!(report.d_hat < 1e-12);
        let img = overlay_image(&cloud, &Transform3::identity(), &k, &mask);
        for h in 0..12 {
            for w in 0..16 {
                let expected = if mask.get(w, h) { ACCENT } else { [0, 0, 0] };
                assert_eq!(img.get(w, h), expected);
            }
        }
    }

    #[test]
    fn overlay_without_visible_points_is_mask() {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0).unwrap();
        let mut mask = Mask::filled(4, 4, false);
        mask.set(1, 2, true);
        let behind =
            DenseCloud::new(vec![Vec3::new(0.0, 0.0, -1.0), Vec3::new(100.0, 0.0, 1.0)]).unwrap();
        let a = overlay_image(&behind, &Transform3::identity(), &k, &mask);
        assert_eq!(a.get(1, 2), WHITE);
        assert_eq!(a.data.iter().filter(|p| **p != [0, 0, 0]).count(), 1);
        let b = overlay_image(&behind, &Transform3::identity(), &k, &mask);
        assert_eq!(a.to_ppm(), b.to_ppm());
    }
}
