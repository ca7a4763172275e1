//! Iso-contour extraction (marching squares) used to turn per-instance mask
//! probability grids back into polygons.

/// Extract the largest closed iso-contour of `grid` (row-major `h x w`, values
/// sampled at cell centers) at the given level. The grid is padded with a
/// below-level border so blobs touching the edge still close. Returned
/// vertices are in grid pixel coordinates where cell `(gy, gx)` has its
/// center at `(gx + 0.5, gy + 0.5)`.
pub fn largest_iso_contour(grid: &[f64], w: usize, h: usize, level: f64) -> Vec<[f64; 2]> {
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let pw = w + 2;
    let ph = h + 2;
    // Padded node value: mirror the strongest inside value across the level
    // so a saturated blob's border crossing lands at the midpoint between
    // the outermost sample and the pad ring (unbiased for binarized grids).
    let vmax = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = level - (vmax - level).max(1e-9);
    let val = |px: usize, py: usize| -> f64 {
        if px == 0 || py == 0 || px > w || py > h {
            pad
        } else {
            grid[(py - 1) * w + (px - 1)]
        }
    };
    // Node (px, py) lives at grid coordinate (px - 0.5, py - 0.5).
    let pos = |px: usize, py: usize| -> [f64; 2] { [px as f64 - 0.5, py as f64 - 0.5] };
    let lerp = |a: [f64; 2], va: f64, b: [f64; 2], vb: f64| -> [f64; 2] {
        let t = (level - va) / (vb - va);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };

    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for py in 0..ph - 1 {
        for px in 0..pw - 1 {
            let v00 = val(px, py);
            let v10 = val(px + 1, py);
            let v11 = val(px + 1, py + 1);
            let v01 = val(px, py + 1);
            let idx = ((v00 >= level) as u8)
                | (((v10 >= level) as u8) << 1)
                | (((v11 >= level) as u8) << 2)
                | (((v01 >= level) as u8) << 3);
            if idx == 0 || idx == 15 {
                continue;
            }
            let p00 = pos(px, py);
            let p10 = pos(px + 1, py);
            let p11 = pos(px + 1, py + 1);
            let p01 = pos(px, py + 1);
            let top = || lerp(p00, v00, p10, v10);
            let right = || lerp(p10, v10, p11, v11);
            let bottom = || lerp(p01, v01, p11, v11);
            let left = || lerp(p00, v00, p01, v01);
            match idx {
                1 => segments.push((left(), top())),
                2 => segments.push((top(), right())),
                3 => segments.push((left(), right())),
                4 => segments.push((right(), bottom())),
                5 => {
                    // Saddle: resolve by the cell-center average.
                    let center = (v00 + v10 + v11 + v01) / 4.0;
                    if center >= level {
                        segments.push((left(), bottom()));
                        segments.push((top(), right()));
                    } else {
                        segments.push((left(), top()));
                        segments.push((right(), bottom()));
                    }
                }
                6 => segments.push((top(), bottom())),
                7 => segments.push((left(), bottom())),
                8 => segments.push((bottom(), left())),
                9 => segments.push((bottom(), top())),
                10 => {
                    let center = (v00 + v10 + v11 + v01) / 4.0;
                    if center >= level {
                        segments.push((top(), left()));
                        segments.push((bottom(), right()));
                    } else {
                        segments.push((top(), right()));
                        segments.push((bottom(), left()));
                    }
                }
                11 => segments.push((bottom(), right())),
                12 => segments.push((right(), left())),
                13 => segments.push((right(), top())),
                14 => segments.push((top(), left())),
                _ => unreachable!(),
            }
        }
    }
    stitch_longest_loop(&segments)
}

fn quantize(p: [f64; 2]) -> (i64, i64) {
    // 2^16 sub-pixel resolution is far below any geometric tolerance here.
    ((p[0] * 65536.0).round() as i64, (p[1] * 65536.0).round() as i64)
}

/// Stitch undirected segments into closed loops and return the loop with the
/// largest enclosed area.
fn stitch_longest_loop(segments: &[([f64; 2], [f64; 2])]) -> Vec<[f64; 2]> {
    use std::collections::BTreeMap;
    let mut adj: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        adj.entry(quantize(*a)).or_default().push(i);
        adj.entry(quantize(*b)).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut best: Vec<[f64; 2]> = Vec::new();
    let mut best_area = -1.0_f64;
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut path = vec![a, b];
        let target = quantize(a);
        let mut cursor = quantize(b);
        while cursor != target {
            let Some(cands) = adj.get(&cursor) else { break };
            let Some(&next) = cands.iter().find(|&&i| !used[i]) else {
                break;
            };
            used[next] = true;
            let (na, nb) = segments[next];
            let follow = if quantize(na) == cursor { nb } else { na };
            cursor = quantize(follow);
            if cursor != target {
                path.push(follow);
            }
        }
        if cursor == target && path.len() >= 3 {
            let area = crate::annot::polygon_area(&path);
            if area > best_area {
                best_area = area;
                best = path;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::{polygon_area, rasterize_polygon};

    #[test]
    fn disc_contour_has_expected_area_and_closure() {
        let (w, h) = (32, 32);
        let (cx, cy, r) = (16.0, 16.0, 10.0);
        let mut grid = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5) - cx;
                let dy = (y as f64 + 0.5) - cy;
                // Smooth radial field crossing 0.5 exactly at radius r.
                grid[y * w + x] = 1.0 / (1.0 + ((dx * dx + dy * dy).sqrt() - r).exp());
            }
        }
        let contour = largest_iso_contour(&grid, w, h, 0.5);
        assert!(contour.len() > 10);
        let area = polygon_area(&contour);
        let expect = std::f64::consts::PI * r * r;
        assert!(
            (area - expect).abs() / expect < 0.05,
            "area {area} vs {expect}"
        );
    }

    #[test]
    fn binary_blob_round_trips_through_contour() {
        // Rasterize a polygon, contour the raster, re-rasterize, compare.
        let (w, h) = (24, 24);
        let poly = vec![[4.0, 3.0], [20.0, 5.0], [21.0, 19.0], [10.0, 21.0], [3.0, 14.0]];
        let raster = rasterize_polygon(&poly, w, h);
        let contour = largest_iso_contour(&raster, w, h, 0.5);
        assert!(contour.len() >= 3);
        let back = rasterize_polygon(&contour, w, h);
        let mut inter = 0;
        let mut uni = 0;
        for (a, b) in raster.iter().zip(&back) {
            let (pa, pb) = (*a > 0.5, *b > 0.5);
            if pa && pb {
                inter += 1;
            }
            if pa || pb {
                uni += 1;
            }
        }
        let iou = inter as f64 / uni as f64;
        assert!(iou > 0.9, "IoU {iou}");
    }

    #[test]
    fn empty_grid_gives_empty_contour() {
        let grid = vec![0.0; 16];
        assert!(largest_iso_contour(&grid, 4, 4, 0.5).is_empty());
    }

    #[test]
    fn edge_touching_blob_still_closes() {
        // Top-left quadrant fully on: padding must close the contour.
        let (w, h) = (8, 8);
        let mut grid = vec![0.0; w * h];
        for y in 0..4 {
            for x in 0..4 {
                grid[y * w + x] = 1.0;
            }
        }
        let contour = largest_iso_contour(&grid, w, h, 0.5);
        assert!(contour.len() >= 4);
        let area = polygon_area(&contour);
        assert!(area > 9.0 && area < 25.0, "area {area}");
    }
}
