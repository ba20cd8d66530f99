//! Brute-force references for the click geometry.

use clickprobe::clicks::BinaryMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Label propagation to a fixpoint: each pixel takes the minimum raster index
/// among its 8-neighbours until nothing changes.
pub fn components_by_propagation(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = m.dims();
    let mut lab: Vec<Option<usize>> = (0..h * w).map(|i| m.data()[i].then_some(i)).collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                let Some(mut best) = lab[r * w + c] else { continue };
                for y in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for x in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        if let Some(l) = lab[y * w + x] {
                            best = best.min(l);
                        }
                    }
                }
                if Some(best) != lab[r * w + c] {
                    lab[r * w + c] = Some(best);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = lab.iter().flatten().copied().collect();
    roots.sort_unstable();
    roots.dedup();
    roots
        .iter()
        .map(|&root| (0..h * w).filter(|&i| lab[i] == Some(root)).map(|i| (i / w, i % w)).collect())
        .collect()
}

/// Squared distance from `(r, c)` to the closest pixel outside `region`,
/// scanning every cell of the grid padded by one ring.
pub fn padded_distance_sq(region: &[(usize, usize)], h: usize, w: usize, r: usize, c: usize) -> i64 {
    let mut best = i64::MAX;
    for y in -1..=h as i64 {
        for x in -1..=w as i64 {
            let inside = y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && region.contains(&(y as usize, x as usize));
            if !inside {
                best = best.min((y - r as i64).pow(2) + (x - c as i64).pow(2));
            }
        }
    }
    best
}

/// Expected `(row, col, positive)` of the evaluation click.
pub fn oracle_click(pred: &BinaryMask, gt: &BinaryMask) -> Option<(usize, usize, bool)> {
    let (h, w) = gt.dims();
    let fn_mask = BinaryMask::from_fn(h, w, |r, c| gt.get(r, c) && !pred.get(r, c));
    let fp_mask = BinaryMask::from_fn(h, w, |r, c| pred.get(r, c) && !gt.get(r, c));
    let mut regions: Vec<(Vec<(usize, usize)>, bool)> = Vec::new();
    for comp in components_by_propagation(&fn_mask) {
        regions.push((comp, true));
    }
    for comp in components_by_propagation(&fp_mask) {
        regions.push((comp, false));
    }
    let key = |reg: &Vec<(usize, usize)>| (std::cmp::Reverse(reg.len()), *reg.iter().min().unwrap());
    let (region, positive) = regions.into_iter().min_by_key(|(reg, _)| key(reg))?;
    let mut cells = region.clone();
    cells.sort_unstable();
    let mut best: Option<(i64, (usize, usize))> = None;
    for &(r, c) in &cells {
        let d = padded_distance_sq(&region, h, w, r, c);
        if best.is_none_or(|(bd, _)| d > bd) {
            best = Some((d, (r, c)));
        }
    }
    let (_, (r, c)) = best?;
    Some((r, c, positive))
}

pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    match rng.random_range(0..3) {
        0 => {
            let p = rng.random_range(0.05..0.9);
            BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
        }
        _ => random_blob(h, w, rng),
    }
}

/// Union of a few random rectangles and disks.
pub fn random_blob(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..rng.random_range(1..4) {
        let (cy, cx) = (rng.random_range(0..h) as i64, rng.random_range(0..w) as i64);
        let (ry, rx) = (rng.random_range(0..=h as i64 / 2), rng.random_range(0..=w as i64 / 2));
        let disk = rng.random_bool(0.5);
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let inside = if disk {
                    let rr = ry.max(rx).max(1) as f64;
                    (((r - cy).pow(2) + (c - cx).pow(2)) as f64) <= rr * rr
                } else {
                    (r - cy).abs() <= ry && (c - cx).abs() <= rx
                };
                if inside {
                    m.set(r as usize, c as usize, true);
                }
            }
        }
    }
    m
}

/// Cross erosion by offsets; a pixel survives when it and its four
/// neighbours are set, with everything outside the image unset.
pub fn cross_erode(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.dims();
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m.get(r as usize, c as usize);
    BinaryMask::from_fn(h, w, |r, c| {
        let (r, c) = (r as i64, c as i64);
        [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)].iter().all(|&(dr, dc)| at(r + dr, c + dc))
    })
}

/// First erosion with area at most a quarter of the start, else the last nonempty one.
pub fn oracle_quarter(m: &BinaryMask) -> BinaryMask {
    let target = m.area().div_ceil(4);
    let mut seq = vec![m.clone()];
    while !seq.last().unwrap().is_empty() {
        let next = cross_erode(seq.last().unwrap());
        seq.push(next);
    }
    seq.iter()
        .find(|e| e.area() <= target && !e.is_empty())
        .or_else(|| seq.iter().rev().find(|e| !e.is_empty()))
        .unwrap_or(&seq[0])
        .clone()
}
