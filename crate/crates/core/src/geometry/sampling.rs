use super::{dist2, PointCloud};
use crate::error::{Error, Result};

/// Greedy maximin (farthest-point) subsampling.
///
/// Starts at `seed_index`; each following pick maximizes the distance to
/// the already-selected set, ties going to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("sample size {m} must lie in 1..={n}")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!("seed index {seed_index} out of range ({n})")));
    }
    let pts = cloud.points();
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut current = seed_index;
    for _ in 0..m {
        out.push(current);
        chosen[current] = true;
        let c = pts[current];
        let mut best = None::<(f64, usize)>;
        for j in 0..n {
            if chosen[j] {
                continue;
            }
            let d = dist2(&pts[j], &c);
            if d < min_d2[j] {
                min_d2[j] = d;
            }
            if best.map_or(true, |(bd, _)| min_d2[j] > bd) {
                best = Some((min_d2[j], j));
            }
        }
        match best {
            Some((_, j)) => current = j,
            None => break,
        }
    }
    Ok(out)
}
