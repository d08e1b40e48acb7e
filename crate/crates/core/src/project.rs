//! Rank-2 SVD projection of embedding rows.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Projection {
    /// `(x, y)` per input row.
    pub coords: Vec<[f64; 2]>,
    /// Top two right singular vectors of the centered matrix.
    pub axes: [Vec<f64>; 2],
    /// True when the centered matrix has rank below 2; missing axes are zero.
    pub degenerate: bool,
}

/// Centers columns, then projects each row onto the two leading right
/// singular vectors. Each axis is signed so its largest-magnitude component
/// is positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::DegenerateInput { rows: n, dims: d });
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let tol = scale * (n.max(d) as f64) * f64::EPSILON * 16.0;
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut rank = 0;
    for (slot, &k) in idx.iter().take(2).enumerate() {
        if svd.singular_values[k] <= tol {
            break;
        }
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = v.iter().fold(0.0f64, |a, &x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes[slot] = v;
        rank += 1;
    }
    if rank < 2 {
        log::warn!("embedding matrix has rank {rank} after centering; missing axes project to 0");
    }
    let coords = m
        .row_iter()
        .map(|r| {
            let p = |a: &[f64]| r.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok(Projection {
        coords,
        axes,
        degenerate: rank < 2,
    })
}
